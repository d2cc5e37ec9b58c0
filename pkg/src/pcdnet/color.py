"""Color module: estimate per-candidate channel scales from masked input.

A small CNN (two 3x3 conv + ReLU + batch-norm blocks, global average
pooling, one fully-connected head) maps the mask-gated input image to one
multiplicative scale per channel. The scales recolor a shifted grayscale
template via a channel-wise transform. Forward and reverse passes are
implemented by hand so the whole pipeline can be differentiated without
an autograd framework.

During training the candidates of one image are processed as a single
batch, batch statistics are used for normalization, and running
statistics are updated with momentum 0.1. Inference uses running
statistics and is a pure function of (weights, input).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import InvalidArgumentError, NumericFailureError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
HIDDEN = 12


@dataclass
class ColorNetWeights:
    """Learnable tensors plus batch-norm running statistics.

    Conv kernels are laid out (kh, kw, in, out); the fully-connected
    head is (out_channels, HIDDEN).
    """

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    bn1_gamma: np.ndarray
    bn1_beta: np.ndarray
    bn1_mean: np.ndarray
    bn1_var: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    bn2_gamma: np.ndarray
    bn2_beta: np.ndarray
    bn2_mean: np.ndarray
    bn2_var: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray

    @property
    def channels(self) -> int:
        return self.conv1_w.shape[2]

    def cast(self, dtype) -> "ColorNetWeights":
        return ColorNetWeights(
            **{f.name: getattr(self, f.name).astype(dtype) for f in fields(self)}
        )

    def copy(self) -> "ColorNetWeights":
        return ColorNetWeights(
            **{f.name: getattr(self, f.name).copy() for f in fields(self)}
        )


LEARNABLE_TENSORS = (
    "conv1_w",
    "conv1_b",
    "bn1_gamma",
    "bn1_beta",
    "conv2_w",
    "conv2_b",
    "bn2_gamma",
    "bn2_beta",
    "fc_w",
    "fc_b",
)

# Serialization order for checkpoints: learnables plus running statistics.
ALL_TENSORS = tuple(f.name for f in fields(ColorNetWeights))


@dataclass(frozen=True)
class ColorParams:
    """Per-channel multiplicative color scales for one candidate."""

    scale: np.ndarray  # (C,)


@dataclass
class ColorNetGrads:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    bn1_gamma: np.ndarray
    bn1_beta: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    bn2_gamma: np.ndarray
    bn2_beta: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray


def param_count(weights: ColorNetWeights) -> int:
    """Number of learnable parameters (running stats excluded)."""
    return sum(getattr(weights, name).size for name in LEARNABLE_TENSORS)


def init_color_net(channels: int, rng: np.random.Generator) -> ColorNetWeights:
    """Kaiming-uniform (fan-in) weight init, seeded.

    Conv biases start at zero; the fc bias starts at one so the initial
    color transform is near identity (an all-negative scale would clamp
    the colorized template to black and cut the gradient path).
    """
    if channels not in (1, 3):
        raise InvalidArgumentError(f"channels must be 1 or 3, got {channels}")

    def kaiming(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    h = HIDDEN
    return ColorNetWeights(
        conv1_w=kaiming((3, 3, channels, h), 9 * channels),
        conv1_b=np.zeros(h, dtype=np.float32),
        bn1_gamma=np.ones(h, dtype=np.float32),
        bn1_beta=np.zeros(h, dtype=np.float32),
        bn1_mean=np.zeros(h, dtype=np.float32),
        bn1_var=np.ones(h, dtype=np.float32),
        conv2_w=kaiming((3, 3, h, h), 9 * h),
        conv2_b=np.zeros(h, dtype=np.float32),
        bn2_gamma=np.ones(h, dtype=np.float32),
        bn2_beta=np.zeros(h, dtype=np.float32),
        bn2_mean=np.zeros(h, dtype=np.float32),
        bn2_var=np.ones(h, dtype=np.float32),
        fc_w=kaiming((channels, h), h),
        fc_b=np.ones(channels, dtype=np.float32),
    )


def mask_input(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Gate an image by an alpha mask (per-channel elementwise product)."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image * mask
    return image * mask[:, :, None]


def apply_color(template: np.ndarray, params: ColorParams) -> np.ndarray:
    """Recolor a grayscale template: channel c = scale_c * template, clamped."""
    scale = np.asarray(params.scale)
    out = scale[None, None, :] * template[:, :, None]
    return np.clip(out, 0.0, 1.0)


def _im2col(x: np.ndarray) -> np.ndarray:
    """3x3 same-padding patches of (N, H, W, C) as (N*H*W, 9*C) rows."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    v = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # v: (N, H, W, C, 3, 3) -> (N*H*W, 3*3*C) with (kh, kw, c) row layout
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


def _conv_input_grad(dz: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient through a same-padded 3x3 conv w.r.t. its input.

    Equals convolving the output gradient with the spatially flipped,
    in/out-transposed kernel (cheaper than scatter-adding columns).
    """
    n, h, wd, _ = dz.shape
    cin = w.shape[2]
    wrot = w[::-1, ::-1].transpose(0, 1, 3, 2)  # (3, 3, Cout, Cin)
    cols = _im2col(dz)
    return (cols @ np.ascontiguousarray(wrot).reshape(-1, cin)).reshape(n, h, wd, cin)


def _bn_forward(x, gamma, beta, running_mean, running_var, training):
    n = x.shape[0] * x.shape[1] * x.shape[2]
    if training:
        mu = np.einsum("nhwc->c", x) / n
        var = np.einsum("nhwc,nhwc->c", x, x) / n - mu * mu
        np.maximum(var, 0.0, out=var)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    # fused scale/shift: y = x * (gamma*inv) + (beta - mu*gamma*inv)
    scale = gamma * inv
    xhat = (x - mu) * inv
    y = x * scale + (beta - mu * scale)
    return y, xhat, inv, (mu, var)


def _bn_backward(dy, xhat, inv, gamma, training):
    n = dy.shape[0] * dy.shape[1] * dy.shape[2]
    dgamma = np.einsum("nhwc,nhwc->c", dy, xhat)
    dbeta = np.einsum("nhwc->c", dy)
    if training:
        dx = (gamma * inv) * (dy - dbeta / n - xhat * (dgamma / n))
    else:
        dx = dy * (gamma * inv)
    return dx, dgamma, dbeta


def update_running_stats(weights: ColorNetWeights, stats1, stats2) -> None:
    """Fold one batch's statistics into the running estimates (momentum 0.1).

    Split out of `forward_batch` so parallel trainers can defer the update
    and replay it in image order.
    """
    m = BN_MOMENTUM
    weights.bn1_mean = ((1 - m) * weights.bn1_mean + m * stats1[0]).astype(
        weights.bn1_mean.dtype
    )
    weights.bn1_var = ((1 - m) * weights.bn1_var + m * stats1[1]).astype(
        weights.bn1_var.dtype
    )
    weights.bn2_mean = ((1 - m) * weights.bn2_mean + m * stats2[0]).astype(
        weights.bn2_mean.dtype
    )
    weights.bn2_var = ((1 - m) * weights.bn2_var + m * stats2[1]).astype(
        weights.bn2_var.dtype
    )


@dataclass
class ColorCache:
    """Activations saved by `forward_batch` for the reverse pass."""

    x_shape: tuple
    cols1: np.ndarray
    z1: np.ndarray
    xhat1: np.ndarray
    inv1: np.ndarray
    cols2: np.ndarray
    z2: np.ndarray
    xhat2: np.ndarray
    inv2: np.ndarray
    pool: np.ndarray
    training: bool
    batch_stats: tuple  # ((mu1, var1), (mu2, var2)) from training mode


def forward_batch(
    weights: ColorNetWeights,
    x: np.ndarray,
    training: bool,
    update_running: bool = False,
) -> tuple[np.ndarray, ColorCache]:
    """Run the color CNN on a batch of masked images.

    ``x`` is (N, H, W, C); returns per-sample channel scales (N, C) and
    the activation cache for `color_backward`. ``update_running`` folds
    this batch's statistics into the running estimates (training only).
    """
    n, h, w, c = x.shape
    if c != weights.channels:
        raise InvalidArgumentError(
            f"input has {c} channels, network expects {weights.channels}"
        )
    nhid = HIDDEN

    cols1 = _im2col(x)
    z1 = (cols1 @ weights.conv1_w.reshape(-1, nhid)).reshape(n, h, w, nhid)
    z1 += weights.conv1_b
    r1 = np.maximum(z1, 0.0)
    y1, xhat1, inv1, stats1 = _bn_forward(
        r1, weights.bn1_gamma, weights.bn1_beta, weights.bn1_mean, weights.bn1_var,
        training,
    )

    cols2 = _im2col(y1)
    z2 = (cols2 @ weights.conv2_w.reshape(-1, nhid)).reshape(n, h, w, nhid)
    z2 += weights.conv2_b
    r2 = np.maximum(z2, 0.0)
    y2, xhat2, inv2, stats2 = _bn_forward(
        r2, weights.bn2_gamma, weights.bn2_beta, weights.bn2_mean, weights.bn2_var,
        training,
    )

    pool = y2.mean(axis=(1, 2))
    scales = pool @ weights.fc_w.T + weights.fc_b
    if not np.isfinite(scales).all():
        raise NumericFailureError("color network produced non-finite activations")

    if training and update_running:
        update_running_stats(weights, stats1, stats2)

    cache = ColorCache(
        x_shape=(n, h, w, c),
        cols1=cols1,
        z1=z1,
        xhat1=xhat1,
        inv1=inv1,
        cols2=cols2,
        z2=z2,
        xhat2=xhat2,
        inv2=inv2,
        pool=pool,
        training=training,
        batch_stats=(stats1, stats2),
    )
    return scales, cache


def color_forward(
    weights: ColorNetWeights, masked: np.ndarray, training_mode: bool
) -> ColorParams:
    """Estimate color scales for a single masked image."""
    masked = np.asarray(masked)
    if masked.ndim == 2:
        masked = masked[:, :, None]
    scales, _ = forward_batch(
        weights, masked[None], training=training_mode, update_running=training_mode
    )
    return ColorParams(scale=scales[0])


def color_backward(
    weights: ColorNetWeights,
    cache: ColorCache | None,
    grad_scales: np.ndarray,
) -> tuple[ColorNetGrads, np.ndarray]:
    """Reverse pass: gradients of the scales w.r.t. weights and input.

    ``grad_scales`` is (N, C) upstream gradient; returns the weight
    gradients and the (N, H, W, C) gradient on the masked input batch.
    Requires the cache saved by `forward_batch`.
    """
    if cache is None:
        raise InvalidArgumentError("color_backward needs the forward activation cache")
    n, h, w, c = cache.x_shape
    nhid = HIDDEN
    grad_scales = np.asarray(grad_scales)
    if grad_scales.shape != (n, c):
        raise InvalidArgumentError(
            f"grad_scales shape {grad_scales.shape} != {(n, c)}"
        )

    dfc_w = grad_scales.T @ cache.pool
    dfc_b = grad_scales.sum(axis=0)
    dpool = grad_scales @ weights.fc_w

    dy2 = np.broadcast_to(dpool[:, None, None, :], (n, h, w, nhid)) / (h * w)
    dr2, dg2, db2 = _bn_backward(
        dy2, cache.xhat2, cache.inv2, weights.bn2_gamma, cache.training
    )
    dz2 = dr2 * (cache.z2 > 0)

    dz2_flat = dz2.reshape(-1, nhid)
    dconv2_w = (cache.cols2.T @ dz2_flat).reshape(3, 3, nhid, nhid)
    dconv2_b = dz2_flat.sum(axis=0)
    dy1 = _conv_input_grad(dz2, weights.conv2_w)

    dr1, dg1, db1 = _bn_backward(
        dy1, cache.xhat1, cache.inv1, weights.bn1_gamma, cache.training
    )
    dz1 = dr1 * (cache.z1 > 0)

    dz1_flat = dz1.reshape(-1, nhid)
    dconv1_w = (cache.cols1.T @ dz1_flat).reshape(3, 3, c, nhid)
    dconv1_b = dz1_flat.sum(axis=0)
    dx = _conv_input_grad(dz1, weights.conv1_w)

    grads = ColorNetGrads(
        conv1_w=dconv1_w,
        conv1_b=dconv1_b,
        bn1_gamma=dg1,
        bn1_beta=db1,
        conv2_w=dconv2_w,
        conv2_b=dconv2_b,
        bn2_gamma=dg2,
        bn2_beta=db2,
        fc_w=dfc_w,
        fc_b=dfc_b,
    )
    return grads, dx
