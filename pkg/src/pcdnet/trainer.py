"""End-to-end training: loss, hand-written reverse-mode gradients, Adam.

The forward pipeline per image is: localize every prototype (discrete,
gradient-free) -> shift templates and masks through the frequency domain
-> gate the image by each shifted mask and run the color net (one batch
of all candidates per image, batch statistics in training mode) ->
recolor templates -> greedy layer selection (discrete) -> layered
composite -> loss.

Gradients flow through the differentiable subgraph only: composite ->
colorized templates -> color scales / shifted grayscale templates ->
color-net weights and mask-gated inputs -> shifted masks -> prototype
pixels. The shift adjoint for integer displacements is the inverse
circular roll. Displacements and selection indices are constants.

The loss is

    total = mse + lambda_l1 * l1 + lambda_tv * tv

with mse the mean squared reconstruction error of the selected composite,
l1 the mean over prototypes of the appearance L1 norm, and tv the mean
anisotropic total variation of the alpha masks (forward differences, no
wraparound).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import color as color_mod
from .color import ColorCache, ColorNetGrads, color_backward, forward_batch
from .compositor import greedy_core
from .errors import InvalidArgumentError, NumericFailureError
from .fourier import pad_to_canvas
from .model import ModelState, Prototype, inject_noise, project, save_checkpoint
from .pc_cell import Candidate, Displacement


@dataclass
class TrainConfig:
    """Hyperparameters; defaults reproduce the Tetrominoes setup."""

    lr: float = 0.003
    scheduler_factor: float = 0.1
    scheduler_epochs: int = 5
    lambda_l1: float = 1e-3
    lambda_tv: float = 1e-3
    batch_size: int = 64
    epochs: int = 25
    noise_prob: float = 0.8
    noise_window_iters: int = 1000
    noise_low: float = -0.5
    noise_high: float = 0.5
    epsilon: float = 1e-10
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise InvalidArgumentError(f"lr must be positive, got {self.lr}")
        if not 0 < self.scheduler_factor <= 1:
            raise InvalidArgumentError(
                f"scheduler_factor must be in (0, 1], got {self.scheduler_factor}"
            )
        if self.lambda_l1 < 0 or self.lambda_tv < 0:
            raise InvalidArgumentError("regularizer weights must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgumentError("batch_size >= 1 and epochs >= 0 required")
        if not 0 <= self.noise_prob <= 1:
            raise InvalidArgumentError(f"noise_prob in [0,1] required, got {self.noise_prob}")
        if self.epsilon <= 0:
            raise InvalidArgumentError(f"epsilon must be positive, got {self.epsilon}")
        return self


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    mse: float
    l1: float
    tv: float


@dataclass
class Gradients:
    proto_appearance: list[np.ndarray]
    proto_alpha: list[np.ndarray]
    background: np.ndarray | None
    color: ColorNetGrads


@dataclass
class FrozenChoices:
    """Discrete decisions pinned for finite-difference replays."""

    dxs: np.ndarray  # (T,) int
    dys: np.ndarray  # (T,) int
    prototype_ids: np.ndarray  # (T,) int
    selection: tuple[int, ...]


@dataclass
class PipelineCache:
    """Everything the reverse pass needs from one image's forward pass."""

    image: np.ndarray
    prototype_ids: np.ndarray
    dxs: np.ndarray
    dys: np.ndarray
    scores: np.ndarray
    grays: np.ndarray  # (T, H, W) shifted grayscale templates
    masks: np.ndarray  # (T, H, W) shifted alpha masks
    scales: np.ndarray  # (T, C)
    color_cache: ColorCache
    colorized: np.ndarray  # (T, H, W, C)
    inside: np.ndarray  # (T, H, W, C) bool, colorize clamp pass-through
    selection: list[int]
    outs: list[np.ndarray]  # fold intermediates, len(selection) + 1
    composite: np.ndarray
    mse: float

    def frozen(self) -> FrozenChoices:
        return FrozenChoices(
            dxs=self.dxs.copy(),
            dys=self.dys.copy(),
            prototype_ids=self.prototype_ids.copy(),
            selection=tuple(self.selection),
        )


def l1_regularizer(prototypes: list[Prototype]) -> float:
    """Mean over prototypes of the appearance L1 norm (background excluded)."""
    if not prototypes:
        raise InvalidArgumentError("need at least one prototype")
    return float(np.mean([np.abs(p.appearance).sum() for p in prototypes]))


def tv_regularizer(prototypes: list[Prototype]) -> float:
    """Mean anisotropic total variation of the alpha masks.

    Sums |m[i+1,j] - m[i,j]| and |m[i,j+1] - m[i,j]| over valid interior
    indices only (no wraparound); a single-pixel mask has zero TV.
    """
    if not prototypes:
        raise InvalidArgumentError("need at least one prototype")
    totals = []
    for p in prototypes:
        m = p.alpha
        tv = np.abs(np.diff(m, axis=0)).sum() + np.abs(np.diff(m, axis=1)).sum()
        totals.append(tv)
    return float(np.mean(totals))


def _tv_grad(mask: np.ndarray) -> np.ndarray:
    g = np.zeros_like(mask)
    dv = np.sign(np.diff(mask, axis=0))
    g[1:, :] += dv
    g[:-1, :] -= dv
    dh = np.sign(np.diff(mask, axis=1))
    g[:, 1:] += dh
    g[:, :-1] -= dh
    return g


_TWIDDLE_CACHE: dict[int, np.ndarray] = {}


def _twiddles(n: int) -> np.ndarray:
    """Row d holds exp(-2i*pi*d*f) over the DFT frequency grid of size n."""
    if n not in _TWIDDLE_CACHE:
        _TWIDDLE_CACHE[n] = np.exp(
            -2j * np.pi * np.outer(np.arange(n), np.fft.fftfreq(n))
        )
    return _TWIDDLE_CACHE[n]


def prototype_spectra(state: ModelState) -> tuple[np.ndarray, np.ndarray]:
    """Padded appearance and mask spectra for all prototypes, (P, H, W)."""
    h, w = state.image_h, state.image_w
    apps = np.stack(
        [pad_to_canvas(p.appearance.astype(np.float64), h, w) for p in state.prototypes]
    )
    alphas = np.stack(
        [pad_to_canvas(p.alpha.astype(np.float64), h, w) for p in state.prototypes]
    )
    return np.fft.fft2(apps, axes=(-2, -1)), np.fft.fft2(alphas, axes=(-2, -1))


def run_pipeline(
    image: np.ndarray,
    state: ModelState,
    *,
    training: bool = False,
    frozen: FrozenChoices | None = None,
    update_running: bool = False,
    proto_spectra_pair: tuple[np.ndarray, np.ndarray] | None = None,
) -> PipelineCache:
    """Forward pass for one image, caching what the reverse pass needs.

    ``frozen`` replays previously observed displacements and selection
    (used by finite-difference checks); otherwise localization and greedy
    selection run normally. ``update_running`` folds this image's batch
    statistics into the color net's running estimates.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if (h, w, c) != (state.image_h, state.image_w, state.channels):
        raise InvalidArgumentError(
            f"image {image.shape} does not match model "
            f"{(state.image_h, state.image_w, state.channels)}"
        )
    dtype = image.dtype
    n_max = state.n_max
    num_p = state.num_prototypes

    if proto_spectra_pair is None:
        proto_spectra_pair = prototype_spectra(state)
    spec_a, spec_m = proto_spectra_pair

    if frozen is None:
        gray = image.mean(axis=2)
        gray_spec = np.fft.fft2(gray)
        r = gray_spec[None, :, :] * np.conj(spec_a)
        lmaps = np.fft.ifft2(r / (np.abs(r) + state.epsilon), axes=(-2, -1)).real
        flat = lmaps.reshape(num_p, -1)
        top = np.argsort(-flat, axis=1, kind="stable")[:, :n_max]
        dys, dxs = np.divmod(top.ravel(), w)
        prototype_ids = np.repeat(np.arange(num_p), n_max)
        scores = np.take_along_axis(flat, top, axis=1).ravel()
    else:
        dxs, dys = frozen.dxs, frozen.dys
        prototype_ids = frozen.prototype_ids
        scores = np.zeros(len(dxs))

    # Shift all candidate templates and masks with one batched inverse FFT;
    # integer displacements index precomputed twiddle rows.
    phase = _twiddles(h)[dys][:, :, None] * _twiddles(w)[dxs][:, None, :]
    grays = np.fft.ifft2(spec_a[prototype_ids] * phase, axes=(-2, -1)).real
    masks = np.fft.ifft2(spec_m[prototype_ids] * phase, axes=(-2, -1)).real
    grays = np.clip(grays, 0.0, 1.0).astype(dtype)
    masks = np.clip(masks, 0.0, 1.0).astype(dtype)

    masked = image[None, :, :, :] * masks[:, :, :, None]
    scales, ccache = forward_batch(
        state.color_net, masked, training=training, update_running=update_running
    )
    pre = scales[:, None, None, :] * grays[:, :, :, None]
    colorized = np.clip(pre, 0.0, 1.0)
    inside = (pre > 0.0) & (pre < 1.0)

    bottom = (
        state.background.appearance.astype(dtype)
        if state.background.enabled
        else np.zeros_like(image)
    )
    if frozen is None:
        selection, composed, mse = _select_and_compose(
            image, colorized, masks, bottom, n_max
        )
    else:
        selection = list(frozen.selection)
        composed = None
        mse = None

    outs = [bottom]
    for j in reversed(selection):
        m = masks[j][:, :, None]
        outs.append(colorized[j] * m + outs[-1] * (1.0 - m))
    outs.reverse()
    if composed is None:
        composed = np.clip(outs[0], 0.0, 1.0)
        mse = float(np.mean((image - composed) ** 2))

    return PipelineCache(
        image=image,
        prototype_ids=np.asarray(prototype_ids),
        dxs=np.asarray(dxs),
        dys=np.asarray(dys),
        scores=scores,
        grays=grays,
        masks=masks,
        scales=scales,
        color_cache=ccache,
        colorized=colorized,
        inside=inside,
        selection=selection,
        outs=outs,
        composite=composed,
        mse=mse,
    )


def _select_and_compose(image, colorized, masks, bottom, n_max):
    order, final, residual = greedy_core(image, colorized, masks, bottom, n_max)
    return order, final, residual


def loss(
    image: np.ndarray,
    decomposition,
    state: ModelState,
    config: TrainConfig,
) -> LossBreakdown:
    """Combine the reconstruction error of a decomposition with regularizers."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    mse = float(np.mean((image - decomposition.composite) ** 2))
    return _assemble_loss(mse, state, config)


def _assemble_loss(mse: float, state: ModelState, config: TrainConfig) -> LossBreakdown:
    l1 = l1_regularizer(state.prototypes)
    tv = tv_regularizer(state.prototypes)
    total = mse + config.lambda_l1 * l1 + config.lambda_tv * tv
    return LossBreakdown(total=total, mse=mse, l1=l1, tv=tv)


def backward(
    image: np.ndarray,
    cache: PipelineCache | None,
    state: ModelState,
    config: TrainConfig,
) -> Gradients:
    """Exact reverse-mode gradients of the per-image total loss.

    Needs the forward cache from `run_pipeline`. Displacements and
    selection indices are treated as constants; unselected prototype
    appearances only receive the L1 term, while every candidate's mask
    can receive gradient through the color net's shared batch statistics.
    """
    if cache is None:
        raise InvalidArgumentError("backward needs the cache from run_pipeline")
    image = cache.image
    h, w, c = image.shape
    npx = image.size
    t_count = len(cache.dxs)
    dtype = image.dtype

    g_out = (2.0 / npx) * (cache.outs[0] - image)

    g_scales = np.zeros_like(cache.scales)
    g_gray = np.zeros_like(cache.grays)
    g_mask = np.zeros_like(cache.masks)

    for k, j in enumerate(cache.selection):
        mask3 = cache.masks[j][:, :, None]
        g_tj = g_out * mask3
        g_mask[j] += np.sum(g_out * (cache.colorized[j] - cache.outs[k + 1]), axis=2)
        g_out = g_out * (1.0 - mask3)
        # through the colorize clamp: pre = scale_c * gray
        gated = g_tj * cache.inside[j]
        g_scales[j] = np.sum(gated * cache.grays[j][:, :, None], axis=(0, 1))
        g_gray[j] = np.sum(gated * cache.scales[j][None, None, :], axis=2)

    g_background = g_out if state.background.enabled else None

    color_grads, g_masked = color_backward(state.color_net, cache.color_cache, g_scales)
    g_mask += np.sum(g_masked * image[None, :, :, :], axis=3)

    ph, pw = state.proto_shape
    g_app = [np.zeros((ph, pw), dtype=dtype) for _ in state.prototypes]
    g_alpha = [np.zeros((ph, pw), dtype=dtype) for _ in state.prototypes]
    selected = set(cache.selection)
    for j in range(t_count):
        pid = int(cache.prototype_ids[j])
        shift = (-int(cache.dys[j]), -int(cache.dxs[j]))
        g_alpha[pid] += np.roll(g_mask[j], shift, axis=(0, 1))[:ph, :pw]
        if j in selected:
            g_app[pid] += np.roll(g_gray[j], shift, axis=(0, 1))[:ph, :pw]

    p = state.num_prototypes
    for i, proto in enumerate(state.prototypes):
        g_app[i] += (config.lambda_l1 / p) * np.sign(proto.appearance)
        g_alpha[i] += (config.lambda_tv / p) * _tv_grad(proto.alpha)

    return Gradients(
        proto_appearance=g_app,
        proto_alpha=g_alpha,
        background=g_background,
        color=color_grads,
    )


# ---------------------------------------------------------------------------
# Optimizer


def named_parameters(state: ModelState) -> list[tuple[str, np.ndarray]]:
    """Learnable tensors in a fixed order (running stats excluded)."""
    params = []
    for i, proto in enumerate(state.prototypes):
        params.append((f"proto_appearance/{i}", proto.appearance))
    for i, proto in enumerate(state.prototypes):
        params.append((f"proto_alpha/{i}", proto.alpha))
    if state.background.enabled:
        params.append(("background", state.background.appearance))
    for name in color_mod.LEARNABLE_TENSORS:
        params.append((f"color_net/{name}", getattr(state.color_net, name)))
    return params


def named_gradients(grads: Gradients, state: ModelState) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, g in enumerate(grads.proto_appearance):
        out.append((f"proto_appearance/{i}", g))
    for i, g in enumerate(grads.proto_alpha):
        out.append((f"proto_alpha/{i}", g))
    if state.background.enabled:
        bg = (
            grads.background
            if grads.background is not None
            else np.zeros_like(state.background.appearance)
        )
        out.append(("background", bg))
    for name in color_mod.LEARNABLE_TENSORS:
        out.append((f"color_net/{name}", getattr(grads.color, name)))
    return out


@dataclass
class AdamMoments:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    state: ModelState,
    grads: Gradients,
    moments: AdamMoments,
    lr: float,
    config: TrainConfig,
) -> ModelState:
    """One Adam update with bias correction, then range projection."""
    moments.t += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1 = 1.0 - b1**moments.t
    c2 = 1.0 - b2**moments.t
    params = dict(named_parameters(state))
    for name, g in named_gradients(grads, state):
        p = params[name]
        if name not in moments.m:
            moments.m[name] = np.zeros_like(p)
            moments.v[name] = np.zeros_like(p)
        m = moments.m[name]
        v = moments.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return project(state)


def lr_schedule(initial_lr: float, factor: float, period_epochs: int, epoch: int) -> float:
    """Step decay: initial_lr * factor ** floor(epoch / period)."""
    if epoch < 0:
        raise InvalidArgumentError(f"epoch must be >= 0, got {epoch}")
    if period_epochs < 1:
        raise InvalidArgumentError(f"period must be >= 1, got {period_epochs}")
    return initial_lr * factor ** (epoch // period_epochs)


# ---------------------------------------------------------------------------
# Training loop


def _accumulate(total: Gradients | None, part: Gradients, state) -> Gradients:
    if total is None:
        return part
    for i in range(len(total.proto_appearance)):
        total.proto_appearance[i] += part.proto_appearance[i]
        total.proto_alpha[i] += part.proto_alpha[i]
    if total.background is not None and part.background is not None:
        total.background = total.background + part.background
    for name in color_mod.LEARNABLE_TENSORS:
        setattr(
            total.color, name, getattr(total.color, name) + getattr(part.color, name)
        )
    return total


def _scale_gradients(grads: Gradients, factor: float) -> Gradients:
    for i in range(len(grads.proto_appearance)):
        grads.proto_appearance[i] *= factor
        grads.proto_alpha[i] *= factor
    if grads.background is not None:
        grads.background = grads.background * factor
    for name in color_mod.LEARNABLE_TENSORS:
        setattr(grads.color, name, getattr(grads.color, name) * factor)
    return grads


def _batch_worker(payload):
    """Forward + backward for a chunk of images against a frozen state.

    Running statistics are not touched here; each image's batch stats go
    back to the caller, which replays the momentum updates in image order
    so results match the serial path bitwise for any worker count.
    """
    state, config, images = payload
    spectra = prototype_spectra(state)
    out = []
    for img in images:
        cache = run_pipeline(
            img, state, training=True, update_running=False, proto_spectra_pair=spectra
        )
        part = backward(img, cache, state, config)
        out.append((part, cache.mse, cache.color_cache.batch_stats))
    return out


def train(
    dataset: np.ndarray,
    config: TrainConfig,
    state: ModelState,
    out_dir=None,
    checkpoint_every: int = 1,
    start_epoch: int = 0,
    quiet: bool = True,
    workers: int = 1,
) -> tuple[ModelState, list[dict]]:
    """Full training loop over a (N, H, W, C) image array.

    Per batch: noise injection (inside the configured window) -> forward
    pipeline per image -> batch-mean gradients -> Adam step -> projection.
    Emits one metrics record per batch; when ``out_dir`` is given, writes
    them to ``metrics.jsonl`` and checkpoints every ``checkpoint_every``
    epochs plus a final ``checkpoint_final.ckpt``.

    ``workers`` > 1 fans per-image forward/backward passes out to a
    process pool; gradient accumulation and batch-norm running updates
    are replayed in image order, so the result is reproducible for a
    fixed seed regardless of worker count. Aborts with diagnostics if
    the loss goes non-finite.
    """
    config.validate()
    dataset = np.asarray(dataset)
    if dataset.ndim == 3:
        dataset = dataset[:, :, :, None]
    if dataset.shape[0] == 0:
        raise InvalidArgumentError("dataset is empty")
    if dataset.shape[1:] != (state.image_h, state.image_w, state.channels):
        raise InvalidArgumentError(
            f"dataset images {dataset.shape[1:]} do not match model "
            f"{(state.image_h, state.image_w, state.channels)}"
        )

    rng = np.random.default_rng(config.seed)
    moments = AdamMoments()
    records: list[dict] = []
    n = dataset.shape[0]
    metrics_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a", encoding="utf-8")

    pool = None
    if workers > 1:
        import multiprocessing as mp

        pool = mp.get_context("fork").Pool(workers, initializer=_limit_worker_threads)

    # One BLAS thread everywhere keeps every reduction order fixed, so a
    # run is bitwise reproducible for any worker count; parallelism comes
    # from the process pool.
    try:
        from threadpoolctl import threadpool_limits

        blas_limit = threadpool_limits(limits=1)
    except ImportError:
        blas_limit = None

    try:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_schedule(config.lr, config.scheduler_factor, config.scheduler_epochs, epoch)
            order = rng.permutation(n)
            epoch_start = time.perf_counter()
            for lo in range(0, n, config.batch_size):
                batch = dataset[order[lo : lo + config.batch_size]]
                if state.step < config.noise_window_iters:
                    inject_noise(
                        state, config.noise_prob, config.noise_low, config.noise_high, rng
                    )
                if pool is not None and len(batch) > 1:
                    chunks = np.array_split(batch, min(workers, len(batch)))
                    results = pool.map(
                        _batch_worker, [(state, config, chunk) for chunk in chunks]
                    )
                    items = [item for chunk in results for item in chunk]
                else:
                    items = _batch_worker((state, config, batch))
                grads = None
                mse_sum = 0.0
                for part, mse, batch_stats in items:
                    grads = _accumulate(grads, part, state)
                    mse_sum += mse
                    color_mod.update_running_stats(state.color_net, *batch_stats)
                grads = _scale_gradients(grads, 1.0 / len(batch))
                breakdown = _assemble_loss(mse_sum / len(batch), state, config)
                if not math.isfinite(breakdown.total):
                    raise NumericFailureError(
                        f"non-finite loss at step {state.step}: mse={breakdown.mse} "
                        f"l1={breakdown.l1} tv={breakdown.tv}"
                    )
                adam_step(state, grads, moments, lr, config)
                state.step += 1
                record = {
                    "step": state.step,
                    "epoch": epoch,
                    "lr": lr,
                    "mse": breakdown.mse,
                    "l1": breakdown.l1,
                    "tv": breakdown.tv,
                    "total": breakdown.total,
                }
                records.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record) + "\n")
            if metrics_fh is not None:
                metrics_fh.flush()
            if not quiet:
                last = records[-1] if records else {}
                print(
                    f"epoch {epoch}: total={last.get('total', float('nan')):.6f} "
                    f"mse={last.get('mse', float('nan')):.6f} lr={lr:.5f} "
                    f"({time.perf_counter() - epoch_start:.1f}s)",
                    flush=True,
                )
            if out_dir is not None and (epoch + 1) % checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"checkpoint_epoch{epoch:04d}.ckpt")
        if out_dir is not None:
            save_checkpoint(state, out_dir / "checkpoint_final.ckpt")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
        if pool is not None:
            pool.close()
            pool.join()
        if blas_limit is not None:
            blas_limit.unregister()
    return state, records


_WORKER_LIMITER = None


def _limit_worker_threads():
    """Pin BLAS pools to one thread inside worker processes."""
    global _WORKER_LIMITER
    try:
        from threadpoolctl import threadpool_limits

        _WORKER_LIMITER = threadpool_limits(limits=1)
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# Inference helpers


def decompose(image: np.ndarray, state: ModelState):
    """Inference-mode decomposition of one image into candidate layers.

    Returns a `compositor.Decomposition` whose selected candidates carry
    displacements, scores, masks, and colorized templates.
    """
    from .compositor import Decomposition

    cache = run_pipeline(image, state, training=False)
    selected = []
    for j in cache.selection:
        selected.append(
            Candidate(
                prototype_id=int(cache.prototype_ids[j]),
                displacement=Displacement(
                    dx=int(cache.dxs[j]), dy=int(cache.dys[j]), score=float(cache.scores[j])
                ),
                gray=cache.grays[j],
                mask=cache.masks[j],
                template=cache.colorized[j],
                color=cache.scales[j],
            )
        )
    return Decomposition(
        selected=selected,
        composite=cache.composite,
        residual_error=cache.mse,
        selected_indices=list(cache.selection),
    )


def replay_total(
    image: np.ndarray,
    state: ModelState,
    config: TrainConfig,
    frozen: FrozenChoices,
) -> float:
    """Total loss with discrete choices pinned (finite-difference probe)."""
    cache = run_pipeline(image, state, training=True, frozen=frozen)
    return _assemble_loss(cache.mse, state, config).total
