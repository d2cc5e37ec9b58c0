"""Layered composition of selected candidates and greedy selection.

Images are reconstructed as a depth-ordered superposition: the first
selected candidate sits closest to the viewer, and each layer blends over
everything behind it through its alpha mask. Selection is greedy: each
round picks the candidate that, placed behind the already-selected
layers, minimizes the mean squared reconstruction error.

Because a new candidate always goes behind the existing stack, the
partial composite is affine in the bottom layer:

    composite(selected + [c], bottom) = F + A * (T_c * M_c + bottom * (1 - M_c))

where F is the composite of the selected stack over black and A the
accumulated transparency prod(1 - M_k). Each selection round therefore
costs O(T * H * W) instead of re-folding the stack per candidate; the
result is identical to the naive fold since all layers live in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .pc_cell import Candidate


@dataclass
class Decomposition:
    """Greedy selection result: layers front-to-back plus the composite."""

    selected: list[Candidate]
    composite: np.ndarray
    residual_error: float
    selected_indices: list[int] | None = None  # positions in the candidate pool


def composite(selected: list[Candidate], background=None) -> np.ndarray:
    """Fold candidate layers back-to-front over the background (or black)."""
    bottom = _bottom_layer(selected, background)
    out = bottom
    for cand in reversed(selected):
        mask = cand.mask[:, :, None]
        out = cand.template * mask + out * (1.0 - mask)
    return np.clip(out, 0.0, 1.0)


def recon_error(image: np.ndarray, composed: np.ndarray) -> float:
    """Mean squared per-pixel per-channel difference (resolution independent)."""
    if image.shape != composed.shape:
        raise InvalidArgumentError(
            f"shape mismatch: image {image.shape} vs composite {composed.shape}"
        )
    diff = image - composed
    return float(np.mean(diff * diff))


def greedy_core(
    image: np.ndarray,
    templates: np.ndarray,
    masks: np.ndarray,
    bottom: np.ndarray,
    n_max: int,
    min_improvement: float | None = None,
) -> tuple[list[int], np.ndarray, float]:
    """Array-level greedy selection shared by `greedy_select` and the trainer.

    ``templates`` is (T, H, W, C), ``masks`` is (T, H, W), ``bottom`` the
    background layer (or zeros). Returns (selection order, composite,
    residual error).
    """
    image = np.asarray(image)
    masks4 = masks[:, :, :, None]
    npx = image.size

    # Each round evaluates ||(front - I) + A * X_t||^2 where X_t is the
    # round-independent bottom-completed layer of candidate t and A the
    # accumulated transparency; expanding the square leaves two reduction
    # passes over X per round instead of T trial composites.
    layers = templates * masks4 + bottom * (1.0 - masks4)  # X, (T, H, W, C)
    diff = -image.astype(np.float64, copy=True)  # front - I
    transparency = np.ones(image.shape[:2], dtype=np.float64)
    alive = np.ones(templates.shape[0], dtype=bool)
    order: list[int] = []
    prev_error = float(np.mean((np.clip(transparency[:, :, None] * bottom, 0.0, 1.0) + diff) ** 2))

    for _ in range(n_max):
        cross = diff * transparency[:, :, None]
        d2 = float(np.einsum("hwc,hwc->", diff, diff))
        lin = np.einsum("thwc,hwc->t", layers, cross)
        quad = np.einsum("thwc,thwc,hw->t", layers, layers, transparency * transparency)
        errors = (d2 + 2.0 * lin + quad) / npx
        errors[~alive] = np.inf
        best = int(np.argmin(errors))  # argmin takes the first index on ties
        best_error = float(errors[best])
        if min_improvement is not None and prev_error - best_error < min_improvement:
            break
        order.append(best)
        alive[best] = False
        mask = masks[best]
        diff += (transparency * mask)[:, :, None] * templates[best]
        transparency *= 1.0 - mask
        prev_error = best_error

    final = np.clip(diff + image + transparency[:, :, None] * bottom, 0.0, 1.0)
    residual = float(np.mean((image - final) ** 2))
    return order, final, residual


def greedy_select(
    image: np.ndarray,
    candidates: list[Candidate],
    n_max: int,
    background=None,
    min_improvement: float | None = None,
) -> Decomposition:
    """Select ``n_max`` candidates by greedy reconstruction-error descent.

    Runs exactly ``n_max`` rounds; each round evaluates every remaining
    pool candidate appended behind the current stack and keeps the
    argmin, ties broken by lowest candidate index. Selected candidates
    leave the pool. ``min_improvement`` (inference convenience, off by
    default) stops early once the best round improves the error by less
    than the given amount.
    """
    if not candidates:
        raise InvalidArgumentError("candidate list is empty")
    if n_max < 1:
        raise InvalidArgumentError(f"n_max must be >= 1, got {n_max}")
    if n_max > len(candidates):
        raise InvalidArgumentError(
            f"n_max={n_max} exceeds candidate count {len(candidates)}"
        )
    image = np.asarray(image)
    templates = np.stack([c.template for c in candidates])  # (T, H, W, C)
    masks = np.stack([c.mask for c in candidates])  # (T, H, W)
    bottom = _bottom_layer(candidates, background)

    order, final, residual = greedy_core(
        image, templates, masks, bottom, n_max, min_improvement
    )
    return Decomposition(
        selected=[candidates[i] for i in order],
        composite=final,
        residual_error=residual,
        selected_indices=order,
    )


def composite_layers(selected: list[Candidate], background=None) -> list[np.ndarray]:
    """Intermediate fold states out_k for the reverse pass.

    Returns [out_1, ..., out_{N+1}] where out_{N+1} is the bottom layer
    and out_k = T_k * M_k + out_{k+1} * (1 - M_k); out_1 is the composite
    before the final clamp (a no-op for in-range layers).
    """
    bottom = _bottom_layer(selected, background)
    outs = [bottom]
    for cand in reversed(selected):
        mask = cand.mask[:, :, None]
        outs.append(cand.template * mask + outs[-1] * (1.0 - mask))
    outs.reverse()
    return outs


def _bottom_layer(candidates: list[Candidate], background) -> np.ndarray:
    if background is not None and getattr(background, "enabled", True):
        return np.asarray(background.appearance)
    if candidates:
        ref = candidates[0]
        shape = ref.template.shape if ref.template is not None else ref.mask.shape + (1,)
        dtype = ref.template.dtype if ref.template is not None else ref.mask.dtype
        return np.zeros(shape, dtype=dtype)
    raise InvalidArgumentError("cannot infer composite shape from empty inputs")
