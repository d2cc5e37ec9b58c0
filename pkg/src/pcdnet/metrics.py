"""Evaluation: segmentation labels, foreground ARI, throughput benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .compositor import Decomposition
from .datagen import LabeledImage
from .errors import InvalidArgumentError, UndefinedMetricError
from .model import ModelState
from .trainer import decompose, prototype_spectra, run_pipeline


@dataclass
class SegmentationResult:
    """Pixel labels read off one decomposition.

    Instance label k corresponds to selected[k - 1]; semantic labels are
    prototype id + 1. Zero means unassigned/background.
    """

    instance_labels: np.ndarray  # (H, W) int
    semantic_labels: np.ndarray  # (H, W) int


def labels_from_decomposition(
    dec: Decomposition, threshold: float = 0.5
) -> SegmentationResult:
    """Assign each pixel to the front-most candidate with alpha > threshold."""
    if not 0.0 < threshold < 1.0:
        raise InvalidArgumentError(f"threshold must be in (0, 1), got {threshold}")
    if not dec.selected:
        raise InvalidArgumentError("decomposition has no selected candidates")
    shape = dec.selected[0].mask.shape
    instance = np.zeros(shape, dtype=np.int32)
    semantic = np.zeros(shape, dtype=np.int32)
    for k, cand in enumerate(dec.selected):  # index 0 is closest to the viewer
        covered = (cand.mask > threshold) & (instance == 0)
        instance[covered] = k + 1
        semantic[covered] = cand.prototype_id + 1
    return SegmentationResult(instance_labels=instance, semantic_labels=semantic)


def adjusted_rand_index(labels_a: np.ndarray, labels_b: np.ndarray) -> float:
    """ARI between two flat label arrays, exact integer contingency math.

    Label 0 is an ordinary cluster here; callers restrict pixels first.
    Symmetric, invariant to label permutation; returns 1.0 in the
    degenerate case where both partitions are trivially identical.
    """
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise InvalidArgumentError("label arrays must have equal length")
    n = a.size
    if n < 2:
        raise UndefinedMetricError("ARI needs at least 2 elements")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na = int(ai.max()) + 1
    nb = int(bi.max()) + 1
    contingency = np.bincount(ai * nb + bi, minlength=na * nb).reshape(na, nb)
    row_sums = contingency.sum(axis=1)
    col_sums = contingency.sum(axis=0)

    def comb2(values) -> int:
        return int(sum(int(v) * (int(v) - 1) // 2 for v in np.ravel(values)))

    sum_nij = comb2(contingency)
    sum_a = comb2(row_sums)
    sum_b = comb2(col_sums)
    pairs = n * (n - 1) // 2
    numerator = 2 * (pairs * sum_nij - sum_a * sum_b)
    denominator = pairs * (sum_a + sum_b) - 2 * sum_a * sum_b
    if denominator == 0:
        return 1.0
    return numerator / denominator


def ari_foreground(pred: SegmentationResult, truth: LabeledImage) -> float:
    """ARI restricted to the ground-truth foreground pixels.

    Unassigned predictions (label 0) on foreground pixels count as their
    own cluster.
    """
    if truth.instance_mask is None:
        raise InvalidArgumentError("ground truth has no instance mask")
    if pred.instance_labels.shape != truth.instance_mask.shape:
        raise InvalidArgumentError(
            f"shape mismatch: pred {pred.instance_labels.shape} vs "
            f"truth {truth.instance_mask.shape}"
        )
    fg = truth.instance_mask > 0
    if int(fg.sum()) < 2:
        raise UndefinedMetricError("fewer than 2 foreground pixels")
    return adjusted_rand_index(pred.instance_labels[fg], truth.instance_mask[fg])


def benchmark_throughput(
    state: ModelState,
    images: np.ndarray,
    warmup: int = 1,
    repeats: int = 5,
    threads: int | None = None,
) -> dict:
    """Wall-clock decomposition rate (localize + color + greedy), no I/O.

    Prototype spectra are computed once up front (model setup, not per
    image). Returns mean and standard deviation over ``repeats`` timed
    passes; ``threads`` pins the BLAS pool when given.
    """
    if repeats < 1:
        raise InvalidArgumentError(f"repeats must be >= 1, got {repeats}")
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]

    def run_all():
        spectra = prototype_spectra(state)
        for img in images:
            run_pipeline(img, state, training=False, proto_spectra_pair=spectra)

    def timed():
        rates = []
        for _ in range(max(0, warmup)):
            run_all()
        for _ in range(repeats):
            t0 = time.perf_counter()
            run_all()
            rates.append(images.shape[0] / (time.perf_counter() - t0))
        return rates

    if threads is not None:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            rates = timed()
    else:
        rates = timed()

    rates_arr = np.asarray(rates)
    return {
        "mean_imgs_s": float(rates_arr.mean()),
        "std_imgs_s": float(rates_arr.std(ddof=1)) if repeats > 1 else 0.0,
        "n_images": int(images.shape[0]),
        "repeats": repeats,
        "threads": threads,
        "rates": [float(r) for r in rates],
    }


def evaluate_dataset(state: ModelState, dataset, threshold: float = 0.5) -> dict:
    """Foreground ARI over a labeled dataset; returns the report dict."""
    if not dataset.labeled:
        raise InvalidArgumentError("dataset has no ground-truth masks")
    spectra = prototype_spectra(state)
    scores = []
    for i in range(len(dataset)):
        cache = run_pipeline(dataset.images[i], state, training=False, proto_spectra_pair=spectra)
        dec = _decomposition_from_cache(cache)
        labels = labels_from_decomposition(dec, threshold=threshold)
        scores.append(ari_foreground(labels, dataset.labeled_image(i)))
    scores_arr = np.asarray(scores)
    return {
        "ari_mean": float(scores_arr.mean()),
        "ari_std": float(scores_arr.std()),
        "n_images": len(scores),
        "threshold": threshold,
        "per_image": [float(s) for s in scores],
    }


def _decomposition_from_cache(cache) -> Decomposition:
    from .pc_cell import Candidate, Displacement

    selected = [
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
        for j in cache.selection
    ]
    return Decomposition(
        selected=selected,
        composite=cache.composite,
        residual_error=cache.mse,
        selected_indices=list(cache.selection),
    )


__all__ = [
    "SegmentationResult",
    "labels_from_decomposition",
    "adjusted_rand_index",
    "ari_foreground",
    "benchmark_throughput",
    "evaluate_dataset",
    "decompose",
]
