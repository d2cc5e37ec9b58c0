"""Phase-correlation cell: per-prototype object localization and alignment.

For each prototype this module finds the ``n_max`` most likely integer
displacements on the image torus (peaks of the phase-correlation
localization map) and produces the circularly shifted prototype template
and alpha mask for each peak, via the frequency-domain shift.

The localization path (peak picking) is a discrete decision: displacements
are constants to the training graph, and gradients flow only through the
shift-and-composite path into prototype and mask pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .fourier import (
    SpectralImage,
    cross_power_spectrum,
    fft2,
    frequency_grid,
    ifft2,
    pad_to_canvas,
)


@dataclass(frozen=True)
class LocalizationMap:
    """Phase-correlation response grid for one prototype."""

    values: np.ndarray  # (H, W) real
    prototype_id: int


@dataclass(frozen=True)
class Displacement:
    """Integer placement offset of a prototype on the image torus."""

    dx: int  # columns right, in [0, W)
    dy: int  # rows down, in [0, H)
    score: float  # localization-map value at [dy, dx]


@dataclass
class Candidate:
    """One shifted prototype hypothesis.

    ``gray`` and ``mask`` come out of the PC cell; ``template`` (the
    colorized H x W x C version of ``gray``) and ``color`` are filled in
    by the color module before selection.
    """

    prototype_id: int
    displacement: Displacement
    gray: np.ndarray  # (H, W) shifted grayscale prototype in [0, 1]
    mask: np.ndarray  # (H, W) shifted alpha mask in [0, 1]
    template: np.ndarray | None = None  # (H, W, C) colorized, clamped
    color: np.ndarray | None = field(default=None, repr=False)  # (C,) scales


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Reduce an H x W x C image to H x W by an unweighted channel mean."""
    if image.ndim == 2:
        return image
    return image.mean(axis=2)


def localization_map(
    gray_image_spec: SpectralImage, prototype_spec: SpectralImage, epsilon: float
) -> np.ndarray:
    """Inverse transform of the normalized cross-power spectrum."""
    return ifft2(cross_power_spectrum(gray_image_spec, prototype_spec, epsilon))


def top_peaks(values: np.ndarray, n_max: int, nms_radius: int = 0) -> list[Displacement]:
    """Pick the ``n_max`` largest cells, descending, ties by row-major index.

    With ``nms_radius > 0``, peaks within that Chebyshev radius (on the
    torus) of an already-taken peak are skipped while better-separated
    peaks remain; if the map is exhausted, skipped cells fill the
    remaining slots in score order.
    """
    h, w = values.shape
    flat = values.ravel()
    order = np.argsort(-flat, kind="stable")
    if nms_radius <= 0:
        chosen = order[:n_max]
    else:
        chosen = []
        skipped = []
        for idx in order:
            if len(chosen) == n_max:
                break
            dy, dx = divmod(int(idx), w)
            clash = False
            for taken in chosen:
                ty, tx = divmod(int(taken), w)
                ddy = min((dy - ty) % h, (ty - dy) % h)
                ddx = min((dx - tx) % w, (tx - dx) % w)
                if max(ddy, ddx) <= nms_radius:
                    clash = True
                    break
            if clash:
                skipped.append(idx)
            else:
                chosen.append(idx)
        while len(chosen) < n_max:
            chosen.append(skipped.pop(0))
        chosen = np.asarray(chosen)
    peaks = []
    for idx in chosen:
        dy, dx = divmod(int(idx), w)
        peaks.append(Displacement(dx=dx, dy=dy, score=float(values[dy, dx])))
    return peaks


def localize(
    image: np.ndarray,
    prototype_spec: SpectralImage,
    n_max: int,
    epsilon: float,
    nms_radius: int = 0,
) -> list[Displacement]:
    """Return the ``n_max`` best integer displacements for one prototype.

    The prototype spectrum must already be at image size (zero-padded
    before transforming). Color images are reduced to grayscale first,
    since prototypes are single-channel.
    """
    gray = to_grayscale(np.asarray(image))
    h, w = gray.shape
    if not 1 <= n_max <= h * w:
        raise InvalidArgumentError(f"n_max must be in [1, {h * w}], got {n_max}")
    lmap = localization_map(fft2(gray), prototype_spec, epsilon)
    return top_peaks(lmap, n_max, nms_radius=nms_radius)


def shifted_planes(
    spec_data: np.ndarray, dxs: np.ndarray, dys: np.ndarray
) -> np.ndarray:
    """Apply per-candidate phase shifts to stacked spectra and invert.

    ``spec_data`` is (T, H, W) complex; ``dxs``/``dys`` are length-T.
    Returns the (T, H, W) real spatial planes, one batched inverse FFT.
    """
    t, h, w = spec_data.shape
    grid = frequency_grid(h, w)
    phase = np.exp(
        -2j
        * np.pi
        * (
            dxs[:, None, None] * grid.fx[None, :, :]
            + dys[:, None, None] * grid.fy[None, :, :]
        )
    )
    return np.fft.ifft2(spec_data * phase, axes=(-2, -1)).real


def make_candidates(
    image: np.ndarray,
    prototypes: list,
    n_max: int,
    epsilon: float,
    nms_radius: int = 0,
) -> list[Candidate]:
    """Run localization for every prototype and emit shifted candidates.

    Candidate order is (prototype 0 peaks descending, prototype 1 peaks
    descending, ...). Shifted templates and masks are clamped to [0, 1]
    to remove residual FFT ringing. Identical inputs give identical
    candidate lists.
    """
    if not prototypes:
        raise InvalidArgumentError("prototype list is empty")
    image = np.asarray(image)
    gray = to_grayscale(image)
    h, w = gray.shape
    ph, pw = prototypes[0].appearance.shape
    if ph > h or pw > w:
        raise InvalidArgumentError(
            f"prototype {(ph, pw)} larger than image {(h, w)}"
        )

    gray_spec = fft2(gray)
    candidates: list[Candidate] = []
    spec_stack = []
    disp_per_proto = []
    for proto in prototypes:
        spec_a = np.fft.fft2(pad_to_canvas(np.asarray(proto.appearance, dtype=np.float64), h, w))
        spec_m = np.fft.fft2(pad_to_canvas(np.asarray(proto.alpha, dtype=np.float64), h, w))
        lmap = localization_map(
            gray_spec, SpectralImage(spec_a, h, w), epsilon
        )
        peaks = top_peaks(lmap, n_max, nms_radius=nms_radius)
        disp_per_proto.append(peaks)
        for peak in peaks:
            spec_stack.append((spec_a, spec_m, peak.dx, peak.dy))

    specs_a = np.stack([s[0] for s in spec_stack])
    specs_m = np.stack([s[1] for s in spec_stack])
    dxs = np.array([s[2] for s in spec_stack], dtype=np.float64)
    dys = np.array([s[3] for s in spec_stack], dtype=np.float64)
    grays = np.clip(shifted_planes(specs_a, dxs, dys), 0.0, 1.0)
    masks = np.clip(shifted_planes(specs_m, dxs, dys), 0.0, 1.0)

    dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64
    j = 0
    for proto, peaks in zip(prototypes, disp_per_proto):
        for peak in peaks:
            candidates.append(
                Candidate(
                    prototype_id=proto.id,
                    displacement=peak,
                    gray=grays[j].astype(dtype),
                    mask=masks[j].astype(dtype),
                )
            )
            j += 1
    return candidates
