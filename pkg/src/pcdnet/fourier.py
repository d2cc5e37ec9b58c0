"""Frequency-domain primitives: 2-D DFT, cross-power spectrum, phase shift.

Conventions, fixed repo-wide:

* Spectra use the full H x W complex layout (no half-spectrum packing).
* The forward transform is unnormalized; the inverse carries the 1/(H*W)
  factor (numpy's default "backward" normalization).
* Frequency grids follow standard DFT ordering: k/N for k < N/2, wrapped
  to negative frequencies above Nyquist.
* All shifts are circular on the H x W torus. Prototypes are zero-padded
  into the top-left corner of the image canvas before transforming, so a
  correlation peak at L[dy, dx] directly equals the placement offset
  (dx columns right, dy rows down).

All functions here are pure; none mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class SpectralImage:
    """Full-layout complex spectrum of an H x W real image plane."""

    data: np.ndarray  # (H, W) complex
    height: int
    width: int


@dataclass(frozen=True)
class FrequencyGrid:
    """Normalized DFT frequencies (cycles/pixel) broadcast to H x W."""

    fx: np.ndarray  # (H, W) horizontal frequencies, row-constant
    fy: np.ndarray  # (H, W) vertical frequencies, column-constant


def fft2(image_plane: np.ndarray) -> SpectralImage:
    """Forward 2-D DFT of a real image plane (unnormalized)."""
    plane = np.asarray(image_plane)
    if plane.ndim != 2:
        raise InvalidArgumentError(f"fft2 expects a 2-D plane, got ndim={plane.ndim}")
    h, w = plane.shape
    return SpectralImage(data=np.fft.fft2(plane), height=h, width=w)


def ifft2(spectrum: SpectralImage) -> np.ndarray:
    """Inverse 2-D DFT, normalized by 1/(H*W); returns the real part."""
    return np.fft.ifft2(spectrum.data).real


def frequency_grid(height: int, width: int) -> FrequencyGrid:
    """Build the (fx, fy) grid matching `fft2`'s spectral layout."""
    fx_row = np.fft.fftfreq(width)
    fy_col = np.fft.fftfreq(height)
    fx = np.broadcast_to(fx_row[None, :], (height, width))
    fy = np.broadcast_to(fy_col[:, None], (height, width))
    return FrequencyGrid(fx=fx, fy=fy)


def cross_power_spectrum(
    image_spec: SpectralImage, proto_spec: SpectralImage, epsilon: float
) -> SpectralImage:
    """Normalized cross-power spectrum of an image against a template.

    Returns (F(I) * conj(F(P))) / (|F(I) * conj(F(P))| + epsilon)
    elementwise; every output element has modulus <= 1. The inverse
    transform of the result is the phase-correlation localization map.
    """
    if epsilon <= 0:
        raise InvalidArgumentError(f"epsilon must be positive, got {epsilon}")
    if (image_spec.height, image_spec.width) != (proto_spec.height, proto_spec.width):
        raise InvalidArgumentError(
            "spectra must share dimensions: "
            f"{(image_spec.height, image_spec.width)} vs "
            f"{(proto_spec.height, proto_spec.width)}"
        )
    r = image_spec.data * np.conj(proto_spec.data)
    out = r / (np.abs(r) + epsilon)
    return SpectralImage(data=out, height=image_spec.height, width=image_spec.width)


def phase_shift(
    proto_spec: SpectralImage, delta: tuple[float, float], grid: FrequencyGrid
) -> SpectralImage:
    """Translate a spectrum by (dx, dy) pixels via the shift theorem.

    Multiplies elementwise by exp(-i*2*pi*(dx*fx + dy*fy)). For integer
    deltas the spatial result of `ifft2` equals an exact circular roll by
    dy rows down and dx columns right.
    """
    if grid.fx.shape != proto_spec.data.shape:
        raise InvalidArgumentError(
            f"grid shape {grid.fx.shape} does not match spectrum "
            f"{proto_spec.data.shape}"
        )
    dx, dy = delta
    phase = np.exp(-2j * np.pi * (dx * grid.fx + dy * grid.fy))
    return SpectralImage(
        data=proto_spec.data * phase,
        height=proto_spec.height,
        width=proto_spec.width,
    )


def pad_to_canvas(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    """Embed an h x w plane at the top-left corner of an H x W zero canvas."""
    h, w = plane.shape
    if h > height or w > width:
        raise InvalidArgumentError(
            f"plane {plane.shape} does not fit canvas {(height, width)}"
        )
    canvas = np.zeros((height, width), dtype=plane.dtype)
    canvas[:h, :w] = plane
    return canvas
