"""Frequency-domain fusion of two noise latents.

Pose structure lives in the low spatial frequencies of an inverted latent;
generative freedom lives in the high frequencies of a fresh one. The fusion
keeps the low band of the former and the high band of the latter under a
Gaussian low-pass weighting with cutoff ``tau`` in normalized frequency
units (cycles/sample, so a given tau means the same thing at any resolution).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ExcessiveImaginaryResidual, NonPositiveTau, ShapeMismatch

# Imaginary energy above this fraction of the real part signals a spectrum
# that is no longer conjugate-symmetric (corrupted or asymmetrically masked).
MAX_IMAG_RATIO = 1e-4


def _check_latent(latent: np.ndarray) -> np.ndarray:
    arr = np.asarray(latent, dtype=float)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ShapeMismatch(f"latent must be (C, H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeMismatch("latent contains non-finite values")
    return arr


def fft_centered(latent: np.ndarray) -> np.ndarray:
    """Per-channel 2-D DFT with the DC bin shifted to the spatial center.

    Unnormalized forward transform: sum|z|^2 == sum|f|^2 / (H*W).
    """
    arr = _check_latent(latent)
    return np.fft.fftshift(np.fft.fft2(arr, axes=(-2, -1)), axes=(-2, -1))


def ifft_centered(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of fft_centered; discards the (small) imaginary residual.

    Raises ExcessiveImaginaryResidual when the imaginary part exceeds
    MAX_IMAG_RATIO of the real part in L2 norm, which indicates the spectrum
    was modified in a way no real latent can produce.
    """
    freq = np.asarray(spectrum)
    if freq.ndim != 3:
        raise ShapeMismatch(f"spectrum must be (C, H, W), got {freq.shape}")
    x = np.fft.ifft2(np.fft.ifftshift(freq, axes=(-2, -1)), axes=(-2, -1))
    re = np.linalg.norm(x.real)
    im = np.linalg.norm(x.imag)
    if im > MAX_IMAG_RATIO * max(re, 1e-300):
        raise ExcessiveImaginaryResidual(
            f"imaginary residual {im:.3e} exceeds {MAX_IMAG_RATIO} x real norm {re:.3e}"
        )
    return x.real


@dataclass(frozen=True, eq=False)
class GaussianMask:
    """Center-peaked low-pass weights on the shifted-frequency grid."""

    weights: np.ndarray
    tau: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2:
            raise ValueError("weights must be 2-D")
        object.__setattr__(self, "weights", w)


def gaussian_lowpass_mask(height: int, width: int, tau: float) -> GaussianMask:
    """weights(u, v) = exp(-(u^2 + v^2) / (2 tau^2)) in normalized frequency.

    u, v are (bin - center) / size, covering [-0.5, 0.5); the center bin
    (floor(H/2), floor(W/2)) always gets weight exactly 1.
    """
    if not tau > 0:
        raise NonPositiveTau(f"tau must be positive, got {tau}")
    if height < 1 or width < 1:
        raise ShapeMismatch("mask dimensions must be positive")
    u = (np.arange(height) - height // 2) / height
    v = (np.arange(width) - width // 2) / width
    r2 = u[:, None] ** 2 + v[None, :] ** 2
    return GaussianMask(np.exp(-r2 / (2.0 * tau * tau)), float(tau))


def fuse_spectra(f_inv: np.ndarray, f_rand: np.ndarray, mask: GaussianMask) -> np.ndarray:
    """Weighted blend G*f_inv + (1-G)*f_rand, mask broadcast over channels."""
    a = np.asarray(f_inv)
    b = np.asarray(f_rand)
    if a.shape != b.shape:
        raise ShapeMismatch(f"spectra shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[-2:] != mask.weights.shape:
        raise ShapeMismatch(
            f"mask {mask.weights.shape} does not match spectra spatial dims {a.shape[-2:]}"
        )
    g = mask.weights[None, :, :]
    return g * a + (1.0 - g) * b


def spectral_pose_inject(z_inv: np.ndarray, z_rand: np.ndarray, tau: float) -> np.ndarray:
    """Blend two real latents in the frequency domain and return the result.

    Low-band content (normalized radius up to about tau) follows z_inv, the
    remainder follows z_rand.
    """
    a = _check_latent(z_inv)
    b = _check_latent(z_rand)
    if a.shape != b.shape:
        raise ShapeMismatch(f"latent shapes differ: {a.shape} vs {b.shape}")
    mask = gaussian_lowpass_mask(a.shape[-2], a.shape[-1], tau)
    fused = fuse_spectra(fft_centered(a), fft_centered(b), mask)
    return ifft_centered(fused)
