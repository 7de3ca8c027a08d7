"""Acquisition forward model: synthetic B0 phase, centered orthonormal 2D FFT,
Cartesian variable-density undersampling masks, and the zero-filled baseline.

Volumes are complex arrays of shape (S, T, H, W). Masks are binary (S, T, W)
patterns over the phase-encoding axis W, broadcast along H when applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass
class AccelerationMask:
    """Binary Cartesian sampling pattern; exactly floor(W/R) columns per (s, t)."""

    pattern: np.ndarray  # uint8 (S, T, W)
    R: int
    center_lines: int
    seed: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pattern.shape


@dataclass
class PhaseField:
    """Smooth static phase per slice, shape (S, H, W), max |phi| == amplitude."""

    phi: np.ndarray
    sigma: float
    amplitude: float


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2D FFT over the last two axes (DC at H//2, W//2)."""
    shifted = np.fft.ifftshift(x, axes=(-2, -1))
    k = np.fft.fft2(shifted, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(k, axes=(-2, -1))


def ifft2c(y: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    shifted = np.fft.ifftshift(y, axes=(-2, -1))
    x = np.fft.ifft2(shifted, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(x, axes=(-2, -1))


def simulate_phase(S: int, H: int, W: int, sigma: float, amplitude: float, seed: int) -> PhaseField:
    """Gaussian-smoothed random field per slice, rescaled to max |phi| = amplitude."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB0)))
    phi = np.zeros((S, H, W), dtype=np.float64)
    if amplitude > 0:
        for s in range(S):
            white = rng.standard_normal((H, W))
            smooth = gaussian_filter(white, sigma=sigma, mode="reflect")
            peak = np.max(np.abs(smooth))
            if peak > 0:
                phi[s] = smooth * (amplitude / peak)
    return PhaseField(phi=phi, sigma=sigma, amplitude=amplitude)


def apply_phase(x: np.ndarray, phase: PhaseField) -> np.ndarray:
    """Multiply each voxel by exp(i * phi); phi is static across frames."""
    S, _, H, W = x.shape
    if phase.phi.shape != (S, H, W):
        raise ValueError(f"phase shape {phase.phi.shape} does not match volume {(S, H, W)}")
    return x * np.exp(1j * phase.phi)[:, None, :, :]


def _center_columns(W: int, center_lines: int) -> np.ndarray:
    start = W // 2 - center_lines // 2
    return np.arange(start, start + center_lines)


def make_mask(S: int, T: int, W: int, R: int, center_lines: int, seed: int) -> AccelerationMask:
    """Variable-density Cartesian mask with guaranteed center lines and
    frame-interleaved coverage.

    Per (s, t) exactly floor(W/R) columns are sampled: the center_lines central
    columns plus a batch from a per-slice weighted permutation of the remaining
    columns (weights Gaussian in distance from the DC column). Batches cycle
    with period ceil(P/k), so any such window of consecutive frames covers
    every column. Bit-reproducible per seed.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    budget = W // R
    if budget < 1:
        raise ValueError(f"W={W}, R={R} leaves no sampling budget")
    if center_lines > budget:
        raise ValueError(f"center_lines={center_lines} exceeds per-frame budget {budget}")
    center = _center_columns(W, center_lines)
    others = np.setdiff1d(np.arange(W), center)
    k = budget - center_lines
    pattern = np.zeros((S, T, W), dtype=np.uint8)
    pattern[:, :, center] = 1

    if k > 0 and others.size > 0:
        dc = W // 2
        sigma_w = max(W / 6.0, 1.0)
        weights = np.exp(-((others - dc) ** 2) / (2.0 * sigma_w**2))
        rng = np.random.default_rng(np.random.SeedSequence((seed, S, T, W, R, center_lines)))
        period = math.ceil(others.size / k)
        for s in range(S):
            order = rng.choice(others, size=others.size, replace=False, p=weights / weights.sum())
            batches = [order[i * k : (i + 1) * k] for i in range(period)]
            short = batches[-1]
            if short.size < k:
                # top up the short batch so every frame meets the exact budget
                pool = np.setdiff1d(others, short)
                w_pool = np.exp(-((pool - dc) ** 2) / (2.0 * sigma_w**2))
                extra = rng.choice(pool, size=k - short.size, replace=False, p=w_pool / w_pool.sum())
                batches[-1] = np.concatenate([short, extra])
            for t in range(T):
                pattern[s, t, batches[t % period]] = 1

    return AccelerationMask(pattern=pattern, R=R, center_lines=center_lines, seed=seed)


def undersample(Xk: np.ndarray, mask: AccelerationMask) -> np.ndarray:
    """X_k^u from element-wise masking; the mask broadcasts along H.

    Sampled entries are bit-identical to the input, unsampled entries exactly zero.
    """
    S, T, _, W = Xk.shape
    if mask.pattern.shape != (S, T, W):
        raise ValueError(f"mask shape {mask.pattern.shape} does not match volume {(S, T, W)}")
    keep = mask.pattern.astype(bool)[:, :, None, :]
    return np.where(keep, Xk, np.zeros((), dtype=Xk.dtype))


def zero_filled(Xk_u: np.ndarray) -> np.ndarray:
    """Classical baseline: inverse centered FFT of the undersampled k-space."""
    return ifft2c(Xk_u)
