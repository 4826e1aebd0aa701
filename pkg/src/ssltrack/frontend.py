"""Framing, STFT, GCC-PHAT and maximum sliding window filtering."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

EPSILON = 1e-12


@dataclass(frozen=True)
class FrameSpec:
    frame_size: int = 256
    hop: int = 128
    sample_rate: float = 16000.0

    def __post_init__(self):
        n = self.frame_size
        if n < 2 or n & (n - 1):
            raise ValueError(f"frame size must be a power of two, got {n}")
        if not 0 < self.hop <= n:
            raise ValueError(f"hop must lie in (0, {n}], got {self.hop}")

    @property
    def frame_period(self) -> float:
        return self.hop / self.sample_rate

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_size:
            return 0
        return 1 + (n_samples - self.frame_size) // self.hop


def sine_window(n: int) -> np.ndarray:
    """w[n] = sin(pi (n + 0.5) / N); squares overlap-add to one at 50% hop."""
    return np.sin(np.pi * (np.arange(n) + 0.5) / n)


def frame_and_window(signal: np.ndarray, spec: FrameSpec, window: bool = True) -> np.ndarray:
    """Cut a (M, T) signal into windowed frames, shape (L, M, N).

    Only frames that fit entirely are emitted; the tail is dropped.
    """
    x = np.atleast_2d(np.asarray(signal, dtype=np.float64))
    n_frames = spec.n_frames(x.shape[1])
    n = spec.frame_size
    if n_frames == 0:
        return np.zeros((0, x.shape[0], n))
    idx = np.arange(n_frames)[:, None] * spec.hop + np.arange(n)[None, :]
    frames = x[:, idx].transpose(1, 0, 2)
    if window:
        frames = frames * sine_window(n)
    return frames


def iter_frames(signal: np.ndarray, spec: FrameSpec) -> Iterator[np.ndarray]:
    """Streaming variant of :func:`frame_and_window`, one (M, N) frame at a time."""
    x = np.atleast_2d(np.asarray(signal, dtype=np.float64))
    w = sine_window(spec.frame_size)
    for l in range(spec.n_frames(x.shape[1])):
        start = l * spec.hop
        yield x[:, start : start + spec.frame_size] * w


def stft(frame: np.ndarray) -> np.ndarray:
    """One-sided spectrum X[k], k = 0..N/2, along the last axis."""
    return np.fft.rfft(frame, axis=-1)


def gcc_phat(xp: np.ndarray, xq: np.ndarray, epsilon: float = EPSILON, n: int | None = None) -> np.ndarray:
    """Phase-transform cross-correlation of two one-sided spectra.

    The result has length N and peaks at lag ``d`` (circular index) when the
    signal at ``p`` leads the signal at ``q`` by ``d`` samples, so the peak
    of a far-field source sits at the lag given by ``tdoa.tdoa``. Leading
    dimensions broadcast, allowing all pairs in one call.
    """
    if xp.shape[-1] != xq.shape[-1]:
        raise ValueError("spectra must have the same number of bins")
    n = n or 2 * (xp.shape[-1] - 1)
    cross = np.conj(xp) * xq
    cross /= np.abs(xp) * np.abs(xq) + epsilon
    # irfft applies 1/N and rebuilds the negative bins by conjugate symmetry
    return np.fft.irfft(cross, n=n, axis=-1)


def pair_gcc(spectra: np.ndarray, pairs: np.ndarray, epsilon: float = EPSILON) -> np.ndarray:
    """GCC-PHAT for the listed (p, q) pairs of a (M, N/2+1) spectrum set."""
    n = 2 * (spectra.shape[-1] - 1)
    mag = np.abs(spectra)
    xp = spectra[pairs[:, 0]]
    xq = spectra[pairs[:, 1]]
    cross = np.conj(xp) * xq
    cross /= mag[pairs[:, 0]] * mag[pairs[:, 1]] + epsilon
    return np.fft.irfft(cross, n=n, axis=-1)


def msw_filter(r: np.ndarray, half_width) -> np.ndarray:
    """Circular running maximum over lags n - w .. n + w.

    ``r`` may be (N,) with scalar ``half_width`` or (P, N) with one
    half-width per row.
    """
    r = np.asarray(r, dtype=np.float64)
    w = np.asarray(half_width, dtype=np.int64)
    if np.any(w < 0):
        raise ValueError("half_width must be non-negative")
    if r.ndim == 1:
        width = int(w)
        if width == 0:
            return r.copy()
        if 2 * width + 1 >= r.shape[-1]:
            return np.full_like(r, r.max())
        shifted = [np.roll(r, k) for k in range(-width, width + 1)]
        return np.max(shifted, axis=0)
    top = int(w.max(initial=0))
    if top == 0:
        return r.copy()
    n = r.shape[-1]
    if 2 * top + 1 >= n:
        return np.stack([msw_filter(row, width) for row, width in zip(r, w)])
    # running maxima for every width up to the largest, picked per row
    padded = np.concatenate([r[:, n - top :], r, r[:, :top]], axis=1)
    stack = np.empty((top + 1,) + r.shape)
    stack[0] = r
    for k in range(1, top + 1):
        np.maximum(stack[k - 1], padded[:, top - k : top - k + n], out=stack[k])
        np.maximum(stack[k], padded[:, top + k : top + k + n], out=stack[k])
    return stack[w, np.arange(r.shape[0])]
