"""Canonical gamma hemodynamic response."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc, gammaln


@dataclass(frozen=True)
class HrfParams:
    shape: float = 6.0  # k
    scale: float = 1.0  # tau, seconds
    duration: float = 20.0  # kernel support, seconds

    def __post_init__(self):
        if not self.shape > 1.0:
            raise ValueError(f"HRF shape must be > 1, got {self.shape}")
        if not self.scale > 0.0 or not self.duration > 0.0:
            raise ValueError("HRF scale and duration must be positive")

    @property
    def peak_time(self) -> float:
        return (self.shape - 1.0) * self.scale


def canonical_hrf(t, p: HrfParams = HrfParams()):
    """Gamma density ``(t/tau)^(k-1) exp(-t/tau) / (tau * Gamma(k))``; zero for t <= 0."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("canonical_hrf is defined for t >= 0")
    u = t / p.scale
    with np.errstate(divide="ignore"):
        logh = (p.shape - 1.0) * np.log(u) - u - np.log(p.scale) - gammaln(p.shape)
    out = np.where(u > 0, np.exp(logh), 0.0)
    return out if out.ndim else float(out)


def hrf_kernel(fs: float, p: HrfParams = HrfParams()) -> np.ndarray:
    """Sampled HRF, each tap the density's mass over one sample bin.

    Taps sum to ~1, and as tau -> 0 the kernel collapses to ``[1]`` so that
    convolution becomes the identity.
    """
    n = max(1, int(round(p.duration * fs)))
    edges = np.arange(n + 1) / fs / p.scale
    return np.diff(gammainc(p.shape, edges))
