"""Explicit feature maps for additive homogeneous kernels.

Hellinger's kernel has the exact map ``sqrt(x)``. The chi2 and histogram
intersection kernels are approximated by sampling their spectrum at
``n`` points spaced ``L`` apart, giving ``2n + 1`` outputs per input entry.
Outputs are entry-major: all components of entry 0, then entry 1, ...
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "KINDS",
    "FeatureMapSpec",
    "BlockJacobian",
    "kappa",
    "map_scalar",
    "map_values",
    "map_histogram",
    "map_derivative_scalar",
    "map_derivative_values",
    "gamma",
    "jacobian",
]

KINDS = ("hellinger", "chi2", "intersection")


@dataclass(frozen=True)
class FeatureMapSpec:
    """Kernel kind plus sampling parameters of the approximate map.

    ``samples`` and ``period`` are ignored for ``hellinger``.
    """

    kind: str
    samples: int = 2
    period: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature map kind {self.kind!r}")
        if int(self.samples) != self.samples or self.samples < 0:
            raise ValueError("samples must be a non-negative integer")
        if not self.period > 0:
            raise ValueError("period must be positive")

    @property
    def width(self) -> int:
        """Output dimension per scalar input."""
        if self.kind == "hellinger":
            return 1
        return 2 * self.samples + 1

    def output_dim(self, num_entries: int) -> int:
        return num_entries * self.width


def kappa(kind: str, lam):
    """Spectral density of the scalar kernel, evaluated at ``lam``."""
    lam = np.asarray(lam, dtype=np.float64)
    if kind == "chi2":
        out = 1.0 / np.cosh(np.pi * lam)
    elif kind == "intersection":
        out = 2.0 / (np.pi * (1.0 + 4.0 * lam**2))
    elif kind == "hellinger":
        raise ValueError("hellinger has an exact map; no spectral form needed")
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    return out if out.ndim else float(out)


def _check_nonnegative(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite histogram entry")
    if np.any(x < 0):
        raise ValueError("negative histogram entry")
    return x


def map_values(spec: FeatureMapSpec, x) -> np.ndarray:
    """Map every entry of ``x``; returns shape ``x.shape + (width,)``.

    Zero entries map to the zero vector (the limit as x -> 0).
    """
    x = _check_nonnegative(x)
    out = np.zeros(x.shape + (spec.width,))
    pos = x > 0
    xp = x[pos]
    if spec.kind == "hellinger":
        out[pos, 0] = np.sqrt(xp)
        return out
    L = spec.period
    out[pos, 0] = np.sqrt(kappa(spec.kind, 0.0) * xp * L)
    logx = np.log(xp)
    for k in range(1, spec.samples + 1):
        lam = k * L
        amp = np.sqrt(2.0 * kappa(spec.kind, lam) * xp * L)
        out[pos, 2 * k - 1] = amp * np.cos(lam * logx)
        out[pos, 2 * k] = amp * np.sin(lam * logx)
    return out


def map_scalar(spec: FeatureMapSpec, x: float) -> np.ndarray:
    if np.ndim(x) != 0:
        raise ValueError("map_scalar expects a scalar")
    return map_values(spec, x)


def map_histogram(spec: FeatureMapSpec, h) -> np.ndarray:
    """Concatenate the per-entry maps of a histogram, entry-major."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1:
        raise ValueError("histogram must be one-dimensional")
    return map_values(spec, h).reshape(-1)


def gamma(spec: FeatureMapSpec, x):
    """``kappa(0) L / (2 psi_0(x)^2)``, which reduces to ``1 / (2x)``."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("derivative undefined at zero")
    if spec.kind == "hellinger":
        return 1.0 / (2.0 * x)
    psi0_sq = kappa(spec.kind, 0.0) * x * spec.period
    return kappa(spec.kind, 0.0) * spec.period / (2.0 * psi0_sq)


def map_derivative_values(spec: FeatureMapSpec, x) -> np.ndarray:
    """Elementwise derivative d psi_j / dx for strictly positive ``x``.

    Each cos/sin pair (c_k, s_k) at frequency lam_k = k L obeys
    dc_k/dx = (c_k - 2 lam_k s_k) gamma and ds_k/dx = (s_k + 2 lam_k c_k) gamma.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("derivative undefined at zero")
    psi = map_values(spec, x)
    g = gamma(spec, x)[..., None]
    if spec.kind == "hellinger":
        return psi * g
    out = psi * g
    L = spec.period
    for k in range(1, spec.samples + 1):
        c = psi[..., 2 * k - 1]
        s = psi[..., 2 * k]
        out[..., 2 * k - 1] -= 2 * k * L * s * g[..., 0]
        out[..., 2 * k] += 2 * k * L * c * g[..., 0]
    return out


def map_derivative_scalar(spec: FeatureMapSpec, x: float) -> np.ndarray:
    if np.ndim(x) != 0:
        raise ValueError("map_derivative_scalar expects a scalar")
    return map_derivative_values(spec, x)


class BlockJacobian:
    """Block-diagonal Jacobian of :func:`map_histogram`.

    ``blocks[m]`` holds d psi(h_m) / d h_m, the ``width`` output slots
    ``m*width .. (m+1)*width - 1``. Products cost O(M * width).
    """

    def __init__(self, blocks: np.ndarray):
        self.blocks = blocks

    @property
    def shape(self):
        m, w = self.blocks.shape
        return (m * w, m)

    def matvec(self, v) -> np.ndarray:
        """J v: directional derivative of the mapped vector along ``v``."""
        v = np.asarray(v, dtype=np.float64)
        return (self.blocks * v[:, None]).reshape(-1)

    def rmatvec(self, u) -> np.ndarray:
        """J^T u: pulls an error signal on mapped outputs back to entries."""
        u = np.asarray(u, dtype=np.float64).reshape(self.blocks.shape)
        return np.einsum("mw,mw->m", self.blocks, u)

    def toarray(self) -> np.ndarray:
        m, w = self.blocks.shape
        dense = np.zeros((m * w, m))
        for i in range(m):
            dense[i * w:(i + 1) * w, i] = self.blocks[i]
        return dense


def jacobian(spec: FeatureMapSpec, h) -> BlockJacobian:
    """Jacobian of the histogram map at ``h``; zero entries get zero columns."""
    h = _check_nonnegative(h)
    if h.ndim != 1:
        raise ValueError("histogram must be one-dimensional")
    blocks = np.zeros((h.size, spec.width))
    pos = h > 0
    if np.any(pos):
        blocks[pos] = map_derivative_values(spec, h[pos])
    return BlockJacobian(blocks)
