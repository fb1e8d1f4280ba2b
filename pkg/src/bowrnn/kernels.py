"""Exact histogram kernels, Gram matrices and kernel-expansion decisions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import featmap
from .featmap import FeatureMapSpec

__all__ = [
    "ADDITIVE_KINDS",
    "MultichannelKernelParams",
    "SvmExpansion",
    "scalar_kernel",
    "additive_kernel",
    "chi2_distance",
    "multichannel_rbf_chi2",
    "estimate_channel_means",
    "gram_matrix",
    "save_gram",
    "svm_decision",
    "svm_weight_vector",
    "svm_decision_mapped",
    "save_expansions",
    "load_expansions",
]

ADDITIVE_KINDS = ("hellinger", "chi2", "intersection")


def _pair(h1, h2):
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape:
        raise ValueError(f"histogram shapes differ: {h1.shape} vs {h2.shape}")
    if np.any(h1 < 0) or np.any(h2 < 0):
        raise ValueError("negative histogram entry")
    return h1, h2


def scalar_kernel(kind, a, b):
    """Elementwise k(a, b) for non-negative inputs."""
    a, b = _pair(a, b)
    if kind == "hellinger":
        return np.sqrt(a * b)
    if kind == "intersection":
        return np.minimum(a, b)
    if kind == "chi2":
        s = a + b
        out = np.zeros(np.broadcast(a, b).shape)
        nz = s > 0
        out[nz] = (2.0 * a * b)[nz] / s[nz]
        return out
    raise ValueError(f"unknown additive kernel {kind!r}")


def additive_kernel(kind, h1, h2) -> float:
    return float(np.sum(scalar_kernel(kind, h1, h2)))


def chi2_distance(h1, h2) -> float:
    """0.5 * sum (h1 - h2)^2 / (h1 + h2), skipping 0/0 terms."""
    h1, h2 = _pair(h1, h2)
    s = h1 + h2
    nz = s > 0
    return float(0.5 * np.sum((h1[nz] - h2[nz]) ** 2 / s[nz]))


@dataclass(frozen=True)
class MultichannelKernelParams:
    channel_means: tuple

    def __post_init__(self):
        means = tuple(float(a) for a in self.channel_means)
        if not means:
            raise ValueError("need at least one channel")
        if any(not a > 0 for a in means):
            raise ValueError("channel means must be positive")
        object.__setattr__(self, "channel_means", means)

    @property
    def num_channels(self) -> int:
        return len(self.channel_means)


def multichannel_rbf_chi2(a, b, params: MultichannelKernelParams) -> float:
    """exp(-(1/K) sum_c D(a_c, b_c) / A_c) over K channels."""
    if len(a) != params.num_channels or len(b) != params.num_channels:
        raise ValueError("channel count does not match kernel parameters")
    total = sum(chi2_distance(x, y) / A for x, y, A in zip(a, b, params.channel_means))
    return float(np.exp(-total / params.num_channels))


def estimate_channel_means(channels) -> MultichannelKernelParams:
    """Mean chi2 distance over all unordered pairs, per channel.

    ``channels[c]`` is the list of training histograms of channel ``c``.
    """
    means = []
    for c, hists in enumerate(channels):
        hists = [np.asarray(h, dtype=np.float64) for h in hists]
        n = len(hists)
        if n < 2:
            raise ValueError(f"channel {c}: need at least 2 histograms")
        total = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                total += chi2_distance(hists[i], hists[j])
        mean = total / (n * (n - 1) / 2)
        if mean <= 0:
            raise ValueError(f"degenerate channel {c}: all histograms identical")
        means.append(mean)
    return MultichannelKernelParams(tuple(means))


def _kernel_fn(kind, params):
    if kind == "rbf-chi2":
        if params is None:
            raise ValueError("rbf-chi2 needs channel means")
        return lambda x, y: multichannel_rbf_chi2(x, y, params)
    if kind not in ADDITIVE_KINDS:
        raise ValueError(f"unknown kernel {kind!r}")
    return lambda x, y: additive_kernel(kind, x, y)


def gram_matrix(kind, histograms, params=None) -> np.ndarray:
    """Kernel matrix, each unordered pair evaluated once.

    For ``rbf-chi2`` every item is a sequence of per-channel histograms.
    """
    if len(histograms) == 0:
        raise ValueError("no histograms")
    k = _kernel_fn(kind, params)
    n = len(histograms)
    G = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            G[i, j] = G[j, i] = k(histograms[i], histograms[j])
    return G


def save_gram(G, kind, path) -> None:
    with open(path, "w") as f:
        f.write(f"GRAM1 {G.shape[0]} {kind}\n")
        for row in G:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


@dataclass(frozen=True)
class SvmExpansion:
    """A trained two-class kernel machine in dual form."""

    support: np.ndarray  # (I, M)
    alphas: np.ndarray
    labels: np.ndarray
    bias: float
    kind: str

    def __post_init__(self):
        support = np.atleast_2d(np.asarray(self.support, dtype=np.float64))
        alphas = np.asarray(self.alphas, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.float64)
        if support.shape[0] < 1:
            raise ValueError("need at least one support vector")
        if alphas.shape != (support.shape[0],) or labels.shape != alphas.shape:
            raise ValueError("one coefficient and label per support vector")
        if not np.all(np.abs(labels) == 1):
            raise ValueError("labels must be -1 or +1")
        if self.kind not in ADDITIVE_KINDS:
            raise ValueError(f"unsupported kernel {self.kind!r}")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "labels", labels)


def svm_decision(exp: SvmExpansion, h) -> float:
    """sum_i alpha_i y_i K(h_i, h) + bias."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != exp.support.shape[1:]:
        raise ValueError("histogram dimension does not match support vectors")
    ks = np.array([additive_kernel(exp.kind, s, h) for s in exp.support])
    return float(np.dot(exp.alphas * exp.labels, ks) + exp.bias)


def _spec_for(kind, spec):
    if spec is not None:
        return spec
    return FeatureMapSpec(kind)


def svm_weight_vector(exp: SvmExpansion, spec: FeatureMapSpec = None) -> np.ndarray:
    """w = sum_i alpha_i y_i psi(h_i) in the explicit feature space."""
    spec = _spec_for(exp.kind, spec)
    mapped = np.array([featmap.map_histogram(spec, s) for s in exp.support])
    return (exp.alphas * exp.labels) @ mapped


def svm_decision_mapped(w, bias, spec: FeatureMapSpec, h) -> float:
    """<w, psi(h)> + bias."""
    phi = featmap.map_histogram(spec, h)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != phi.shape:
        raise ValueError("weight vector does not match mapped histogram")
    return float(np.dot(w, phi) + bias)


def save_expansions(expansions, path) -> None:
    """One-vs-rest machines sharing a support set, as ``BOWSVM1`` text.

    Layout: header ``BOWSVM1 <C> <I> <M> <kind>``, the I support
    histograms, then one line per class: ``<bias> <alpha_i * y_i ...>``.
    """
    first = expansions[0]
    for e in expansions:
        if e.kind != first.kind or not np.array_equal(e.support, first.support):
            raise ValueError("expansions must share kernel and support set")
    i, m = first.support.shape
    with open(path, "w") as f:
        f.write(f"BOWSVM1 {len(expansions)} {i} {m} {first.kind}\n")
        for row in first.support:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        for e in expansions:
            coef = e.alphas * e.labels
            f.write(" ".join(f"{v:.17g}" for v in [e.bias, *coef]) + "\n")


def load_expansions(path) -> list:
    with open(path) as f:
        lines = f.read().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 5 or head[0] != "BOWSVM1":
        raise ValueError(f"{path}: not a BOWSVM1 file")
    c, i, m, kind = int(head[1]), int(head[2]), int(head[3]), head[4]
    if len(lines) < 1 + i + c:
        raise ValueError(f"{path}: truncated expansion file")
    support = np.array([ln.split() for ln in lines[1:1 + i]], dtype=np.float64)
    if support.shape != (i, m):
        raise ValueError(f"{path}: support block does not match header")
    out = []
    for ln in lines[1 + i:1 + i + c]:
        vals = np.array(ln.split(), dtype=np.float64)
        if vals.size != i + 1:
            raise ValueError(f"{path}: class line needs bias and {i} coefficients")
        coef = vals[1:]
        labels = np.where(coef < 0, -1.0, 1.0)
        out.append(SvmExpansion(support, np.abs(coef), labels, float(vals[0]), kind))
    return out
