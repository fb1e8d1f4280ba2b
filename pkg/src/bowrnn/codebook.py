"""Visual vocabularies: kMeans fitting, word posteriors, network conversion.

A codebook with words ``v_m`` and prior ``p(v_m)`` defines the posterior

    p(v_m | x) ∝ p(v_m) exp(-||x - v_m||^2 / 2),

which is exactly a softmax layer with weights ``W = (v_1 .. v_M)`` and bias
``b_m = -v_m.v_m / 2 + log p(v_m)``. :func:`to_network` and
:func:`from_network` convert between the two.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "Codebook",
    "KMeansConfig",
    "KMeansResult",
    "kmeans_fit",
    "kmeans_run",
    "posterior",
    "posteriors",
    "hard_assign",
    "to_network",
    "from_network",
    "save_codebook",
    "load_codebook",
]

_CHUNK = 4096


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Codebook:
    words: np.ndarray
    prior: np.ndarray = None

    def __post_init__(self):
        words = np.asarray(self.words, dtype=np.float64)
        if words.ndim == 1:
            words = words[:, None]
        if words.ndim != 2 or words.shape[0] < 1 or words.shape[1] < 1:
            raise ValueError("words must be a non-empty (M, D) array")
        if not np.all(np.isfinite(words)):
            raise ValueError("non-finite visual word")
        m = words.shape[0]
        if self.prior is None:
            prior = np.full(m, 1.0 / m)
        else:
            prior = np.asarray(self.prior, dtype=np.float64)
            if prior.shape != (m,):
                raise ValueError(f"prior must have {m} entries")
            if np.any(prior < 0) or not np.all(np.isfinite(prior)):
                raise ValueError("prior entries must be finite and non-negative")
            if abs(prior.sum() - 1.0) > 1e-12:
                raise ValueError("prior must sum to 1")
        object.__setattr__(self, "words", _frozen(words))
        object.__setattr__(self, "prior", _frozen(prior))

    @property
    def size(self) -> int:
        return self.words.shape[0]

    @property
    def dim(self) -> int:
        return self.words.shape[1]

    def with_prior(self, prior) -> "Codebook":
        return Codebook(self.words, prior)


@dataclass(frozen=True)
class KMeansConfig:
    num_words: int
    restarts: int = 8
    max_iterations: int = 100
    tolerance: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.num_words < 1:
            raise ValueError("num_words must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be non-negative")


@dataclass
class KMeansResult:
    """One Lloyd run: centers, final SSE and the per-iteration SSE trace."""

    centers: np.ndarray
    sse: float
    history: list = field(default_factory=list)
    iterations: int = 0


def _sq_dists(data, centers):
    """Exact squared distances, computed in row chunks."""
    out = np.empty((data.shape[0], centers.shape[0]))
    for start in range(0, data.shape[0], _CHUNK):
        diff = data[start:start + _CHUNK, None, :] - centers[None, :, :]
        out[start:start + _CHUNK] = np.einsum("nmd,nmd->nm", diff, diff)
    return out


def _assign(data, centers):
    d2 = _sq_dists(data, centers)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(data.shape[0]), labels]


def _kmeanspp(data, k, rng):
    n = data.shape[0]
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    closest = _sq_dists(data, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining mass sits on chosen centers; pick any unused point
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total))
            idx = min(idx, n - 1)
        centers[i] = data[idx]
        closest = np.minimum(closest, _sq_dists(data, centers[i:i + 1])[:, 0])
    return centers


def kmeans_run(data, num_words, rng, max_iterations=100, tolerance=1e-6):
    """A single k-means++ seeded Lloyd run."""
    data = np.asarray(data, dtype=np.float64)
    centers = _kmeanspp(data, num_words, rng)
    labels, d2 = _assign(data, centers)
    sse = float(d2.sum())
    history = [sse]
    it = 0
    for it in range(1, max_iterations + 1):
        counts = np.bincount(labels, minlength=num_words)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, data)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for m in np.flatnonzero(~nonempty):
            # reseed with the point worst served by its current center
            far = int(np.argmax(d2))
            centers[m] = data[far]
            d2[far] = 0.0
        labels, d2 = _assign(data, centers)
        new_sse = float(d2.sum())
        history.append(new_sse)
        converged = sse == 0 or (sse - new_sse) / sse < tolerance
        sse = new_sse
        if converged:
            break
    return KMeansResult(centers=centers, sse=sse, history=history, iterations=it)


def kmeans_fit(data, config: KMeansConfig, return_runs=False):
    """Multi-restart kMeans; keeps the run with the lowest final SSE.

    Parameters
    ----------
    data : array_like, shape (N, D)
        Descriptor vectors.
    config : KMeansConfig
    return_runs : bool
        Also return the list of :class:`KMeansResult` for every restart.

    Returns
    -------
    Codebook
        Words of the best restart with a uniform prior.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("data must be a non-empty (N, D) array")
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite descriptor")
    distinct = np.unique(data, axis=0).shape[0]
    if distinct < config.num_words:
        raise ValueError(
            f"insufficient data: {distinct} distinct points for "
            f"{config.num_words} words")
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    runs = []
    for r, ss in enumerate(seeds):
        run = kmeans_run(data, config.num_words, np.random.default_rng(ss),
                         config.max_iterations, config.tolerance)
        log.debug("restart %d: sse %.6g after %d iterations",
                  r, run.sse, run.iterations)
        runs.append(run)
    best = min(range(len(runs)), key=lambda i: runs[i].sse)
    cb = Codebook(runs[best].centers)
    if return_runs:
        return cb, runs
    return cb


def _check_input(cb, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cb.dim:
        raise ValueError(f"descriptor dimension {x.shape[-1]} != codebook "
                         f"dimension {cb.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite descriptor")
    return x


def posteriors(cb: Codebook, X, use_prior=False) -> np.ndarray:
    """Row-wise word posteriors for a batch ``X`` of shape (N, D)."""
    X = np.atleast_2d(_check_input(cb, X))
    scores = -0.5 * _sq_dists(X, cb.words)
    if use_prior:
        with np.errstate(divide="ignore"):
            scores = scores + np.log(cb.prior)
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=1, keepdims=True)
    return p


def posterior(cb: Codebook, x, use_prior=False) -> np.ndarray:
    x = _check_input(cb, x)
    if x.ndim != 1:
        raise ValueError("posterior expects a single descriptor")
    return posteriors(cb, x[None, :], use_prior)[0]


def hard_assign(cb: Codebook, x, use_prior=False) -> np.ndarray:
    """Unit vector at the most probable word; ties go to the lowest index."""
    p = posterior(cb, x, use_prior)
    out = np.zeros_like(p)
    out[int(np.argmax(p))] = 1.0
    return out


def to_network(cb: Codebook):
    """Quantization-layer parameters ``(W, b)`` reproducing the posterior.

    ``W`` has shape (D, M). The prior is folded into the bias as
    ``log p(v_m)``; zero prior entries are rejected.
    """
    if np.any(cb.prior <= 0):
        raise ValueError("degenerate prior: zero entries have no log")
    W = cb.words.T.copy()
    b = -0.5 * np.einsum("md,md->m", cb.words, cb.words) + np.log(cb.prior)
    return W, b


def from_network(W, b) -> Codebook:
    """Recover words and the implied prior from quantization parameters."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[1],):
        raise ValueError("W must be (D, M) and b must have M entries")
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite network parameters")
    words = W.T
    s = b + 0.5 * np.einsum("md,md->m", words, words)
    s -= s.max()
    prior = np.maximum(np.exp(s), np.finfo(np.float64).tiny)
    prior /= prior.sum()
    return Codebook(words, prior)


def _fmt(values) -> str:
    return " ".join(f"{v:.17g}" for v in values)


def save_codebook(cb: Codebook, path) -> None:
    with open(path, "w") as f:
        f.write(f"BOWCB1 {cb.size} {cb.dim}\n")
        f.write(_fmt(cb.prior) + "\n")
        for row in cb.words:
            f.write(_fmt(row) + "\n")


def load_codebook(path) -> Codebook:
    with open(path) as f:
        lines = f.read().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[0] != "BOWCB1":
        raise ValueError(f"{path}: not a BOWCB1 codebook")
    m, d = int(head[1]), int(head[2])
    if len(lines) < m + 2:
        raise ValueError(f"{path}: truncated codebook")
    prior = np.array(lines[1].split(), dtype=np.float64)
    words = np.array([ln.split() for ln in lines[2:m + 2]], dtype=np.float64)
    if prior.shape != (m,) or words.shape != (m, d):
        raise ValueError(f"{path}: codebook shape does not match header")
    if abs(prior.sum() - 1.0) > 1e-12:
        # tolerate rounding in hand-edited files
        prior = prior / prior.sum()
    return Codebook(words, prior)
