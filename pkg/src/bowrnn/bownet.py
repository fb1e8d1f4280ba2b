"""The recurrent bag-of-words network.

Layers, per channel: a softmax quantization layer ``softmax(W^T x_t + b)``,
then a recurrent sum with unit weights whose last step divides by ``T``
(so its final output is the histogram ``H``). The per-channel histograms go
through an optional explicit feature map, are concatenated, and feed a
softmax classifier ``softmax(W_out^T Psi(H) + b_out)``.

Because the recurrent weight is the identity, the error signal reaching the
recurrent layer is the same at every frame. :func:`gradient` uses that to
run in two streaming passes over the frames with a fixed-size workspace.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import featmap
from .codebook import Codebook, to_network
from .data import FeatureSequence
from .featmap import FeatureMapSpec

__all__ = [
    "BowNetwork",
    "Histogram",
    "GradientSet",
    "FrameBufferTracker",
    "FRAME_CHUNK",
    "init_network",
    "network_from_codebooks",
    "quantize",
    "encode",
    "encode_channels",
    "map_features",
    "forward",
    "predict",
    "loss",
    "gradient",
    "batch_gradient",
    "save_network",
    "load_network",
]

FRAME_CHUNK = 256
_STACK_FRAMES = 1 << 16
LOSS_FLOOR = 1e-300


@dataclass
class BowNetwork:
    """Parameters of the full network.

    ``quant`` holds one ``(W, b)`` pair per channel, ``W`` of shape (D_c, M).
    ``out_weights`` has shape (F, C) with ``F = channels * M * width`` where
    ``width`` is 1 without a feature map.
    """

    quant: list
    out_weights: np.ndarray
    out_bias: np.ndarray
    map_spec: FeatureMapSpec = None

    def __post_init__(self):
        self.quant = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64))
                      for W, b in self.quant]
        self.out_weights = np.asarray(self.out_weights, dtype=np.float64)
        self.out_bias = np.asarray(self.out_bias, dtype=np.float64)
        if not self.quant:
            raise ValueError("network needs at least one channel")
        m = self.quant[0][0].shape[1]
        for W, b in self.quant:
            if W.ndim != 2 or W.shape[1] != m or b.shape != (m,):
                raise ValueError("quantization layers must share M and match W/b shapes")
        if self.out_weights.shape != (self.feature_dim, self.out_bias.size):
            raise ValueError(f"output weights must be ({self.feature_dim}, C), "
                             f"got {self.out_weights.shape}")
        for p in self.params():
            if not np.all(np.isfinite(p)):
                raise ValueError("non-finite network parameter")

    @property
    def num_channels(self) -> int:
        return len(self.quant)

    @property
    def num_words(self) -> int:
        return self.quant[0][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.out_bias.size

    @property
    def dims(self) -> tuple:
        return tuple(W.shape[0] for W, _ in self.quant)

    @property
    def map_width(self) -> int:
        return 1 if self.map_spec is None else self.map_spec.width

    @property
    def feature_dim(self) -> int:
        return self.num_channels * self.num_words * self.map_width

    def params(self) -> list:
        """Parameter arrays in a fixed order: W_1, b_1, ..., W_out, b_out."""
        out = []
        for W, b in self.quant:
            out += [W, b]
        return out + [self.out_weights, self.out_bias]

    def with_params(self, params) -> "BowNetwork":
        k = self.num_channels
        quant = [(params[2 * i], params[2 * i + 1]) for i in range(k)]
        return BowNetwork(quant, params[2 * k], params[2 * k + 1], self.map_spec)

    def copy(self) -> "BowNetwork":
        return self.with_params([p.copy() for p in self.params()])


@dataclass(frozen=True)
class Histogram:
    values: np.ndarray
    channel: int = None

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass
class GradientSet:
    """Gradients mirroring :meth:`BowNetwork.params`."""

    dW: list
    db: list
    dW_out: np.ndarray
    db_out: np.ndarray

    def as_list(self) -> list:
        out = []
        for dW, db in zip(self.dW, self.db):
            out += [dW, db]
        return out + [self.dW_out, self.db_out]

    @classmethod
    def from_list(cls, arrays) -> "GradientSet":
        k = (len(arrays) - 2) // 2
        return cls([arrays[2 * i] for i in range(k)],
                   [arrays[2 * i + 1] for i in range(k)],
                   arrays[2 * k], arrays[2 * k + 1])


class FrameBufferTracker:
    """Counts workspace buffers that scale with frames, and their total size."""

    def __init__(self):
        self.count = 0
        self.elements = 0

    def alloc(self, shape):
        self.count += 1
        self.elements += int(np.prod(shape))
        return np.empty(shape)


def init_network(dims, num_words, num_classes, map_spec=None, rng=None) -> BowNetwork:
    """Random initialization for training from scratch.

    Quantization weights are uniform in +-1/sqrt(D_c), output weights in
    +-1/sqrt(F); biases start at zero.
    """
    rng = np.random.default_rng(rng)
    if isinstance(dims, int):
        dims = (dims,)
    quant = []
    for d in dims:
        r = 1.0 / np.sqrt(d)
        quant.append((rng.uniform(-r, r, size=(d, num_words)), np.zeros(num_words)))
    width = 1 if map_spec is None else map_spec.width
    f = len(dims) * num_words * width
    r = 1.0 / np.sqrt(f)
    return BowNetwork(quant, rng.uniform(-r, r, size=(f, num_classes)),
                      np.zeros(num_classes), map_spec)


def network_from_codebooks(codebooks, num_classes, map_spec=None,
                           out_weights=None, out_bias=None, rng=None) -> BowNetwork:
    """Install codebooks as quantization layers; the classifier is random
    unless given."""
    if isinstance(codebooks, Codebook):
        codebooks = [codebooks]
    quant = [to_network(cb) for cb in codebooks]
    if out_weights is None:
        template = init_network(tuple(W.shape[0] for W, _ in quant),
                                quant[0][0].shape[1], num_classes, map_spec, rng)
        out_weights, out_bias = template.out_weights, template.out_bias
    elif out_bias is None:
        out_bias = np.zeros(num_classes)
    return BowNetwork(quant, out_weights, out_bias, map_spec)


def _as_sequence(seq) -> FeatureSequence:
    if isinstance(seq, FeatureSequence):
        return seq
    if isinstance(seq, (list, tuple)):
        return FeatureSequence(tuple(seq))
    return FeatureSequence((seq,))


def _check_channels(net, seq):
    if seq.num_channels != net.num_channels:
        raise ValueError(f"sequence has {seq.num_channels} channel(s), network "
                         f"expects {net.num_channels}")
    if seq.dims != net.dims:
        raise ValueError(f"descriptor dimensions {seq.dims} != network {net.dims}")


def _softmax_inplace(z):
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _quantize_chunk(X, W, b, out):
    np.matmul(X, W, out=out)
    out += b
    return _softmax_inplace(out)


def quantize(net: BowNetwork, x, channel=0) -> np.ndarray:
    """Posterior over visual words for one descriptor."""
    W, b = net.quant[channel]
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (W.shape[0],):
        raise ValueError(f"descriptor must have dimension {W.shape[0]}")
    return _softmax_inplace(x @ W + b)


def _accumulate(X, W, b, assignment, buf):
    """Sum of per-frame assignments, streamed in fixed-size chunks."""
    m = W.shape[1]
    acc = np.zeros(m)
    for start in range(0, X.shape[0], FRAME_CHUNK):
        Xc = X[start:start + FRAME_CHUNK]
        out = buf[:Xc.shape[0]]
        if assignment == "soft":
            acc += _quantize_chunk(Xc, W, b, out).sum(axis=0)
        else:
            np.matmul(Xc, W, out=out)
            out += b
            acc += np.bincount(np.argmax(out, axis=1), minlength=m)
    return acc


def encode_channels(net: BowNetwork, seq, assignment="soft") -> list:
    """Histogram of every channel: the mean per-frame word assignment."""
    if assignment not in ("soft", "hard"):
        raise ValueError("assignment must be 'soft' or 'hard'")
    seq = _as_sequence(seq)
    _check_channels(net, seq)
    t = seq.length
    buf = np.empty((min(t, FRAME_CHUNK), net.num_words))
    hists = []
    for c, (X, (W, b)) in enumerate(zip(seq.channels, net.quant)):
        hists.append(Histogram(_accumulate(X, W, b, assignment, buf) / t, c))
    return hists


def encode(net: BowNetwork, seq, assignment="soft") -> Histogram:
    if net.num_channels != 1:
        raise ValueError("multi-channel network; use encode_channels")
    return encode_channels(net, seq, assignment)[0]


def map_features(net: BowNetwork, hists) -> np.ndarray:
    """Mapped, concatenated per-channel histograms (the classifier input)."""
    parts = []
    for h in hists:
        h = np.asarray(h, dtype=np.float64)
        parts.append(h if net.map_spec is None else featmap.map_histogram(net.map_spec, h))
    return np.concatenate(parts)


def _output(net, phi):
    return _softmax_inplace(phi @ net.out_weights + net.out_bias)


def forward(net: BowNetwork, seq, assignment="soft") -> np.ndarray:
    """Class posterior for one sequence."""
    return _output(net, map_features(net, encode_channels(net, seq, assignment)))


def predict(net: BowNetwork, seq, assignment="soft") -> int:
    """1-based label with the highest posterior."""
    return int(np.argmax(forward(net, seq, assignment))) + 1


def _check_label(net, label):
    if int(label) != label or not 1 <= label <= net.num_classes:
        raise ValueError(f"label {label} outside 1..{net.num_classes}")
    return int(label)


def loss(net: BowNetwork, seq, label) -> float:
    """Cross-entropy of the true (1-based) label."""
    label = _check_label(net, label)
    p = forward(net, seq)
    return float(-np.log(max(p[label - 1], LOSS_FLOOR)))


def _gradient(net, seq, label, tracker=None):
    label = _check_label(net, label)
    seq = _as_sequence(seq)
    _check_channels(net, seq)
    t = seq.length
    m = net.num_words
    tracker = tracker or FrameBufferTracker()
    # the only frame-indexed storage: fixed-size chunk buffers
    prob = tracker.alloc((FRAME_CHUNK, m))
    err = tracker.alloc((FRAME_CHUNK, m))
    dots = tracker.alloc((FRAME_CHUNK, 1))

    # forward pass: the recurrent layer only needs the running sum
    hists = [_accumulate(X, W, b, "soft", prob) / t
             for X, (W, b) in zip(seq.channels, net.quant)]
    phi = map_features(net, hists)
    y_out = _output(net, phi)
    lval = float(-np.log(max(y_out[label - 1], LOSS_FLOOR)))

    # backward pass
    e_out = y_out.copy()
    e_out[label - 1] -= 1.0
    e_map = net.out_weights @ e_out
    block = m * net.map_width
    dW, db = [], []
    for c, (X, (W, b)) in enumerate(zip(seq.channels, net.quant)):
        e_c = e_map[c * block:(c + 1) * block]
        if net.map_spec is not None:
            e_c = featmap.jacobian(net.map_spec, hists[c]).rmatvec(e_c)
        # sigma_T scales by 1/T; identity recurrence copies it to every frame
        e_rec = e_c / t
        gW = np.zeros_like(W)
        gb = np.zeros_like(b)
        for start in range(0, t, FRAME_CHUNK):
            Xc = X[start:start + FRAME_CHUNK]
            n = Xc.shape[0]
            p = _quantize_chunk(Xc, W, b, prob[:n])
            d = dots[:n]
            np.matmul(p, e_rec[:, None], out=d)
            e = err[:n]
            np.subtract(e_rec, d, out=e)
            e *= p
            gW += Xc.T @ e
            gb += e.sum(axis=0)
        dW.append(gW)
        db.append(gb)
    grads = GradientSet(dW, db, np.outer(phi, e_out), e_out)
    return grads, lval, y_out


def gradient(net: BowNetwork, seq, label, tracker=None):
    """Exact cross-entropy gradient for one labelled sequence.

    Returns ``(GradientSet, loss)``. Working memory does not grow with the
    sequence length; pass a :class:`FrameBufferTracker` to inspect it.
    """
    grads, lval, _ = _gradient(net, seq, label, tracker)
    return grads, lval


def _workers(workers):
    if workers is None:
        workers = int(os.environ.get("BOWRNN_THREADS", "1") or 1)
    return max(1, workers)


def _stacked_gradient(net, batch):
    """Per-sequence gradients summed over a batch, frames of many sequences
    processed together. Same quantities as :func:`_gradient`."""
    m = net.num_words
    width = net.map_width
    k = net.num_channels
    total = [np.zeros_like(p) for p in net.params()]
    lsum = 0.0
    posts = []
    start = 0
    while start < len(batch):
        # group whole sequences up to a frame budget
        stop, frames = start, 0
        while stop < len(batch) and (stop == start or
                                     frames + batch[stop][0].length <= _STACK_FRAMES):
            frames += batch[stop][0].length
            stop += 1
        group = batch[start:stop]
        start = stop
        lengths = np.array([s.length for s, _ in group])
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        seg = np.repeat(np.arange(len(group)), lengths)
        labels = np.array([y for _, y in group])
        Xs, Ps, hists = [], [], []
        for c in range(k):
            W, b = net.quant[c]
            X = np.concatenate([s.channels[c] for s, _ in group])
            P = X @ W + b
            _softmax_inplace(P)
            Xs.append(X)
            Ps.append(P)
            hists.append(np.add.reduceat(P, offsets, axis=0) / lengths[:, None])
        if net.map_spec is None:
            phi = np.concatenate(hists, axis=1)
        else:
            phi = np.concatenate([featmap.map_values(net.map_spec, h).reshape(len(group), -1)
                                  for h in hists], axis=1)
        y_out = phi @ net.out_weights + net.out_bias
        _softmax_inplace(y_out)
        rows = np.arange(len(group))
        lsum += float(np.sum(-np.log(np.maximum(y_out[rows, labels - 1], LOSS_FLOOR))))
        posts.append(y_out)
        e_out = y_out.copy()
        e_out[rows, labels - 1] -= 1.0
        e_map = e_out @ net.out_weights.T
        block = m * width
        for c in range(k):
            e_c = e_map[:, c * block:(c + 1) * block]
            if net.map_spec is not None:
                h = hists[c]
                deriv = np.zeros(h.shape + (width,))
                pos = h > 0
                deriv[pos] = featmap.map_derivative_values(net.map_spec, h[pos])
                e_c = np.einsum("nmw,nmw->nm", deriv, e_c.reshape(h.shape + (width,)))
            e_rec = e_c / lengths[:, None]
            P = Ps[c]
            E = e_rec[seg]
            E -= np.einsum("tm,tm->t", P, E)[:, None]
            E *= P
            total[2 * c] += Xs[c].T @ E
            total[2 * c + 1] += E.sum(axis=0)
        total[2 * k] += phi.T @ e_out
        total[2 * k + 1] += e_out.sum(axis=0)
    return total, lsum, np.concatenate(posts)


def batch_gradient(net: BowNetwork, batch, workers=None, return_posteriors=False,
                   method="stacked"):
    """Mean gradient and loss over ``(sequence, label)`` pairs.

    ``method="stacked"`` evaluates groups of sequences at once;
    ``"sequential"`` runs :func:`gradient` per sequence (on up to ``workers``
    threads, default from ``BOWRNN_THREADS``) and sums in batch order.
    """
    batch = [(_as_sequence(s), _check_label(net, y)) for s, y in batch]
    if not batch:
        raise ValueError("empty batch")
    for s, _ in batch:
        _check_channels(net, s)
    n = len(batch)
    if method == "stacked":
        total, lsum, posts = _stacked_gradient(net, batch)
    elif method == "sequential":
        workers = _workers(workers)
        if workers == 1:
            results = [_gradient(net, s, y) for s, y in batch]
        else:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(lambda item: _gradient(net, *item), batch))
        total = [np.zeros_like(p) for p in net.params()]
        lsum = 0.0
        for g, lval, _ in results:
            for acc, gi in zip(total, g.as_list()):
                acc += gi
            lsum += lval
        posts = np.array([r[2] for r in results])
    else:
        raise ValueError(f"unknown method {method!r}")
    grads = GradientSet.from_list([a / n for a in total])
    if return_posteriors:
        return grads, lsum / n, posts
    return grads, lsum / n


def _fmt(values) -> str:
    return " ".join(f"{v:.17g}" for v in values)


def save_network(net: BowNetwork, path) -> None:
    dims = net.dims
    d_field = str(dims[0]) if len(set(dims)) == 1 else ",".join(map(str, dims))
    spec = net.map_spec
    kind = "none" if spec is None else spec.kind
    n = 0 if spec is None else spec.samples
    L = 0.0 if spec is None else spec.period
    with open(path, "w") as f:
        f.write(f"BOWNET1 {d_field} {net.num_words} {net.num_classes} "
                f"{net.num_channels} {kind} {n} {L:.17g}\n")
        for W, b in net.quant:
            for row in W:
                f.write(_fmt(row) + "\n")
            f.write(_fmt(b) + "\n")
        for row in net.out_weights:
            f.write(_fmt(row) + "\n")
        f.write(_fmt(net.out_bias) + "\n")


def load_network(path) -> BowNetwork:
    with open(path) as f:
        lines = f.read().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 8 or head[0] != "BOWNET1":
        raise ValueError(f"{path}: not a BOWNET1 model")
    m, c, k = int(head[2]), int(head[3]), int(head[4])
    dims = [int(v) for v in head[1].split(",")]
    if len(dims) == 1:
        dims = dims * k
    if len(dims) != k:
        raise ValueError(f"{path}: dimension list does not match channel count")
    kind, n, L = head[5], int(head[6]), float(head[7])
    spec = None if kind == "none" else FeatureMapSpec(kind, n, L)
    pos = 1

    def block(rows, cols):
        nonlocal pos
        chunk = lines[pos:pos + rows]
        if len(chunk) != rows:
            raise ValueError(f"{path}: truncated model")
        pos += rows
        arr = np.array([ln.split() for ln in chunk], dtype=np.float64)
        if arr.shape != (rows, cols):
            raise ValueError(f"{path}: malformed block at line {pos - rows + 1}")
        return arr

    quant = []
    for d in dims:
        W = block(d, m)
        quant.append((W, block(1, m)[0]))
    width = 1 if spec is None else spec.width
    Wo = block(k * m * width, c)
    bo = block(1, c)[0]
    return BowNetwork(quant, Wo, bo, spec)
