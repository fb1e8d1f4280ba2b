import tracemalloc

import numpy as np
import pytest

import oracles
from bowrnn import bownet, codebook
from bowrnn.bownet import BowNetwork, FrameBufferTracker
from bowrnn.codebook import Codebook
from bowrnn.data import FeatureSequence
from bowrnn.featmap import FeatureMapSpec


def random_net(rng, dims=(3,), m=4, c=2, spec=None, scale=1.0):
    net = bownet.init_network(dims, m, c, spec, rng)
    params = [p + scale * rng.normal(size=p.shape) for p in net.params()]
    return net.with_params(params)


def random_seq(rng, t, dims=(3,)):
    return FeatureSequence(tuple(rng.normal(size=(t, d)) for d in dims))


def unrolled(net, seq, label):
    spec = net.map_spec
    kind = None if spec is None else spec.kind
    n = 0 if spec is None else spec.samples
    L = 0.5 if spec is None else spec.period
    return oracles.bptt_unrolled(net.quant, net.out_weights, net.out_bias, kind, n, L,
                                 list(seq.channels), label)


def test_quantize_examples():
    net = BowNetwork([(np.zeros((2, 5)), np.zeros(5))], np.zeros((5, 2)), np.zeros(2))
    np.testing.assert_allclose(bownet.quantize(net, [1.0, -3.0]), 0.2, atol=1e-15)
    net2 = BowNetwork([(np.zeros((1, 2)), np.array([0.0, -2.0]))], np.zeros((2, 2)), np.zeros(2))
    np.testing.assert_allclose(bownet.quantize(net2, [4.0]), [0.8808, 0.1192], atol=1e-4)


def test_quantize_matches_codebook_posterior():
    rng = np.random.default_rng(0)
    cb = Codebook(rng.normal(size=(7, 3)), rng.dirichlet(np.ones(7)))
    net = bownet.network_from_codebooks(cb, 2)
    for x in rng.normal(size=(20, 3)):
        np.testing.assert_allclose(bownet.quantize(net, x),
                                   codebook.posterior(cb, x, use_prior=True), atol=1e-12)


def test_encode_examples():
    cb = Codebook(np.array([[0.0], [2.0], [5.0]]))
    net = bownet.network_from_codebooks(cb, 2)
    seq = FeatureSequence((np.full((6, 1), 1.8),))
    np.testing.assert_array_equal(bownet.encode(net, seq, "hard").values, [0, 1, 0])
    # two frames whose posteriors are (0.9, 0.1) and (0.5, 0.5)
    W = np.array([[1.0, 0.0]])
    net2 = BowNetwork([(W, np.zeros(2))], np.zeros((2, 2)), np.zeros(2))
    x1 = np.log(9.0)
    seq2 = FeatureSequence((np.array([[x1], [0.0]]),))
    np.testing.assert_allclose(bownet.encode(net2, seq2).values, [0.7, 0.3], atol=1e-15)
    with pytest.raises(ValueError, match="empty sequence"):
        bownet.encode(net2, FeatureSequence((np.zeros((0, 1)),)))


def test_encode_permutation_and_normalization():
    rng = np.random.default_rng(1)
    net = random_net(rng, m=6)
    seq = random_seq(rng, 40)
    perm = seq.take(rng.permutation(40))
    for a in ("soft", "hard"):
        h = bownet.encode(net, seq, a).values
        assert h.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(bownet.encode(net, perm, a).values, h, atol=1e-15)


def test_forward_examples():
    rng = np.random.default_rng(2)
    net = random_net(rng, c=3)
    zero = net.with_params(net.params()[:2] + [np.zeros((4, 3)), np.zeros(3)])
    np.testing.assert_allclose(bownet.forward(zero, random_seq(rng, 5)), 1 / 3, atol=1e-15)
    # C=2: class 2 wins exactly when (w2 - w1) . H > 0
    for _ in range(20):
        seq = random_seq(rng, 7)
        h = bownet.encode(net, seq).values
        w = rng.normal(size=4)
        lin = net.with_params(net.params()[:2] + [np.column_stack([np.zeros(4), w]), np.zeros(2)])
        assert bownet.predict(lin, seq) == (2 if w @ h > 0 else 1)


@pytest.mark.parametrize("spec", [None, FeatureMapSpec("hellinger"), FeatureMapSpec("chi2"),
                                  FeatureMapSpec("intersection")],
                         ids=["none", "hellinger", "chi2", "intersection"])
def test_forward_matches_straight_line(spec):
    rng = np.random.default_rng(3)
    net = random_net(rng, dims=(2, 3), m=4, c=3, spec=spec)
    seq = random_seq(rng, 3, dims=(2, 3))
    kind = None if spec is None else spec.kind
    ref = oracles.straight_line_forward(net.quant, net.out_weights, net.out_bias, kind,
                                        2, 0.5, list(seq.channels))
    np.testing.assert_allclose(bownet.forward(net, seq), ref, atol=1e-12)


def test_loss_examples():
    rng = np.random.default_rng(4)
    net = random_net(rng, c=4)
    uniform = net.with_params(net.params()[:2] + [np.zeros((4, 4)), np.zeros(4)])
    assert bownet.loss(uniform, random_seq(rng, 3), 2) == pytest.approx(np.log(4), abs=1e-12)
    sure = net.with_params(net.params()[:2] + [np.zeros((4, 4)), np.array([0, 0, 800.0, 0])])
    assert bownet.loss(sure, random_seq(rng, 3), 3) == 0.0
    for _ in range(10):
        seq = random_seq(rng, 5)
        _, ref, _ = unrolled(net, seq, 1)
        assert bownet.loss(net, seq, 1) == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        bownet.loss(net, seq, 0)
    with pytest.raises(ValueError):
        bownet.loss(net, seq, 5)


def test_gradient_frozen_quantization_matches_softmax_regression():
    rng = np.random.default_rng(5)
    net = random_net(rng, m=4, c=3)
    seq = random_seq(rng, 6)
    g, _ = bownet.gradient(net, seq, 2)
    h = bownet.encode(net, seq).values
    p = bownet.forward(net, seq)
    e = p - np.eye(3)[1]
    np.testing.assert_allclose(g.dW_out, np.outer(h, e), atol=1e-14)
    np.testing.assert_allclose(g.db_out, e, atol=1e-14)


@pytest.mark.parametrize("spec", [None, FeatureMapSpec("chi2"), FeatureMapSpec("hellinger")],
                         ids=["none", "chi2", "hellinger"])
def test_gradient_finite_differences(spec):
    rng = np.random.default_rng(6)
    net = random_net(rng, dims=(3,), m=4, c=2, spec=spec)
    seq = random_seq(rng, 5)
    g, _ = bownet.gradient(net, seq, 2)
    fd = oracles.central_differences(lambda ps: bownet.loss(net.with_params(ps), seq, 2),
                                     [p.copy() for p in net.params()])
    for a, b in zip(g.as_list(), fd):
        assert oracles.relative_error(a, b) <= 1e-5


def test_gradient_matches_unrolled_bptt():
    rng = np.random.default_rng(7)
    net = random_net(rng, dims=(2, 3), m=5, c=3, spec=FeatureMapSpec("chi2"))
    seq = random_seq(rng, 8, dims=(2, 3))
    g, lval = bownet.gradient(net, seq, 3)
    ref, ref_loss, traces = unrolled(net, seq, 3)
    assert lval == pytest.approx(ref_loss, abs=1e-12)
    for a, b in zip(g.as_list(), ref):
        np.testing.assert_allclose(a, b, atol=1e-10)
    # the recurrent error signal really is the same at every frame
    for e_z in traces:
        for e in e_z:
            np.testing.assert_allclose(e, e_z[0], atol=1e-15)


def test_gradient_permutation_invariance():
    rng = np.random.default_rng(8)
    net = random_net(rng, m=6, c=3, spec=FeatureMapSpec("intersection"))
    seq = random_seq(rng, 30)
    perm = seq.take(rng.permutation(30))
    a, la = bownet.gradient(net, seq, 1)
    b, lb = bownet.gradient(net, perm, 1)
    assert la == pytest.approx(lb, abs=1e-9)
    for x, y in zip(a.as_list(), b.as_list()):
        np.testing.assert_allclose(x, y, atol=1e-9)


def test_gradient_long_sequence_spans_chunks():
    rng = np.random.default_rng(9)
    net = random_net(rng, m=3, c=2)
    seq = random_seq(rng, 3 * bownet.FRAME_CHUNK + 17)
    g, _ = bownet.gradient(net, seq, 1)
    ref, _, _ = unrolled(net, seq, 1)
    for a, b in zip(g.as_list(), ref):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_memory_buffers_constant_in_length():
    rng = np.random.default_rng(10)
    net = random_net(rng, dims=(4,), m=8, c=3, spec=FeatureMapSpec("chi2"))
    counts = []
    for t in (100, 100_000):
        tracker = FrameBufferTracker()
        bownet.gradient(net, random_seq(rng, t, (4,)), 1, tracker)
        counts.append((tracker.count, tracker.elements))
    assert counts[0] == counts[1]


def test_memory_peak_does_not_scale_with_length():
    rng = np.random.default_rng(11)
    m, t = 64, 100_000
    net = random_net(rng, dims=(4,), m=m, c=3)
    seq = random_seq(rng, t, (4,))
    tracemalloc.start()
    try:
        bownet.gradient(net, seq, 1)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    # storing every frame's posteriors would take t * m * 8 bytes = 51 MB
    assert peak < 0.05 * t * m * 8


def test_batch_gradient_examples():
    rng = np.random.default_rng(12)
    net = random_net(rng, m=4, c=3, spec=FeatureMapSpec("chi2"))
    a, b = random_seq(rng, 5), random_seq(rng, 9)
    ga, la = bownet.gradient(net, a, 1)
    gb, lb = bownet.gradient(net, b, 3)
    for method in ("stacked", "sequential"):
        g1, l1 = bownet.batch_gradient(net, [(a, 1)], method=method)
        for x, y in zip(g1.as_list(), ga.as_list()):
            np.testing.assert_allclose(x, y, atol=1e-14)
        gk, lk = bownet.batch_gradient(net, [(a, 1)] * 4, method=method)
        for x, y in zip(gk.as_list(), ga.as_list()):
            np.testing.assert_allclose(x, y, atol=1e-14)
        g2, l2 = bownet.batch_gradient(net, [(a, 1), (b, 3)], method=method)
        assert l2 == pytest.approx((la + lb) / 2, abs=1e-12)
        for x, y, z in zip(g2.as_list(), ga.as_list(), gb.as_list()):
            np.testing.assert_allclose(x, (y + z) / 2, atol=1e-12)


def test_batch_gradient_threads_deterministic(monkeypatch):
    rng = np.random.default_rng(13)
    net = random_net(rng, m=5, c=3)
    batch = [(random_seq(rng, int(rng.integers(3, 40))), int(rng.integers(1, 4)))
             for _ in range(12)]
    ref, lref = bownet.batch_gradient(net, batch, workers=1, method="sequential")
    monkeypatch.setenv("BOWRNN_THREADS", "4")
    for _ in range(3):
        g, lval = bownet.batch_gradient(net, batch, method="sequential")
        assert lval == lref
        for x, y in zip(g.as_list(), ref.as_list()):
            np.testing.assert_array_equal(x, y)
    stacked, ls = bownet.batch_gradient(net, batch)
    assert ls == pytest.approx(lref, abs=1e-12)
    for x, y in zip(stacked.as_list(), ref.as_list()):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_network_validation():
    with pytest.raises(ValueError):
        BowNetwork([(np.zeros((2, 3)), np.zeros(3))], np.zeros((4, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        BowNetwork([(np.zeros((2, 3)), np.zeros(3)), (np.zeros((2, 4)), np.zeros(4))],
                   np.zeros((7, 2)), np.zeros(2))
    net = random_net(np.random.default_rng(0))
    with pytest.raises(ValueError):
        bownet.forward(net, random_seq(np.random.default_rng(0), 3, dims=(2,)))


@pytest.mark.parametrize("dims,spec", [((3,), None), ((2, 5), FeatureMapSpec("chi2", 3, 0.4))])
def test_save_load_round_trip(tmp_path, dims, spec):
    rng = np.random.default_rng(14)
    net = random_net(rng, dims=dims, m=4, c=3, spec=spec)
    path = tmp_path / "net.txt"
    bownet.save_network(net, path)
    back = bownet.load_network(path)
    assert back.map_spec == net.map_spec
    for a, b in zip(back.params(), net.params()):
        np.testing.assert_array_equal(a, b)
    bownet.save_network(back, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()
