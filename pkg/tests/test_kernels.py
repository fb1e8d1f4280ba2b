import numpy as np
import pytest

from bowrnn import kernels
from bowrnn.featmap import FeatureMapSpec
from bowrnn.kernels import MultichannelKernelParams, SvmExpansion


def hist(rng, m):
    return rng.dirichlet(np.ones(m))


def test_additive_kernel_examples():
    rng = np.random.default_rng(0)
    h = hist(rng, 10)
    assert kernels.additive_kernel("intersection", h, h) == pytest.approx(1.0, abs=1e-12)
    assert kernels.additive_kernel("hellinger", h, h) == pytest.approx(1.0, abs=1e-12)
    assert kernels.additive_kernel("chi2", h, h) == pytest.approx(1.0, abs=1e-12)
    assert kernels.scalar_kernel("chi2", 0.2, 0.4) == pytest.approx(0.26667, abs=1e-5)
    assert kernels.scalar_kernel("chi2", 0.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        kernels.additive_kernel("chi2", [0.5, 0.5], [1.0])
    with pytest.raises(ValueError):
        kernels.additive_kernel("chi2", [-0.5, 1.5], [0.5, 0.5])


def test_chi2_distance():
    rng = np.random.default_rng(1)
    a, b = hist(rng, 7), hist(rng, 7)
    assert kernels.chi2_distance(a, a) == 0.0
    assert kernels.chi2_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert kernels.chi2_distance(a, b) == kernels.chi2_distance(b, a)
    # for histograms D = 1 - k_chi2
    assert kernels.chi2_distance(a, b) == pytest.approx(1 - kernels.additive_kernel("chi2", a, b),
                                                        abs=1e-14)


def test_multichannel_rbf():
    rng = np.random.default_rng(2)
    a = [hist(rng, 5), hist(rng, 6)]
    b = [hist(rng, 5), hist(rng, 6)]
    params = MultichannelKernelParams((0.3, 0.2))
    assert kernels.multichannel_rbf_chi2(a, a, params) == 1.0
    v = kernels.multichannel_rbf_chi2(a, b, params)
    assert 0.0 < v <= 1.0
    one = MultichannelKernelParams((kernels.chi2_distance(a[0], b[0]),))
    assert kernels.multichannel_rbf_chi2(a[:1], b[:1], one) == pytest.approx(0.36788, abs=1e-5)


def test_estimate_channel_means():
    h = [np.array([1.0, 0.0]), np.array([0.6, 0.4])]
    d = kernels.chi2_distance(*h)
    assert kernels.estimate_channel_means([h]).channel_means == (pytest.approx(d),)
    # three 1-D "histograms" with pairwise distances 0.2, 0.4, 0.6 via scaled unit masses
    hs = [np.array([0.0, 0.0, 0.0]), np.array([0.4, 0.0, 0.0]), np.array([1.2, 0.0, 0.0])]
    dists = [kernels.chi2_distance(hs[i], hs[j]) for i, j in [(0, 1), (0, 2), (1, 2)]]
    assert dists == pytest.approx([0.2, 0.6, 0.2])
    assert kernels.estimate_channel_means([hs]).channel_means[0] == pytest.approx(np.mean(dists))
    with pytest.raises(ValueError, match="degenerate channel"):
        kernels.estimate_channel_means([[h[0], h[0], h[0]]])
    with pytest.raises(ValueError):
        kernels.estimate_channel_means([[h[0]]])


def test_gram_matrix():
    rng = np.random.default_rng(3)
    same = [np.full(4, 0.25)] * 3
    np.testing.assert_array_equal(kernels.gram_matrix("intersection", same), np.ones((3, 3)))
    hs = [hist(rng, 6) for _ in range(8)]
    for kind in ("hellinger", "chi2", "intersection"):
        G = kernels.gram_matrix(kind, hs)
        np.testing.assert_array_equal(G, G.T)
        for i in range(8):
            for j in range(8):
                assert G[i, j] == kernels.additive_kernel(kind, hs[i], hs[j])
    multi = [[hist(rng, 4), hist(rng, 3)] for _ in range(5)]
    params = kernels.estimate_channel_means([[m[0] for m in multi], [m[1] for m in multi]])
    G = kernels.gram_matrix("rbf-chi2", multi, params)
    np.testing.assert_array_equal(np.diag(G), 1.0)


def random_expansion(rng, kind, i=10, m=8):
    return SvmExpansion(np.array([hist(rng, m) for _ in range(i)]), rng.uniform(0, 2, i),
                        rng.choice([-1.0, 1.0], i), float(rng.normal()), kind)


def test_svm_single_support_vector():
    h = np.array([0.1, 0.2, 0.7])
    exp = SvmExpansion(h[None], [1.0], [1.0], 0.3, "hellinger")
    assert kernels.svm_decision(exp, h) == pytest.approx(1.3, abs=1e-12)


def test_svm_hellinger_mapped_equivalence():
    rng = np.random.default_rng(4)
    exp = random_expansion(rng, "hellinger")
    w = kernels.svm_weight_vector(exp)
    spec = FeatureMapSpec("hellinger")
    for _ in range(100):
        h = hist(rng, 8)
        assert abs(kernels.svm_decision(exp, h)
                   - kernels.svm_decision_mapped(w, exp.bias, spec, h)) <= 1e-10


def test_svm_chi2_approximate_sign_agreement():
    rng = np.random.default_rng(5)
    agree = total = 0
    for _ in range(20):
        exp = random_expansion(rng, "chi2")
        w = kernels.svm_weight_vector(exp, FeatureMapSpec("chi2", 2, 0.5))
        for _ in range(50):
            h = hist(rng, 8)
            d = kernels.svm_decision(exp, h)
            if abs(d) <= 0.01:
                continue
            dm = kernels.svm_decision_mapped(w, exp.bias, FeatureMapSpec("chi2", 2, 0.5), h)
            total += 1
            agree += np.sign(d) == np.sign(dm)
    assert agree / total >= 0.99


def test_expansion_validation():
    with pytest.raises(ValueError):
        SvmExpansion(np.ones((2, 3)), [1.0], [1.0, 1.0], 0.0, "chi2")
    with pytest.raises(ValueError):
        SvmExpansion(np.ones((1, 3)), [1.0], [2.0], 0.0, "chi2")
    with pytest.raises(ValueError):
        SvmExpansion(np.ones((1, 3)), [1.0], [1.0], 0.0, "rbf")


def test_expansion_and_gram_files(tmp_path):
    rng = np.random.default_rng(6)
    base = random_expansion(rng, "intersection")
    exps = [base, SvmExpansion(base.support, rng.uniform(0.1, 1, 10), -base.labels, -0.5,
                               "intersection")]
    path = tmp_path / "svm.txt"
    kernels.save_expansions(exps, path)
    back = kernels.load_expansions(path)
    h = hist(rng, 8)
    for a, b in zip(exps, back):
        assert kernels.svm_decision(a, h) == kernels.svm_decision(b, h)
    kernels.save_gram(kernels.gram_matrix("chi2", list(base.support)), "chi2", tmp_path / "g")
    assert (tmp_path / "g").read_text().startswith("GRAM1 10 chi2\n")
