import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_diff, rel_err
from vmp import perturbation as pt
from vmp.errors import NumericError
from vmp.nn.losses import softmax
from vmp.nn.model import LayerSpec, SourceModel, forward, init_model, mlp, small_cnn


def single_weight_model(w):
    return SourceModel([LayerSpec("dense", (1,), (1,), bias=False)], {"dense0": np.array([[w]])})


def mc_kl(s2, v, n, rng):
    """Monte Carlo E_q[log q - log p] for zero-mean 1-D Gaussians, with its standard error."""
    x = rng.normal(0.0, np.sqrt(s2), n)
    logq = -0.5 * np.log(2 * np.pi * s2) - x * x / (2 * s2)
    logp = -0.5 * np.log(2 * np.pi * v) - x * x / (2 * v)
    d = logq - logp
    return d.mean(), d.std(ddof=1) / np.sqrt(n)


def kl_single(s2, v):
    m = single_weight_model(1.0)
    pert = pt.init_perturbations(m, "per_weight", np.log(s2))
    return float(pt.kl_divergence(pert, pt.PriorSet({"dense0": np.array([v])})))


def test_group_counts():
    conv = init_model(small_cnn((8, 4, 4), [64], 2, bottleneck=5), np.random.default_rng(0))
    pert = pt.init_perturbations(conv, "per_output_channel")
    assert pert.rho["conv2d0"].size == 64
    dense = SourceModel([LayerSpec("dense", (10,), (5,))], {"dense0": np.zeros((10, 5))})
    assert pt.init_perturbations(dense, "per_output_channel").n_params() == 5
    assert pt.init_perturbations(dense, "per_weight").n_params() == 50


def test_init_value_and_coverage(tiny_cnn):
    pert = pt.init_perturbations(tiny_cnn)
    assert set(pert.rho) == set(tiny_cnn.weights)
    assert all((r == pt.RHO_INIT).all() for r in pert.rho.values())


def test_group_index_is_output_channel(tiny_cnn):
    sch = pt.make_scheme(tiny_cnn, "per_output_channel")
    idx = sch.group_index["conv2d0"]
    for co in range(idx.shape[-1]):
        assert (idx[..., co] == co).all()


@pytest.mark.parametrize("kernel,lam,expected", [
    ([1.0, -1.0], 1.0, 1.0),
    ([0.5, 0.5, 0.5], 1.0, pt.VARIANCE_FLOOR),
    ([0.0, 2.0], 0.5, 0.5),
])
def test_adaptive_prior(kernel, lam, expected):
    m = SourceModel([LayerSpec("dense", (len(kernel),), (1,))], {"dense0": np.array(kernel)[:, None]})
    prior = pt.adaptive_prior(m, lam)
    assert prior.variance["dense0"][0] == pytest.approx(expected)


def test_adaptive_prior_per_weight_inherits_kernel_variance(tiny_cnn):
    per_ch = pt.adaptive_prior(tiny_cnn, 1.0, "per_output_channel")
    per_w = pt.adaptive_prior(tiny_cnn, 1.0, "per_weight")
    w = tiny_cnn.weights["conv2d0"]
    np.testing.assert_allclose(per_w.variance["conv2d0"].reshape(w.shape)[0, 0, 0], per_ch.variance["conv2d0"])


@pytest.mark.parametrize("s2,v,expected", [
    (1.0, 1.0, 0.0),
    (2.0, 1.0, 0.5 * (2 - np.log(2) - 1)),
    (0.5, 1.0, 0.5 * (0.5 + np.log(2) - 1)),
])
def test_kl_examples(s2, v, expected):
    assert kl_single(s2, v) == pytest.approx(expected, abs=1e-12)


def test_kl_example_values_against_monte_carlo():
    rng = np.random.default_rng(0)
    for s2, v in [(2.0, 1.0), (0.5, 1.0)]:
        est, se = mc_kl(s2, v, 10**6, rng)
        assert abs(kl_single(s2, v) - est) < 3 * se


def test_kl_monte_carlo_consistency():
    rng = np.random.default_rng(1)
    pairs = rng.uniform(0.01, 10.0, size=(20, 2))
    for s2, v in pairs:
        est, se = mc_kl(s2, v, 10**6, rng)
        assert abs(kl_single(s2, v) - est) < 3 * se, (s2, v)


@given(st.floats(-8, 3), st.floats(1e-4, 20))
def test_kl_non_negative(rho, v):
    m = single_weight_model(1.0)
    pert = pt.init_perturbations(m, "per_weight", rho)
    assert float(pt.kl_divergence(pert, pt.PriorSet({"dense0": np.array([v])}))) >= 0.0


@given(st.floats(-10, 3))
def test_kl_exactly_zero_at_prior(rho):
    m = init_model(mlp(3, [4], 2), np.random.default_rng(0))
    pert = pt.init_perturbations(m, "per_output_channel", rho)
    prior = pt.PriorSet({k: np.exp(r) for k, r in pert.rho.items()})
    assert float(pt.kl_divergence(pert, prior)) == 0.0


def test_kl_multiplicity_weighting():
    m = SourceModel([LayerSpec("dense", (4,), (1,))], {"dense0": np.ones((4, 1))})
    pert = pt.init_perturbations(m, "per_output_channel", np.log(2.0))
    prior = pt.PriorSet({"dense0": np.array([1.0])})
    assert float(pt.kl_divergence(pert, prior)) == pytest.approx(4 * kl_single(2.0, 1.0))


def test_kl_rejects_non_finite_rho():
    m = single_weight_model(1.0)
    pert = pt.init_perturbations(m, "per_weight", np.nan)
    with pytest.raises(NumericError):
        pt.kl_divergence(pert, pt.PriorSet({"dense0": np.array([1.0])}))


def test_sample_weights_arithmetic():
    m = single_weight_model(2.0)
    pert = pt.init_perturbations(m, "per_weight", 0.0)

    class FixedNoise:
        def standard_normal(self, shape):
            return np.full(shape, 0.5)

    assert pt.sample_weights(m, pert, FixedNoise())["dense0"][0, 0] == 2.5


def test_sample_weights_vanishing_variance(tiny_cnn):
    pert = pt.init_perturbations(tiny_cnn, rho_init=-40.0)

    class BigNoise:
        def standard_normal(self, shape):
            return np.full(shape, 100.0)

    for lid, w in pt.sample_weights(tiny_cnn, pert, BigNoise()).items():
        assert np.abs(w - tiny_cnn.weights[lid]).max() < 1e-6


def test_sample_weights_moments():
    m = SourceModel([LayerSpec("dense", (1000,), (100,), bias=False)], {"dense0": np.zeros((1000, 100))})
    pert = pt.init_perturbations(m, "per_output_channel", np.log(4.0))
    d = pt.sample_weights(m, pert, np.random.default_rng(0))["dense0"].ravel()
    assert abs(d.mean()) < 0.02
    assert abs(d.var() / 4.0 - 1.0) < 0.05


def test_noise_is_per_weight_within_group():
    m = SourceModel([LayerSpec("dense", (50,), (1,), bias=False)], {"dense0": np.zeros((50, 1))})
    pert = pt.init_perturbations(m, "per_output_channel", 0.0)
    d = pt.sample_weights(m, pert, np.random.default_rng(0))["dense0"]
    assert np.unique(d).size == 50


def test_local_reparam_example_variance():
    x = np.array([[1.0, 2.0]])
    w = np.zeros((2, 1))
    rng = np.random.default_rng(0)
    draws = np.array([pt.local_reparam_dense(x, w, np.array([[0.1], [0.1]]), rng)[0, 0]
                      for _ in range(20000)])
    # 1 * 0.1 + 4 * 0.1
    se = 0.5 * np.sqrt(2.0 / (len(draws) - 1))
    assert abs(draws.var(ddof=1) - 0.5) < 3 * se


def test_local_reparam_deterministic_limits():
    r = np.random.default_rng(2)
    x, w = r.normal(size=(3, 4)), r.normal(size=(4, 2))
    np.testing.assert_array_equal(pt.local_reparam_dense(x, w, 0.0, r), x @ w)
    np.testing.assert_array_equal(pt.local_reparam_dense(np.zeros((3, 4)), w, 5.0, r), 0.0)


def test_local_reparam_moment_match():
    r = np.random.default_rng(3)
    x, w = r.normal(size=(4, 3)), r.normal(size=(3, 2))
    var = r.uniform(0.05, 0.5, size=(3, 2))
    n = 10**5
    # stacking n copies of the batch gives n independent local draws per row
    local = pt.local_reparam_dense(np.tile(x, (n, 1)), w, var, r).reshape(n, 4, 2)
    eps = r.standard_normal((n, 3, 2))
    sampled = np.einsum("bi,nio->nbo", x, w + eps * np.sqrt(var))
    se_mean = np.sqrt(local.var(axis=0) / n + sampled.var(axis=0) / n)
    assert (np.abs(local.mean(axis=0) - sampled.mean(axis=0)) < 3 * se_mean).all()
    va, vb = local.var(axis=0, ddof=1), sampled.var(axis=0, ddof=1)
    se_var = np.sqrt(2 * va**2 / (n - 1) + 2 * vb**2 / (n - 1))
    assert (np.abs(va - vb) < 3 * se_var).all()


def test_local_reparam_conv_matches_weight_sampling_variance(tiny_cnn):
    """Per-output-channel conv variance equals sigma_c^2 times the patch sum of x^2."""
    from vmp.nn.autograd import conv2d, value_of

    r = np.random.default_rng(5)
    x = r.normal(size=(2, 1, 5, 5))
    pert = pt.init_perturbations(tiny_cnn, rho_init=np.log(0.3))
    var = value_of(conv2d(x * x, pert.weight_variance("conv2d0")))
    ones = np.ones_like(tiny_cnn.weights["conv2d0"])
    np.testing.assert_allclose(var, 0.3 * value_of(conv2d(x * x, ones)), rtol=1e-12)


def test_predict_mc_single_sample(tiny_mlp):
    pert = pt.init_perturbations(tiny_mlp, rho_init=-2.0)
    x = np.random.default_rng(1).normal(size=(7, 3))
    p = pt.predict_mc(tiny_mlp, pert, x, 1, np.random.default_rng(9))
    logits, _, _ = forward(tiny_mlp, pt.sample_weights(tiny_mlp, pert, np.random.default_rng(9)), x, "eval")
    np.testing.assert_array_equal(p, softmax(logits))


@pytest.mark.parametrize("n_samples", [1, 10])
def test_predict_mc_vanishing_variance(tiny_mlp, n_samples):
    pert = pt.init_perturbations(tiny_mlp, rho_init=-40.0)
    x = np.random.default_rng(1).normal(size=(7, 3))
    p = pt.predict_mc(tiny_mlp, pert, x, n_samples, np.random.default_rng(0))
    logits, _, _ = forward(tiny_mlp, tiny_mlp.weights, x, "eval")
    np.testing.assert_allclose(p, softmax(logits), atol=1e-6)


def test_predict_mc_rows_normalized(tiny_mlp):
    pert = pt.init_perturbations(tiny_mlp, rho_init=0.0)
    p = pt.predict_mc(tiny_mlp, pert, np.random.default_rng(1).normal(size=(9, 3)), 10, np.random.default_rng(0))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_source_recovery_argmax():
    rng = np.random.default_rng(0)
    model = init_model(mlp(2, [16], 3, bottleneck=8), rng)
    x = rng.normal(size=(1000, 2)) * 2
    pert = pt.init_perturbations(model, rho_init=-40.0)
    p = pt.predict_mc(model, pert, x, 10, np.random.default_rng(1))
    logits, _, _ = forward(model, model.weights, x, "eval")
    assert (p.argmax(axis=1) == logits.argmax(axis=1)).all()


@pytest.mark.parametrize("scheme", ["per_output_channel", "per_weight"])
def test_elbo_equivalence_exact(tiny_mlp, scheme):
    pert = pt.init_perturbations(tiny_mlp, scheme, rho_init=-1.5)
    prior = pt.adaptive_prior(tiny_mlp, 1.0, pert.scheme)
    x = np.random.default_rng(3).normal(size=(8, 3))
    a, b, ga, gb = pt.elbo_equivalence_check(tiny_mlp, pert, prior, x, seed=0, return_grads=True)
    assert a == b
    for k in ga:
        np.testing.assert_allclose(ga[k], gb[k], atol=1e-12, rtol=0)


def test_elbo_equivalence_degenerate_posterior(tiny_mlp):
    from vmp.objectives import entropy_loss

    pert = pt.init_perturbations(tiny_mlp, rho_init=-60.0)
    prior = pt.PriorSet({k: np.exp(r) for k, r in pert.rho.items()})  # KL exactly 0
    x = np.random.default_rng(3).normal(size=(8, 3))
    a, b = pt.elbo_equivalence_check(tiny_mlp, pert, prior, x, seed=0)
    logits, _, _ = forward(tiny_mlp, tiny_mlp.weights, x, "train")
    det = float(entropy_loss(softmax(logits)))
    assert a == b
    assert a == pytest.approx(det, abs=1e-9)


def test_sigma_l1_examples():
    m = SourceModel([LayerSpec("dense", (2,), (1,))], {"dense0": np.zeros((2, 1))})
    assert pt.sigma_l1_per_layer(pt.init_perturbations(m, "per_weight", 0.0))["dense0"] == pytest.approx(2.0)
    m4 = SourceModel([LayerSpec("dense", (4,), (1,))], {"dense0": np.zeros((4, 1))})
    p4 = pt.init_perturbations(m4, "per_output_channel", np.log(0.25))
    assert pt.sigma_l1_per_layer(p4)["dense0"] == pytest.approx(2.0)
    assert pt.sigma_l1_per_layer(pt.init_perturbations(m, "per_weight", -40.0))["dense0"] < 1e-8
