import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import finite_diff, rel_err
from vmp import perturbation as pt
from vmp.errors import ContractError
from vmp.nn import autograd as ag
from vmp.nn.losses import softmax
from vmp.nn.model import forward
from vmp.nn.optim import OptimConfig, Optimizer
from vmp.objectives import (ObjectiveConfig, PseudoLabelState, adaptation_objective, compute_pseudo_labels,
                            entropy_loss, info_max_loss)

prob_rows = arrays(np.float64, (6, 4), elements=st.floats(-20, 20)).map(softmax)


@pytest.mark.parametrize("p,expected", [
    ([0.5, 0.5], np.log(2)),
    ([1.0, 0.0], 0.0),
    ([0.9, 0.1], -(0.9 * np.log(0.9) + 0.1 * np.log(0.1))),
])
def test_entropy_examples(p, expected):
    assert float(entropy_loss(np.array([p]))) == pytest.approx(expected, abs=1e-12)


def test_entropy_example_rounded():
    assert float(entropy_loss(np.array([[0.9, 0.1]]))) == pytest.approx(0.3251, abs=5e-5)


def test_entropy_rejects_unnormalized():
    with pytest.raises(ContractError):
        entropy_loss(np.array([[0.5, 0.6]]))


@pytest.mark.parametrize("batch,expected", [
    ([[1, 0], [0, 1]], -np.log(2)),
    ([[0.5, 0.5], [0.5, 0.5]], 0.0),
    ([[1, 0], [1, 0]], 0.0),
])
def test_info_max_examples(batch, expected):
    assert float(info_max_loss(np.array(batch, float))) == pytest.approx(expected, abs=1e-12)


def test_info_max_needs_two_rows():
    with pytest.raises(ContractError):
        info_max_loss(np.array([[1.0, 0.0]]))


@given(prob_rows)
def test_entropy_bounds(p):
    h = float(entropy_loss(p))
    assert -1e-12 <= h <= np.log(4) + 1e-12


@given(prob_rows)
def test_info_max_lower_bound(p):
    assert float(info_max_loss(p)) >= -np.log(4) - 1e-12


def test_info_max_minimum_at_balanced_one_hot():
    assert float(info_max_loss(np.eye(4))) == pytest.approx(-np.log(4), abs=1e-12)


def brute_force_pseudo_labels(features, probs):
    """Loop-based restatement of the centroid procedure, used as an oracle."""
    n, k = probs.shape
    f = [np.append(v, 1.0) for v in features]
    f = [v / np.sqrt(sum(c * c for c in v)) for v in f]

    def assign(cents):
        out = []
        for v in f:
            ds = []
            for c in range(k):
                cn = cents[c] / max(np.sqrt(sum(t * t for t in cents[c])), 1e-12)
                ds.append(1.0 - sum(a * b for a, b in zip(v, cn)))
            out.append(next(c for c in range(k) if ds[c] <= min(ds) + 1e-12))
        return out

    soft = []
    for c in range(k):
        num = sum(probs[i, c] * f[i] for i in range(n))
        soft.append(num / (1e-8 + sum(probs[i, c] for i in range(n))))
    labels = assign(soft)
    hard = []
    for c in range(k):
        members = [f[i] for i in range(n) if labels[i] == c]
        hard.append(sum(members) / len(members) if members else soft[c])
    return np.array(assign(hard))


def test_pseudo_labels_split_clusters():
    r = np.random.default_rng(0)
    f = np.vstack([np.array([1.0, 0.0]) + 0.05 * r.normal(size=(10, 2)),
                   np.array([0.0, 1.0]) + 0.05 * r.normal(size=(10, 2))])
    probs = np.vstack([np.tile([0.95, 0.05], (10, 1)), np.tile([0.05, 0.95], (10, 1))])
    state = compute_pseudo_labels(f, probs)
    np.testing.assert_array_equal(state.labels, np.repeat([0, 1], 10))
    np.testing.assert_array_equal(state.labels, brute_force_pseudo_labels(f, probs))


def test_pseudo_labels_identity():
    state = compute_pseudo_labels(np.eye(3), np.eye(3))
    np.testing.assert_array_equal(state.labels, [0, 1, 2])
    assert state.centroids.shape == (3, 4)


def test_pseudo_labels_uniform_probs_match_brute_force():
    r = np.random.default_rng(1)
    f = np.vstack([r.normal(3, 0.1, (5, 2)), r.normal(-3, 0.1, (5, 2))])
    probs = np.full((10, 2), 0.5)
    state = compute_pseudo_labels(f, probs)
    np.testing.assert_array_equal(state.labels, brute_force_pseudo_labels(f, probs))
    assert (state.labels == 0).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pseudo_labels_match_brute_force_random(seed):
    r = np.random.default_rng(seed)
    f = r.normal(size=(12, 3))
    probs = softmax(r.normal(size=(12, 3)) * 3)
    a = compute_pseudo_labels(f, probs)
    np.testing.assert_array_equal(a.labels, brute_force_pseudo_labels(f, probs))
    np.testing.assert_array_equal(a.labels, compute_pseudo_labels(f, probs).labels)


def test_pseudo_labels_need_enough_rows():
    with pytest.raises(ContractError):
        compute_pseudo_labels(np.zeros((2, 2)), np.full((2, 3), 1 / 3))


def _setup(model, rho_init=-2.0):
    pert = pt.init_perturbations(model, rho_init=rho_init)
    prior = pt.adaptive_prior(model, 1.0, pert.scheme)
    return pert, prior


def test_objective_requires_pseudo_state(tiny_mlp):
    pert, prior = _setup(tiny_mlp)
    with pytest.raises(ContractError):
        adaptation_objective(tiny_mlp, pert, prior, np.zeros((4, 3)), None, ObjectiveConfig(), 4,
                             np.random.default_rng(0))


def test_objective_zero_when_posterior_equals_prior_and_predictions_one_hot():
    from vmp.nn.model import LayerSpec, SourceModel

    model = SourceModel([LayerSpec("dense", (2,), (2,), bias=False)], {"dense0": np.array([[400.0, -400.0],
                                                                                           [-400.0, 400.0]])})
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    pert = pt.init_perturbations(model, rho_init=-60.0)
    cfg = ObjectiveConfig(likelihood="entropy", local_reparam=False)
    prior = pt.PriorSet({k: np.exp(r) for k, r in pert.rho.items()})
    loss = adaptation_objective(model, pert, prior, x, None, cfg, 10, np.random.default_rng(0))
    assert float(loss) == 0.0
    prior_far = pt.PriorSet({k: np.full_like(r, 1.0) for k, r in pert.rho.items()})
    loss_kl = adaptation_objective(model, pert, prior_far, x, None, cfg, 10, np.random.default_rng(0))
    assert float(loss_kl) == pytest.approx(float(pt.kl_divergence(pert, prior_far)) / 10, rel=1e-12)


def test_doubling_n_target_halves_kl(tiny_mlp):
    pert, prior = _setup(tiny_mlp)
    x = np.random.default_rng(0).normal(size=(6, 3))
    cfg = ObjectiveConfig(likelihood="entropy")
    f = lambda n: float(adaptation_objective(tiny_mlp, pert, prior, x, None, cfg, n, np.random.default_rng(4)))
    like = f(1e300)  # KL weight effectively zero
    assert (f(20) - like) == pytest.approx(2 * (f(40) - like), rel=1e-9)


@pytest.mark.parametrize("likelihood", ["entropy", "info_max", "info_max_plus_pseudo"])
@pytest.mark.parametrize("local", [True, False])
def test_objective_rho_gradient(tiny_mlp, likelihood, local):
    pert, prior = _setup(tiny_mlp)
    r = np.random.default_rng(8)
    x = r.normal(size=(6, 3))
    state = PseudoLabelState(np.zeros((3, 5)), r.integers(0, 3, 6))
    cfg = ObjectiveConfig(likelihood=likelihood, local_reparam=local, mc_train_samples=2)

    def value():
        return float(adaptation_objective(tiny_mlp, pert, prior, x, state, cfg, 6, np.random.default_rng(1)))

    rho = pt.rho_params(pert)
    loss = adaptation_objective(tiny_mlp, pert, prior, x, state, cfg, 6, np.random.default_rng(1), rho=rho)
    grads = ag.backward(loss, ["rho/" + k for k in pert.rho])
    for lid in pert.rho:
        fd = finite_diff(value, pert.rho[lid])
        assert rel_err(grads["rho/" + lid], fd).max() < 1e-4, lid


def test_kl_pressure_drives_variance_to_prior(tiny_cnn):
    pert, prior = _setup(tiny_cnn, rho_init=-10.0)
    x = np.random.default_rng(0).normal(size=(4, 1, 5, 5))
    cfg = ObjectiveConfig(likelihood="entropy", likelihood_weight=0.0)
    params = {"rho/" + k: v for k, v in pert.rho.items()}
    opt = Optimizer(OptimConfig("adaptive", 0.05))
    rng = np.random.default_rng(0)
    for _ in range(500):
        loss = adaptation_objective(tiny_cnn, pert, prior, x, None, cfg, 50, rng, rho=pt.rho_params(pert))
        opt.step(params, ag.backward(loss, list(params)))
    worst = max(np.abs(np.exp(pert.rho[k]) / prior.variance[k] - 1).max() for k in pert.rho)
    assert worst < 0.05
