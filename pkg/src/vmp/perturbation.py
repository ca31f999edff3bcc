"""Learnable zero-mean Gaussian perturbations over frozen source weights.

A perturbed weight is ``w_t = w_s + eps * sqrt(exp(rho_g))`` where ``g`` is
the sharing group of that weight and ``eps ~ N(0, 1)`` is drawn per weight.
Only dense and conv2d weights are perturbed; biases and BN parameters never
are.
"""

from dataclasses import dataclass

import numpy as np

from vmp.errors import ContractError, DimensionError, NumericError
from vmp.nn import autograd as ag
from vmp.nn.losses import softmax
from vmp.nn.model import forward

VARIANCE_FLOOR = 1e-6
RHO_INIT = -10.0
SCHEMES = ("per_weight", "per_output_channel")


@dataclass
class SharingScheme:
    kind: str
    group_index: dict  # layer-id -> int array shaped like the weight
    n_groups: dict  # layer-id -> int

    def multiplicity(self, lid):
        return np.bincount(self.group_index[lid].ravel(), minlength=self.n_groups[lid]).astype(np.float64)


@dataclass
class PerturbationSet:
    rho: dict  # layer-id -> float array, one entry per group
    scheme: SharingScheme

    @property
    def layer_ids(self):
        return list(self.rho)

    def n_params(self):
        return int(sum(r.size for r in self.rho.values()))

    def weight_variance(self, lid, rho=None):
        """Per-weight variance exp(rho_g) expanded to the weight's shape."""
        r = self.rho[lid] if rho is None else rho
        return ag.exp(ag.take(r, self.scheme.group_index[lid]))

    def copy(self):
        return PerturbationSet({k: v.copy() for k, v in self.rho.items()}, self.scheme)


@dataclass
class PriorSet:
    variance: dict  # layer-id -> per-group prior variance
    lam: float = 1.0


def make_scheme(model, kind="per_output_channel"):
    if kind not in SCHEMES:
        raise ContractError(f"unknown sharing scheme {kind!r}")
    index, counts = {}, {}
    for lid in model.perturbable_ids():
        shape = model.weights[lid].shape
        if kind == "per_weight":
            idx = np.arange(int(np.prod(shape))).reshape(shape)
        else:
            # the output channel is the last axis for both dense and conv kernels
            idx = np.broadcast_to(np.arange(shape[-1]), shape).copy()
        index[lid] = idx
        counts[lid] = int(idx.max()) + 1
    return SharingScheme(kind, index, counts)


def init_perturbations(model, scheme="per_output_channel", rho_init=RHO_INIT):
    ids = model.perturbable_ids()
    if not ids:
        raise ContractError("model has no perturbable layer")
    sch = make_scheme(model, scheme)
    return PerturbationSet({lid: np.full(sch.n_groups[lid], float(rho_init)) for lid in ids}, sch)


def adaptive_prior(model, lam=1.0, scheme="per_output_channel", floor=VARIANCE_FLOOR):
    """Per-kernel prior variance ``max(lam * Var(kernel), floor)``.

    A kernel is one output channel of a conv layer or one output unit of a
    dense layer. Under ``per_weight`` sharing every weight inherits the
    variance of its kernel.
    """
    if lam <= 0:
        raise ContractError("lambda must be positive")
    sch = scheme if isinstance(scheme, SharingScheme) else make_scheme(model, scheme)
    out = {}
    for lid in sch.group_index:
        w = model.weights[lid]
        per_kernel = np.maximum(lam * w.reshape(-1, w.shape[-1]).var(axis=0), floor)
        if sch.kind == "per_output_channel":
            out[lid] = per_kernel
        else:
            out[lid] = np.broadcast_to(per_kernel, w.shape).ravel().copy()
    return PriorSet(out, lam)


def isotropic_prior(pert, variance=1.0):
    return PriorSet({lid: np.full(r.size, float(variance)) for lid, r in pert.rho.items()}, 1.0)


def _kl_groups(rho, v):
    # 1/2 [s2/v + ln(v/s2) - 1] written through r = s2/v so that r == 1 gives exactly 0
    r = ag.exp(rho) * (1.0 / v)
    return 0.5 * (r - 1.0 - ag.log(r))


def kl_divergence(pert, prior, multiplicity=None, rho=None):
    """KL(q || p) summed over every perturbed weight.

    ``rho`` optionally supplies per-layer :class:`Var` overrides so the result
    is differentiable. ``multiplicity`` defaults to the sharing scheme's group
    sizes.
    """
    if set(pert.rho) != set(prior.variance):
        raise ContractError("perturbation and prior cover different layers")
    total = 0.0
    for lid in pert.rho:
        r = pert.rho[lid] if rho is None else rho[lid]
        rv = ag.value_of(r)
        if not np.isfinite(rv).all():
            raise NumericError(f"non-finite rho in layer {lid}")
        if rv.shape != prior.variance[lid].shape:
            raise ContractError(f"group count mismatch in layer {lid}")
        m = pert.scheme.multiplicity(lid) if multiplicity is None else np.asarray(multiplicity[lid], float)
        total = total + ag.sum(m * _kl_groups(r, prior.variance[lid]))
    return total


def sample_weights(model, pert, rng, rho=None):
    """One draw of perturbed weights for every dense/conv layer.

    Noise is drawn per weight in layer order; layers absent from ``pert`` come
    back unchanged.
    """
    out = {}
    for lid in model.ids:
        if lid not in model.weights:
            continue
        ws = model.weights[lid]
        if lid not in pert.rho:
            out[lid] = ws
            continue
        eps = rng.standard_normal(ws.shape)
        sigma = ag.sqrt(pert.weight_variance(lid, None if rho is None else rho[lid]))
        out[lid] = ws + eps * sigma
    return out


def local_reparam_dense(x, w_s, variance, rng):
    """Pre-activations ``x @ w_s + zeta * sqrt(x**2 @ variance)``.

    ``variance`` is broadcast to the weight's shape, so a per-output-channel
    vector works as well as a full per-weight array.
    """
    x = np.asarray(x, dtype=np.float64)
    w_s = np.asarray(w_s, dtype=np.float64)
    if x.ndim != 2 or w_s.ndim != 2 or x.shape[1] != w_s.shape[0]:
        raise DimensionError(f"cannot multiply {x.shape} by {w_s.shape}")
    var = (x * x) @ np.broadcast_to(np.asarray(variance, dtype=np.float64), w_s.shape)
    if (var < 0).any():
        raise NumericError("negative pre-activation variance")
    zeta = rng.standard_normal(var.shape)
    return x @ w_s + zeta * np.sqrt(var)


def local_reparam_variances(pert, rho=None):
    return {lid: pert.weight_variance(lid, None if rho is None else rho[lid]) for lid in pert.rho}


def predict_mc(model, pert, batch, n_samples, rng, return_features=False):
    """Average of softmax outputs over ``n_samples`` weight draws (eval-mode BN)."""
    if n_samples < 1:
        raise ContractError("need at least one Monte Carlo sample")
    probs = feats = 0.0
    for _ in range(n_samples):
        logits, f, _ = forward(model, sample_weights(model, pert, rng), batch, "eval")
        probs = probs + softmax(logits)
        feats = feats + f
    probs = probs / n_samples
    if return_features:
        return probs, feats / n_samples
    return probs


def freeze(pert, rho_value=-40.0):
    """A copy of ``pert`` with every rho fixed at ``rho_value``."""
    return PerturbationSet({k: np.full_like(v, rho_value) for k, v in pert.rho.items()}, pert.scheme)


def sigma_l1_per_layer(pert, model=None):
    """Sum over each layer's weights of sqrt(exp(rho_group))."""
    out = {}
    for lid, r in pert.rho.items():
        out[lid] = float(np.sum(pert.scheme.multiplicity(lid) * np.sqrt(np.exp(r))))
    return out


def rho_params(pert, prefix="rho/"):
    return {lid: ag.param(r, prefix + lid) for lid, r in pert.rho.items()}


def elbo_equivalence_check(model, pert, prior, batch, seed, n_target=None, return_grads=False):
    """Evaluate the objective under the Delta-w and the w_t parameterization.

    Both use the same noise draw. The Delta-w form samples ``dw = eps * sigma``
    and adds it to ``w_s``; the w_t form samples ``w_t = w_s + sigma * eps``
    directly and scores its KL with the general (non-zero mean) Gaussian
    formula whose mean term vanishes. Returns the two scalar losses, and with
    ``return_grads`` also their rho-gradients.
    """
    from vmp.objectives import entropy_loss

    n_target = n_target or ag.value_of(batch).shape[0]
    results = []
    for form in ("delta", "wt"):
        rng = np.random.default_rng(seed)
        rho = rho_params(pert)
        weights, kl = {}, 0.0
        for lid in model.ids:
            if lid not in model.weights:
                continue
            ws = model.weights[lid]
            eps = rng.standard_normal(ws.shape)
            sigma = ag.sqrt(pert.weight_variance(lid, rho[lid]))
            v = prior.variance[lid]
            m = pert.scheme.multiplicity(lid)
            r = ag.exp(rho[lid]) * (1.0 / v)
            if form == "delta":
                weights[lid] = ws + eps * sigma
                kl = kl + ag.sum(m * (0.5 * (r - 1.0 - ag.log(r))))
            else:
                weights[lid] = ws + sigma * eps
                mean_gap = np.zeros_like(v)  # posterior mean w_s minus prior mean w_s
                kl = kl + ag.sum(m * (0.5 * (r + mean_gap ** 2 / v - 1.0 - ag.log(r))))
        logits, _, _ = forward(model, weights, batch, "train")
        loss = kl * (1.0 / n_target) + entropy_loss(ag.exp(ag.log_softmax(logits)))
        grads = ag.backward(loss, [f"rho/{lid}" for lid in pert.rho]) if return_grads else None
        results.append((float(loss.value), grads))
    (l1, g1), (l2, g2) = results
    if return_grads:
        return l1, l2, g1, g2
    return l1, l2
