"""Unsupervised likelihood surrogates and the full adaptation objective."""

from dataclasses import dataclass

import numpy as np

from vmp import perturbation as pt
from vmp.errors import ContractError
from vmp.nn import autograd as ag
from vmp.nn.losses import LOG_FLOOR, probs_cross_entropy
from vmp.nn.model import forward

TIE_TOL = 1e-12
LIKELIHOODS = ("entropy", "info_max", "info_max_plus_pseudo")


@dataclass(frozen=True)
class ObjectiveConfig:
    likelihood: str = "info_max_plus_pseudo"
    beta: float = 0.3
    kl_scale: float = 1.0
    mc_train_samples: int = 1
    local_reparam: bool = True
    likelihood_weight: float = 1.0

    def __post_init__(self):
        if self.likelihood not in LIKELIHOODS:
            raise ContractError(f"unknown likelihood {self.likelihood!r}")
        if self.beta < 0 or self.kl_scale <= 0 or self.mc_train_samples < 1:
            raise ContractError("invalid objective settings")


@dataclass
class PseudoLabelState:
    centroids: np.ndarray
    labels: np.ndarray
    refresh_epoch: int = 0


def _check_rows(probs):
    p = ag.value_of(probs)
    if p.ndim != 2:
        raise ContractError("probabilities must be a (B, K) array")
    if np.abs(p.sum(axis=1) - 1.0).max(initial=0.0) > 1e-6:
        raise ContractError("probability rows must sum to 1")


def _row_entropy(probs):
    return -ag.sum(probs * ag.log(probs, floor=LOG_FLOOR), axis=1)


def entropy_loss(probs):
    """Mean per-row Shannon entropy (nats)."""
    _check_rows(probs)
    return ag.mean(_row_entropy(probs))


def info_max_loss(probs):
    """Mean per-row entropy minus the entropy of the batch-mean prediction."""
    _check_rows(probs)
    if ag.value_of(probs).shape[0] < 2:
        raise ContractError("info-max needs a batch of at least two rows")
    mean_p = ag.mean(probs, axis=0, keepdims=True)
    return ag.mean(_row_entropy(probs)) - ag.sum(_row_entropy(mean_p))


def _cosine_features(features):
    f = np.hstack([features, np.ones((features.shape[0], 1))])
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _nearest(f, centroids):
    c = centroids / np.maximum(np.linalg.norm(centroids, axis=1, keepdims=True), 1e-12)
    dist = 1.0 - f @ c.T
    # distances within TIE_TOL of the best count as ties; the lowest class index wins
    tied = dist <= dist.min(axis=1, keepdims=True) + TIE_TOL
    return np.argmax(tied, axis=1)


def compute_pseudo_labels(features, probs, refresh_epoch=0):
    """Centroid-based pseudo-labels: soft centroids, assign, hard centroids, reassign."""
    features = np.asarray(features, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    n, k = probs.shape
    if n < k:
        raise ContractError("need at least as many samples as classes")
    if not np.isfinite(features).all():
        raise ContractError("features must be finite")
    f = _cosine_features(features)
    soft = probs.T @ f / (1e-8 + probs.sum(axis=0)[:, None])
    labels = _nearest(f, soft)
    onehot = np.eye(k)[labels]
    counts = onehot.sum(axis=0)
    hard = onehot.T @ f / np.maximum(counts, 1.0)[:, None]
    centroids = np.where(counts[:, None] > 0, hard, soft)
    labels = _nearest(f, centroids)
    return PseudoLabelState(centroids, labels, refresh_epoch)


def likelihood_loss(probs, cfg, pseudo_labels=None):
    if cfg.likelihood == "entropy":
        return entropy_loss(probs)
    loss = info_max_loss(probs)
    if cfg.likelihood == "info_max_plus_pseudo":
        if pseudo_labels is None:
            raise ContractError("pseudo-label state required for info_max_plus_pseudo")
        if cfg.beta:
            loss = loss + cfg.beta * probs_cross_entropy(probs, pseudo_labels)
    return loss


def sampled_forward(model, pert, batch, rng, rho=None, local_reparam=True, bn_affine=None, mode="train"):
    """Forward pass under one perturbation draw; returns (logits, features, bn_state)."""
    if local_reparam:
        return forward(model, model.weights, batch, mode, bn_affine=bn_affine,
                       local_reparam=pt.local_reparam_variances(pert, rho), rng=rng)
    weights = pt.sample_weights(model, pert, rng, rho=rho)
    return forward(model, weights, batch, mode, bn_affine=bn_affine)


def adaptation_objective(model, pert, prior, batch, state, cfg, n_target, rng, rho=None, bn_affine=None,
                         batch_index=None, return_state=False):
    """KL/n_target (scaled) plus the Monte Carlo mean of the likelihood surrogate.

    ``rho`` and ``bn_affine`` may hold :class:`Var` leaves so the result can be
    differentiated. ``batch_index`` selects this batch's rows of
    ``state.labels``. With ``return_state`` the train-mode BN state of the last
    draw is returned alongside the loss.
    """
    pseudo = None
    if cfg.likelihood == "info_max_plus_pseudo":
        if state is None:
            raise ContractError("pseudo-label state required for info_max_plus_pseudo")
        pseudo = state.labels if batch_index is None else state.labels[batch_index]
    kl = pt.kl_divergence(pert, prior, rho=rho)
    like, bn = 0.0, model.bn_state
    for _ in range(cfg.mc_train_samples):
        logits, _, bn = sampled_forward(model, pert, batch, rng, rho=rho, local_reparam=cfg.local_reparam,
                                        bn_affine=bn_affine)
        like = like + likelihood_loss(ag.exp(ag.log_softmax(logits)), cfg, pseudo)
    loss = (cfg.kl_scale / n_target) * kl + (cfg.likelihood_weight / cfg.mc_train_samples) * like
    if not np.isfinite(ag.value_of(loss)).all():
        from vmp.errors import NumericError
        raise NumericError("adaptation objective is not finite")
    return (loss, bn) if return_state else loss
