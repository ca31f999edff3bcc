import numpy as np

from vmp.errors import ContractError
from vmp.nn import autograd as ag

LOG_FLOOR = 1e-12


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, k):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    k = ag.value_of(logits).shape[1]
    labels = _check_labels(labels, k)
    logp = ag.log_softmax(logits)
    picked = ag.getitem(logp, (np.arange(len(labels)), labels))
    return -ag.mean(picked)


def probs_cross_entropy(probs, labels):
    """Cross-entropy against hard labels when only probabilities are at hand."""
    k = ag.value_of(probs).shape[1]
    labels = _check_labels(labels, k)
    picked = ag.getitem(probs, (np.arange(len(labels)), labels))
    return -ag.mean(ag.log(picked, floor=LOG_FLOOR))
