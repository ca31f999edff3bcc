"""Source training, the three adaptation protocols, and analysis metrics."""

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from vmp import perturbation as pt
from vmp.errors import ContractError, NumericError
from vmp.nn import autograd as ag
from vmp.nn.losses import softmax, softmax_cross_entropy
from vmp.nn.model import BNState, forward, init_model
from vmp.nn.optim import OptimConfig, Optimizer
from vmp.objectives import ObjectiveConfig, adaptation_objective, compute_pseudo_labels, likelihood_loss

PROTOCOLS = ("offline", "generalized", "continual_online")
METHODS = ("perturbation", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    patience: int = 10
    seed: int = 0


@dataclass(frozen=True)
class ProtocolConfig:
    protocol: str = "offline"
    method: str = "perturbation"
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    objective: ObjectiveConfig = None
    optim: OptimConfig = OptimConfig(kind="sgd", lr=0.1, momentum=0.9, weight_decay=0.0)
    finetune_optim: OptimConfig = None  # None: same settings as optim
    mc_eval_samples: int = 10
    train_bn_affine: bool = None
    sharing: str = "per_output_channel"
    rho_init: float = pt.RHO_INIT
    lam: float = 1.0
    bottleneck_lr_scale: float = 10.0
    split_fraction: float = 0.8

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ContractError(f"unknown protocol {self.protocol!r}")
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}")
        if self.objective is None:
            like = "entropy" if self.protocol == "continual_online" else "info_max_plus_pseudo"
            object.__setattr__(self, "objective", ObjectiveConfig(likelihood=like))
        if self.train_bn_affine is None:
            object.__setattr__(self, "train_bn_affine", self.protocol == "continual_online")
        if self.finetune_optim is None:
            object.__setattr__(self, "finetune_optim", self.optim)
        if self.mc_eval_samples < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ContractError("invalid protocol settings")


@dataclass
class RunMetrics:
    per_domain_accuracy: dict = field(default_factory=dict)
    source_accuracy: float = 0.0
    target_accuracy: float = 0.0
    harmonic: float = 0.0
    sigma_l1_per_layer: dict = field(default_factory=dict)
    a_distance: float = None
    wall_clock: float = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


@dataclass
class AdaptResult:
    model: object  # adapted SourceModel: source weights with updated BN (or fine-tuned weights)
    pert: object = None
    prior: object = None
    history: list = field(default_factory=list)


def harmonic_mean(s, t):
    return 2.0 * s * t / (s + t) if s + t > 0 else 0.0


def accuracy(probs, y):
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(y)))


# -- source training ----------------------------------------------------------

def _model_params(model, with_bn=True):
    params = {}
    for lid, w in model.weights.items():
        params["w/" + lid] = w
    for lid, b in model.biases.items():
        params["b/" + lid] = b
    if with_bn:
        for lid, st in model.bn_state.items():
            params["gamma/" + lid] = st.gamma
            params["beta/" + lid] = st.beta
    return params


def _param_views(model, with_bn=True):
    weights = {lid: ag.param(w, "w/" + lid) for lid, w in model.weights.items()}
    biases = {lid: ag.param(b, "b/" + lid) for lid, b in model.biases.items()}
    aff = {}
    if with_bn:
        aff = {lid: (ag.param(st.gamma, "gamma/" + lid), ag.param(st.beta, "beta/" + lid))
               for lid, st in model.bn_state.items()}
    return weights, biases, aff


def _adopt_bn(model, new_bn):
    # keep the model's own gamma/beta arrays (optimizers update them in place)
    for lid, st in new_bn.items():
        cur = model.bn_state[lid]
        model.bn_state[lid] = BNState(st.running_mean, st.running_var, cur.gamma, cur.beta, cur.momentum)


def predict(model, x, batch_size=512):
    out = []
    for s in range(0, len(x), batch_size):
        logits, _, _ = forward(model, model.weights, x[s:s + batch_size], "eval")
        out.append(softmax(logits))
    return np.vstack(out)


def features_of(model, x):
    _, f, _ = forward(model, model.weights, x, "eval")
    return np.asarray(f)


def train_source(x, y, layers, cfg=TrainConfig(), log=None):
    """Minibatch SGD on softmax cross-entropy.

    Stops at the epoch cap, at perfect train accuracy, or after ``patience``
    epochs without improvement. ``log`` (a list) receives dicts with keys
    epoch, loss, train_acc.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ContractError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    model = init_model(layers, rng)
    n_classes = model.n_classes
    if y.min() < 0 or y.max() >= n_classes:
        raise ContractError("labels out of range for the architecture")
    opt = Optimizer(OptimConfig("sgd", cfg.lr, cfg.momentum, cfg.weight_decay))
    params = _model_params(model)
    best, stale, step = -1.0, 0, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(y), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2 and len(y) >= 2:
                continue
            w, b, aff = _param_views(model)
            logits, _, bn = forward(model, w, x[idx], "train", biases=b, bn_affine=aff)
            loss = softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss.value):
                raise NumericError(f"source training diverged at step {step}")
            opt.step(params, ag.backward(loss, list(params)))
            _adopt_bn(model, bn)
            total += float(loss.value) * len(idx)
            step += 1
        acc = accuracy(predict(model, x), y)
        if log is not None:
            log.append({"epoch": epoch, "loss": total / len(y), "train_acc": acc})
        if acc > best:
            best, stale = acc, 0
        else:
            stale += 1
        if acc >= 1.0 or stale >= cfg.patience:
            break
    return model


# -- offline / generalized ------------------------------------------------------

def _bottleneck_id(model):
    ids = model.perturbable_ids()
    return ids[-2] if len(ids) >= 2 and model.spec(ids[-2]).kind == "dense" else None


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        if len(idx) >= 2:
            yield idx


def _current_outputs(model, pert, x, cfg, rng):
    if pert is None:
        return predict(model, x), features_of(model, x)
    return pt.predict_mc(model, pert, x, cfg.mc_eval_samples, rng, return_features=True)


def adapt_offline(model, x_target, cfg=ProtocolConfig()):
    """Adapt to an unlabeled target set over ``cfg.epochs`` passes.

    With ``method='perturbation'`` only rho (and optionally BN affine) is
    learned and the source weights are untouched; with ``method='finetune'``
    every weight is trained on the same likelihood surrogate without KL.
    """
    if cfg.protocol == "continual_online":
        raise ContractError("adapt_offline handles offline and generalized protocols")
    x_target = np.asarray(x_target, dtype=np.float64)
    n = len(x_target)
    rng = np.random.default_rng(cfg.seed)
    m = model.copy()
    res = AdaptResult(m)
    if cfg.method == "perturbation":
        res.pert = pt.init_perturbations(m, cfg.sharing, cfg.rho_init)
        res.prior = pt.adaptive_prior(m, cfg.lam, res.pert.scheme)
        params = {"rho/" + lid: r for lid, r in res.pert.rho.items()}
        if cfg.train_bn_affine:
            for lid, st in m.bn_state.items():
                params["gamma/" + lid], params["beta/" + lid] = st.gamma, st.beta
        bott = _bottleneck_id(m)
        scale = {"rho/" + bott: cfg.bottleneck_lr_scale} if bott else {}
        opt = Optimizer(cfg.optim, lr_scale=scale)
    else:
        params = _model_params(m)
        opt = Optimizer(cfg.finetune_optim)
    needs_pseudo = cfg.objective.likelihood == "info_max_plus_pseudo"
    state = None
    for epoch in range(cfg.epochs):
        if needs_pseudo:
            probs, feats = _current_outputs(m, res.pert, x_target, cfg, rng)
            state = compute_pseudo_labels(feats, probs, epoch)
        total = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            loss, bn = _adapt_loss(m, res, x_target[idx], state, idx, cfg, n, rng)
            total += float(loss.value) * len(idx)
            opt.step(params, ag.backward(loss, list(params)))
            _adopt_bn(m, bn)
        res.history.append({"epoch": epoch, "loss": total / n})
    return res


def _adapt_loss(m, res, xb, state, idx, cfg, n_target, rng):
    aff = {}
    if res.pert is not None:
        rho = pt.rho_params(res.pert)
        if cfg.train_bn_affine:
            aff = {lid: (ag.param(st.gamma, "gamma/" + lid), ag.param(st.beta, "beta/" + lid))
                   for lid, st in m.bn_state.items()}
        try:
            return adaptation_objective(m, res.pert, res.prior, xb, state, cfg.objective, n_target, rng,
                                        rho=rho, bn_affine=aff, batch_index=idx, return_state=True)
        except NumericError as exc:
            peak = max(float(np.abs(r).max()) for r in res.pert.rho.values())
            raise NumericError(f"adaptation diverged ({exc}); max |rho| = {peak:.3g}") from exc
    w, b, aff = _param_views(m)
    logits, _, bn = forward(m, w, xb, "train", biases=b, bn_affine=aff)
    pseudo = None if state is None or idx is None else state.labels[idx]
    loss = likelihood_loss(ag.exp(ag.log_softmax(logits)), cfg.objective, pseudo)
    if not np.isfinite(loss.value):
        raise NumericError("fine-tuning loss is not finite")
    return loss, bn


def evaluate(res, x, y, n_samples=10, seed=0):
    """Accuracy of an adaptation result (MC-averaged when perturbed)."""
    if len(y) == 0:
        raise ContractError("empty evaluation split")
    if res.pert is None:
        return accuracy(predict(res.model, x), y)
    rng = np.random.default_rng(seed)
    return accuracy(pt.predict_mc(res.model, res.pert, x, n_samples, rng), y)


def eval_generalized(res, source_holdout, target, source_model=None, n_samples=10, seed=0):
    """Source-holdout and target accuracy plus their harmonic mean.

    The primary source figure uses the adapted BN statistics; when
    ``source_model`` is given, the figure with the source BN statistics is
    stored in ``extra['source_accuracy_source_bn']``.
    """
    xs, ys = source_holdout
    xt, yt = target
    if len(ys) == 0 or len(yt) == 0:
        raise ContractError("empty split")
    s = evaluate(res, xs, ys, n_samples, seed)
    t = evaluate(res, xt, yt, n_samples, seed)
    metrics = RunMetrics(per_domain_accuracy={"source": s, "target": t}, source_accuracy=s,
                         target_accuracy=t, harmonic=harmonic_mean(s, t))
    if res.pert is not None:
        metrics.sigma_l1_per_layer = pt.sigma_l1_per_layer(res.pert)
    if source_model is not None:
        bn = {k: BNState(v.running_mean, v.running_var, res.model.bn_state[k].gamma,
                         res.model.bn_state[k].beta, v.momentum) for k, v in source_model.bn_state.items()}
        pre = AdaptResult(res.model.with_bn(bn), res.pert)
        metrics.extra["source_accuracy_source_bn"] = evaluate(pre, xs, ys, n_samples, seed)
    return metrics


# -- continual online -------------------------------------------------------------

def run_continual_stream(model, stream, cfg=ProtocolConfig(protocol="continual_online")):
    """Predict each batch, then take exactly one adaptation step on it.

    ``stream`` is an ordered list of (domain_id, x, y) or
    (domain_id, kind, severity, x, y) tuples. Returns (RunMetrics, trace);
    per-domain figures are accuracies in ``per_domain_accuracy`` and errors in
    ``extra['per_domain_error']``, both in stream order.
    """
    rng = np.random.default_rng(cfg.seed)
    m = model.copy()
    res = AdaptResult(m)
    if cfg.method == "perturbation":
        res.pert = pt.init_perturbations(m, cfg.sharing, cfg.rho_init)
        res.prior = pt.adaptive_prior(m, cfg.lam, res.pert.scheme)
        params = {"rho/" + lid: r for lid, r in res.pert.rho.items()}
        if cfg.train_bn_affine:
            for lid, st in m.bn_state.items():
                params["gamma/" + lid], params["beta/" + lid] = st.gamma, st.beta
        opt = Optimizer(cfg.optim)
    else:
        params = _model_params(m)
        opt = Optimizer(cfg.finetune_optim)
    n_total = max(sum(len(item[-1]) for item in stream), 1)
    trace, errors = [], {}
    for step, item in enumerate(stream):
        dom, xb, yb = item[0], item[-2], item[-1]
        kind, sev = (item[1], item[2]) if len(item) == 5 else ("none", 0)
        if res.pert is None:
            probs = predict(m, xb)
        else:
            probs = pt.predict_mc(m, res.pert, xb, cfg.mc_eval_samples, rng)
        err = 1.0 - accuracy(probs, yb)
        trace.append({"step": step, "domain_id": dom, "corruption": kind, "severity": sev, "error": err})
        errors.setdefault(dom, []).append((err, len(yb)))
        if len(yb) < 2:
            continue
        loss, bn = _adapt_loss(m, res, xb, None, None, cfg, n_total, rng)
        res.history.append({"step": step, "loss": float(ag.value_of(loss))})
        opt.step(params, ag.backward(loss, list(params)))
        _adopt_bn(m, bn)
    per_err = {d: float(np.mean([e for e, _ in v])) for d, v in errors.items()}
    metrics = RunMetrics(per_domain_accuracy={d: 1.0 - e for d, e in per_err.items()})
    metrics.target_accuracy = 1.0 - float(np.mean(list(per_err.values()))) if per_err else 0.0
    metrics.extra["per_domain_error"] = per_err
    metrics.extra["mean_error"] = float(np.mean(list(per_err.values()))) if per_err else 0.0
    if res.pert is not None:
        metrics.sigma_l1_per_layer = pt.sigma_l1_per_layer(res.pert)
    return metrics, trace, res


# -- analysis -------------------------------------------------------------------------

sigma_l1_per_layer = pt.sigma_l1_per_layer


def a_distance_from_error(err):
    return float(min(max(2.0 * (1.0 - 2.0 * err), 0.0), 2.0))


def a_distance(features_s, features_t, seed=0, steps=300, lr=0.5):
    """Proxy A-distance from a logistic-regression domain classifier.

    The pooled features are split 50/50 per domain; the classifier is trained
    on one half with the library's SGD and its error on the other half is
    plugged into 2(1 - 2 err).
    """
    if len(features_s) == 0 or len(features_t) == 0:
        raise ContractError("both feature sets must be non-empty")
    fs = np.asarray(features_s, dtype=np.float64).reshape(len(features_s), -1)
    ft = np.asarray(features_t, dtype=np.float64).reshape(len(features_t), -1)
    rng = np.random.default_rng(seed)
    ps, pt_ = rng.permutation(len(fs)), rng.permutation(len(ft))
    hs, ht = (len(fs) + 1) // 2, (len(ft) + 1) // 2
    xtr = np.vstack([fs[ps[:hs]], ft[pt_[:ht]]])
    ytr = np.concatenate([np.zeros(hs), np.ones(ht)])
    xte = np.vstack([fs[ps[hs:]], ft[pt_[ht:]]])
    yte = np.concatenate([np.zeros(len(fs) - hs), np.ones(len(ft) - ht)])
    mu, sd = xtr.mean(axis=0), xtr.std(axis=0)
    sd[sd == 0] = 1.0
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    w, b = np.zeros(xtr.shape[1]), np.zeros(1)
    params = {"w": w, "b": b}
    opt = Optimizer(OptimConfig("sgd", lr, 0.9, 0.0))
    # class-balanced logistic loss, full batch
    cw = np.where(ytr == 1, 0.5 / ht, 0.5 / hs)
    for _ in range(steps):
        z = xtr @ w + b[0]
        p = 1.0 / (1.0 + np.exp(-z))
        g = cw * (p - ytr)
        opt.step(params, {"w": xtr.T @ g + 1e-3 * w, "b": np.array([g.sum()])})
    if len(yte) == 0:
        return 0.0
    pred = (xte @ w + b[0]) > 0
    err_s = np.mean(pred[yte == 0]) if (yte == 0).any() else 0.0
    err_t = np.mean(~pred[yte == 1]) if (yte == 1).any() else 0.0
    return a_distance_from_error(0.5 * (err_s + err_t))


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
