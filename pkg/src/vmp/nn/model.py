"""Layer specs, the frozen source model, and the forward pass."""

from dataclasses import dataclass, field, replace

import numpy as np

from vmp.errors import DimensionError, NumericError
from vmp.nn import autograd as ag

BN_EPS = 1e-5
PERTURBABLE = ("dense", "conv2d")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv2d | batchnorm | relu | flatten
    in_dims: tuple
    out_dims: tuple
    kernel: tuple = ()  # (h, w, c_in, c_out) for conv2d
    bias: bool = True

    def to_dict(self):
        return {"kind": self.kind, "in_dims": list(self.in_dims), "out_dims": list(self.out_dims),
                "kernel": list(self.kernel), "bias": self.bias}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d["in_dims"]), tuple(d["out_dims"]), tuple(d.get("kernel", ())),
                   bool(d.get("bias", True)))


@dataclass
class BNState:
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    momentum: float = 0.1

    def copy(self):
        return BNState(self.running_mean.copy(), self.running_var.copy(), self.gamma.copy(),
                       self.beta.copy(), self.momentum)


@dataclass
class SourceModel:
    layers: list
    weights: dict
    biases: dict = field(default_factory=dict)
    bn_state: dict = field(default_factory=dict)

    @property
    def ids(self):
        return [layer_id(i, spec) for i, spec in enumerate(self.layers)]

    def perturbable_ids(self):
        return [lid for lid, spec in zip(self.ids, self.layers) if spec.kind in PERTURBABLE]

    def spec(self, lid):
        return self.layers[self.ids.index(lid)]

    @property
    def input_dims(self):
        return self.layers[0].in_dims

    @property
    def n_classes(self):
        return self.layers[-1].out_dims[0]

    def copy(self):
        return SourceModel(list(self.layers), {k: v.copy() for k, v in self.weights.items()},
                           {k: v.copy() for k, v in self.biases.items()},
                           {k: v.copy() for k, v in self.bn_state.items()})

    def with_bn(self, bn_state):
        return replace(self, bn_state=bn_state)


def layer_id(index, spec):
    return f"{spec.kind}{index}"


def mlp(in_dim, hidden, n_classes, bottleneck=None, batchnorm="all"):
    """Dense stack; ``bottleneck`` adds a penultimate dense layer.

    ``batchnorm`` is "all", "bottleneck" (only after the bottleneck) or "none".
    """
    layers, d = [], in_dim
    widths = list(hidden) + ([bottleneck] if bottleneck else [])
    for i, h in enumerate(widths):
        layers.append(LayerSpec("dense", (d,), (h,)))
        last = bottleneck and i == len(widths) - 1
        if batchnorm == "all" or (batchnorm == "bottleneck" and last):
            layers.append(LayerSpec("batchnorm", (h,), (h,)))
        layers.append(LayerSpec("relu", (h,), (h,)))
        d = h
    layers.append(LayerSpec("dense", (d,), (n_classes,)))
    return layers


def small_cnn(in_shape, channels, n_classes, bottleneck=32, kernel=3):
    """conv-BN-ReLU blocks, flatten, dense bottleneck, classifier."""
    c, h, w = in_shape
    layers = []
    for co in channels:
        layers.append(LayerSpec("conv2d", (c, h, w), (co, h, w), kernel=(kernel, kernel, c, co)))
        layers.append(LayerSpec("batchnorm", (co, h, w), (co, h, w)))
        layers.append(LayerSpec("relu", (co, h, w), (co, h, w)))
        c = co
    flat = c * h * w
    layers.append(LayerSpec("flatten", (c, h, w), (flat,)))
    layers.append(LayerSpec("dense", (flat,), (bottleneck,)))
    layers.append(LayerSpec("batchnorm", (bottleneck,), (bottleneck,)))
    layers.append(LayerSpec("relu", (bottleneck,), (bottleneck,)))
    layers.append(LayerSpec("dense", (bottleneck,), (n_classes,)))
    return layers


def check_arch(layers):
    if not layers:
        raise DimensionError("architecture is empty")
    for i, spec in enumerate(layers):
        if spec.kind not in ("dense", "conv2d", "batchnorm", "relu", "flatten"):
            raise DimensionError(f"layer {i}: unknown kind {spec.kind!r}")
        if i and tuple(layers[i - 1].out_dims) != tuple(spec.in_dims):
            raise DimensionError(f"layer {i} ({spec.kind}) expects {spec.in_dims}, "
                                 f"previous layer gives {layers[i - 1].out_dims}")
        if spec.kind == "conv2d":
            if len(spec.kernel) != 4 or min(spec.kernel) < 1:
                raise DimensionError(f"layer {i}: bad conv kernel {spec.kernel}")
            if spec.kernel[2] != spec.in_dims[0] or spec.kernel[3] != spec.out_dims[0]:
                raise DimensionError(f"layer {i}: kernel channels disagree with dims")
        if spec.kind == "flatten" and int(np.prod(spec.in_dims)) != spec.out_dims[0]:
            raise DimensionError(f"layer {i}: flatten size mismatch")
    if layers[-1].kind != "dense":
        raise DimensionError("last layer must be dense (the classifier)")


def weight_shape(spec):
    if spec.kind == "dense":
        return (spec.in_dims[0], spec.out_dims[0])
    return tuple(spec.kernel)


def init_model(layers, rng, momentum=0.1):
    """Glorot-uniform weights, zero biases, identity BN."""
    check_arch(layers)
    weights, biases, bn = {}, {}, {}
    for i, spec in enumerate(layers):
        lid = layer_id(i, spec)
        if spec.kind in PERTURBABLE:
            shape = weight_shape(spec)
            if spec.kind == "dense":
                fan_in, fan_out = shape
            else:
                kh, kw, ci, co = shape
                fan_in, fan_out = kh * kw * ci, kh * kw * co
            s = np.sqrt(6.0 / (fan_in + fan_out))
            weights[lid] = rng.uniform(-s, s, size=shape)
            if spec.bias:
                biases[lid] = np.zeros(shape[-1])
        elif spec.kind == "batchnorm":
            c = spec.out_dims[0]
            bn[lid] = BNState(np.zeros(c), np.ones(c), np.ones(c), np.zeros(c), momentum)
    return SourceModel(list(layers), weights, biases, bn)


def dense_op(x, w):
    return ag.matmul(x, w)


def conv_op(x, k):
    return ag.conv2d(x, k)


def _bn_axes(ndim):
    return (0,) if ndim == 2 else (0, 2, 3)


def _bn_view(v, ndim):
    return v if ndim == 2 else ag.reshape(v, (1, -1, 1, 1)) if isinstance(v, ag.Var) else v.reshape(1, -1, 1, 1)


def forward(model, weights, batch, mode="eval", *, biases=None, bn_affine=None, local_reparam=None,
            rng=None):
    """Run ``batch`` through ``model`` using ``weights`` for dense/conv layers.

    ``weights`` values may be arrays or :class:`Var`. ``biases`` and
    ``bn_affine`` (layer-id -> (gamma, beta)) optionally override the model's
    own. ``local_reparam`` maps layer-id -> per-weight variance (array or Var);
    for those layers the pre-activation is mean + zeta * sqrt(var) with zeta
    drawn from ``rng``.

    Returns (logits, features, bn_state). In train mode BN normalizes with
    batch statistics and the returned state holds updated running stats; in
    eval mode the model's state is returned unchanged.
    """
    x = batch
    xv = ag.value_of(x)
    if tuple(xv.shape[1:]) != tuple(model.input_dims):
        raise DimensionError(f"batch shape {xv.shape[1:]} does not match model input {model.input_dims}")
    biases = model.biases if biases is None else biases
    bn_affine = bn_affine or {}
    local_reparam = local_reparam or {}
    new_bn = dict(model.bn_state)
    features = None
    n = len(model.layers)
    for i, (lid, spec) in enumerate(zip(model.ids, model.layers)):
        if i == n - 1:
            features = x
        if spec.kind in PERTURBABLE:
            if lid not in weights:
                raise DimensionError(f"no weights supplied for layer {lid}")
            op = dense_op if spec.kind == "dense" else conv_op
            out = op(x, weights[lid])
            if lid in local_reparam:
                var = op(ag.square(x), local_reparam[lid])
                zeta = rng.standard_normal(ag.value_of(out).shape)
                out = out + zeta * ag.sqrt(var)
            if lid in biases:
                b = biases[lid]
                out = out + (b if spec.kind == "dense" else _bn_view(b, 4))
            x = out
        elif spec.kind == "relu":
            x = ag.relu(x)
        elif spec.kind == "flatten":
            x = ag.reshape(x, (ag.value_of(x).shape[0], -1))
        elif spec.kind == "batchnorm":
            st = model.bn_state[lid]
            gamma, beta = bn_affine.get(lid, (st.gamma, st.beta))
            ndim = ag.value_of(x).ndim
            axes = _bn_axes(ndim)
            if mode == "train":
                mu = ag.mean(x, axis=axes, keepdims=True)
                centered = x - mu
                var = ag.mean(ag.square(centered), axis=axes, keepdims=True)
                xhat = centered * ag.reciprocal(ag.sqrt(var + BN_EPS))
                m = st.momentum
                bm = ag.value_of(mu).reshape(-1)
                bv = ag.value_of(var).reshape(-1)
                new_bn[lid] = BNState((1 - m) * st.running_mean + m * bm, (1 - m) * st.running_var + m * bv,
                                      st.gamma, st.beta, m)
            elif mode == "eval":
                rm = st.running_mean if ndim == 2 else st.running_mean.reshape(1, -1, 1, 1)
                rv = st.running_var if ndim == 2 else st.running_var.reshape(1, -1, 1, 1)
                xhat = (x - rm) * (1.0 / np.sqrt(rv + BN_EPS))
            else:
                raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
            x = xhat * _bn_view(gamma, ndim) + _bn_view(beta, ndim)
        if not np.isfinite(ag.value_of(x)).all():
            raise NumericError(f"non-finite activations after layer {lid}")
    return x, features, new_bn


def source_weights(model):
    return dict(model.weights)
