"""Model and perturbation (de)serialization on top of the tensor container."""

import numpy as np

from vmp import container
from vmp.errors import ContractError
from vmp.nn.model import BNState, LayerSpec, SourceModel, check_arch
from vmp.perturbation import PerturbationSet, PriorSet, make_scheme


def model_entries(model, extra_meta=None):
    meta = {"format": "vmp-model", "layers": [s.to_dict() for s in model.layers]}
    meta.update(extra_meta or {})
    entries = {"meta": container.meta_entry(meta)}
    for lid in model.ids:
        if lid in model.weights:
            entries["weight/" + lid] = model.weights[lid]
        if lid in model.biases:
            entries["bias/" + lid] = model.biases[lid]
        if lid in model.bn_state:
            st = model.bn_state[lid]
            for key in ("running_mean", "running_var", "gamma", "beta"):
                entries[f"bn/{lid}/{key}"] = getattr(st, key)
            entries[f"bn/{lid}/momentum"] = np.array(st.momentum)
    return entries


def _bn_from(entries, lid):
    get = lambda k: entries[f"bn/{lid}/{k}"].copy()
    return BNState(get("running_mean"), get("running_var"), get("gamma"), get("beta"),
                   float(entries[f"bn/{lid}/momentum"]))


def model_from_entries(entries):
    meta = container.read_meta(entries)
    if meta.get("format") != "vmp-model":
        raise ContractError("container does not hold a model")
    layers = [LayerSpec.from_dict(d) for d in meta["layers"]]
    check_arch(layers)
    model = SourceModel(layers, {}, {}, {})
    for lid, spec in zip(model.ids, layers):
        if spec.kind in ("dense", "conv2d"):
            model.weights[lid] = entries["weight/" + lid].copy()
            if spec.bias:
                model.biases[lid] = entries["bias/" + lid].copy()
        elif spec.kind == "batchnorm":
            model.bn_state[lid] = _bn_from(entries, lid)
    return model, meta


def save_model(path, model, extra_meta=None):
    container.save(path, model_entries(model, extra_meta))


def load_model(path):
    return model_from_entries(container.load(path))[0]


def pert_entries(pert, prior=None, bn_state=None, extra_meta=None):
    meta = {"format": "vmp-perturbation", "scheme": pert.scheme.kind, "layers": list(pert.rho),
            "n_groups": {lid: int(pert.scheme.n_groups[lid]) for lid in pert.rho}}
    if prior is not None:
        meta["lambda"] = prior.lam
    meta.update(extra_meta or {})
    entries = {"meta": container.meta_entry(meta)}
    for lid, r in pert.rho.items():
        entries["rho/" + lid] = r
        if prior is not None:
            entries["prior/" + lid] = prior.variance[lid]
    for lid, st in (bn_state or {}).items():
        for key in ("running_mean", "running_var", "gamma", "beta"):
            entries[f"bn/{lid}/{key}"] = getattr(st, key)
        entries[f"bn/{lid}/momentum"] = np.array(st.momentum)
    return entries


def pert_from_entries(entries, model):
    """Rebuild (pert, prior_or_None, bn_state) against ``model``'s architecture."""
    meta = container.read_meta(entries)
    if meta.get("format") != "vmp-perturbation":
        raise ContractError("container does not hold a perturbation set")
    scheme = make_scheme(model, meta["scheme"])
    if set(meta["layers"]) != set(scheme.group_index):
        raise ContractError("perturbation layers do not match the model architecture")
    rho, prior = {}, {}
    for lid in meta["layers"]:
        r = entries["rho/" + lid].copy()
        if r.shape != (scheme.n_groups[lid],):
            raise ContractError(f"rho for {lid} has {r.size} groups, model needs {scheme.n_groups[lid]}")
        rho[lid] = r
        if "prior/" + lid in entries:
            prior[lid] = entries["prior/" + lid].copy()
    bn = {lid: _bn_from(entries, lid) for lid in model.bn_state if f"bn/{lid}/gamma" in entries}
    prior_set = PriorSet(prior, meta.get("lambda", 1.0)) if prior else None
    return PerturbationSet(rho, scheme), prior_set, bn
