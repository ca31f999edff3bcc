"""Flat ``dotted.key = value`` run configuration with strict key checking.

Values are JSON literals (numbers, true/false, "strings", [lists]); a bare
word is read as a string. ``#`` starts a comment.
"""

import json

from vmp.errors import ContractError


class ConfigError(ContractError):
    pass


DEFAULTS = {
    "seed": 0,
    # source data
    "data.kind": "moons",
    "data.n_per_class": 500,
    "data.classes": 2,
    "data.noise": 0.1,
    "data.seed": 0,
    # target domain: same generator, shifted
    "target.n_per_class": 500,
    "target.seed": 1,
    "target.rotation_deg": 30.0,
    "target.translation": [0.0, 0.0],
    "target.noise_sigma": 0.0,
    "target.corruption": "none",
    "target.severity": 0,
    # architecture
    "arch.kind": "mlp",
    "arch.hidden": [32],
    "arch.bottleneck": 16,
    "arch.batchnorm": "all",
    "arch.channels": [8],
    "arch.kernel": 3,
    # source training
    "train.epochs": 50,
    "train.batch_size": 64,
    "train.lr": 0.05,
    "train.momentum": 0.9,
    "train.weight_decay": 0.0,
    "train.patience": 10,
    # adaptation protocol
    "protocol.name": "offline",
    "protocol.method": "perturbation",
    "protocol.epochs": 10,
    "protocol.batch_size": 64,
    "protocol.mc_eval_samples": 10,
    "protocol.train_bn_affine": "auto",
    "protocol.split_fraction": 0.8,
    "perturbation.sharing": "per_output_channel",
    "perturbation.rho_init": -10.0,
    "perturbation.lambda": 1.0,
    "perturbation.bottleneck_lr_scale": 10.0,
    "objective.likelihood": "auto",
    "objective.beta": 0.3,
    "objective.kl_scale": 1.0,
    "objective.mc_train_samples": 1,
    "objective.local_reparam": True,
    "optim.kind": "sgd",
    "optim.lr": 0.1,
    "optim.momentum": 0.9,
    "optim.weight_decay": 0.0,
    # continual stream
    "stream.kinds": ["gauss_noise", "blur", "contrast"],
    "stream.severities": [1, 2, 3, 4, 5],
    "stream.n_per_class": 32,
    # outputs
    "output.dir": "out",
    "output.timing": False,
}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(key, value, lineno):
    default = DEFAULTS[key]
    where = f"line {lineno}: " if lineno else ""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}{key} expects true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}{key} expects an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}{key} expects a number, got {value!r}")
        value = float(value)
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}{key} expects a list, got {value!r}")
    elif not isinstance(value, str):
        raise ConfigError(f"{where}{key} expects a string, got {value!r}")
    return value


def parse(text):
    """Parse config text into a full key -> value dict (defaults filled in)."""
    cfg = dict(DEFAULTS)
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not _in_string_comment(raw) else raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = (part.strip() for part in line.partition("="))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        cfg[key] = _coerce(key, _parse_value(val), lineno)
    return cfg


def _in_string_comment(raw):
    # a '#' inside a quoted string is part of the value
    head = raw.split("#", 1)[0]
    return head.count('"') % 2 == 1


def load(path):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def dump(cfg):
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in cfg.items())
