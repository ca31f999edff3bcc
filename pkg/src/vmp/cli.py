"""Command-line entry point: train-source, adapt, stream, analyze."""

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from vmp import config as config_mod
from vmp import container
from vmp import io
from vmp import perturbation as pt
from vmp.domains import DatasetSpec, ShiftSpec, corruption_stream, generate, split_source
from vmp.errors import ContractError, NumericError
from vmp.nn.model import mlp, small_cnn
from vmp.nn.optim import OptimConfig
from vmp.objectives import ObjectiveConfig
from vmp.protocols import (ProtocolConfig, TrainConfig, a_distance, accuracy, adapt_offline, eval_generalized,
                           features_of, predict, run_continual_stream, train_source)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


# -- config -> objects ---------------------------------------------------------------

def source_spec(cfg):
    return DatasetSpec(cfg["data.kind"], cfg["data.n_per_class"], cfg["data.classes"], ShiftSpec(),
                       cfg["data.seed"], cfg["data.noise"])


def target_spec(cfg):
    shift = ShiftSpec(cfg["target.rotation_deg"], tuple(cfg["target.translation"]), cfg["target.noise_sigma"],
                      cfg["target.corruption"], cfg["target.severity"])
    return DatasetSpec(cfg["data.kind"], cfg["target.n_per_class"], cfg["data.classes"], shift,
                       cfg["target.seed"], cfg["data.noise"])


def build_arch(cfg, input_dims, n_classes):
    if cfg["arch.kind"] == "mlp":
        return mlp(int(np.prod(input_dims)), cfg["arch.hidden"], n_classes, cfg["arch.bottleneck"] or None,
                   cfg["arch.batchnorm"])
    if cfg["arch.kind"] == "cnn":
        return small_cnn(tuple(input_dims), cfg["arch.channels"], n_classes, cfg["arch.bottleneck"],
                         cfg["arch.kernel"])
    raise config_mod.ConfigError(f"unknown arch.kind {cfg['arch.kind']!r}")


def train_config(cfg):
    return TrainConfig(cfg["train.epochs"], cfg["train.batch_size"], cfg["train.lr"], cfg["train.momentum"],
                       cfg["train.weight_decay"], cfg["train.patience"], cfg["seed"])


def protocol_config(cfg, protocol=None):
    protocol = protocol or cfg["protocol.name"]
    like = cfg["objective.likelihood"]
    if like == "auto":
        like = "entropy" if protocol == "continual_online" else "info_max_plus_pseudo"
    affine = cfg["protocol.train_bn_affine"]
    affine = None if affine == "auto" else {"true": True, "false": False}.get(str(affine).lower())
    if cfg["protocol.train_bn_affine"] != "auto" and affine is None:
        raise config_mod.ConfigError("protocol.train_bn_affine must be auto, true or false")
    obj = ObjectiveConfig(like, cfg["objective.beta"], cfg["objective.kl_scale"], cfg["objective.mc_train_samples"],
                          cfg["objective.local_reparam"])
    optim = OptimConfig(cfg["optim.kind"], cfg["optim.lr"], cfg["optim.momentum"], cfg["optim.weight_decay"])
    return ProtocolConfig(protocol=protocol, method=cfg["protocol.method"], epochs=cfg["protocol.epochs"],
                          batch_size=cfg["protocol.batch_size"], seed=cfg["seed"], objective=obj, optim=optim,
                          mc_eval_samples=cfg["protocol.mc_eval_samples"], train_bn_affine=affine,
                          sharing=cfg["perturbation.sharing"], rho_init=cfg["perturbation.rho_init"],
                          lam=cfg["perturbation.lambda"],
                          bottleneck_lr_scale=cfg["perturbation.bottleneck_lr_scale"],
                          split_fraction=cfg["protocol.split_fraction"])


def source_training_data(cfg):
    x, y = generate(source_spec(cfg))
    holdout = None
    if cfg["protocol.name"] == "generalized":
        (x, y), holdout = split_source(x, y, cfg["protocol.split_fraction"], cfg["data.seed"])
    return (x, y), holdout


# -- output helpers ------------------------------------------------------------------

def _outdir(cfg):
    os.makedirs(cfg["output.dir"], exist_ok=True)
    return cfg["output.dir"]


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=float)
        fh.write("\n")


def _check_model(model, input_dims, n_classes):
    if tuple(model.input_dims) != tuple(input_dims) or model.n_classes != n_classes:
        raise ContractError(f"model/arch mismatch: model takes {tuple(model.input_dims)} -> {model.n_classes} "
                            f"classes, data has {tuple(input_dims)} -> {n_classes}")


# -- commands ------------------------------------------------------------------------

def cmd_train_source(cfg, out=None):
    (x, y), _ = source_training_data(cfg)
    layers = build_arch(cfg, x.shape[1:], cfg["data.classes"])
    log = []
    model = train_source(x, y, layers, train_config(cfg), log)
    out = out or os.path.join(_outdir(cfg), "model.vmp")
    io.save_model(out, model, {"classes": cfg["data.classes"], "seed": cfg["seed"]})
    base = os.path.splitext(out)[0]
    write_csv(base + "_train_log.csv", ["epoch", "loss", "train_acc"],
              [(r["epoch"], r["loss"], r["train_acc"]) for r in log])
    return {"model": out, "epochs": len(log), "train_acc": log[-1]["train_acc"] if log else None}


def cmd_adapt(cfg, model_path):
    t0 = time.perf_counter()
    model = io.load_model(model_path)
    pcfg = protocol_config(cfg)
    if pcfg.protocol == "continual_online":
        raise config_mod.ConfigError("use the 'stream' command for protocol.name = continual_online")
    xs_all, ys_all = generate(source_spec(cfg))
    xt, yt = generate(target_spec(cfg))
    _check_model(model, xt.shape[1:], cfg["data.classes"])
    res = adapt_offline(model, xt, pcfg)
    if pcfg.protocol == "generalized":
        _, holdout = split_source(xs_all, ys_all, pcfg.split_fraction, cfg["data.seed"])
    else:
        holdout = (xs_all, ys_all)
    metrics = eval_generalized(res, holdout, (xt, yt), source_model=model, n_samples=pcfg.mc_eval_samples,
                               seed=cfg["seed"])
    metrics.extra["source_model_target_accuracy"] = accuracy(predict(model, xt), yt)
    metrics.a_distance = a_distance(features_of(model, xs_all), features_of(model, xt), cfg["seed"])
    out = _outdir(cfg)
    if res.pert is not None:
        container.save(os.path.join(out, "pert.vmp"),
                       io.pert_entries(res.pert, res.prior, res.model.bn_state,
                                       {"protocol": pcfg.protocol, "seed": cfg["seed"]}))
    else:
        io.save_model(os.path.join(out, "adapted_model.vmp"), res.model)
    sig = metrics.sigma_l1_per_layer
    rows = sorted(sig.items(), key=lambda kv: model.ids.index(kv[0]))
    write_csv(os.path.join(out, "sigma.csv"), ["layer_id", "l1_sigma"], rows)
    if cfg["output.timing"]:
        metrics.wall_clock = time.perf_counter() - t0
    write_json(os.path.join(out, "metrics.json"), metrics.to_dict())
    return metrics.to_dict()


def cmd_stream(cfg, model_path):
    t0 = time.perf_counter()
    model = io.load_model(model_path)
    spec = DatasetSpec("tinygrid" if cfg["data.kind"] == "tinygrid" else cfg["data.kind"],
                       cfg["stream.n_per_class"], cfg["data.classes"], ShiftSpec(), cfg["data.seed"],
                       cfg["data.noise"])
    if spec.kind != "tinygrid":
        raise config_mod.ConfigError("the corruption stream needs data.kind = tinygrid")
    pcfg = protocol_config(cfg, "continual_online")
    stream = corruption_stream(spec, cfg["stream.kinds"], cfg["stream.severities"], pcfg.batch_size, cfg["seed"])
    if stream:
        _check_model(model, stream[0][3].shape[1:], cfg["data.classes"])
    metrics, trace, _ = run_continual_stream(model, stream, pcfg)
    out = _outdir(cfg)
    write_csv(os.path.join(out, "trace.csv"), ["step", "domain_id", "corruption", "severity", "error"],
              [(r["step"], r["domain_id"], r["corruption"], r["severity"], r["error"]) for r in trace])
    summary = {
        "domains": [{"domain_id": d, "mean_error": e} for d, e in metrics.extra["per_domain_error"].items()],
        "mean_error": metrics.extra["mean_error"],
        "n_batches": len(trace),
        "method": pcfg.method,
        "sigma_l1_per_layer": metrics.sigma_l1_per_layer,
        "wall_clock": time.perf_counter() - t0 if cfg["output.timing"] else None,
    }
    write_json(os.path.join(out, "summary.json"), summary)
    return summary


def cmd_analyze(cfg, model_path, pert_path=None, sigma=False):
    model = io.load_model(model_path)
    xs, _ = generate(source_spec(cfg))
    xt, _ = generate(target_spec(cfg))
    _check_model(model, xt.shape[1:], cfg["data.classes"])
    result = {"a_distance": a_distance(features_of(model, xs), features_of(model, xt), cfg["seed"])}
    if sigma:
        if not pert_path:
            raise FileNotFoundError("--sigma needs --pert PATH")
        pert, _, _ = io.pert_from_entries(container.load(pert_path), model)
        result["sigma_l1_per_layer"] = pt.sigma_l1_per_layer(pert)
        result["sigma_l1_total"] = float(sum(result["sigma_l1_per_layer"].values()))
    write_json(os.path.join(_outdir(cfg), "analysis.json"), result)
    return result


# -- entry point ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="vmp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train-source", "adapt", "stream", "analyze"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--out-dir")
        if name == "train-source":
            s.add_argument("--out", help="model container path (default: <output.dir>/model.vmp)")
        else:
            s.add_argument("--model", required=True)
        if name == "analyze":
            s.add_argument("--pert")
            s.add_argument("--sigma", action="store_true")
    return p


def _fail(code, kind, exc):
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config_mod.load(args.config)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    except ContractError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out_dir:
        cfg["output.dir"] = args.out_dir
    try:
        if args.command == "train-source":
            result = cmd_train_source(cfg, args.out)
        elif args.command == "adapt":
            result = cmd_adapt(cfg, args.model)
        elif args.command == "stream":
            result = cmd_stream(cfg, args.model)
        else:
            result = cmd_analyze(cfg, args.model, args.pert, args.sigma)
    except config_mod.ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (OSError, KeyError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except ContractError as exc:
        return _fail(EXIT_CONFIG, "contract", exc)
    print(json.dumps(result, indent=2, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
