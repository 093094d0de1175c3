"""Command-line pipeline: synth, train-base, bounds, boost, gbtrain, eval.

Every command is deterministic given its flags. Commands that take an
``--out-dir`` write into ``models/``, ``caches/`` and ``reports/`` below it
and record their inputs (with sha256 hashes) and seeds in
``manifest.json``. On failure a single JSON line
``{"error": <code>, "message": ...}`` is printed to stderr and the exit
code is 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bounds as bnd
from .errors import CertensError, ConfigError
from .evaluate import (
    EvaluationReport,
    clean_error,
    ensemble_certified_margins,
    margin_histogram,
    pgd_error,
    targeted_verified_error,
    verified_error,
)
from .gradboost import gb_train
from .network import (
    LabeledDataset,
    load_dataset,
    load_network,
    save_dataset,
    save_network,
    train_baseline,
)
from .problem import WeightVector, assemble, eliminate, robboost_loss, write_problem_cache
from .solver import coordinate_descent
from .synth import make_blobs, random_feature_mask, split

log = logging.getLogger("certens")

SOLVER_DEFAULTS = {"epochs": 3, "order": "random", "seed": 0, "hinge_offset": 1.0,
                   "debug_consistency": False, "drop_unimprovable": True}
EVAL_DEFAULTS = {"pgd_steps": 100, "pgd_step_size": None, "pgd_restarts": 2, "pgd_seed": 0,
                 "bins": 20}


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _layout(out_dir):
    out = Path(out_dir)
    for sub in ("models", "caches", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _record(out_dir, command, inputs, params, outputs):
    """Add or replace this command's entry in ``manifest.json``."""
    path = Path(out_dir) / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}}
    manifest["commands"][command] = {
        "inputs": {str(p): _sha256(p) for p in inputs},
        "params": params,
        "outputs": sorted(str(p) for p in outputs),
    }
    _dump(manifest, path)


def _spec(epsilon, p):
    try:
        return bnd.PerturbationSpec(p, epsilon)
    except CertensError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_floats(text):
    return [float(v) for v in str(text).replace(",", " ").split()]


def _parse_ints(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _load_config(path, defaults):
    cfg = dict(defaults)
    if path:
        extra = json.loads(Path(path).read_text())
        unknown = set(extra) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(extra)
    return cfg


# -- commands ---------------------------------------------------------------

def cmd_synth(out, classes=3, dims=2, points_per_class=100, spread=0.3, seed=0,
              center_scale=1.0, test_out=None, test_fraction=0.3):
    ds = make_blobs(classes, dims, points_per_class, spread, seed, center_scale)
    if test_out is None:
        save_dataset(ds, out)
        return ds, None
    train, test = split(ds, test_fraction, seed)
    save_dataset(train, out)
    save_dataset(test, test_out)
    return train, test


def cmd_train_base(dataset_path, out, hidden=(16,), seed=0, epochs=300, step_size=0.1,
                   feature_mask=None, feature_fraction=None, mask_seed=0):
    ds = load_dataset(dataset_path)
    if feature_mask is None and feature_fraction is not None:
        feature_mask = random_feature_mask(ds.dim, feature_fraction, mask_seed)
    if feature_mask is not None:
        ds = LabeledDataset(ds.examples, ds.labels, ds.num_classes, feature_mask)
    net = train_baseline(ds, tuple(hidden), seed, epochs, step_size)
    save_network(net, out)
    return net


def _model_name(path):
    return Path(path).name.removesuffix(".json")


def cmd_bounds(model_paths, dataset_path, epsilon, p, out_dir, z_file=None, tag=""):
    """Raw and normalized coefficient caches for every model.

    ``z_file`` (a ``{model_name: Z}`` JSON written by an earlier run) fixes
    the normalizers, e.g. to bound a test set with training-set values.
    """
    out = _layout(out_dir)
    spec = _spec(epsilon, p)
    ds = load_dataset(dataset_path)
    fixed = json.loads(Path(z_file).read_text()) if z_file else None
    result, outputs, zs = {}, [], {}
    suffix = f".{tag}" if tag else ""
    for mp in model_paths:
        name = _model_name(mp)
        net = load_network(mp)
        raw = bnd.margin_coefficient_set(net, ds.examples, ds.labels, spec)
        try:
            Z = fixed[name] if fixed is not None else bnd.compute_normalizer(raw)
            norm = bnd.normalize_coefficients(raw, Z)
        except bnd.NormalizerDegenerate as exc:
            raise bnd.NormalizerDegenerate(f"model {name}: {exc}") from exc
        raw_path = out / "caches" / f"{name}{suffix}.raw.rbbc"
        norm_path = out / "caches" / f"{name}{suffix}.norm.rbbc"
        bnd.write_bounds_cache(raw, raw_path)
        bnd.write_bounds_cache(norm, norm_path)
        zs[name] = float(Z)
        result[name] = {"raw": str(raw_path), "norm": str(norm_path), "Z": float(Z)}
        outputs += [raw_path, norm_path]
    z_path = out / "caches" / f"normalizers{suffix}.json"
    _dump(zs, z_path)
    outputs.append(z_path)
    inputs = [*model_paths, dataset_path] + ([z_file] if z_file else [])
    _record(out, f"bounds{suffix}", inputs, {"epsilon": spec.epsilon, "p": str(spec.p)}, outputs)
    return result


def _report(sets, alpha, models=None, dataset=None, eval_cfg=None, stats=None):
    """Evaluation report; clean/PGD need the models and dataset."""
    cfg = dict(EVAL_DEFAULTS, **(eval_cfg or {}))
    spec = sets[0].spec
    a = np.asarray(alpha, dtype=np.float64)
    margins = ensemble_certified_margins(sets, a)
    Z = [cs.Z for cs in sets]
    clean = pgd = None
    if models is not None and dataset is not None:
        clean = clean_error(models, a, Z, dataset)
        if spec.p == np.inf:
            pgd = pgd_error(models, a, Z, dataset, spec, cfg["pgd_steps"], cfg["pgd_step_size"],
                            cfg["pgd_restarts"], cfg["pgd_seed"])
    return EvaluationReport(
        clean_error=clean, pgd_error=pgd,
        verified_error=verified_error(margins),
        targeted_verified_error=targeted_verified_error(margins),
        margin_histogram=margin_histogram(margins, cfg["bins"]),
        metadata={"epsilon": spec.epsilon, "p": str(spec.p), "T": len(sets),
                  "alpha": a.tolist(), "Z": Z, "pgd_seed": cfg["pgd_seed"]},
        elimination_stats=stats,
    ).to_dict()


def cmd_boost(cache_paths, out_dir, solver_cfg=None, model_paths=None, dataset_path=None,
              test_cache_paths=None, test_dataset_path=None, eval_cfg=None):
    """Eliminate, assemble and optimise ensemble weights from normalized caches."""
    cfg = dict(SOLVER_DEFAULTS, **(solver_cfg or {}))
    out = _layout(out_dir)
    sets = [bnd.read_bounds_cache(p) for p in cache_paths]
    full = assemble(sets)
    problem = eliminate(full, drop_unimprovable=cfg["drop_unimprovable"])
    T = len(sets)
    uniform = WeightVector.uniform(T).alpha
    res = coordinate_descent(problem, uniform, cfg["epochs"], cfg["seed"], cfg["order"],
                             cfg["hinge_offset"], cfg["debug_consistency"])
    alpha = res.alpha.alpha
    models = [load_network(p) for p in model_paths] if model_paths else None
    train_ds = load_dataset(dataset_path) if dataset_path else None
    reports = {"train": {
        "uniform": _report(sets, uniform, models, train_ds, eval_cfg, problem.elimination_stats),
        "optimized": _report(sets, alpha, models, train_ds, eval_cfg, problem.elimination_stats),
    }}
    if test_cache_paths:
        test_sets = [bnd.read_bounds_cache(p) for p in test_cache_paths]
        test_ds = load_dataset(test_dataset_path) if test_dataset_path else None
        reports["test"] = {
            "uniform": _report(test_sets, uniform, models, test_ds, eval_cfg),
            "optimized": _report(test_sets, alpha, models, test_ds, eval_cfg),
        }
    result = {
        "alpha": alpha.tolist(),
        "loss_trace": res.trace,
        "uniform_loss": robboost_loss(full, uniform, cfg["hinge_offset"]),
        "final_full_loss": robboost_loss(full, alpha, cfg["hinge_offset"]),
        "elimination_stats": problem.elimination_stats,
        "solver": cfg,
        "reports": reports,
    }
    outputs = [out / "reports" / "boost.json", out / "reports" / "alpha.txt",
               out / "reports" / "loss_trace.txt", out / "caches" / "problem.rbbp"]
    _dump(result, outputs[0])
    np.savetxt(outputs[1], alpha, fmt="%.17g")
    np.savetxt(outputs[2], np.asarray(res.trace), fmt="%.17g")
    write_problem_cache(problem, outputs[3])
    inputs = [*cache_paths, *(model_paths or []), *([dataset_path] if dataset_path else []),
              *(test_cache_paths or []), *([test_dataset_path] if test_dataset_path else [])]
    _record(out, "boost", inputs, cfg, outputs)
    return result


def cmd_gbtrain(dataset_path, out_dir, rounds=3, hidden=(8,), epsilon=0.1, p="inf", seed=0,
                steps=40, step_size=0.5):
    out = _layout(out_dir)
    spec = _spec(epsilon, p)
    ds = load_dataset(dataset_path)
    res = gb_train(ds, spec, rounds, tuple(hidden), seed, steps, step_size)
    outputs = []
    for r, net in enumerate(res.models, start=1):
        path = out / "models" / f"gb_round{r}.json"
        save_network(net, path)
        outputs.append(path)
    metrics_path = out / "reports" / "gb_metrics.json"
    _dump({"seed": seed, "rounds": res.metrics}, metrics_path)
    outputs.append(metrics_path)
    _record(out, "gbtrain", [dataset_path],
            {"rounds": rounds, "hidden": list(hidden), "epsilon": spec.epsilon, "p": str(spec.p),
             "seed": seed, "steps": steps, "step_size": step_size}, outputs)
    return res


def cmd_eval(model_paths, alpha, dataset_path, epsilon, p, out=None, eval_cfg=None, z_file=None):
    """Report for the weighted ensemble; normalizers come from ``z_file`` or
    are computed on ``dataset_path`` itself."""
    spec = _spec(epsilon, p)
    ds = load_dataset(dataset_path)
    models = [load_network(mp) for mp in model_paths]
    alpha = WeightVector(alpha).alpha
    if alpha.size != len(models):
        raise ConfigError(f"{alpha.size} weights for {len(models)} models")
    fixed = json.loads(Path(z_file).read_text()) if z_file else None
    sets = []
    for mp, net in zip(model_paths, models):
        raw = bnd.margin_coefficient_set(net, ds.examples, ds.labels, spec)
        Z = fixed[_model_name(mp)] if fixed else bnd.compute_normalizer(raw)
        sets.append(bnd.normalize_coefficients(raw, Z))
    report = _report(sets, alpha, models, ds, eval_cfg)
    if out:
        _dump(report, out)
    return report


# -- argument parsing -------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="certens", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a Gaussian-blob dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--test-out")
    s.add_argument("--test-fraction", type=float, default=0.3)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--dims", type=int, default=2)
    s.add_argument("--points-per-class", type=int, default=100)
    s.add_argument("--spread", type=float, default=0.3)
    s.add_argument("--center-scale", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train-base", help="train one plain base model")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--hidden", default="16")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--step-size", type=float, default=0.1)
    s.add_argument("--feature-mask", help="comma-separated 0-based input columns to keep")
    s.add_argument("--feature-fraction", type=float)
    s.add_argument("--mask-seed", type=int, default=0)

    s = sub.add_parser("bounds", help="precompute margin coefficient caches")
    s.add_argument("--models", nargs="+", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--p", default="inf")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--z-file")
    s.add_argument("--tag", default="")

    s = sub.add_parser("boost", help="optimise ensemble weights from normalized caches")
    s.add_argument("--caches", nargs="+", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--solver-config")
    s.add_argument("--eval-config")
    s.add_argument("--models", nargs="+")
    s.add_argument("--dataset")
    s.add_argument("--test-caches", nargs="+")
    s.add_argument("--test-dataset")

    s = sub.add_parser("gbtrain", help="gradient-boosting training")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--rounds", type=int, default=3)
    s.add_argument("--hidden", default="8")
    s.add_argument("--epsilon", type=float, default=0.1)
    s.add_argument("--p", default="inf")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=40)
    s.add_argument("--step-size", type=float, default=0.5)

    s = sub.add_parser("eval", help="evaluate a weighted ensemble")
    s.add_argument("--models", nargs="+", required=True)
    s.add_argument("--alpha", help="comma-separated weights or a text file (default uniform)")
    s.add_argument("--dataset", required=True)
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--p", default="inf")
    s.add_argument("--out")
    s.add_argument("--eval-config")
    s.add_argument("--z-file")
    return ap


def _alpha_arg(text, T):
    if text is None:
        return np.full(T, 1.0 / T)
    if Path(text).is_file():
        return np.loadtxt(text, ndmin=1)
    return np.asarray(_parse_floats(text))


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth":
        cmd_synth(args.out, args.classes, args.dims, args.points_per_class, args.spread,
                  args.seed, args.center_scale, args.test_out, args.test_fraction)
    elif args.command == "train-base":
        mask = _parse_ints(args.feature_mask) if args.feature_mask else None
        cmd_train_base(args.dataset, args.out, _parse_ints(args.hidden), args.seed, args.epochs,
                       args.step_size, mask, args.feature_fraction, args.mask_seed)
    elif args.command == "bounds":
        res = cmd_bounds(args.models, args.dataset, args.epsilon, args.p, args.out_dir,
                         args.z_file, args.tag)
        print(json.dumps({k: v["Z"] for k, v in res.items()}))
    elif args.command == "boost":
        res = cmd_boost(args.caches, args.out_dir, _load_config(args.solver_config, SOLVER_DEFAULTS),
                        args.models, args.dataset, args.test_caches, args.test_dataset,
                        _load_config(args.eval_config, EVAL_DEFAULTS))
        print(json.dumps({"alpha": res["alpha"], "loss": res["loss_trace"][-1]}))
    elif args.command == "gbtrain":
        res = cmd_gbtrain(args.dataset, args.out_dir, args.rounds, _parse_ints(args.hidden),
                          args.epsilon, args.p, args.seed, args.steps, args.step_size)
        print(json.dumps(res.metrics))
    elif args.command == "eval":
        report = cmd_eval(args.models, _alpha_arg(args.alpha, len(args.models)), args.dataset,
                          args.epsilon, args.p, args.out,
                          _load_config(args.eval_config, EVAL_DEFAULTS), args.z_file)
        print(json.dumps({k: report[k] for k in ("clean_error", "pgd_error", "verified_error",
                                                 "targeted_verified_error")}))


def main(argv=None):
    try:
        run(argv)
    except CertensError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": "ConfigError", "message": f"{type(exc).__name__}: {exc}"}),
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
