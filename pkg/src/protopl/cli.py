"""Command-line interface.

Subcommands:
  run        train + evaluate over seeds, write reports and an aggregate
  ablate     run with a named self-training loss variant (pcl, pcl+ind, pcl+ood, app)
  sweep      run once per value of one hyperparameter, emit a comparison CSV
  export     re-emit artifacts (scores, histograms, trainlog, checkpoints) from a run dir
  synth      generate a synthetic labeled dataset as JSONL files
  featurize  hash-featurize a text JSONL into an embedding JSONL

A JSON config file supplies defaults; any flag of the same name wins. The
PROTOPL_OUT environment variable sets the default output root.

Exit codes: 0 success, 2 config error, 3 runtime/divergence error.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import shutil
import sys

from .data import FeaturizerConfig, load_jsonl, save_jsonl, synth_dataset
from .errors import ConfigError, DataFormatError
from .evaluation import EvalReport, HistogramExport
from .pipeline import DEFAULT_SCORERS, ExperimentConfig, run_experiment
from .training import TrainLog, ablation_weights

ENV_OUT_ROOT = "PROTOPL_OUT"

# TrainConfig fields exposed as flags (name, type); weights are flattened.
_TRAIN_FLAGS = [
    ("pretrain_epochs", int), ("batch_size", int), ("lr_projection", float),
    ("lr_prototypes", float), ("selftrain_epochs", int), ("threshold_rank", int),
    ("margin_ind", float), ("margin_ood", float), ("weight_pcl", float),
    ("weight_ind", float), ("weight_ood", float), ("dev_quantile", float),
    ("proto_dim", int), ("similarity", str), ("histogram_bins", int),
    ("checkpoint_every", int),
]

_SWEEP_PARAMS = ("T", "M_IND", "M_OOD", "lambda")


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON experiment config file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, action="append", dest="seeds",
                        help="seed to run (repeatable)")
    parser.add_argument("--ind-ratio", type=float, dest="ind_ratio")
    parser.add_argument("--k", type=int)
    parser.add_argument("--scorers", help=f"comma list among {','.join(DEFAULT_SCORERS)}")
    parser.add_argument("--train-data", dest="train_path")
    parser.add_argument("--dev-data", dest="dev_path")
    parser.add_argument("--test-data", dest="test_path")
    parser.add_argument("--synthetic", help="synthetic task spec as inline JSON")
    parser.add_argument("--no-audit", action="store_true",
                        help="disable gold-label audits of the unlabeled pool")
    for name, typ in _TRAIN_FLAGS:
        parser.add_argument(f"--{name.replace('_', '-')}", type=typ, dest=name)
    parser.add_argument("--ind-literal-max", action="store_true", dest="ind_literal_max",
                        help="use the literal (least-similar prototype) pull margin")


def _config_from_args(args: argparse.Namespace) -> dict:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    else:
        cfg = {}
    for key in ("ind_ratio", "k", "train_path", "dev_path", "test_path"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if args.seeds:
        cfg["seeds"] = args.seeds
    if args.scorers:
        cfg["scorers"] = [s.strip() for s in args.scorers.split(",") if s.strip()]
    if args.synthetic:
        try:
            cfg["synthetic"] = json.loads(args.synthetic)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--synthetic: invalid JSON ({exc})") from None
    if args.no_audit:
        cfg["audit"] = False
    train = dict(cfg.get("train", {}))
    for name, _ in _TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            train[name] = value
    if getattr(args, "ind_literal_max", False):
        train["ind_literal_max"] = True
    if train:
        cfg["train"] = train
    if args.out:
        cfg["out_dir"] = args.out
    return cfg


def _resolve_out(cfg: dict, default_name: str) -> dict:
    if not cfg.get("out_dir"):
        root = os.environ.get(ENV_OUT_ROOT, "runs")
        cfg["out_dir"] = os.path.join(root, default_name)
    return cfg


def _print_aggregate(aggregate: dict) -> None:
    for method, info in sorted(aggregate["methods"].items()):
        parts = [f"{name}={m['mean']:.2f} (std {m['std']:.2f})"
                 for name, m in info["metrics"].items()]
        print(f"{method:8s} n={info['n_seeds']}  " + "  ".join(parts))
    if aggregate["failures"]:
        print(f"failed seeds: {aggregate['failures']}", file=sys.stderr)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _resolve_out(_config_from_args(args), "run")
    aggregate = run_experiment(ExperimentConfig.from_dict(cfg))
    _print_aggregate(aggregate)
    print(f"artifacts in {cfg['out_dir']}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    weights = ablation_weights(args.variant)
    cfg = _config_from_args(args)
    train = dict(cfg.get("train", {}))
    train["weight_pcl"] = weights.pcl
    train["weight_ind"] = weights.ind
    train["weight_ood"] = weights.ood
    cfg["train"] = train
    safe = args.variant.replace("+", "_")
    if cfg.get("out_dir"):
        cfg["out_dir"] = os.path.join(cfg["out_dir"], safe)
    else:
        cfg = _resolve_out(cfg, f"ablate_{safe}")
    aggregate = run_experiment(ExperimentConfig.from_dict(cfg))
    print(f"variant {args.variant}")
    _print_aggregate(aggregate)
    return 0


def _apply_sweep_value(train: dict, param: str, value: float) -> None:
    if param == "T":
        train["threshold_rank"] = int(value)
    elif param == "M_IND":
        train["margin_ind"] = value
    elif param == "M_OOD":
        train["margin_ood"] = value
    elif param == "lambda":
        train["weight_ind"] = value
        train["weight_ood"] = value
    else:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {_SWEEP_PARAMS}")


def cmd_sweep(args: argparse.Namespace) -> int:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values must be a comma list of numbers ({exc})") from None
    if not values:
        raise ConfigError("--values must name at least one value")
    base = _resolve_out(_config_from_args(args), f"sweep_{args.param}")
    out_root = base["out_dir"]
    rows = []
    for value in values:
        cfg = json.loads(json.dumps(base))  # deep copy
        train = dict(cfg.get("train", {}))
        _apply_sweep_value(train, args.param, value)
        cfg["train"] = train
        tag = f"{args.param}_{value:g}"
        cfg["out_dir"] = os.path.join(out_root, tag)
        aggregate = run_experiment(ExperimentConfig.from_dict(cfg))
        print(f"== {args.param} = {value:g}")
        _print_aggregate(aggregate)
        for method, info in sorted(aggregate["methods"].items()):
            row = {"param": args.param, "value": value, "method": method}
            for name, m in info["metrics"].items():
                row[f"{name}_mean"] = m["mean"]
                row[f"{name}_std"] = m["std"]
            rows.append(row)
    os.makedirs(out_root, exist_ok=True)
    csv_path = os.path.join(out_root, "sweep.csv")
    header = ["param", "value", "method"]
    header += [f"{n}_{s}" for n in EvalReport.HEADLINE for s in ("mean", "std")]
    tmp = f"{csv_path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(row[h]) for h in header) + "\n")
    os.replace(tmp, csv_path)
    print(f"sweep table: {csv_path}")
    return 0


def _export_copy(pattern: str, run_dir: str, out_dir: str, what: str) -> int:
    found = sorted(glob.glob(os.path.join(run_dir, "seed_*", pattern)))
    for path in found:
        seed_tag = os.path.basename(os.path.dirname(path))
        shutil.copyfile(path, os.path.join(out_dir, f"{seed_tag}_{os.path.basename(path)}"))
    if not found:
        raise ConfigError(f"no {what} artifacts ({pattern}) under {run_dir}")
    return len(found)


def cmd_export(args: argparse.Namespace) -> int:
    run_dir = args.run_dir
    if not os.path.isdir(run_dir):
        raise ConfigError(f"run directory does not exist: {run_dir}")
    out_dir = args.out or os.path.join(run_dir, "export")
    os.makedirs(out_dir, exist_ok=True)
    if args.what == "scores":
        n = _export_copy("scores_*.csv", run_dir, out_dir, "score")
    elif args.what == "trainlog":
        n = _export_copy("trainlog.jsonl", run_dir, out_dir, "train-log")
    elif args.what == "checkpoints":
        n = _export_copy("checkpoint.json", run_dir, out_dir, "checkpoint")
        n += len(sorted(glob.glob(os.path.join(run_dir, "seed_*", "checkpoints", "*.json"))))
        for path in sorted(glob.glob(os.path.join(run_dir, "seed_*", "checkpoints", "*.json"))):
            seed_tag = path.split(os.sep)[-3]
            shutil.copyfile(path, os.path.join(out_dir, f"{seed_tag}_{os.path.basename(path)}"))
    elif args.what == "histograms":
        logs = sorted(glob.glob(os.path.join(run_dir, "seed_*", "trainlog.jsonl")))
        if not logs:
            raise ConfigError(f"no trainlog.jsonl (needed for histograms) under {run_dir}")
        n = 0
        for log_path in logs:
            seed_tag = os.path.basename(os.path.dirname(log_path))
            for entry in TrainLog.from_jsonl(log_path):
                if entry.histogram is None:
                    continue
                hist = HistogramExport.from_dict(entry.histogram)
                hist.write_csv(os.path.join(
                    out_dir, f"{seed_tag}_hist_epoch_{entry.epoch:04d}.csv"))
                n += 1
        if n == 0:
            raise ConfigError(f"train logs under {run_dir} carry no histograms "
                              "(was the run audited?)")
    else:
        raise ConfigError(f"unknown export kind {args.what!r}")
    print(f"exported {n} file(s) to {out_dir}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    train, dev, test, ind_classes = synth_dataset(
        n_ind_classes=args.n_ind_classes, n_ood_clusters=args.n_ood_clusters,
        dim=args.dim, k=args.k, unlabeled_per_class=args.unlabeled_per_class,
        class_separation=args.class_separation, noise_sigma=args.noise_sigma,
        seed=args.seed, dev_k=args.dev_k, test_per_class=args.test_per_class)
    out_dir = args.out or os.path.join(os.environ.get(ENV_OUT_ROOT, "runs"), "synth")
    os.makedirs(out_dir, exist_ok=True)
    save_jsonl(train, os.path.join(out_dir, "train.jsonl"))
    save_jsonl(dev, os.path.join(out_dir, "dev.jsonl"))
    save_jsonl(test, os.path.join(out_dir, "test.jsonl"))
    meta = {"ind_classes": ind_classes, "n_ind_classes": args.n_ind_classes,
            "n_ood_clusters": args.n_ood_clusters, "dim": args.dim, "k": args.k,
            "unlabeled_per_class": args.unlabeled_per_class,
            "class_separation": args.class_separation, "noise_sigma": args.noise_sigma,
            "test_per_class": args.test_per_class, "seed": args.seed}
    tmp = os.path.join(out_dir, "meta.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, os.path.join(out_dir, "meta.json"))
    print(f"wrote train/dev/test JSONL to {out_dir}")
    return 0


def cmd_featurize(args: argparse.Namespace) -> int:
    config = FeaturizerConfig(dimension=args.dimension, hash_seed=args.hash_seed)
    examples = load_jsonl(args.input, config)
    save_jsonl(examples, args.output)
    print(f"featurized {len(examples)} examples -> {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protopl",
                                     description="Few-shot out-of-domain intent detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train and evaluate over seeds")
    _add_run_arguments(p_run)
    p_run.set_defaults(func=cmd_run)

    p_abl = sub.add_parser("ablate", help="run one self-training loss variant")
    _add_run_arguments(p_abl)
    p_abl.add_argument("--variant", required=True,
                       choices=["pcl", "pcl+ind", "pcl+ood", "app"])
    p_abl.set_defaults(func=cmd_ablate)

    p_sweep = sub.add_parser("sweep", help="grid over one hyperparameter")
    _add_run_arguments(p_sweep)
    p_sweep.add_argument("--param", required=True, choices=list(_SWEEP_PARAMS))
    p_sweep.add_argument("--values", required=True, help="comma list of values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_exp = sub.add_parser("export", help="re-emit run artifacts")
    p_exp.add_argument("--run-dir", required=True)
    p_exp.add_argument("--what", required=True,
                       choices=["scores", "histograms", "trainlog", "checkpoints"])
    p_exp.add_argument("--out")
    p_exp.set_defaults(func=cmd_export)

    p_syn = sub.add_parser("synth", help="write a synthetic dataset as JSONL")
    p_syn.add_argument("--n-ind-classes", type=int, default=5)
    p_syn.add_argument("--n-ood-clusters", type=int, default=5)
    p_syn.add_argument("--dim", type=int, default=32)
    p_syn.add_argument("--k", type=int, default=10)
    p_syn.add_argument("--unlabeled-per-class", type=int, default=200)
    p_syn.add_argument("--class-separation", type=float, default=1.0)
    p_syn.add_argument("--noise-sigma", type=float, default=0.25)
    p_syn.add_argument("--dev-k", type=int, default=None)
    p_syn.add_argument("--test-per-class", type=int, default=50)
    p_syn.add_argument("--seed", type=int, default=0)
    p_syn.add_argument("--out")
    p_syn.set_defaults(func=cmd_synth)

    p_feat = sub.add_parser("featurize", help="text JSONL -> embedding JSONL")
    p_feat.add_argument("--input", required=True)
    p_feat.add_argument("--output", required=True)
    p_feat.add_argument("--dimension", type=int, default=512)
    p_feat.add_argument("--hash-seed", type=int, default=0)
    p_feat.set_defaults(func=cmd_featurize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit code 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
