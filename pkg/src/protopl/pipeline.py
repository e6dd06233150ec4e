"""End-to-end experiment orchestration: build task, train, score, evaluate.

One experiment = one config run over a list of seeds. Per seed the pipeline
builds the task, pretrains, freezes thresholds, self-trains, calibrates the
rejection threshold on dev, classifies the test split, and evaluates; the
pretrained-only model ("proto") and every enabled baseline scorer are
evaluated on the same splits. Per-seed reports plus a mean/stddev aggregate
are written as JSON, per-example scores and score histograms as CSV. All
files are written atomically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .data import (FeaturizerConfig, FewShotTask, OOD_LABEL, load_jsonl,
                   make_fewshot_splits, synth_task)
from .errors import ConfigError
from .estimators import make_confidence_scorer
from .evaluation import EvalReport, evaluate, score_histogram
from .losses import LossWeights
from .model import save_checkpoint
from .scoring import calibrate_threshold, classify_batch, proto_scores
from .training import TrainConfig, compute_thresholds, pretrain, self_train

PIPELINE_METHODS = ("proto", "app")
BASELINE_METHODS = ("msp", "energy", "gda", "lof")
DEFAULT_SCORERS = PIPELINE_METHODS + BASELINE_METHODS

SYNTH_DEFAULTS = {
    "n_ind_classes": 5, "n_ood_clusters": 5, "dim": 32, "k": 10,
    "unlabeled_per_class": 200, "class_separation": 1.0, "noise_sigma": 0.25,
    "test_per_class": 50,
}


@dataclass
class ExperimentConfig:
    train_path: str | None = None
    dev_path: str | None = None
    test_path: str | None = None
    synthetic: dict | None = None
    ind_ratio: float = 0.25
    k: int = 10
    seeds: tuple[int, ...] = (0, 1, 2)
    scorers: tuple[str, ...] = DEFAULT_SCORERS
    out_dir: str = ""
    audit: bool = True
    featurizer_dim: int = 512
    featurizer_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if (self.synthetic is None) == (self.train_path is None):
            raise ConfigError("configure exactly one of a dataset path or a synthetic spec")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        unknown = set(self.scorers) - set(DEFAULT_SCORERS)
        if unknown:
            raise ConfigError(f"unknown scorers {sorted(unknown)}; "
                              f"choose from {DEFAULT_SCORERS}")
        if self.synthetic is not None:
            bad = set(self.synthetic) - set(SYNTH_DEFAULTS) - {"dev_k"}
            if bad:
                raise ConfigError(f"unknown synthetic keys {sorted(bad)}")

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        weights = train.pop("weights")
        train["weight_pcl"] = weights["pcl"]
        train["weight_ind"] = weights["ind"]
        train["weight_ood"] = weights["ood"]
        return {
            "train_path": self.train_path, "dev_path": self.dev_path,
            "test_path": self.test_path, "synthetic": self.synthetic,
            "ind_ratio": self.ind_ratio, "k": self.k, "seeds": list(self.seeds),
            "scorers": list(self.scorers), "out_dir": self.out_dir,
            "audit": self.audit, "featurizer_dim": self.featurizer_dim,
            "featurizer_seed": self.featurizer_seed, "train": train,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        train_obj = dict(obj.pop("train", {}))
        weights = LossWeights(pcl=train_obj.pop("weight_pcl", 1.0),
                              ind=train_obj.pop("weight_ind", 0.05),
                              ood=train_obj.pop("weight_ood", 0.05))
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        bad = set(train_obj) - known
        if bad:
            raise ConfigError(f"unknown train config keys {sorted(bad)}")
        train = TrainConfig(weights=weights, **train_obj)
        known_top = {f.name for f in dataclasses.fields(cls)}
        bad = set(obj) - known_top
        if bad:
            raise ConfigError(f"unknown config keys {sorted(bad)}")
        if "seeds" in obj:
            obj["seeds"] = tuple(int(s) for s in obj["seeds"])
        if "scorers" in obj:
            obj["scorers"] = tuple(obj["scorers"])
        return cls(train=train, **obj)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def _write_json(obj: dict, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def _write_scores_csv(path, ids, scores, gold, predicted) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("id,score,gold,predicted\n")
        for ex_id, s, g, p in zip(ids, scores, gold, predicted):
            fh.write(f"{ex_id},{s!r},{g},{p}\n")
    os.replace(tmp, path)


def build_task(config: ExperimentConfig, seed: int) -> FewShotTask:
    if config.synthetic is not None:
        params = dict(SYNTH_DEFAULTS)
        params.update(config.synthetic)
        return synth_task(seed=seed, **params)
    featurizer = FeaturizerConfig(dimension=config.featurizer_dim,
                                  hash_seed=config.featurizer_seed)
    for path in (config.train_path, config.dev_path, config.test_path):
        if path is not None and not os.path.exists(path):
            raise ConfigError(f"dataset path does not exist: {path}")
    train_pool = load_jsonl(config.train_path, featurizer)
    dev_pool = load_jsonl(config.dev_path, featurizer) if config.dev_path else None
    test_pool = load_jsonl(config.test_path, featurizer) if config.test_path else None
    return make_fewshot_splits(train_pool, config.ind_ratio, config.k, seed,
                               dev_pool=dev_pool, test_pool=test_pool)


def _evaluate_open_set(test_ids, test_gold, scores, ind_predictions, threshold,
                       ind_classes, metadata) -> EvalReport:
    predictions = {
        ex_id: (pred if score >= threshold else OOD_LABEL)
        for ex_id, score, pred in zip(test_ids, scores, ind_predictions)}
    return evaluate(predictions, dict(zip(test_ids, test_gold)), ind_classes, metadata)


def run_seed(config: ExperimentConfig, seed: int, seed_dir: str) -> dict[str, EvalReport]:
    """Run one seed end to end; writes per-seed artifacts into seed_dir."""
    os.makedirs(seed_dir, exist_ok=True)
    task = build_task(config, seed)
    if not task.test:
        raise ConfigError("the task has no test split; evaluation is impossible")
    if not task.dev:
        raise ConfigError("the task has no dev split; calibration is impossible")

    train_cfg = dataclasses.replace(config.train, seed=seed, audit=config.audit)
    if train_cfg.checkpoint_every > 0 and train_cfg.checkpoint_dir is None:
        train_cfg = dataclasses.replace(
            train_cfg, checkpoint_dir=os.path.join(seed_dir, "checkpoints"))

    dev_X = np.stack([ex.embedding for ex in task.dev])
    test_ids = [ex.id for ex in task.test]
    test_X = np.stack([ex.embedding for ex in task.test])
    test_gold = [ex.label for ex in task.test]
    gold_ind_mask = np.array([g != OOD_LABEL for g in test_gold], dtype=bool)
    digest = config.digest()
    reports: dict[str, EvalReport] = {}

    def emit(method: str, scores, ind_predictions, threshold) -> None:
        metadata = {"method": method, "seed": seed, "threshold": float(threshold),
                    "config_digest": digest}
        report = _evaluate_open_set(test_ids, test_gold, scores, ind_predictions,
                                    threshold, task.ind_classes, metadata)
        reports[method] = report
        predicted = [ind_predictions[i] if scores[i] >= threshold else OOD_LABEL
                     for i in range(len(test_ids))]
        _write_scores_csv(os.path.join(seed_dir, f"scores_{method}.csv"),
                          test_ids, scores, test_gold, predicted)
        hist = score_histogram(scores[gold_ind_mask], scores[~gold_ind_mask],
                               train_cfg.histogram_bins)
        hist.write_csv(os.path.join(seed_dir, f"hist_{method}.csv"))

    def emit_proto_model(model, method: str) -> None:
        dev_scores, _ = proto_scores(model, dev_X)
        threshold = calibrate_threshold(dev_scores, train_cfg.dev_quantile)
        scores, nearest = proto_scores(model, test_X)
        ind_predictions = [task.ind_classes[int(j)] for j in nearest]
        emit(method, scores, ind_predictions, threshold)

    model0 = pretrain(task, train_cfg)
    if "proto" in config.scorers:
        emit_proto_model(model0, "proto")

    if "app" in config.scorers:
        if train_cfg.selftrain_epochs > 0:
            thresholds = compute_thresholds(model0, task.unlabeled_pool,
                                            train_cfg.threshold_rank)
            model_app, train_log = self_train(model0, task, thresholds, train_cfg)
            train_log.to_jsonl(os.path.join(seed_dir, "trainlog.jsonl"))
        else:
            model_app = model0
        emit_proto_model(model_app, "app")
        save_checkpoint(model_app, os.path.join(seed_dir, "checkpoint.json"))

    if any(m in config.scorers for m in BASELINE_METHODS):
        X_lab, y_lab = task.labeled_arrays()
        y_names = [task.ind_classes[i] for i in y_lab]
        for method in BASELINE_METHODS:
            if method not in config.scorers:
                continue
            kwargs = {} if method == "gda" else {"random_state": seed}
            scorer = make_confidence_scorer(method, **kwargs)
            scorer.fit(X_lab, y_names)
            threshold = calibrate_threshold(scorer.score_samples(dev_X),
                                            train_cfg.dev_quantile)
            scores = scorer.score_samples(test_X)
            ind_predictions = list(scorer.predict_ind(test_X))
            emit(method, scores, ind_predictions, threshold)

    _write_json({m: r.to_dict() for m, r in reports.items()},
                os.path.join(seed_dir, "report.json"))
    return reports


def aggregate_reports(per_seed: dict[int, dict[str, EvalReport]]) -> dict:
    """Mean and sample stddev of every headline metric, per method."""
    methods: dict[str, dict] = {}
    for seed in sorted(per_seed):
        for method, report in per_seed[seed].items():
            methods.setdefault(method, {}).setdefault("values", []).append(
                report.headline())
    out = {}
    for method, data in sorted(methods.items()):
        values = data["values"]
        metrics = {}
        for name in EvalReport.HEADLINE:
            series = np.array([v[name] for v in values])
            std = float(series.std(ddof=1)) if series.size > 1 else 0.0
            metrics[name] = {"mean": round(float(series.mean()), 2),
                             "std": round(std, 2)}
        out[method] = {"metrics": metrics, "n_seeds": len(values)}
    return out


def run_experiment(config: ExperimentConfig) -> dict:
    """Run every seed, write per-seed reports plus the aggregate, return the aggregate."""
    if not config.out_dir:
        raise ConfigError("an output directory is required")
    os.makedirs(config.out_dir, exist_ok=True)
    _write_json(config.to_dict(), os.path.join(config.out_dir, "config.json"))
    per_seed: dict[int, dict[str, EvalReport]] = {}
    failures: dict[str, str] = {}
    for seed in config.seeds:
        seed_dir = os.path.join(config.out_dir, f"seed_{seed}")
        try:
            per_seed[seed] = run_seed(config, seed, seed_dir)
        except Exception as exc:  # noqa: BLE001 - record per-seed failures, keep going
            failures[str(seed)] = f"{type(exc).__name__}: {exc}"
            print(f"warning: seed {seed} failed: {failures[str(seed)]}", file=sys.stderr)
    if not per_seed:
        raise ConfigError(f"every seed failed: {failures}")
    aggregate = {
        "methods": aggregate_reports(per_seed),
        "seeds_completed": sorted(per_seed),
        "failures": failures,
        "config_digest": config.digest(),
    }
    _write_json(aggregate, os.path.join(config.out_dir, "aggregate.json"))
    return aggregate
