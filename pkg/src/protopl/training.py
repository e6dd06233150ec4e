"""Two-stage training: contrastive pretraining, then pseudo-label self-training.

Stage 1 optimizes the contrastive pair on the labeled seed set. The two
pseudo-labeling thresholds are then computed once from the pretrained model's
scores over the unlabeled pool and stay frozen. Stage 2 re-partitions the pool
every epoch with the current model against those frozen thresholds: scores
above the upper threshold become pseudo-IND (nearest prototype's class),
scores below the lower one become pseudo-OOD, everything else (including exact
boundary hits) abstains and sits out the epoch.

Given (task, config), every shuffle, pseudo assignment, and parameter bit is
reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import FewShotTask, UnlabeledPool
from .errors import ConfigError, DegenerateScoresError, TrainingDivergedError
from .evaluation import pseudo_label_audit, score_histogram, separation_stat
from .losses import LossWeights, pcl_loss, projection_gradients, stage2_loss
from .model import (ProtoModel, SIMILARITY_MODES, init_model, margin_scores, project,
                    save_checkpoint)
from .numerics import adam_step, make_rng


@dataclass
class TrainConfig:
    pretrain_epochs: int = 20
    batch_size: int = 20
    lr_projection: float = 1e-4
    lr_prototypes: float = 1e-3
    selftrain_epochs: int = 50
    threshold_rank: int = 5
    margin_ind: float = 2.8
    margin_ood: float = 1.1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    dev_quantile: float = 0.75
    proto_dim: int = 256
    similarity: str = "dot"
    ind_literal_max: bool = False
    audit: bool = False
    histogram_bins: int = 40
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.pretrain_epochs < 1:
            raise ConfigError("pretrain_epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.selftrain_epochs < 0:
            raise ConfigError("selftrain_epochs must be >= 0")
        if self.threshold_rank < 1:
            raise ConfigError("threshold_rank must be >= 1")
        if not 0.0 < self.dev_quantile < 1.0:
            raise ConfigError("dev_quantile must lie in (0, 1)")
        if self.lr_projection <= 0.0 or self.lr_prototypes <= 0.0:
            raise ConfigError("learning rates must be positive")
        if self.proto_dim < 1:
            raise ConfigError("proto_dim must be >= 1")
        if self.similarity not in SIMILARITY_MODES:
            raise ConfigError(f"similarity must be one of {SIMILARITY_MODES}")
        if self.histogram_bins < 2:
            raise ConfigError("histogram_bins must be >= 2")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


@dataclass(frozen=True)
class Thresholds:
    """Frozen pseudo-labeling thresholds in the margin-score scale."""

    lower: float
    upper: float

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
            raise DegenerateScoresError("thresholds must be finite")
        if not self.lower < self.upper:
            raise DegenerateScoresError(
                f"lower threshold {self.lower} must be below upper {self.upper}")


@dataclass
class PseudoPartition:
    """Per-epoch assignment of the unlabeled pool: pseudo-IND, pseudo-OOD, abstain."""

    epoch: int
    pseudo_ind: dict[str, str]
    pseudo_ood: list[str]
    abstain: list[str]

    @property
    def n_pseudo_ind(self) -> int:
        return len(self.pseudo_ind)

    @property
    def n_pseudo_ood(self) -> int:
        return len(self.pseudo_ood)

    @property
    def n_abstain(self) -> int:
        return len(self.abstain)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    loss_pcl: float
    loss_ind: float
    loss_ood: float
    n_pseudo_ind: int
    n_pseudo_ood: int
    n_abstain: int
    correct_pseudo_ind: int | None = None
    correct_pseudo_ood: int | None = None
    separation: float | None = None
    separation_cosine: float | None = None
    histogram: dict | None = None
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch, "loss": self.loss, "loss_pcl": self.loss_pcl,
            "loss_ind": self.loss_ind, "loss_ood": self.loss_ood,
            "n_pseudo_ind": self.n_pseudo_ind, "n_pseudo_ood": self.n_pseudo_ood,
            "n_abstain": self.n_abstain,
            "correct_pseudo_ind": self.correct_pseudo_ind,
            "correct_pseudo_ood": self.correct_pseudo_ood,
            "separation": self.separation,
            "separation_cosine": self.separation_cosine,
            "histogram": self.histogram, "checkpoint": self.checkpoint,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EpochLog":
        return cls(**{k: obj.get(k) for k in cls.__dataclass_fields__})


class TrainLog:
    """One entry per completed self-training epoch; serializes to JSONL."""

    def __init__(self, entries: list[EpochLog] | None = None):
        self.entries = list(entries or [])

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def append(self, entry: EpochLog) -> None:
        self.entries.append(entry)

    def to_jsonl(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
        os.replace(tmp, path)

    @classmethod
    def from_jsonl(cls, path) -> "TrainLog":
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    entries.append(EpochLog.from_dict(json.loads(line)))
        return cls(entries)


def _seed_streams(seed: int) -> list[np.random.SeedSequence]:
    """Fixed allocation: 0 = model init, 1 = pretrain shuffles, 2 = stage-2 shuffles."""
    return np.random.SeedSequence(seed).spawn(3)


def _batch_slices(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Slice a permutation into batches; a trailing singleton joins the previous batch."""
    slices = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(slices) > 1 and len(slices[-1]) == 1:
        slices[-2] = np.concatenate([slices[-2], slices[-1]])
        slices.pop()
    return slices


def _check_divergence(value: float, limit: float, where: str) -> None:
    if not np.isfinite(value) or abs(value) > limit:
        raise TrainingDivergedError(f"loss {value!r} at {where} (limit {limit})")


def pretrain(task: FewShotTask, config: TrainConfig) -> ProtoModel:
    """Stage 1: optimize the contrastive pair over shuffled labeled mini-batches."""
    if not task.labeled_ind:
        raise ConfigError("pretraining needs a non-empty labeled split")
    if task.n_classes < 2:
        raise ConfigError("pretraining needs at least two IND classes")
    X, y = task.labeled_arrays()
    init_stream, shuffle_stream, _ = _seed_streams(config.seed)
    model = init_model(task.embedding_dim, task.n_classes, config.proto_dim,
                       seed=init_stream, similarity=config.similarity)
    model.seed = config.seed
    rng = make_rng(shuffle_stream)
    for epoch in range(1, config.pretrain_epochs + 1):
        order = rng.permutation(X.shape[0])
        for b, batch in enumerate(_batch_slices(order, config.batch_size)):
            feats = project(model, X[batch])
            out = pcl_loss(feats, y[batch], model.prototypes)
            _check_divergence(out.value, config.divergence_limit,
                              f"pretrain epoch {epoch} batch {b}")
            grad_w, grad_b = projection_gradients(X[batch], out.grad_features)
            model.weight = adam_step(model.opt_weight, model.weight, grad_w,
                                     config.lr_projection)
            model.bias = adam_step(model.opt_bias, model.bias, grad_b,
                                   config.lr_projection)
            model.prototypes = adam_step(model.opt_prototypes, model.prototypes,
                                         out.grad_prototypes, config.lr_prototypes)
    return model


def compute_thresholds(model: ProtoModel, unlabeled: UnlabeledPool,
                       rank: int) -> Thresholds:
    """Rank-based thresholds from the unlabeled pool's margin scores.

    Scores are sorted ascending (ties ordered by example id); the lower
    threshold is the rank-th smallest and the upper the rank-th largest.
    Computed once after pretraining and frozen for the whole self-training run.
    """
    m = len(unlabeled.ids)
    if rank < 1:
        raise ConfigError("threshold rank must be >= 1")
    if m < 2 * rank:
        raise ConfigError(f"need at least 2*rank={2 * rank} unlabeled examples, got {m}")
    scores, _ = margin_scores(model, unlabeled.embeddings)
    order = sorted(range(m), key=lambda i: (scores[i], unlabeled.ids[i]))
    return Thresholds(lower=float(scores[order[rank - 1]]),
                      upper=float(scores[order[m - rank]]))


def _partition_from_scores(scores: np.ndarray, nearest: np.ndarray,
                           ids: tuple[str, ...], thresholds: Thresholds,
                           classes: list[str], epoch: int) -> PseudoPartition:
    pseudo_ind: dict[str, str] = {}
    pseudo_ood: list[str] = []
    abstain: list[str] = []
    for i, ex_id in enumerate(ids):
        if scores[i] > thresholds.upper:
            pseudo_ind[ex_id] = classes[int(nearest[i])]
        elif scores[i] < thresholds.lower:
            pseudo_ood.append(ex_id)
        else:
            abstain.append(ex_id)
    return PseudoPartition(epoch=epoch, pseudo_ind=pseudo_ind,
                           pseudo_ood=pseudo_ood, abstain=abstain)


def assign_pseudo_labels(model: ProtoModel, unlabeled: UnlabeledPool,
                         thresholds: Thresholds, classes: list[str],
                         epoch: int = 0) -> PseudoPartition:
    """Partition the unlabeled pool by margin score against frozen thresholds."""
    scores, nearest = margin_scores(model, unlabeled.embeddings)
    return _partition_from_scores(scores, nearest, unlabeled.ids, thresholds,
                                  classes, epoch)


def self_train(model: ProtoModel, task: FewShotTask, thresholds: Thresholds,
               config: TrainConfig) -> tuple[ProtoModel, TrainLog]:
    """Stage 2: epochs of re-partitioning plus combined-objective optimization.

    The stage-2 pool is the union of the gold labeled seed set and the current
    pseudo-IND set; pseudo-OOD examples are mixed into the same shuffled
    batches in proportion to their share. The input model is not modified;
    with selftrain_epochs == 0 it is returned as-is with an empty log.
    """
    log = TrainLog()
    if config.selftrain_epochs == 0:
        return model, log
    work = model.copy()
    _, _, shuffle_stream = _seed_streams(config.seed)
    rng = make_rng(shuffle_stream)

    X_lab, y_lab = task.labeled_arrays()
    pool = task.unlabeled_pool
    row_of = {ex_id: i for i, ex_id in enumerate(pool.ids)}
    class_index = {c: i for i, c in enumerate(task.ind_classes)}

    gold = task.unlabeled_gold_for_audit() if config.audit else None
    ind_set = set(task.ind_classes)
    gold_is_ind = (np.array([gold[i] in ind_set for i in pool.ids], dtype=bool)
                   if gold is not None else None)

    for epoch in range(1, config.selftrain_epochs + 1):
        scores, nearest = margin_scores(work, pool.embeddings)
        part = _partition_from_scores(scores, nearest, pool.ids, thresholds,
                                      task.ind_classes, epoch)

        pind_rows = [row_of[i] for i in part.pseudo_ind]
        X_pool = np.concatenate([X_lab, pool.embeddings[pind_rows]], axis=0)
        y_pool = np.concatenate([
            y_lab,
            np.array([class_index[c] for c in part.pseudo_ind.values()], dtype=np.int64),
        ])
        pseudo_flags = np.concatenate([
            np.zeros(len(y_lab), dtype=bool), np.ones(len(pind_rows), dtype=bool)])
        ood_rows = [row_of[i] for i in part.pseudo_ood]
        X_ood = pool.embeddings[ood_rows]

        n_pool, n_ood = X_pool.shape[0], X_ood.shape[0]
        perm = rng.permutation(n_pool + n_ood)
        sums = {"loss": 0.0, "pcl": 0.0, "ind": 0.0, "ood": 0.0}
        batches = _batch_slices(perm, config.batch_size)
        for b, batch in enumerate(batches):
            ind_sel = batch[batch < n_pool]
            ood_sel = batch[batch >= n_pool] - n_pool
            Xb, Xo = X_pool[ind_sel], X_ood[ood_sel]
            feats = project(work, Xb)
            feats_ood = project(work, Xo)
            out = stage2_loss(feats, y_pool[ind_sel], pseudo_flags[ind_sel], feats_ood,
                              work.prototypes, config.weights, config.margin_ind,
                              config.margin_ood, config.similarity,
                              config.ind_literal_max)
            _check_divergence(out.value, config.divergence_limit,
                              f"self-train epoch {epoch} batch {b}")
            gw_ind, gb_ind = projection_gradients(Xb, out.grad_features)
            gw_ood, gb_ood = projection_gradients(Xo, out.grad_features_ood)
            work.weight = adam_step(work.opt_weight, work.weight, gw_ind + gw_ood,
                                    config.lr_projection)
            work.bias = adam_step(work.opt_bias, work.bias, gb_ind + gb_ood,
                                  config.lr_projection)
            work.prototypes = adam_step(work.opt_prototypes, work.prototypes,
                                        out.grad_prototypes, config.lr_prototypes)
            sums["loss"] += out.value
            sums["pcl"] += out.components["pcl"]
            sums["ind"] += out.components["ind"]
            sums["ood"] += out.components["ood"]

        n_batches = max(1, len(batches))
        entry = EpochLog(epoch=epoch, loss=sums["loss"] / n_batches,
                         loss_pcl=sums["pcl"] / n_batches,
                         loss_ind=sums["ind"] / n_batches,
                         loss_ood=sums["ood"] / n_batches,
                         n_pseudo_ind=part.n_pseudo_ind,
                         n_pseudo_ood=part.n_pseudo_ood,
                         n_abstain=part.n_abstain)
        if gold is not None:
            audit = pseudo_label_audit(part, gold, task.ind_classes)
            entry.correct_pseudo_ind = audit.correct_pseudo_ind
            entry.correct_pseudo_ood = audit.correct_pseudo_ood
            scores_ind = scores[gold_is_ind]
            scores_ood = scores[~gold_is_ind]
            if scores_ind.size and scores_ood.size:
                entry.separation = separation_stat(scores_ind, scores_ood)
                from .scoring import proto_scores  # local import avoids a cycle
                cos_scores, _ = proto_scores(work, pool.embeddings)
                entry.separation_cosine = separation_stat(cos_scores[gold_is_ind],
                                                          cos_scores[~gold_is_ind])
                hist = score_histogram(scores_ind, scores_ood,
                                       config.histogram_bins, epoch=epoch)
                entry.histogram = hist.to_dict()
        if (config.checkpoint_every > 0 and config.checkpoint_dir
                and epoch % config.checkpoint_every == 0):
            os.makedirs(config.checkpoint_dir, exist_ok=True)
            ckpt = os.path.join(config.checkpoint_dir, f"epoch_{epoch:04d}.json")
            save_checkpoint(work, ckpt)
            entry.checkpoint = ckpt
        log.append(entry)
    return work, log


def ablation_weights(variant: str) -> LossWeights:
    """Weight presets for the self-training objective ablations."""
    table = {
        "pcl": LossWeights(pcl=1.0, ind=0.0, ood=0.0),
        "pcl+ind": LossWeights(pcl=1.0, ind=0.05, ood=0.0),
        "pcl+ood": LossWeights(pcl=1.0, ind=0.0, ood=0.05),
        "app": LossWeights(pcl=1.0, ind=0.05, ood=0.05),
    }
    if variant not in table:
        raise ConfigError(f"unknown ablation variant {variant!r}; "
                          f"choose from {sorted(table)}")
    return table[variant]
