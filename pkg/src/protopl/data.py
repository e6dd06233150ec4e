"""Datasets, hashing featurizer, and few-shot open-set task construction.

A task bundles four splits: a small labeled in-domain (IND) seed set, a large
unlabeled pool mixing IND and out-of-domain (OOD) utterances, an IND-only dev
split for threshold calibration, and a labeled test split whose OOD classes
are collapsed to the single literal label "OOD".
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from ._validation import as_vector
from .errors import ConfigError, DataFormatError
from .numerics import make_rng

OOD_LABEL = "OOD"


@dataclass(frozen=True, eq=False)
class Example:
    """One utterance: unique id, embedding vector, optional text and intent label."""

    id: str
    embedding: np.ndarray
    label: str | None = None
    text: str | None = None


@dataclass(frozen=True)
class FeaturizerConfig:
    """Signed feature hashing of lowercased alphanumeric unigrams and bigrams."""

    dimension: int = 512
    token_pattern: str = r"[a-z0-9]+"
    hash_seed: int = 0

    def __post_init__(self):
        if self.dimension < 2:
            raise ConfigError(f"featurizer dimension must be >= 2, got {self.dimension}")


def hash_featurize(text: str, config: FeaturizerConfig | None = None) -> np.ndarray:
    """Hash a text into an L2-normalized signed bag-of-ngrams vector.

    Deterministic given the config (keyed blake2b, so results do not depend on
    the process or the platform). Texts with no tokens are an error.
    """
    config = config or FeaturizerConfig()
    tokens = re.findall(config.token_pattern, text.lower())
    if not tokens:
        raise DataFormatError(f"text has no tokens under pattern {config.token_pattern!r}: {text!r}")
    terms = list(tokens)
    terms.extend(f"{a} {b}" for a, b in zip(tokens, tokens[1:]))
    key = config.hash_seed.to_bytes(8, "little", signed=True)
    vec = np.zeros(config.dimension, dtype=np.float64)
    for term in terms:
        digest = hashlib.blake2b(term.encode("utf-8"), digest_size=9, key=key).digest()
        index = int.from_bytes(digest[:8], "little") % config.dimension
        vec[index] += 1.0 if digest[8] & 1 else -1.0
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DataFormatError(f"hashed features cancelled to the zero vector: {text!r}")
    return vec / norm


def load_jsonl(path, featurizer: FeaturizerConfig | None = None) -> list[Example]:
    """Load a dataset from JSONL: {"id", "text"?, "embedding"?, "label"?} per line.

    Lines carrying only text are featurized with `featurizer` (default config
    when omitted). Duplicate ids and inconsistent embedding dimensions are
    rejected with the offending line number.
    """
    examples: list[Example] = []
    seen_ids: set[str] = set()
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: line {lineno}: invalid JSON ({exc})") from None
            if not isinstance(obj, dict):
                raise DataFormatError(f"{path}: line {lineno}: expected a JSON object")
            if "id" not in obj or not isinstance(obj["id"], str):
                raise DataFormatError(f"{path}: line {lineno}: missing string field 'id'")
            ex_id = obj["id"]
            if ex_id in seen_ids:
                raise DataFormatError(f"{path}: line {lineno}: duplicate id {ex_id!r}")
            text = obj.get("text")
            label = obj.get("label")
            if label is not None and not isinstance(label, str):
                raise DataFormatError(f"{path}: line {lineno}: 'label' must be a string")
            if obj.get("embedding") is not None:
                try:
                    emb = as_vector(obj["embedding"], "embedding")
                except ValueError as exc:
                    raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            elif text:
                try:
                    emb = hash_featurize(text, featurizer)
                except DataFormatError as exc:
                    raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            else:
                raise DataFormatError(
                    f"{path}: line {lineno}: each record needs 'text' or 'embedding'")
            if dim is None:
                dim = emb.shape[0]
            elif emb.shape[0] != dim:
                raise DataFormatError(
                    f"{path}: line {lineno}: embedding dimension {emb.shape[0]} != {dim}")
            seen_ids.add(ex_id)
            examples.append(Example(id=ex_id, embedding=emb, label=label, text=text))
    return examples


def save_jsonl(examples: Iterable[Example], path) -> None:
    """Write examples in the load_jsonl schema (atomic: temp file then rename)."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for ex in examples:
            obj = {"id": ex.id, "embedding": [float(v) for v in ex.embedding]}
            if ex.text is not None:
                obj["text"] = ex.text
            if ex.label is not None:
                obj["label"] = ex.label
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    os.replace(tmp, path)


@dataclass(frozen=True)
class TaskProvenance:
    seed: int | None
    ind_ratio: float | None
    k: int | None
    dev_k: int | None = None
    source: str = ""


class UnlabeledPool(NamedTuple):
    """Training-facing view of the unlabeled split: ids and embeddings only."""

    ids: tuple[str, ...]
    embeddings: np.ndarray


class FewShotTask:
    """Few-shot open-set task with a label-hidden unlabeled pool.

    Gold labels of the unlabeled pool (when the source data had them) are kept
    for audits only; training code reaches the pool through `unlabeled_pool`,
    which exposes ids and embeddings and nothing else.
    """

    def __init__(self, ind_classes: Sequence[str], labeled_ind: Sequence[Example],
                 unlabeled: Sequence[Example], dev: Sequence[Example],
                 test: Sequence[Example], provenance: TaskProvenance):
        self.ind_classes = list(ind_classes)
        self.labeled_ind = list(labeled_ind)
        self.dev = list(dev)
        self.test = list(test)
        self.provenance = provenance
        self._unlabeled = list(unlabeled)
        self._validate()

    def _validate(self) -> None:
        if not self.ind_classes:
            raise ConfigError("a task needs at least one IND class")
        if len(set(self.ind_classes)) != len(self.ind_classes):
            raise ConfigError("IND class names must be unique")
        if OOD_LABEL in self.ind_classes:
            raise ConfigError(f"IND class name {OOD_LABEL!r} collides with the rejection label")
        ind = set(self.ind_classes)
        for ex in self.labeled_ind:
            if ex.label not in ind:
                raise ConfigError(f"labeled example {ex.id!r} has non-IND label {ex.label!r}")
        for ex in self.dev:
            if ex.label not in ind:
                raise ConfigError(f"dev example {ex.id!r} has non-IND label {ex.label!r}")
        dims = {ex.embedding.shape[0]
                for split in (self.labeled_ind, self._unlabeled, self.dev, self.test)
                for ex in split}
        if len(dims) > 1:
            raise ConfigError(f"embedding dimensions differ across splits: {sorted(dims)}")
        for split_name, split in (("labeled", self.labeled_ind), ("unlabeled", self._unlabeled),
                                  ("dev", self.dev), ("test", self.test)):
            ids = [ex.id for ex in split]
            if len(set(ids)) != len(ids):
                raise ConfigError(f"duplicate ids in the {split_name} split")
        overlap = {ex.id for ex in self.labeled_ind} & {ex.id for ex in self._unlabeled}
        if overlap:
            raise ConfigError(f"ids appear both labeled and unlabeled: {sorted(overlap)[:3]}")
        k = self.provenance.k
        if k is not None:
            counts = {c: 0 for c in self.ind_classes}
            for ex in self.labeled_ind:
                counts[ex.label] += 1
            bad = {c: n for c, n in counts.items() if n != k}
            if bad:
                raise ConfigError(f"labeled split must hold exactly k={k} per class, got {bad}")

    @property
    def n_classes(self) -> int:
        return len(self.ind_classes)

    @property
    def embedding_dim(self) -> int:
        for split in (self.labeled_ind, self._unlabeled, self.dev, self.test):
            if split:
                return split[0].embedding.shape[0]
        raise ConfigError("task holds no examples")

    @property
    def n_unlabeled(self) -> int:
        return len(self._unlabeled)

    @property
    def unlabeled_pool(self) -> UnlabeledPool:
        ids = tuple(ex.id for ex in self._unlabeled)
        if self._unlabeled:
            emb = np.stack([ex.embedding for ex in self._unlabeled])
        else:
            emb = np.zeros((0, self.embedding_dim))
        return UnlabeledPool(ids=ids, embeddings=emb)

    def labeled_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Labeled embeddings and integer class indices (IND class order)."""
        index = {c: i for i, c in enumerate(self.ind_classes)}
        X = np.stack([ex.embedding for ex in self.labeled_ind])
        y = np.array([index[ex.label] for ex in self.labeled_ind], dtype=np.int64)
        return X, y

    def unlabeled_gold_for_audit(self) -> dict[str, str]:
        """Gold labels of the unlabeled pool. Audit/diagnostics surface only."""
        missing = [ex.id for ex in self._unlabeled if ex.label is None]
        if missing:
            raise ConfigError(
                f"audit requested but {len(missing)} unlabeled examples have no gold label")
        return {ex.id: ex.label for ex in self._unlabeled}


def _group_by_label(pool: Sequence[Example]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, ex in enumerate(pool):
        if ex.label is None:
            raise ConfigError(f"example {ex.id!r} is unlabeled; split construction "
                              "needs a fully labeled pool")
        groups.setdefault(ex.label, []).append(i)
    return groups


def _assemble_task(train_pool: Sequence[Example], dev_pool: Sequence[Example] | None,
                   test_pool: Sequence[Example] | None, ind_classes: Sequence[str],
                   k: int, dev_k: int, rng: np.random.Generator,
                   provenance: TaskProvenance) -> FewShotTask:
    """Draw k labeled per IND class; leftovers plus all OOD examples go unlabeled."""
    groups = _group_by_label(train_pool)
    carve_dev = not dev_pool
    selected: set[int] = set()
    dev_carved: list[Example] = []
    labeled: list[Example] = []
    for cls in ind_classes:
        pool_idx = groups.get(cls, [])
        need = k + (dev_k if carve_dev else 0)
        if len(pool_idx) < need:
            raise ConfigError(f"class {cls!r} has {len(pool_idx)} training examples, needs {need}")
        picked = rng.permutation(len(pool_idx))[:need]
        chosen = [pool_idx[j] for j in picked]
        labeled.extend(train_pool[j] for j in chosen[:k])
        if carve_dev:
            dev_carved.extend(train_pool[j] for j in chosen[k:])
        selected.update(chosen)
    unlabeled = [ex for i, ex in enumerate(train_pool) if i not in selected]
    ind = set(ind_classes)
    if not any(ex.label not in ind for ex in unlabeled):
        raise ConfigError("empty OOD set: every training class was designated IND")

    if carve_dev:
        dev = dev_carved
    else:
        dev_groups = _group_by_label(dev_pool)
        dev = []
        for cls in ind_classes:
            pool_idx = dev_groups.get(cls, [])
            if len(pool_idx) < dev_k:
                raise ConfigError(f"dev pool has {len(pool_idx)} examples of class {cls!r}, "
                                  f"needs {dev_k}")
            picked = rng.permutation(len(pool_idx))[:dev_k]
            dev.extend(dev_pool[pool_idx[j]] for j in picked)

    test: list[Example] = []
    for ex in test_pool or []:
        if ex.label is None:
            raise ConfigError(f"test example {ex.id!r} has no label")
        label = ex.label if ex.label in ind else OOD_LABEL
        test.append(Example(id=ex.id, embedding=ex.embedding, label=label, text=ex.text))
    return FewShotTask(ind_classes, labeled, unlabeled, dev, test, provenance)


def make_fewshot_splits(dataset: Sequence[Example], ind_ratio: float, k: int, seed: int,
                        *, dev_pool: Sequence[Example] | None = None,
                        test_pool: Sequence[Example] | None = None,
                        dev_k: int | None = None) -> FewShotTask:
    """Build a few-shot open-set task from a fully labeled training pool.

    A fraction `ind_ratio` of the intent inventory (nearest integer, at least
    one, and at least one class left over as OOD) is designated IND; k examples
    per IND class become the labeled seed set and every remaining training
    example joins the unlabeled pool. Dev holds dev_k (default k) IND examples
    per class, drawn from `dev_pool` when given and carved out of the training
    pool otherwise. Test passes through with OOD classes collapsed to "OOD".
    Pure function of (dataset, ind_ratio, k, seed).
    """
    if not 0.0 < ind_ratio < 1.0:
        raise ConfigError(f"ind_ratio must be in (0, 1), got {ind_ratio}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    dev_k = k if dev_k is None else dev_k
    if dev_k < 1:
        raise ConfigError(f"dev_k must be >= 1, got {dev_k}")
    classes = sorted(_group_by_label(dataset).keys())
    if len(classes) < 2:
        raise ConfigError("need at least two intent classes to split IND/OOD")
    n_ind = max(1, int(math.floor(ind_ratio * len(classes) + 0.5)))
    if n_ind >= len(classes):
        raise ConfigError(f"ind_ratio {ind_ratio} leaves no OOD class "
                          f"({n_ind} of {len(classes)} intents would be IND)")
    rng = make_rng(seed)
    picked = rng.permutation(len(classes))[:n_ind]
    ind_classes = sorted(classes[j] for j in picked)
    provenance = TaskProvenance(seed=seed, ind_ratio=ind_ratio, k=k, dev_k=dev_k, source="split")
    return _assemble_task(dataset, dev_pool, test_pool, ind_classes, k, dev_k, rng, provenance)


def synth_dataset(n_ind_classes: int, n_ood_clusters: int, dim: int, k: int,
                  unlabeled_per_class: int, class_separation: float, noise_sigma: float,
                  seed: int, *, dev_k: int | None = None, test_per_class: int = 50,
                  ) -> tuple[list[Example], list[Example], list[Example], list[str]]:
    """Generate labeled pools (train, dev, test) of Gaussian clusters on a sphere.

    Cluster centers are drawn on the sphere of radius `class_separation` and
    re-drawn until every pair is at least `class_separation` apart (a 60-degree
    minimum angle); examples are center + N(0, noise_sigma^2) noise, then
    L2-normalized. Returns the pools and the list of IND class names.
    """
    if min(n_ind_classes, n_ood_clusters, dim, k, unlabeled_per_class, test_per_class) < 1:
        raise ConfigError("all synthetic counts must be positive")
    if class_separation <= 0.0:
        raise ConfigError("class_separation must be positive")
    if noise_sigma < 0.0:
        raise ConfigError("noise_sigma must be non-negative")
    dev_k = k if dev_k is None else dev_k
    rng = make_rng(seed)
    n_centers = n_ind_classes + n_ood_clusters
    centers: list[np.ndarray] = []
    tries = 0
    max_tries = 200 * n_centers
    while len(centers) < n_centers:
        tries += 1
        if tries > max_tries:
            raise ConfigError(
                f"could not place {n_centers} centers at mutual distance >= "
                f"{class_separation} in {dim} dimensions after {max_tries} draws")
        u = rng.normal(size=dim)
        u = class_separation * u / np.linalg.norm(u)
        if all(np.linalg.norm(u - c) >= class_separation for c in centers):
            centers.append(u)

    counter = 0

    def draw(center: np.ndarray, label: str, n: int) -> list[Example]:
        nonlocal counter
        out = []
        for _ in range(n):
            x = center + rng.normal(0.0, noise_sigma, size=dim) if noise_sigma > 0 \
                else center.copy()
            x = x / np.linalg.norm(x)
            out.append(Example(id=f"ex{counter:06d}", embedding=x, label=label))
            counter += 1
        return out

    ind_classes = [f"intent_{i:02d}" for i in range(n_ind_classes)]
    ood_classes = [f"ood_{j:02d}" for j in range(n_ood_clusters)]
    train: list[Example] = []
    dev: list[Example] = []
    test: list[Example] = []
    for i, cls in enumerate(ind_classes):
        train.extend(draw(centers[i], cls, k + unlabeled_per_class))
        dev.extend(draw(centers[i], cls, dev_k))
        test.extend(draw(centers[i], cls, test_per_class))
    for j, cls in enumerate(ood_classes):
        center = centers[n_ind_classes + j]
        train.extend(draw(center, cls, unlabeled_per_class))
        test.extend(draw(center, cls, test_per_class))
    return train, dev, test, ind_classes


def synth_task(n_ind_classes: int, n_ood_clusters: int, dim: int, k: int,
               unlabeled_per_class: int, class_separation: float, noise_sigma: float,
               seed: int, *, dev_k: int | None = None, test_per_class: int = 50) -> FewShotTask:
    """Generate a synthetic few-shot task (see synth_dataset for the geometry)."""
    train, dev, test, ind_classes = synth_dataset(
        n_ind_classes, n_ood_clusters, dim, k, unlabeled_per_class,
        class_separation, noise_sigma, seed, dev_k=dev_k, test_per_class=test_per_class)
    dev_k = k if dev_k is None else dev_k
    rng = make_rng([seed, 1])  # assembly stream, decoupled from generation
    provenance = TaskProvenance(seed=seed, ind_ratio=None, k=k, dev_k=dev_k, source="synthetic")
    return _assemble_task(train, dev, test, ind_classes, k, dev_k, rng, provenance)
