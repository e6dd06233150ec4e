"""Confidence scoring and open-set classification.

Every scorer here is oriented the same way: higher score means more likely
in-domain. Baselines that natively measure outlierness (Mahalanobis distance,
local outlier factor) are negated to match.

The prototypical score is always the maximum cosine similarity between the
projected query and the prototypes, regardless of the similarity mode the
margin losses train with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_float_array, as_matrix, check_labels
from .data import OOD_LABEL
from .errors import ConfigError, TrainingDivergedError
from .model import ProtoModel, project
from .numerics import AdamState, adam_step, make_rng


# ---------------------------------------------------------------------------
# Prototypical scorer
# ---------------------------------------------------------------------------

def proto_scores(model: ProtoModel, embeddings) -> tuple[np.ndarray, np.ndarray]:
    """Max-cosine confidence and nearest-prototype index for a batch."""
    feats = project(model, as_matrix(embeddings, "embeddings"))
    fn = np.linalg.norm(feats, axis=1)
    if np.any(fn == 0.0):
        raise ValueError("projected feature has zero norm; cosine confidence undefined")
    pn = np.linalg.norm(model.prototypes, axis=1)
    if np.any(pn == 0.0):
        raise ValueError("prototype has zero norm; cosine confidence undefined")
    sims = (feats / fn[:, None]) @ (model.prototypes / pn[:, None]).T
    sims = np.clip(sims, -1.0, 1.0)
    return sims.max(axis=1), sims.argmax(axis=1)


def proto_confidence(model: ProtoModel, x) -> float:
    """Max cosine similarity of one query to the prototypes."""
    scores, _ = proto_scores(model, np.asarray(x, dtype=np.float64)[None, :])
    return float(scores[0])


def calibrate_threshold(dev_scores, quantile: float = 0.75) -> float:
    """Dev-set threshold: sort scores descending, take the ceil(q*n)-th one."""
    scores = np.asarray(dev_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("dev_scores must be a non-empty 1-d array")
    if not 0.0 < quantile < 1.0:
        raise ConfigError("quantile must lie in (0, 1)")
    ordered = np.sort(scores)[::-1]
    rank = int(np.ceil(quantile * scores.size))  # 1-based
    return float(ordered[rank - 1])


def classify(model: ProtoModel, x, threshold: float, classes) -> str:
    """Nearest prototype's class when confidence >= threshold, else "OOD"."""
    return classify_batch(model, np.asarray(x, dtype=np.float64)[None, :],
                          threshold, classes)[0]


def classify_batch(model: ProtoModel, embeddings, threshold: float,
                   classes) -> list[str]:
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    classes = list(classes)
    if len(classes) != model.n_classes:
        raise ValueError(f"{len(classes)} class names for {model.n_classes} prototypes")
    scores, nearest = proto_scores(model, embeddings)
    return [classes[int(j)] if s >= threshold else OOD_LABEL
            for s, j in zip(scores, nearest)]


# ---------------------------------------------------------------------------
# Cross-entropy head (MSP / Energy backbone)
# ---------------------------------------------------------------------------

@dataclass
class CeHead:
    weight: np.ndarray  # (n_classes, feature_dim)
    bias: np.ndarray    # (n_classes,)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


def head_logits(head: CeHead, x) -> np.ndarray:
    arr = as_float_array(x, "features")
    if arr.ndim == 1:
        return head.weight @ arr + head.bias
    return arr @ head.weight.T + head.bias


def ce_loss_and_grads(weight, bias, features, labels
                      ) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of softmax(W x + b) with gradients for W and b."""
    logits = features @ weight.T + bias
    row_max = logits.max(axis=1)
    expw = np.exp(logits - row_max[:, None])
    denom = expw.sum(axis=1)
    rows = np.arange(features.shape[0])
    y = np.asarray(labels)
    value = float(np.mean(row_max + np.log(denom) - logits[rows, y]))
    delta = expw / denom[:, None]
    delta[rows, y] -= 1.0
    delta /= features.shape[0]
    return value, delta.T @ features, delta.sum(axis=0)


def train_ce_head(features, labels, epochs: int = 300, lr: float = 0.05,
                  seed: int = 0, divergence_limit: float = 1e6) -> CeHead:
    """Multinomial logistic regression fit with full-batch Adam.

    Full-batch gradients make the fit invariant to the order of the training
    rows; the seed only controls the Gaussian init.
    """
    X = as_matrix(features, "features")
    y = np.asarray(labels)
    n_classes = int(y.max()) + 1 if y.size else 0
    y = check_labels(y, n_classes)
    if n_classes < 2:
        raise ConfigError("cross-entropy head needs at least two classes")
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    rng = make_rng(seed)
    weight = rng.normal(0.0, 1.0 / np.sqrt(X.shape[1]), size=(n_classes, X.shape[1]))
    bias = np.zeros(n_classes, dtype=np.float64)
    opt_w = AdamState.zeros_like(weight)
    opt_b = AdamState.zeros_like(bias)
    for step in range(epochs):
        value, grad_w, grad_b = ce_loss_and_grads(weight, bias, X, y)
        if not np.isfinite(value) or value > divergence_limit:
            raise TrainingDivergedError(f"cross-entropy loss {value!r} at step {step}")
        weight = adam_step(opt_w, weight, grad_w, lr)
        bias = adam_step(opt_b, bias, grad_b, lr)
    return CeHead(weight=weight, bias=bias)


def msp_score(head: CeHead, x) -> float | np.ndarray:
    """Maximum softmax probability; invariant to logit shifts."""
    logits = head_logits(head, x)
    single = logits.ndim == 1
    logits = np.atleast_2d(logits)
    expw = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = expw / expw.sum(axis=1, keepdims=True)
    out = probs.max(axis=1)
    return float(out[0]) if single else out


def energy_score(head: CeHead, x) -> float | np.ndarray:
    """Negative energy, i.e. logsumexp of the logits; strictly monotone in each."""
    logits = head_logits(head, x)
    single = logits.ndim == 1
    logits = np.atleast_2d(logits)
    row_max = logits.max(axis=1)
    out = row_max + np.log(np.exp(logits - row_max[:, None]).sum(axis=1))
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# Gaussian discriminant analysis (shared covariance)
# ---------------------------------------------------------------------------

@dataclass
class GdaState:
    means: np.ndarray      # (n_classes, dim)
    precision: np.ndarray  # (dim, dim), inverse of the regularized pooled covariance
    reg_lambda: float


def gda_fit(features, labels, reg_lambda: float = 1e-3) -> GdaState:
    """Class means plus a pooled (MLE, denominator n) covariance, regularized.

    The regularizer adds reg_lambda * (trace/dim) * I before inversion, which
    keeps the few-shot covariance estimate invertible.
    """
    X = as_matrix(features, "features")
    y = np.asarray(labels)
    n_classes = int(y.max()) + 1 if y.size else 0
    y = check_labels(y, n_classes)
    if y.shape[0] != X.shape[0]:
        raise ValueError("labels must align with feature rows")
    if reg_lambda < 0.0:
        raise ConfigError("reg_lambda must be non-negative")
    n, d = X.shape
    means = np.zeros((n_classes, d))
    for c in range(n_classes):
        rows = X[y == c]
        if rows.shape[0] < 2:
            raise ValueError(f"class {c} has {rows.shape[0]} samples; need >= 2")
        means[c] = rows.mean(axis=0)
    centered = X - means[y]
    cov = centered.T @ centered / n
    cov_reg = cov + reg_lambda * (np.trace(cov) / d) * np.eye(d)
    try:
        np.linalg.cholesky(cov_reg)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "pooled covariance is singular even after regularization") from None
    precision = np.linalg.inv(cov_reg)
    precision = 0.5 * (precision + precision.T)
    return GdaState(means=means, precision=precision, reg_lambda=reg_lambda)


def gda_score(state: GdaState, x) -> float | np.ndarray:
    """Negated squared Mahalanobis distance to the nearest class mean."""
    arr = as_float_array(x, "features")
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    # (n, N): quadratic form per sample and class
    diffs = arr[:, None, :] - state.means[None, :, :]
    dist = np.einsum("ncd,de,nce->nc", diffs, state.precision, diffs)
    out = -dist.min(axis=1)
    return float(out[0]) if single else out


def gda_nearest_class(state: GdaState, x) -> np.ndarray:
    """Index of the Mahalanobis-nearest class mean (ties to the lowest index)."""
    arr = np.atleast_2d(as_float_array(x, "features"))
    diffs = arr[:, None, :] - state.means[None, :, :]
    dist = np.einsum("ncd,de,nce->nc", diffs, state.precision, diffs)
    return dist.argmin(axis=1)


# ---------------------------------------------------------------------------
# Local outlier factor (novelty scoring against a reference set)
# ---------------------------------------------------------------------------

@dataclass
class LofState:
    refs: np.ndarray       # (n, dim)
    k: int
    ref_kdist: np.ndarray  # (n,) k-distance of each reference point
    ref_lrd: np.ndarray    # (n,) local reachability density of each reference


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * (a @ b.T))
    return np.sqrt(np.maximum(sq, 0.0))


def _neighborhood(dist_row: np.ndarray, k: int) -> tuple[float, np.ndarray]:
    """k-distance and the tie-inclusive k-neighborhood of one query row."""
    order = np.argsort(dist_row, kind="stable")
    kdist = float(dist_row[order[k - 1]])
    members = np.flatnonzero(dist_row <= kdist)
    return kdist, members


def _lrd(dist_row: np.ndarray, members: np.ndarray, ref_kdist: np.ndarray) -> float:
    reach = np.maximum(ref_kdist[members], dist_row[members])
    total = float(reach.sum())
    if total == 0.0:
        return np.inf
    return float(len(members)) / total


def lof_fit(features, k: int | None = None) -> LofState:
    """Precompute reference k-distances and reachability densities.

    Reference neighborhoods exclude the point itself and include distance
    ties, per the standard formulation. The default k is min(20, n-1).
    """
    refs = as_matrix(features, "features")
    n = refs.shape[0]
    if n < 2:
        raise ValueError("LOF needs at least two reference points")
    k = min(20, n - 1) if k is None else k
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < {n}, got {k}")
    dists = _pairwise_distances(refs, refs)
    np.fill_diagonal(dists, np.inf)
    if not np.any(np.isfinite(dists) & (dists > 0.0)):
        raise ValueError("all reference points are identical; LOF is undefined")
    kdist = np.empty(n)
    neighborhoods = []
    for i in range(n):
        kd, members = _neighborhood(dists[i], k)
        kdist[i] = kd
        neighborhoods.append(members)
    lrd = np.empty(n)
    for i in range(n):
        lrd[i] = _lrd(dists[i], neighborhoods[i], kdist)
    return LofState(refs=refs, k=k, ref_kdist=kdist, ref_lrd=lrd)


def _lof_value(state: LofState, dist_row: np.ndarray) -> float:
    _, members = _neighborhood(dist_row, state.k)
    lrd_x = _lrd(dist_row, members, state.ref_kdist)
    mean_ref_lrd = float(np.mean(state.ref_lrd[members]))
    if np.isinf(lrd_x):
        # Query duplicates a zero-spread neighborhood: same density convention.
        return 1.0 if np.isinf(mean_ref_lrd) else 0.0
    return mean_ref_lrd / lrd_x


def lof_score(state: LofState, x) -> float | np.ndarray:
    """Negated local outlier factor of the query against the reference set."""
    arr = as_float_array(x, "features")
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    dists = _pairwise_distances(arr, state.refs)
    out = np.array([-_lof_value(state, row) for row in dists])
    return float(out[0]) if single else out
