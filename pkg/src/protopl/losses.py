"""Training objectives with hand-derived analytic gradients.

All losses act on projected features (rows of `features`) and, where relevant,
the prototype matrix; gradients come back with respect to those direct inputs.
`projection_gradients` chains feature gradients through the affine projection
to its weight and bias. Every gradient here is covered by finite-difference
checks in the test suite.

The contrastive pair:

  * instance-instance: for each anchor with at least one same-class positive,
    the mean over positives j of -log softmax_{k != anchor}(s_i . s_k)[j],
    summed over anchors. Anchors without positives contribute nothing.
  * instance-prototype: sum over the batch of -log softmax_l(s_i . c_l)[y_i].

The margin pair (hinged, averaged over their sample sets so coefficient
weights keep meaning as pseudo-set sizes grow):

  * pull: max(0, margin - max_l sim(s, c_l)) for pseudo-IND samples;
  * push: max(0, max_l sim(s, c_l) - margin) for pseudo-OOD samples.

Hinge subgradient at the kink is 0; argmax/argmin ties break to the lowest
prototype index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_matrix, check_labels
from .errors import ConfigError


@dataclass(frozen=True)
class LossWeights:
    """Stage-2 mixing coefficients for the combined objective."""

    pcl: float = 1.0
    ind: float = 0.05
    ood: float = 0.05

    def __post_init__(self):
        if min(self.pcl, self.ind, self.ood) < 0.0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class LossOutput:
    """Loss value with gradients for the arrays that produced it.

    `n_terms` counts the primitive terms that contributed (anchors with
    positives, batch rows, or pseudo-set members, depending on the loss).
    `grad_features_ood` and `components` are populated by stage2_loss only.
    """

    value: float
    grad_features: np.ndarray
    grad_prototypes: np.ndarray | None = None
    n_terms: int = 0
    grad_features_ood: np.ndarray | None = None
    components: dict[str, float] | None = None


def projection_gradients(inputs: np.ndarray, grad_features: np.ndarray,
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Chain dL/ds back through s = W x + b: returns (dL/dW, dL/db)."""
    return grad_features.T @ inputs, grad_features.sum(axis=0)


def _row_softmax_masked(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row softmax of a square matrix with the diagonal excluded.

    Returns (probabilities with zero diagonal, per-row log normalizers).
    """
    masked = logits.copy()
    np.fill_diagonal(masked, -np.inf)
    row_max = masked.max(axis=1)
    expw = np.exp(masked - row_max[:, None])
    denom = expw.sum(axis=1)
    return expw / denom[:, None], row_max + np.log(denom)


def instance_instance_loss(features, labels) -> LossOutput:
    """Contrastive pull between same-class rows of a batch (no prototypes).

    Batches need at least two rows; a batch where no anchor has a positive is
    a valid zero (not an error).
    """
    feats = as_matrix(features, "features")
    n = feats.shape[0]
    if n < 2:
        raise ValueError(f"instance-instance loss needs a batch of >= 2, got {n}")
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError("labels must align with the feature rows")
    logits = feats @ feats.T
    probs, lognorm = _row_softmax_masked(logits)
    positives = (y[:, None] == y[None, :])
    np.fill_diagonal(positives, False)
    n_pos = positives.sum(axis=1)
    active = n_pos > 0
    value = 0.0
    coeff = np.zeros((n, n))
    if np.any(active):
        mean_pos_logit = (logits * positives).sum(axis=1)[active] / n_pos[active]
        value = float(np.sum(lognorm[active] - mean_pos_logit))
        coeff[active] = probs[active] - positives[active] / n_pos[active, None]
    grad = (coeff + coeff.T) @ feats
    return LossOutput(value=value, grad_features=grad, n_terms=int(active.sum()))


def instance_prototype_loss(features, labels, prototypes) -> LossOutput:
    """Softmax alignment of each row with its class prototype."""
    feats = as_matrix(features, "features")
    protos = as_matrix(prototypes, "prototypes")
    if feats.shape[1] != protos.shape[1]:
        raise ValueError(f"feature width {feats.shape[1]} != prototype width {protos.shape[1]}")
    y = check_labels(labels, protos.shape[0])
    if y.shape[0] != feats.shape[0]:
        raise ValueError("labels must align with the feature rows")
    logits = feats @ protos.T
    row_max = logits.max(axis=1)
    expw = np.exp(logits - row_max[:, None])
    denom = expw.sum(axis=1)
    lognorm = row_max + np.log(denom)
    rows = np.arange(feats.shape[0])
    value = float(np.sum(lognorm - logits[rows, y]))
    delta = expw / denom[:, None]
    delta[rows, y] -= 1.0
    return LossOutput(value=value, grad_features=delta @ protos,
                      grad_prototypes=delta.T @ feats, n_terms=feats.shape[0])


def pcl_loss(features, labels, prototypes) -> LossOutput:
    """Sum of the instance-instance and instance-prototype losses, unit weights."""
    ins = instance_instance_loss(features, labels)
    proto = instance_prototype_loss(features, labels, prototypes)
    return LossOutput(value=ins.value + proto.value,
                      grad_features=ins.grad_features + proto.grad_features,
                      grad_prototypes=proto.grad_prototypes,
                      n_terms=ins.n_terms + proto.n_terms)


def _unclipped_sims(feats: np.ndarray, protos: np.ndarray, mode: str) -> np.ndarray:
    if mode == "dot":
        return feats @ protos.T
    if mode != "cosine":
        raise ConfigError(f"unknown similarity mode {mode!r}")
    fn = np.linalg.norm(feats, axis=1)
    pn = np.linalg.norm(protos, axis=1)
    if np.any(fn == 0.0) or np.any(pn == 0.0):
        raise ValueError("cosine similarity is undefined for zero-norm rows")
    return (feats / fn[:, None]) @ (protos / pn[:, None]).T


def _add_sim_gradient(feats, protos, mode, row, col, coeff, grad_f, grad_p):
    """Accumulate coeff * d sim(feats[row], protos[col]) into the gradients."""
    if mode == "dot":
        grad_f[row] += coeff * protos[col]
        grad_p[col] += coeff * feats[row]
        return
    u, v = feats[row], protos[col]
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    cos_uv = float(np.dot(u, v)) / (nu * nv)
    grad_f[row] += coeff * (v / (nu * nv) - cos_uv * u / (nu * nu))
    grad_p[col] += coeff * (u / (nu * nv) - cos_uv * v / (nv * nv))


def _empty_margin_output(protos: np.ndarray) -> LossOutput:
    return LossOutput(value=0.0, grad_features=np.zeros((0, protos.shape[1])),
                      grad_prototypes=np.zeros_like(protos), n_terms=0)


def ood_margin_loss(features, prototypes, margin: float, mode: str = "dot") -> LossOutput:
    """Push: mean over samples of max(0, max_l sim(s, c_l) - margin).

    Only the most similar prototype of each active sample receives gradient.
    An empty sample set is a zero loss.
    """
    protos = as_matrix(prototypes, "prototypes")
    feats = np.asarray(features, dtype=np.float64)
    if feats.size == 0:
        return _empty_margin_output(protos)
    feats = as_matrix(feats, "features")
    sims = _unclipped_sims(feats, protos, mode)
    best = sims.max(axis=1)
    nearest = sims.argmax(axis=1)
    slack = best - margin
    active = slack > 0.0
    n = feats.shape[0]
    value = float(np.sum(slack[active]) / n)
    grad_f = np.zeros_like(feats)
    grad_p = np.zeros_like(protos)
    for i in np.flatnonzero(active):
        _add_sim_gradient(feats, protos, mode, i, nearest[i], 1.0 / n, grad_f, grad_p)
    return LossOutput(value=value, grad_features=grad_f, grad_prototypes=grad_p, n_terms=n)


def ind_margin_loss(features, prototypes, margin: float, mode: str = "dot",
                    literal_max: bool = False) -> LossOutput:
    """Pull: mean over samples of max(0, margin - max_l sim(s, c_l)).

    With `literal_max` the hinge instead reads max(0, max_l(margin - sim)),
    i.e. it targets the least similar prototype; kept only as a configuration
    for fidelity experiments since it pulls samples toward far prototypes.
    """
    protos = as_matrix(prototypes, "prototypes")
    feats = np.asarray(features, dtype=np.float64)
    if feats.size == 0:
        return _empty_margin_output(protos)
    feats = as_matrix(feats, "features")
    sims = _unclipped_sims(feats, protos, mode)
    if literal_max:
        picked = sims.min(axis=1)
        target = sims.argmin(axis=1)
    else:
        picked = sims.max(axis=1)
        target = sims.argmax(axis=1)
    slack = margin - picked
    active = slack > 0.0
    n = feats.shape[0]
    value = float(np.sum(slack[active]) / n)
    grad_f = np.zeros_like(feats)
    grad_p = np.zeros_like(protos)
    for i in np.flatnonzero(active):
        _add_sim_gradient(feats, protos, mode, i, target[i], -1.0 / n, grad_f, grad_p)
    return LossOutput(value=value, grad_features=grad_f, grad_prototypes=grad_p, n_terms=n)


def stage2_loss(features, labels, pseudo_mask, ood_features, prototypes,
                weights: LossWeights, margin_ind: float, margin_ood: float,
                mode: str = "dot", ind_literal_max: bool = False) -> LossOutput:
    """Combined self-training objective over one mini-batch.

    `features`/`labels` hold the IND pool (gold labeled plus pseudo-IND rows,
    flagged by `pseudo_mask`); both contrastive losses run on all of them,
    the pull margin on the pseudo-IND rows only, and the push margin on
    `ood_features`. Degenerate compositions the batch sampler can produce
    (one IND row, or none) contribute zero instead of erroring. With both
    pseudo sets empty the result is bit-identical to weights.pcl * pcl_loss.
    """
    protos = as_matrix(prototypes, "prototypes")
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0] if feats.ndim == 2 else 0
    mask = np.asarray(pseudo_mask, dtype=bool).reshape(-1) if n else np.zeros(0, dtype=bool)
    if n and mask.shape[0] != n:
        raise ValueError("pseudo_mask must align with the feature rows")

    if n >= 2:
        ins = instance_instance_loss(feats, labels)
    else:
        ins = LossOutput(0.0, np.zeros((n, protos.shape[1])), n_terms=0)
    if n >= 1:
        proto = instance_prototype_loss(feats, labels, protos)
    else:
        proto = LossOutput(0.0, np.zeros((0, protos.shape[1])),
                           grad_prototypes=np.zeros_like(protos), n_terms=0)
    pcl_value = ins.value + proto.value

    ind_out = ind_margin_loss(feats[mask] if n else feats, protos, margin_ind,
                              mode, literal_max=ind_literal_max)
    ood_out = ood_margin_loss(ood_features, protos, margin_ood, mode)

    value = weights.pcl * pcl_value + weights.ind * ind_out.value + weights.ood * ood_out.value
    grad_features = weights.pcl * (ins.grad_features + proto.grad_features)
    if n and np.any(mask):
        grad_features[mask] += weights.ind * ind_out.grad_features
    grad_prototypes = weights.pcl * (proto.grad_prototypes
                                     if proto.grad_prototypes is not None
                                     else np.zeros_like(protos))
    grad_prototypes = grad_prototypes + weights.ind * ind_out.grad_prototypes \
        + weights.ood * ood_out.grad_prototypes
    grad_ood = weights.ood * ood_out.grad_features
    return LossOutput(
        value=value, grad_features=grad_features, grad_prototypes=grad_prototypes,
        n_terms=ins.n_terms + proto.n_terms + ind_out.n_terms + ood_out.n_terms,
        grad_features_ood=grad_ood,
        components={"pcl": pcl_value, "ins": ins.value, "proto": proto.value,
                    "ind": ind_out.value, "ood": ood_out.value})
