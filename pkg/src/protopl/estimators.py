"""scikit-learn compatible facades over the functional core.

The estimators follow the usual conventions (fit/transform/predict,
get_params/set_params, trailing-underscore fitted attributes) so the
detectors compose with sklearn pipelines and model selection.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from ._validation import as_matrix
from .data import Example, FeaturizerConfig, FewShotTask, OOD_LABEL, TaskProvenance, hash_featurize
from .errors import ConfigError
from .losses import LossWeights
from .scoring import (calibrate_threshold, classify_batch, energy_score, gda_fit,
                      gda_nearest_class, gda_score, head_logits, lof_fit, lof_score,
                      msp_score, proto_scores, train_ce_head)
from .training import TrainConfig, compute_thresholds, pretrain, self_train

UNLABELED = -1


class HashingTextVectorizer(BaseEstimator, TransformerMixin):
    """Stateless signed-hashing text vectorizer (unigrams + bigrams, L2-normalized)."""

    def __init__(self, n_features: int = 512, hash_seed: int = 0):
        self.n_features = n_features
        self.hash_seed = hash_seed

    def fit(self, X, y=None):
        FeaturizerConfig(dimension=self.n_features, hash_seed=self.hash_seed)
        return self

    def transform(self, X) -> np.ndarray:
        config = FeaturizerConfig(dimension=self.n_features, hash_seed=self.hash_seed)
        return np.stack([hash_featurize(text, config) for text in X])


def _split_labels(y) -> tuple[list[int], list[int], list]:
    """Split row indices into labeled/unlabeled; -1 and None mark unlabeled."""
    labeled_idx, unlabeled_idx, labels = [], [], []
    for i, value in enumerate(y):
        if value is None or (isinstance(value, (int, np.integer)) and value == UNLABELED):
            unlabeled_idx.append(i)
        else:
            labeled_idx.append(i)
            labels.append(str(value))
    return labeled_idx, unlabeled_idx, labels


class PrototypeOodClassifier(BaseEstimator, ClassifierMixin):
    """Few-shot open-set intent classifier.

    fit(X, y) treats rows whose y is -1 (or None) as the unlabeled mixed pool:
    the projection and prototypes are pretrained contrastively on the labeled
    rows, then refined by threshold-based pseudo-label self-training over the
    unlabeled rows (skipped when there are none or selftrain_epochs == 0).

    predict(X) returns the nearest prototype's class, rejecting to
    `reject_label` once a confidence threshold has been set via calibrate()
    on held-out in-domain data. score_samples(X) is the max-cosine confidence.
    """

    def __init__(self, proto_dim: int = 256, similarity: str = "dot",
                 pretrain_epochs: int = 20, batch_size: int = 20,
                 lr_projection: float = 1e-4, lr_prototypes: float = 1e-3,
                 selftrain_epochs: int = 50, threshold_rank: int = 5,
                 margin_ind: float = 2.8, margin_ood: float = 1.1,
                 weight_pcl: float = 1.0, weight_ind: float = 0.05,
                 weight_ood: float = 0.05, dev_quantile: float = 0.75,
                 reject_label: str = OOD_LABEL, random_state: int = 0):
        self.proto_dim = proto_dim
        self.similarity = similarity
        self.pretrain_epochs = pretrain_epochs
        self.batch_size = batch_size
        self.lr_projection = lr_projection
        self.lr_prototypes = lr_prototypes
        self.selftrain_epochs = selftrain_epochs
        self.threshold_rank = threshold_rank
        self.margin_ind = margin_ind
        self.margin_ood = margin_ood
        self.weight_pcl = weight_pcl
        self.weight_ind = weight_ind
        self.weight_ood = weight_ood
        self.dev_quantile = dev_quantile
        self.reject_label = reject_label
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            pretrain_epochs=self.pretrain_epochs, batch_size=self.batch_size,
            lr_projection=self.lr_projection, lr_prototypes=self.lr_prototypes,
            selftrain_epochs=self.selftrain_epochs, threshold_rank=self.threshold_rank,
            margin_ind=self.margin_ind, margin_ood=self.margin_ood,
            weights=LossWeights(pcl=self.weight_pcl, ind=self.weight_ind,
                                ood=self.weight_ood),
            seed=self.random_state, dev_quantile=self.dev_quantile,
            proto_dim=self.proto_dim, similarity=self.similarity)

    def fit(self, X, y):
        X = as_matrix(X, "X")
        y = list(y)
        if len(y) != X.shape[0]:
            raise ValueError("X and y must have the same number of rows")
        labeled_idx, unlabeled_idx, labels = _split_labels(y)
        if not labeled_idx:
            raise ConfigError("fit needs at least one labeled row")
        classes = sorted(set(labels))
        labeled = [Example(id=f"x{i:06d}", embedding=X[i], label=lab)
                   for i, lab in zip(labeled_idx, labels)]
        unlabeled = [Example(id=f"x{i:06d}", embedding=X[i]) for i in unlabeled_idx]
        task = FewShotTask(classes, labeled, unlabeled, dev=[], test=[],
                           provenance=TaskProvenance(seed=self.random_state,
                                                     ind_ratio=None, k=None,
                                                     source="arrays"))
        config = self._train_config()
        model = pretrain(task, config)
        self.thresholds_ = None
        self.train_log_ = None
        if unlabeled and config.selftrain_epochs > 0:
            self.thresholds_ = compute_thresholds(model, task.unlabeled_pool,
                                                  config.threshold_rank)
            model, self.train_log_ = self_train(model, task, self.thresholds_, config)
        self.model_ = model
        self.classes_ = np.array(classes, dtype=object)
        self.threshold_ = None
        return self

    def score_samples(self, X) -> np.ndarray:
        self._check_fitted()
        scores, _ = proto_scores(self.model_, X)
        return scores

    def calibrate(self, X_dev) -> "PrototypeOodClassifier":
        """Set the rejection threshold from held-out in-domain confidence scores."""
        self.threshold_ = calibrate_threshold(self.score_samples(X_dev),
                                              self.dev_quantile)
        return self

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        if self.threshold_ is None:
            raise ConfigError("call calibrate() before decision_function()")
        return self.score_samples(X) - self.threshold_

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        if self.threshold_ is None:
            _, nearest = proto_scores(self.model_, X)
            return self.classes_[nearest]
        labels = classify_batch(self.model_, X, self.threshold_, list(self.classes_))
        return np.array([self.reject_label if lab == OOD_LABEL else lab
                         for lab in labels], dtype=object)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigError("this estimator is not fitted yet; call fit first")


class _LabeledScorer(BaseEstimator):
    """Shared plumbing for the baseline confidence scorers: label encoding."""

    def _encode(self, X, y) -> tuple[np.ndarray, np.ndarray]:
        X = as_matrix(X, "X")
        labels = [str(v) for v in y]
        if len(labels) != X.shape[0]:
            raise ValueError("X and y must have the same number of rows")
        self.classes_ = np.array(sorted(set(labels)), dtype=object)
        index = {c: i for i, c in enumerate(self.classes_)}
        return X, np.array([index[lab] for lab in labels], dtype=np.int64)

    def _check_fitted(self):
        if not hasattr(self, "classes_"):
            raise ConfigError("this scorer is not fitted yet; call fit first")


class MaxSoftmaxScorer(_LabeledScorer):
    """Max softmax probability of a cross-entropy head; higher = more in-domain."""

    variant = "msp"

    def __init__(self, epochs: int = 300, lr: float = 0.05, random_state: int = 0):
        self.epochs = epochs
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y):
        X, y_idx = self._encode(X, y)
        self.head_ = train_ce_head(X, y_idx, epochs=self.epochs, lr=self.lr,
                                   seed=self.random_state)
        return self

    def score_samples(self, X) -> np.ndarray:
        self._check_fitted()
        return np.asarray(msp_score(self.head_, as_matrix(X, "X")))

    def predict_ind(self, X) -> np.ndarray:
        self._check_fitted()
        logits = head_logits(self.head_, as_matrix(X, "X"))
        return self.classes_[logits.argmax(axis=1)]


class EnergyScorer(MaxSoftmaxScorer):
    """Negative free energy (logsumexp of head logits); higher = more in-domain."""

    variant = "energy"

    def score_samples(self, X) -> np.ndarray:
        self._check_fitted()
        return np.asarray(energy_score(self.head_, as_matrix(X, "X")))


class MahalanobisScorer(_LabeledScorer):
    """Negated Mahalanobis distance to the nearest class mean (shared covariance)."""

    variant = "gda"

    def __init__(self, reg_lambda: float = 1e-3):
        self.reg_lambda = reg_lambda

    def fit(self, X, y):
        X, y_idx = self._encode(X, y)
        self.state_ = gda_fit(X, y_idx, reg_lambda=self.reg_lambda)
        return self

    def score_samples(self, X) -> np.ndarray:
        self._check_fitted()
        return np.asarray(gda_score(self.state_, as_matrix(X, "X")))

    def predict_ind(self, X) -> np.ndarray:
        self._check_fitted()
        return self.classes_[gda_nearest_class(self.state_, as_matrix(X, "X"))]


class LocalOutlierScorer(_LabeledScorer):
    """Negated local outlier factor against the labeled reference set.

    LOF itself carries no class information, so in-domain class predictions
    come from a cross-entropy head fit on the same data.
    """

    variant = "lof"

    def __init__(self, n_neighbors: int | None = None, epochs: int = 300,
                 lr: float = 0.05, random_state: int = 0):
        self.n_neighbors = n_neighbors
        self.epochs = epochs
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y):
        X, y_idx = self._encode(X, y)
        self.state_ = lof_fit(X, k=self.n_neighbors)
        self.head_ = train_ce_head(X, y_idx, epochs=self.epochs, lr=self.lr,
                                   seed=self.random_state)
        return self

    def score_samples(self, X) -> np.ndarray:
        self._check_fitted()
        return np.asarray(lof_score(self.state_, as_matrix(X, "X")))

    def predict_ind(self, X) -> np.ndarray:
        self._check_fitted()
        logits = head_logits(self.head_, as_matrix(X, "X"))
        return self.classes_[logits.argmax(axis=1)]


_SCORER_CLASSES = {
    "msp": MaxSoftmaxScorer,
    "energy": EnergyScorer,
    "gda": MahalanobisScorer,
    "lof": LocalOutlierScorer,
}


def make_confidence_scorer(variant: str, **kwargs):
    """Instantiate a baseline scorer by variant tag (msp | energy | gda | lof)."""
    if variant not in _SCORER_CLASSES:
        raise ConfigError(f"unknown scorer variant {variant!r}; "
                          f"choose from {sorted(_SCORER_CLASSES)}")
    return _SCORER_CLASSES[variant](**kwargs)
