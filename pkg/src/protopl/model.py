"""The trainable object: an affine projection plus one prototype row per IND class.

Embeddings are projected with s = W x + b (no nonlinearity, no normalization)
into the prototype space. The `similarity` mode ("dot" or "cosine") governs
margin losses and pseudo-label scores; test-time confidence is always cosine
and lives in the scoring module. Dot is the default: it is unbounded, which
the default margins (well above 1) require to bind.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_float_array, as_matrix
from .errors import ConfigError
from .numerics import AdamState, make_rng

SIMILARITY_MODES = ("dot", "cosine")
CHECKPOINT_FORMAT = "protopl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ProtoModel:
    weight: np.ndarray        # (proto_dim, input_dim)
    bias: np.ndarray          # (proto_dim,)
    prototypes: np.ndarray    # (n_classes, proto_dim)
    similarity: str = "dot"
    seed: int | None = None
    opt_weight: AdamState = field(default=None)  # type: ignore[assignment]
    opt_bias: AdamState = field(default=None)  # type: ignore[assignment]
    opt_prototypes: AdamState = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.similarity not in SIMILARITY_MODES:
            raise ConfigError(f"similarity must be one of {SIMILARITY_MODES}")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ConfigError("weight rows and bias length disagree")
        if self.prototypes.shape[1] != self.weight.shape[0]:
            raise ConfigError("prototype width and projection output dimension disagree")
        if self.opt_weight is None:
            self.opt_weight = AdamState.zeros_like(self.weight)
        if self.opt_bias is None:
            self.opt_bias = AdamState.zeros_like(self.bias)
        if self.opt_prototypes is None:
            self.opt_prototypes = AdamState.zeros_like(self.prototypes)

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def proto_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    def copy(self) -> "ProtoModel":
        return ProtoModel(weight=self.weight.copy(), bias=self.bias.copy(),
                          prototypes=self.prototypes.copy(), similarity=self.similarity,
                          seed=self.seed, opt_weight=self.opt_weight.copy(),
                          opt_bias=self.opt_bias.copy(),
                          opt_prototypes=self.opt_prototypes.copy())


def init_model(input_dim: int, n_classes: int, proto_dim: int = 256, seed=0,
               similarity: str = "dot") -> ProtoModel:
    """Random init: weight ~ N(0, 1/input_dim), bias = 0, prototypes ~ N(0, 1/proto_dim)."""
    if min(input_dim, n_classes, proto_dim) < 1:
        raise ConfigError("input_dim, n_classes and proto_dim must all be positive")
    rng = make_rng(seed)
    weight = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(proto_dim, input_dim))
    bias = np.zeros(proto_dim, dtype=np.float64)
    prototypes = rng.normal(0.0, 1.0 / np.sqrt(proto_dim), size=(n_classes, proto_dim))
    stored_seed = int(seed) if np.isscalar(seed) and not isinstance(seed, str) else None
    return ProtoModel(weight=weight, bias=bias, prototypes=prototypes,
                      similarity=similarity, seed=stored_seed)


def project(model: ProtoModel, embedding) -> np.ndarray:
    """Affine map s = W x + b. Accepts a single vector or a (n, d) batch."""
    x = as_float_array(embedding, "embedding")
    if x.ndim == 1:
        if x.shape[0] != model.input_dim:
            raise ValueError(f"embedding dimension {x.shape[0]} != model input {model.input_dim}")
        return model.weight @ x + model.bias
    if x.ndim == 2:
        if x.shape[1] != model.input_dim:
            raise ValueError(f"embedding dimension {x.shape[1]} != model input {model.input_dim}")
        return x @ model.weight.T + model.bias
    raise ValueError(f"embedding must be 1- or 2-dimensional, got shape {x.shape}")


def similarity(model: ProtoModel, feature, prototype) -> float:
    """Pairwise similarity in the model's margin mode (dot product or cosine)."""
    s = as_float_array(feature, "feature", ndim=1)
    c = as_float_array(prototype, "prototype", ndim=1)
    if s.shape != c.shape:
        raise ValueError(f"feature/prototype dimension mismatch: {s.shape[0]} vs {c.shape[0]}")
    if model.similarity == "dot":
        return float(np.dot(s, c))
    ns, nc = float(np.linalg.norm(s)), float(np.linalg.norm(c))
    if ns == 0.0 or nc == 0.0:
        raise ValueError("cosine similarity is undefined for zero-norm input")
    return float(np.clip(np.dot(s, c) / (ns * nc), -1.0, 1.0))


def similarity_matrix(features: np.ndarray, prototypes: np.ndarray,
                      mode: str = "dot") -> np.ndarray:
    """(n, N) similarities between feature rows and prototype rows."""
    if mode == "dot":
        return features @ prototypes.T
    if mode != "cosine":
        raise ConfigError(f"similarity must be one of {SIMILARITY_MODES}")
    fn = np.linalg.norm(features, axis=1)
    pn = np.linalg.norm(prototypes, axis=1)
    if np.any(fn == 0.0):
        raise ValueError("cosine similarity is undefined for a zero-norm feature")
    if np.any(pn == 0.0):
        raise ValueError("cosine similarity is undefined for a zero-norm prototype")
    sims = (features / fn[:, None]) @ (prototypes / pn[:, None]).T
    return np.clip(sims, -1.0, 1.0)


def margin_scores(model: ProtoModel, embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-label scores: max similarity to any prototype, in the margin mode.

    Returns (scores, nearest prototype index); argmax ties break to the lowest
    index.
    """
    feats = project(model, as_matrix(embeddings, "embeddings"))
    sims = similarity_matrix(feats, model.prototypes, model.similarity)
    return sims.max(axis=1), sims.argmax(axis=1)


def save_checkpoint(model: ProtoModel, path) -> None:
    """Write the model as a single versioned JSON file (atomic rename).

    Holds dims, similarity mode, all parameter arrays, and the init seed.
    Optimizer accumulators are not persisted; a reloaded model starts with
    fresh Adam state.
    """
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_dim": model.input_dim,
        "proto_dim": model.proto_dim,
        "n_classes": model.n_classes,
        "similarity": model.similarity,
        "seed": model.seed,
        "weight": model.weight.tolist(),
        "bias": model.bias.tolist(),
        "prototypes": model.prototypes.tolist(),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
    os.replace(tmp, path)


def load_checkpoint(path) -> ProtoModel:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {obj.get('version')}")
    model = ProtoModel(weight=np.array(obj["weight"], dtype=np.float64),
                       bias=np.array(obj["bias"], dtype=np.float64),
                       prototypes=np.array(obj["prototypes"], dtype=np.float64),
                       similarity=obj["similarity"], seed=obj.get("seed"))
    expect = (obj["proto_dim"], obj["input_dim"], obj["n_classes"])
    got = (model.proto_dim, model.input_dim, model.n_classes)
    if expect != got:
        raise ConfigError(f"checkpoint dims {expect} disagree with arrays {got}")
    return model
