"""Float64 numeric primitives: reductions, cosine, Adam, finite differences.

Everything here is deterministic given its inputs; rerunning with the same
seed reproduces results bit for bit on the same platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_vector, check_same_shape


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator. Single entry point for every random draw."""
    return np.random.default_rng(seed)


def dot(a, b) -> float:
    """Inner product of two equal-length vectors."""
    va, vb = as_vector(a, "a"), as_vector(b, "b")
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    return float(np.dot(va, vb))


def cosine(a, b) -> float:
    """Cosine similarity, clamped to [-1, 1]. Zero-norm inputs are an error."""
    va, vb = as_vector(a, "a"), as_vector(b, "b")
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine is undefined for zero-norm input")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def logsumexp(x) -> float:
    """log(sum(exp(x))) with max-shift so large inputs do not overflow."""
    v = as_vector(x, "logits")
    m = float(v.max())
    return m + float(np.log(np.sum(np.exp(v - m))))


@dataclass
class AdamState:
    """First/second moment accumulators and step counter for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, **kwargs) -> "AdamState":
        return cls(m=np.zeros_like(params, dtype=np.float64),
                   v=np.zeros_like(params, dtype=np.float64), **kwargs)

    def copy(self) -> "AdamState":
        return AdamState(m=self.m.copy(), v=self.v.copy(), t=self.t,
                         beta1=self.beta1, beta2=self.beta2, eps=self.eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              learning_rate: float) -> np.ndarray:
    """One bias-corrected Adam update. Mutates `state`, returns new params.

    update = lr * m_hat / (sqrt(v_hat) + eps), with m_hat, v_hat the
    bias-corrected moment estimates at the incremented step count.
    """
    if learning_rate <= 0.0:
        raise ValueError("learning_rate must be positive")
    check_same_shape(params, grads, "params/grads")
    check_same_shape(params, state.m, "params/adam state")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient passed to adam_step")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def finite_diff_grad(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0.0:
        raise ValueError("step h must be positive")
    x0 = np.asarray(x, dtype=np.float64).copy()
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x0))
        flat[i] = orig - h
        fm = float(f(x0))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"function evaluated to a non-finite value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
