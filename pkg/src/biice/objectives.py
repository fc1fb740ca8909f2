"""Classification, explanation and entropy-sparsity losses.

Each loss works on one sample or a leading batch axis; batched calls return
the mean over samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError

RANGE_TOL = 1e-9


@dataclass(frozen=True)
class LossWeights:
    lambda_expl: float = 1.0
    lambda_sparse: float = 0.0

    def __post_init__(self):
        if self.lambda_expl < 0 or self.lambda_sparse < 0:
            raise ContractError("loss weights must be nonnegative")


@dataclass
class AnnotationSet:
    """Binary concept annotations for ``M`` samples.

    ``q_global`` has shape ``(M, K_global)`` and ``q_spatial`` ``(M, L, K_spatial)``.
    """

    q_global: np.ndarray
    q_spatial: np.ndarray

    def __post_init__(self):
        self.q_global = np.asarray(self.q_global, dtype=np.uint8)
        self.q_spatial = np.asarray(self.q_spatial, dtype=np.uint8)
        if self.q_global.ndim != 2 or self.q_spatial.ndim != 3:
            raise ContractError("q_global must be (M, K_global) and q_spatial (M, L, K_spatial)")
        if self.q_global.shape[0] != self.q_spatial.shape[0]:
            raise ContractError("global and spatial annotations disagree on sample count")
        if self.q_global.max(initial=0) > 1 or self.q_spatial.max(initial=0) > 1:
            raise ContractError("annotations must be binary")

    def __len__(self) -> int:
        return self.q_global.shape[0]

    def subset(self, idx) -> "AnnotationSet":
        return AnnotationSet(self.q_global[idx], self.q_spatial[idx])

    def dense(self) -> np.ndarray:
        """Per-patch ``(M, L, K)`` view: global flags repeated on every patch."""
        m, n_patches, _ = self.q_spatial.shape
        g = np.broadcast_to(self.q_global[:, None, :], (m, n_patches, self.q_global.shape[1]))
        return np.concatenate([g, self.q_spatial], axis=-1)


def _batch_mean(x: np.ndarray) -> float:
    return float(np.mean(x)) if np.ndim(x) else float(x)


def cross_entropy(logits: np.ndarray, label) -> float:
    """Negative log-softmax at ``label``; a batch of logits gives the mean."""
    logits = np.asarray(logits, dtype=float)
    label = np.asarray(label)
    if np.any(label >= logits.shape[-1]) or np.any(label < 0):
        raise ContractError(f"label out of range for {logits.shape[-1]} classes")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, label[..., None], axis=-1)[..., 0]
    return _batch_mean(log_norm - picked)


def explanation_loss(phi_global: np.ndarray, phi_spatial: np.ndarray, q_global, q_spatial) -> float:
    """Squared error of global scores plus squared Frobenius error of the spatial block."""
    if q_global is None or q_spatial is None:
        raise ContractError("explanation_loss needs annotations; set lambda_expl=0 instead")
    q_global = np.asarray(q_global, dtype=float)
    q_spatial = np.asarray(q_spatial, dtype=float)
    if phi_global.shape != q_global.shape or phi_spatial.shape != q_spatial.shape:
        raise ContractError(
            f"annotation shapes {q_global.shape}/{q_spatial.shape} do not match "
            f"{phi_global.shape}/{phi_spatial.shape}"
        )
    g = ((phi_global - q_global) ** 2).sum(axis=-1)
    s = ((phi_spatial - q_spatial) ** 2).sum(axis=(-2, -1))
    return _batch_mean(g + s)


def xlogx(a: np.ndarray) -> np.ndarray:
    safe = np.where(a > 0, a, 1.0)
    return np.where(a > 0, a * np.log(safe), 0.0)


def sparsity_entropy(phi: np.ndarray) -> float:
    """Mean over all ``L*K`` entries of ``-a ln a`` (``0 ln 0 = 0``)."""
    phi = np.asarray(phi, dtype=float)
    if phi.min() < -RANGE_TOL or phi.max() > 1 + RANGE_TOL:
        raise ContractError("composition scores must lie in [0, 1]")
    phi = np.clip(phi, 0.0, 1.0)
    per_sample = -xlogx(phi).mean(axis=(-2, -1))
    return _batch_mean(per_sample)


def total_loss(cls: float, expl: float | None, sparse: float, weights: LossWeights) -> float:
    if weights.lambda_expl > 0 and expl is None:
        raise ContractError("lambda_expl > 0 requires an explanation loss value")
    total = cls + weights.lambda_sparse * sparse
    if weights.lambda_expl > 0:
        total += weights.lambda_expl * expl
    return total
