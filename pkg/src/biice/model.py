"""Concept binding, recurrent refinement, broadcast and the linear logit head.

Every operation accepts either a single sample (``z`` of shape ``(L, D)``)
or a stack of samples (``(B, L, D)``); the concept bank may be shared
``(K, D)`` or per sample ``(B, K, D)``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .numerics import (
    ContractError,
    GatedRecurrentCell,
    glorot_init,
    gru_gates,
    softmax,
    truncated_normal,
)

NORM_AXES = ("concepts", "patches")
ATTN_FLOOR = 1e-12


@dataclass(frozen=True)
class BiIceConfig:
    n_concepts: int
    dim: int
    n_patches: int
    n_classes: int
    n_global: int = 0
    t_inner: int = 1
    norm_axis: str = "concepts"

    def __post_init__(self):
        for name in ("n_concepts", "dim", "n_patches", "n_classes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if not 0 <= self.n_global <= self.n_concepts:
            raise ContractError(f"n_global must lie in [0, {self.n_concepts}]")
        if self.t_inner < 1:
            raise ContractError("t_inner must be >= 1")
        if self.norm_axis not in NORM_AXES:
            raise ContractError(f"norm_axis must be one of {NORM_AXES}")

    @property
    def n_spatial(self) -> int:
        return self.n_concepts - self.n_global

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.dim))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BiIceParams:
    """All learnable tensors. Projections are bias-free ``D x D`` maps applied as ``x @ W``."""

    zeta: np.ndarray
    q_theta: np.ndarray
    k_theta: np.ndarray
    v_theta: np.ndarray
    q_omega: np.ndarray
    k_omega: np.ndarray
    v_omega: np.ndarray
    cell: GatedRecurrentCell
    head: np.ndarray

    PROJECTIONS = ("q_theta", "k_theta", "v_theta", "q_omega", "k_omega", "v_omega")
    CELL_TENSORS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")

    @classmethod
    def init(cls, config: BiIceConfig, rng: np.random.Generator) -> "BiIceParams":
        d = config.dim
        zeta = truncated_normal((config.n_concepts, d), 1.0 / np.sqrt(d), rng)
        projections = [glorot_init(d, d, rng) for _ in cls.PROJECTIONS]
        cell = GatedRecurrentCell.init(d, rng)
        head = glorot_init(d, config.n_classes, rng)
        return cls(zeta, *projections, cell, head)

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Live views of every tensor, keyed by a stable name (order is fixed)."""
        out = {"zeta": self.zeta}
        for name in self.PROJECTIONS:
            out[name] = getattr(self, name)
        for name in self.CELL_TENSORS:
            out[f"cell.{name}"] = getattr(self.cell, name)
        out["head"] = self.head
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "BiIceParams":
        cell = GatedRecurrentCell(*(np.array(tensors[f"cell.{n}"]) for n in cls.CELL_TENSORS))
        return cls(
            np.array(tensors["zeta"]),
            *(np.array(tensors[n]) for n in cls.PROJECTIONS),
            cell,
            np.array(tensors["head"]),
        )

    def copy(self) -> "BiIceParams":
        return self.from_tensors(self.named_tensors())

    def astype(self, dtype) -> "BiIceParams":
        return self.from_tensors({k: v.astype(dtype) for k, v in self.named_tensors().items()})

    def check(self, config: BiIceConfig) -> None:
        d = config.dim
        if self.zeta.shape != (config.n_concepts, d):
            raise ContractError(f"zeta must be {config.n_concepts}x{d}, got {self.zeta.shape}")
        for name in self.PROJECTIONS:
            if getattr(self, name).shape != (d, d):
                raise ContractError(f"{name} must be {d}x{d}")
        if self.cell.dim != d:
            raise ContractError(f"recurrent cell dimension {self.cell.dim} != {d}")
        if self.head.shape != (d, config.n_classes):
            raise ContractError(f"head must be {d}x{config.n_classes}, got {self.head.shape}")


@dataclass
class ForwardTrace:
    attn: np.ndarray
    readout: np.ndarray
    zeta_refined: np.ndarray
    phi: np.ndarray
    z_bar: np.ndarray
    logits: np.ndarray
    # per-step (zeta_in, attn_competitive, attn, u, z_gate, r_gate, h_tilde) kept for backprop
    steps: list = field(default_factory=list, repr=False)


def _t(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def concept_binding(z: np.ndarray, zeta: np.ndarray, params: BiIceParams, scale: float | None = None,
                    return_competitive: bool = False):
    """Competitive attention of concepts over patches and the per-concept readout.

    Scores are softmaxed over the concept axis (each patch distributes unit mass
    across concepts), then each concept's row is renormalised over patches.

    Returns:
        ``(attn, readout)`` with shapes ``(..., K, L)`` and ``(..., K, D)``;
        with ``return_competitive`` the pre-renormalisation attention is appended.
    """
    scale = float(np.sqrt(z.shape[-1])) if scale is None else scale
    q = zeta @ params.q_theta
    k = z @ params.k_theta
    v = z @ params.v_theta
    scores = q @ _t(k) / scale
    competitive = softmax(scores, axis=-2)
    mass = competitive.sum(axis=-1, keepdims=True)
    if np.any(mass < ATTN_FLOOR):
        warnings.warn("degenerate concept attention: a concept received ~zero mass", RuntimeWarning)
        mass = np.maximum(mass, ATTN_FLOOR)
    attn = competitive / mass
    readout = attn @ v
    if return_competitive:
        return attn, readout, competitive
    return attn, readout


def refine_concepts(zeta: np.ndarray, readout: np.ndarray, cell: GatedRecurrentCell) -> np.ndarray:
    """One shared GRU step per concept row: hidden state ``zeta``, input ``readout``."""
    if zeta.shape[-1] != cell.dim or readout.shape[-1] != cell.dim:
        raise ContractError("refine_concepts dimension mismatch")
    return gru_gates(cell, zeta, readout)[3]


def broadcast(z: np.ndarray, zeta_refined: np.ndarray, params: BiIceParams,
              norm_axis: str = "concepts", scale: float | None = None):
    """Patch-to-concept composition scores ``phi`` and the rewritten embedding ``z_bar``."""
    if norm_axis not in NORM_AXES:
        raise ContractError(f"norm_axis must be one of {NORM_AXES}")
    scale = float(np.sqrt(z.shape[-1])) if scale is None else scale
    q = z @ params.q_omega
    k = zeta_refined @ params.k_omega
    v = zeta_refined @ params.v_omega
    scores = q @ _t(k) / scale
    phi = softmax(scores, axis=-1 if norm_axis == "concepts" else -2)
    return phi, phi @ v


def compute_logits(z_bar: np.ndarray, head: np.ndarray) -> np.ndarray:
    """Mean-pool over patches, then apply the linear head."""
    if z_bar.shape[-1] != head.shape[0]:
        raise ContractError(f"z_bar dim {z_bar.shape[-1]} does not match head {head.shape}")
    return z_bar.mean(axis=-2) @ head


def concept_class_weights(zeta_refined: np.ndarray, v_omega: np.ndarray, head: np.ndarray) -> np.ndarray:
    """Per-concept contribution to each class logit: ``v_omega(zeta) @ P``, shape ``(..., K, N)``."""
    return (zeta_refined @ v_omega) @ head


def decomposed_logits(phi: np.ndarray, zeta_refined: np.ndarray, v_omega: np.ndarray,
                      head: np.ndarray) -> np.ndarray:
    """Logits as a sum over concepts of mean composition mass times class weight."""
    phi_bar = phi.mean(axis=-2)
    weights = concept_class_weights(zeta_refined, v_omega, head)
    return (phi_bar[..., :, None] * weights).sum(axis=-2)


def forward(z: np.ndarray, params: BiIceParams, config: BiIceConfig) -> ForwardTrace:
    """Full pass: ``t_inner`` rounds of binding + refinement, then broadcast and logits."""
    z = np.asarray(z)
    if z.shape[-2:] != (config.n_patches, config.dim):
        raise ContractError(
            f"z must end in ({config.n_patches}, {config.dim}), got {z.shape}"
        )
    scale = config.scale
    zeta = params.zeta
    if z.ndim == 3:
        zeta = np.broadcast_to(zeta, (z.shape[0],) + zeta.shape)
    steps = []
    attn = readout = None
    for _ in range(config.t_inner):
        attn, readout, competitive = concept_binding(z, zeta, params, scale, return_competitive=True)
        gz, gr, h_tilde, new = gru_gates(params.cell, zeta, readout)
        steps.append((zeta, competitive, attn, readout, gz, gr, h_tilde))
        zeta = new
    phi, z_bar = broadcast(z, zeta, params, config.norm_axis, scale)
    logits = compute_logits(z_bar, params.head)
    return ForwardTrace(attn, readout, zeta, phi, z_bar, logits, steps)


def split_composition(phi: np.ndarray, n_global: int):
    """Global scores (patch-averaged first ``n_global`` columns) and the spatial block."""
    if not 0 <= n_global <= phi.shape[-1]:
        raise ContractError(f"n_global={n_global} outside [0, {phi.shape[-1]}]")
    return phi[..., :n_global].mean(axis=-2), phi[..., n_global:]


# --- parameter files ------------------------------------------------------

PARAMS_MAGIC = "BIPR1"


def save_params(path, params: BiIceParams, config: BiIceConfig) -> None:
    """JSON header line followed by little-endian float64 tensors in header order."""
    tensors = params.named_tensors()
    header = {
        "magic": PARAMS_MAGIC,
        "config": config.to_dict(),
        "tensors": [[name, list(t.shape)] for name, t in tensors.items()],
        "dtype": "f64le",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for t in tensors.values():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_params(path) -> tuple[BiIceParams, BiIceConfig]:
    from .data import FormatError

    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    try:
        header = json.loads(blob[:nl])
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable params header at byte 0") from exc
    if header.get("magic") != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    known = {f.name for f in fields(BiIceConfig)}
    config = BiIceConfig(**{k: v for k, v in header["config"].items() if k in known})
    offset = nl + 1
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(blob):
            raise FormatError(f"{path}: truncated tensor {name} at byte {offset}")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=offset).reshape(shape).astype(float)
        offset += n
    params = BiIceParams.from_tensors(tensors)
    params.check(config)
    return params, config
