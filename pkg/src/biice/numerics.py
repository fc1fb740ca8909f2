"""Dense numeric primitives shared by the model, trainer and evaluators.

Matrices are plain ``numpy.ndarray`` objects. Random state is a
``numpy.random.Generator`` backed by PCG64, seeded from a 64-bit integer,
so identical seeds give identical draws on every platform numpy supports.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RNG_ALGORITHM = "PCG64"


class ContractError(ValueError):
    """Raised when an operation is called with inputs that violate its contract."""


class TrainingError(RuntimeError):
    """Raised when optimisation produces non-finite values."""


def make_rng(seed) -> np.random.Generator:
    """Return a PCG64 generator. ``seed`` may be an int or a sequence of ints."""
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1, temperature: float = 1.0) -> np.ndarray:
    """Numerically stable softmax of ``x / temperature`` along ``axis``."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    s = np.asarray(x) / temperature
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_axis(m: np.ndarray, axis: str, temperature: float = 1.0) -> np.ndarray:
    """Softmax of a matrix where each row (``axis="rows"``) or column sums to one."""
    if axis == "rows":
        return softmax(m, axis=1, temperature=temperature)
    if axis == "cols":
        return softmax(m, axis=0, temperature=temperature)
    raise ContractError(f"axis must be 'rows' or 'cols', got {axis!r}")


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``y``."""
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def glorot_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform matrix with bound ``sqrt(6 / (rows + cols))``."""
    if rows < 1 or cols < 1:
        raise ContractError(f"glorot_init needs positive dims, got {rows}x{cols}")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def truncated_normal(shape, std: float, rng: np.random.Generator, clip: float = 2.0) -> np.ndarray:
    """Normal draws with standard deviation ``std``, resampled outside ``clip`` std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > clip * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > clip * std
    return out


@dataclass
class GatedRecurrentCell:
    """GRU cell; weights act on row vectors as ``x @ W``.

    Update convention: ``h' = (1 - z) * h + z * h_tilde`` with the reset gate
    applied to the hidden state before ``U_h``.
    """

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        d = self.b_z.shape[0]
        for name in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (d, d):
                raise ContractError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        for name in ("b_r", "b_h"):
            if getattr(self, name).shape != (d,):
                raise ContractError(f"{name} must have length {d}")

    @property
    def dim(self) -> int:
        return self.b_z.shape[0]

    @classmethod
    def zeros(cls, dim: int) -> "GatedRecurrentCell":
        m = lambda: np.zeros((dim, dim))  # noqa: E731
        v = lambda: np.zeros(dim)  # noqa: E731
        return cls(m(), m(), m(), m(), m(), m(), v(), v(), v())

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "GatedRecurrentCell":
        mats = [glorot_init(dim, dim, rng) for _ in range(6)]
        return cls(*mats, np.zeros(dim), np.zeros(dim), np.zeros(dim))


def gru_gates(cell: GatedRecurrentCell, hidden: np.ndarray, inp: np.ndarray):
    """Return ``(z, r, h_tilde, h_new)``; works on single vectors or stacked rows."""
    z = sigmoid(inp @ cell.W_z + hidden @ cell.U_z + cell.b_z)
    r = sigmoid(inp @ cell.W_r + hidden @ cell.U_r + cell.b_r)
    h_tilde = np.tanh(inp @ cell.W_h + (r * hidden) @ cell.U_h + cell.b_h)
    return z, r, h_tilde, (1.0 - z) * hidden + z * h_tilde


def gru_step(cell: GatedRecurrentCell, hidden: np.ndarray, inp: np.ndarray) -> np.ndarray:
    hidden = np.asarray(hidden, dtype=float)
    inp = np.asarray(inp, dtype=float)
    if hidden.shape[-1] != cell.dim or inp.shape[-1] != cell.dim:
        raise ContractError(
            f"gru_step expects dimension {cell.dim}, got hidden {hidden.shape} and input {inp.shape}"
        )
    return gru_gates(cell, hidden, inp)[3]
