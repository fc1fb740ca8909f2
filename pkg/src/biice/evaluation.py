"""Concept importance, insertion/deletion curves, localization and convergence analyses."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import EmbeddingDataset, save_dataset
from .model import BiIceConfig, BiIceParams, concept_class_weights, forward, split_composition
from .numerics import ContractError, make_rng

ACTIVATION_THRESHOLD = 0.6


@dataclass
class CompositionCache:
    """Per-sample patch-mean composition mass and concept-to-class weights."""

    phi: np.ndarray  # (M, L, K)
    phi_bar: np.ndarray  # (M, K)
    class_weights: np.ndarray  # (M, K, N)
    labels: np.ndarray

    @classmethod
    def build(cls, params: BiIceParams, config: BiIceConfig, dataset: EmbeddingDataset,
              batch_size: int = 256) -> "CompositionCache":
        if len(dataset) == 0:
            raise ContractError("dataset is empty")
        phis, weights = [], []
        for start in range(0, len(dataset), batch_size):
            trace = forward(dataset.z[start:start + batch_size], params, config)
            phis.append(trace.phi)
            weights.append(concept_class_weights(trace.zeta_refined, params.v_omega, params.head))
        phi = np.concatenate(phis)
        return cls(phi, phi.mean(axis=1), np.concatenate(weights), dataset.labels)

    def masked_logits(self, keep) -> np.ndarray:
        mask = keep_mask(keep, self.phi.shape[-1])
        return ((self.phi_bar * mask)[..., None] * self.class_weights).sum(axis=-2)

    def accuracy(self, keep) -> float:
        return float((self.masked_logits(keep).argmax(axis=-1) == self.labels).mean())


def keep_mask(keep, n_concepts: int) -> np.ndarray:
    mask = np.zeros(n_concepts)
    keep = list(keep)
    if any(k < 0 or k >= n_concepts for k in keep):
        raise ContractError(f"concept ids must lie in [0, {n_concepts})")
    mask[keep] = 1.0
    return mask


def masked_logits(z: np.ndarray, params: BiIceParams, config: BiIceConfig, keep) -> np.ndarray:
    """Logits with the composition columns outside ``keep`` zeroed (no renormalisation)."""
    trace = forward(z, params, config)
    mask = keep_mask(keep, config.n_concepts)
    weights = concept_class_weights(trace.zeta_refined, params.v_omega, params.head)
    phi_bar = trace.phi.mean(axis=-2) * mask
    return (phi_bar[..., None] * weights).sum(axis=-2)


# --- importance ------------------------------------------------------------------

@dataclass
class ImportanceReport:
    label: int
    global_scores: list  # mean patch-averaged global composition, length K_global
    samples: list  # per sample: {"index", "phi_spatial", "activated"}

    def to_dict(self) -> dict:
        return asdict(self)


def activated_patches(phi_spatial: np.ndarray, threshold: float = ACTIVATION_THRESHOLD,
                      offset: int = 0) -> list[tuple[int, int, float]]:
    """All ``(patch, concept, score)`` with score above ``threshold``, highest first.

    ``offset`` is added to concept ids, e.g. ``n_global`` to report model-wide ids.
    """
    if not 0 < threshold <= 1:
        raise ContractError("threshold must lie in (0, 1]")
    rows, cols = np.nonzero(phi_spatial > threshold)
    hits = [(int(r), int(c) + offset, float(phi_spatial[r, c])) for r, c in zip(rows, cols)]
    return sorted(hits, key=lambda h: (-h[2], h[0], h[1]))


def concept_importance(params: BiIceParams, config: BiIceConfig, dataset: EmbeddingDataset, label: int,
                       threshold: float = ACTIVATION_THRESHOLD) -> ImportanceReport:
    idx = np.flatnonzero(dataset.labels == label)
    if idx.size == 0:
        raise ContractError(f"class {label} has no samples")
    phi = forward(dataset.z[idx], params, config).phi
    phi_global, phi_spatial = split_composition(phi, config.n_global)
    samples = [
        {"index": int(i), "phi_spatial": ps.tolist(),
         "activated": activated_patches(ps, threshold, config.n_global)}
        for i, ps in zip(idx, phi_spatial)
    ]
    return ImportanceReport(int(label), phi_global.mean(axis=0).tolist(), samples)


def importance_order(params: BiIceParams, config: BiIceConfig, dataset: EmbeddingDataset,
                     cache: CompositionCache | None = None) -> list[int]:
    """Concepts by dataset-mean composition mass, descending; ties by ascending id."""
    cache = cache or CompositionCache.build(params, config, dataset)
    mass = cache.phi_bar.mean(axis=0)
    return [int(k) for k in np.lexsort((np.arange(mass.size), -mass))]


# --- insertion / deletion curves ----------------------------------------------------

@dataclass
class CurveResult:
    grid: np.ndarray
    f: np.ndarray
    auc: float
    std: np.ndarray | None = None

    def rows(self):
        return list(zip(self.grid, self.f)) if self.std is None else list(zip(self.grid, self.f, self.std))


def _auc(grid: np.ndarray, f: np.ndarray) -> float:
    return float(np.sum((grid[1:] - grid[:-1]) * (f[1:] + f[:-1]) / 2.0))


def _check_order(order, n_concepts: int) -> list[int]:
    order = [int(k) for k in order]
    if sorted(order) != list(range(n_concepts)):
        raise ContractError("order must be a permutation of all concept ids")
    return order


def _curve(cache: CompositionCache, order, mode: str) -> CurveResult:
    n_concepts = cache.phi.shape[-1]
    order = _check_order(order, n_concepts)
    full = cache.accuracy(range(n_concepts))
    if full == 0:
        raise ContractError("full-model accuracy is 0; normalised curve is undefined")
    accs = []
    for m in range(n_concepts + 1):
        keep = order[m:] if mode == "deletion" else order[:m]
        accs.append(cache.accuracy(keep))
    f = np.clip(np.array(accs) / full, 0.0, 1.0)
    grid = np.arange(n_concepts + 1) / n_concepts
    return CurveResult(grid, f, _auc(grid, f))


def c_deletion_curve(params: BiIceParams, config: BiIceConfig, dataset: EmbeddingDataset, order,
                     cache: CompositionCache | None = None) -> CurveResult:
    """Normalised accuracy as concepts are removed, most important first."""
    return _curve(cache or CompositionCache.build(params, config, dataset), order, "deletion")


def c_insertion_curve(params: BiIceParams, config: BiIceConfig, dataset: EmbeddingDataset, order,
                      cache: CompositionCache | None = None) -> CurveResult:
    """Normalised accuracy as concepts are added to an empty set, most important first."""
    return _curve(cache or CompositionCache.build(params, config, dataset), order, "insertion")


def random_baseline_curves(params: BiIceParams, config: BiIceConfig, dataset: EmbeddingDataset,
                           mode: str, n_orders: int = 10, seed: int = 0,
                           cache: CompositionCache | None = None) -> CurveResult:
    """Pointwise mean (and std) over ``n_orders`` seeded random concept orders."""
    if n_orders < 1:
        raise ContractError("n_orders must be >= 1")
    if mode not in ("insertion", "deletion"):
        raise ContractError(f"mode must be insertion or deletion, got {mode!r}")
    cache = cache or CompositionCache.build(params, config, dataset)
    rng = make_rng(seed)
    curves = [_curve(cache, rng.permutation(config.n_concepts), mode) for _ in range(n_orders)]
    fs = np.stack([c.f for c in curves])
    grid = curves[0].grid
    mean = fs.mean(axis=0)
    return CurveResult(grid, mean, _auc(grid, mean), fs.std(axis=0))


# --- localization -------------------------------------------------------------------

@dataclass
class LocalizationGrid:
    shape: tuple[int, int]
    concept_ids: list  # rows x cols, model-wide concept ids
    scores: list

    def to_dict(self) -> dict:
        return asdict(self)


def localization_grid(phi_spatial: np.ndarray, n_global: int) -> LocalizationGrid:
    """Per-patch strongest spatial concept, laid out on a square grid when ``L`` is a square."""
    n_patches = phi_spatial.shape[0]
    if phi_spatial.shape[1] == 0:
        raise ContractError("no spatial concepts to localize")
    ids = phi_spatial.argmax(axis=1)
    scores = phi_spatial[np.arange(n_patches), ids]
    side = int(round(np.sqrt(n_patches)))
    shape = (side, side) if side * side == n_patches else (1, n_patches)
    return LocalizationGrid(shape, (ids + n_global).reshape(shape).tolist(), scores.reshape(shape).tolist())


# --- convergence ----------------------------------------------------------------------

def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms > 0, norms, 1.0)


def concept_separation(zeta: np.ndarray) -> float:
    """``1 -`` the largest cosine similarity between two distinct concept vectors."""
    if zeta.shape[0] < 2:
        return 1.0
    cos = _unit_rows(zeta) @ _unit_rows(zeta).T
    np.fill_diagonal(cos, -np.inf)
    return float(1.0 - cos.max())


def convergence_metrics(zetas) -> dict[str, list]:
    """Frobenius drift between consecutive banks and per-bank concept separation.

    ``zetas`` is a sequence of ``K x D`` banks (or objects with a ``zeta`` attribute).
    ``drift[t-1]`` compares bank ``t`` with bank ``t-1``.
    """
    banks = [np.asarray(getattr(z, "zeta", z)) for z in zetas]
    if len(banks) < 2:
        raise ContractError("convergence metrics need at least two snapshots")
    drift = [float(np.linalg.norm(b - a)) for a, b in zip(banks[:-1], banks[1:])]
    return {"drift": drift, "separation": [concept_separation(b) for b in banks]}


def planted_recovery(zeta: np.ndarray, planted: np.ndarray) -> float:
    """Mean cosine of a greedy one-to-one matching of learned to planted concepts, clipped to [0, 1]."""
    if zeta.shape[1] != planted.shape[1]:
        raise ContractError("learned and planted concepts differ in dimension")
    cos = _unit_rows(zeta) @ _unit_rows(planted).T
    matched = []
    work = cos.copy()
    for _ in range(min(cos.shape)):
        i, j = np.unravel_index(np.argmax(work), work.shape)
        matched.append(cos[i, j])
        work[i, :] = -np.inf
        work[:, j] = -np.inf
    return float(np.clip(np.mean(matched), 0.0, 1.0))


# --- export -------------------------------------------------------------------------

def _fmt(x) -> str:
    return f"{float(x):.6g}"


def write_csv(path, header: list[str], rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_curve_csv(path, curve: CurveResult) -> None:
    header = ["fraction", "f"] if curve.std is None else ["fraction", "f_mean", "f_std"]
    write_csv(path, header, curve.rows())


def write_series_csv(path, series: dict[str, list]) -> None:
    """One row per snapshot; ``drift`` is blank for the first one."""
    sep = series["separation"]
    drift = [""] + list(series["drift"])
    write_csv(path, ["snapshot", "drift", "separation"],
              [(i, d, s) for i, (d, s) in enumerate(zip(drift, sep))])


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def write_json(path, obj) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def export_concepts(path, zetas) -> None:
    """Concept banks as a BIEM1 file: one sample per snapshot, one patch per concept, label 0."""
    banks = np.stack([np.asarray(getattr(z, "zeta", z)) for z in zetas])
    save_dataset(path, EmbeddingDataset(banks, np.zeros(len(banks), dtype=np.int64), 1))
