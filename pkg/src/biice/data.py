"""BIEM1 embedding / BIAN1 annotation files and the planted-concept generator.

Both formats start with a single JSON header line terminated by ``\\n``,
followed by a raw little-endian payload:

* BIEM1: ``M*L*D`` float32 values (sample-major, then patch-major), then
  ``M`` uint32 labels.
* BIAN1: per sample, ``K_global`` bytes then ``L*K_spatial`` bytes, each 0 or 1.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import ContractError, make_rng
from .objectives import AnnotationSet

EMBED_MAGIC = "BIEM1"
ANNOT_MAGIC = "BIAN1"


class FormatError(ValueError):
    """A file does not conform to its binary format."""


@dataclass
class EmbeddingDataset:
    z: np.ndarray  # (M, L, D)
    labels: np.ndarray  # (M,)
    n_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.z.ndim != 3 or self.labels.shape != (self.z.shape[0],):
            raise ContractError("z must be (M, L, D) and labels (M,)")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def n_patches(self) -> int:
        return self.z.shape[1]

    @property
    def dim(self) -> int:
        return self.z.shape[2]

    def subset(self, idx) -> "EmbeddingDataset":
        return EmbeddingDataset(self.z[idx], self.labels[idx], self.n_classes)


def _header(blob: bytes, path, magic: str) -> tuple[dict, int]:
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header terminator (byte {len(blob)})")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"{path}: header is not valid JSON (bytes 0..{nl})") from exc
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise FormatError(f"{path}: bad magic at byte 0, expected {magic!r}")
    return header, nl + 1


def _dims(header: dict, path, keys) -> list[int]:
    out = []
    for key in keys:
        v = header.get(key)
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise FormatError(f"{path}: header field {key!r} must be a nonnegative integer")
        out.append(v)
    return out


def save_dataset(path, dataset: EmbeddingDataset) -> None:
    m, n_patches, dim = dataset.z.shape
    header = {"magic": EMBED_MAGIC, "M": m, "L": n_patches, "D": dim,
              "N": dataset.n_classes, "dtype": "f32le"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(np.ascontiguousarray(dataset.z, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())


def load_dataset(path, dtype=np.float64) -> EmbeddingDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, offset = _header(blob, path, EMBED_MAGIC)
    m, n_patches, dim, n_classes = _dims(header, path, ("M", "L", "D", "N"))
    if header.get("dtype") != "f32le":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    n_payload = 4 * m * n_patches * dim
    if len(blob) < offset + n_payload:
        raise FormatError(f"{path}: truncated payload at byte {len(blob)}, expected {offset + n_payload}")
    end = offset + n_payload + 4 * m
    if len(blob) < end:
        raise FormatError(f"{path}: truncated labels at byte {len(blob)}, expected {end}")
    if len(blob) > end:
        raise FormatError(f"{path}: {len(blob) - end} trailing bytes at byte {end}")
    z = np.frombuffer(blob, dtype="<f4", count=m * n_patches * dim, offset=offset)
    labels = np.frombuffer(blob, dtype="<u4", count=m, offset=offset + n_payload)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise FormatError(
            f"{path}: label {int(labels[bad[0]])} >= N={n_classes} at byte {offset + n_payload + 4 * int(bad[0])}"
        )
    return EmbeddingDataset(z.reshape(m, n_patches, dim).astype(dtype), labels.astype(np.int64), n_classes)


def save_annotations(path, ann: AnnotationSet) -> None:
    m, n_patches, k_spatial = ann.q_spatial.shape
    header = {"magic": ANNOT_MAGIC, "M": m, "L": n_patches,
              "K_global": ann.q_global.shape[1], "K_spatial": k_spatial}
    payload = np.concatenate([ann.q_global.reshape(m, -1), ann.q_spatial.reshape(m, -1)], axis=1)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(payload.astype(np.uint8).tobytes())


def load_annotations(path) -> AnnotationSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, offset = _header(blob, path, ANNOT_MAGIC)
    m, n_patches, kg, ks = _dims(header, path, ("M", "L", "K_global", "K_spatial"))
    row = kg + n_patches * ks
    end = offset + m * row
    if len(blob) < end:
        raise FormatError(f"{path}: truncated payload at byte {len(blob)}, expected {end}")
    if len(blob) > end:
        raise FormatError(f"{path}: {len(blob) - end} trailing bytes at byte {end}")
    payload = np.frombuffer(blob, dtype=np.uint8, count=m * row, offset=offset)
    bad = np.flatnonzero(payload > 1)
    if bad.size:
        raise FormatError(f"{path}: non-binary annotation byte at {offset + int(bad[0])}")
    payload = payload.reshape(m, row)
    return AnnotationSet(payload[:, :kg].copy(), payload[:, kg:].reshape(m, n_patches, ks).copy())


def check_pairing(dataset: EmbeddingDataset, ann: AnnotationSet, n_global: int, n_spatial: int) -> None:
    if len(ann) != len(dataset) or ann.q_spatial.shape[1] != dataset.n_patches:
        raise ContractError("annotation file does not match the embedding file (M or L differ)")
    if ann.q_global.shape[1] != n_global or ann.q_spatial.shape[2] != n_spatial:
        raise ContractError(
            f"annotations have K_global={ann.q_global.shape[1]}, K_spatial={ann.q_spatial.shape[2]}; "
            f"model expects {n_global}/{n_spatial}"
        )


# --- synthetic planted-concept data ----------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 4
    n_planted: int = 8
    dim: int = 16
    n_patches: int = 9
    n_samples: int = 512
    noise: float = 0.1
    concepts_per_class: int = 2
    n_global: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_planted < self.n_classes:
            raise ContractError("n_planted must be at least n_classes")
        if self.noise < 0:
            raise ContractError("noise must be nonnegative")
        if min(self.n_classes, self.dim, self.n_patches, self.n_samples, self.concepts_per_class) < 1:
            raise ContractError("synthetic sizes must be positive")
        if not 0 <= self.n_global <= self.n_planted:
            raise ContractError("n_global must lie in [0, n_planted]")

    def to_dict(self) -> dict:
        return asdict(self)


def class_concepts(n_classes: int, n_planted: int, per_class: int) -> list[list[int]]:
    """Round-robin concept subsets: class ``y`` owns ``y*per_class ... +per_class-1`` mod K."""
    if per_class > n_planted:
        raise ContractError("concepts_per_class exceeds the number of planted concepts")
    subsets = [sorted({(y * per_class + j) % n_planted for j in range(per_class)})
               for y in range(n_classes)]
    if len({tuple(s) for s in subsets}) < n_classes or any(len(s) < per_class for s in subsets):
        raise ContractError("infeasible class/concept assignment: subsets are not distinct")
    return subsets


def planted_basis(n_planted: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Gram-Schmidt on Gaussian rows; rows beyond ``dim`` are only normalised."""
    raw = rng.normal(size=(n_planted, dim))
    basis = np.zeros_like(raw)
    for i, row in enumerate(raw):
        v = row.copy()
        for j in range(min(i, dim)):
            v -= (v @ basis[j]) * basis[j]
        norm = np.linalg.norm(v)
        basis[i] = v / norm if norm > 1e-12 else row / np.linalg.norm(row)
    return basis


def generate_synthetic(cfg: SynthConfig):
    """Return ``(dataset, annotations, planted)`` for a planted-concept problem.

    Each patch of a class-``y`` sample is one of the class's concepts plus
    Gaussian noise. Concepts ``< n_global`` are annotated image-level
    (presence in the class subset); the rest are annotated per patch.
    """
    rng = make_rng(cfg.seed)
    subsets = class_concepts(cfg.n_classes, cfg.n_planted, cfg.concepts_per_class)
    planted = planted_basis(cfg.n_planted, cfg.dim, rng)
    labels = np.arange(cfg.n_samples) % cfg.n_classes
    labels = labels[rng.permutation(cfg.n_samples)]
    choice = rng.integers(0, cfg.concepts_per_class, size=(cfg.n_samples, cfg.n_patches))
    table = np.array(subsets)
    chosen = table[labels[:, None], choice]  # (M, L) planted concept id per patch
    z = planted[chosen] + cfg.noise * rng.normal(size=(cfg.n_samples, cfg.n_patches, cfg.dim))

    present = np.zeros((cfg.n_samples, cfg.n_planted), dtype=np.uint8)
    present[np.arange(cfg.n_samples)[:, None], table[labels]] = 1
    onehot = np.eye(cfg.n_planted, dtype=np.uint8)[chosen]
    ann = AnnotationSet(present[:, :cfg.n_global], onehot[:, :, cfg.n_global:])
    return EmbeddingDataset(z, labels, cfg.n_classes), ann, planted
