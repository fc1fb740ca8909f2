"""AdamW with linear-warmup cosine schedule, the epoch loop and gradient checking."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np

from .data import EmbeddingDataset
from .grad import batch_loss, loss_and_grad
from .model import BiIceConfig, BiIceParams, forward
from .numerics import ContractError, TrainingError, make_rng
from .objectives import AnnotationSet, LossWeights

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
VAL_FRACTION = 0.1

# independent PCG64 streams derived from the run seed
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_VAL_SPLIT = 3


def decays(name: str) -> bool:
    """Weight decay applies to projections, recurrent weights and the head only."""
    return name != "zeta" and not name.startswith("cell.b_")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    warmup_iters: int = 10
    base_lr: float = 1e-4
    weight_decay: float = 1e-3
    lambda_expl: float = 1.0
    lambda_sparse: float = 0.0
    seed: int = 0
    snapshot_every: int = 1
    dtype: str = "float64"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.warmup_iters < 0:
            raise ContractError("warmup_iters must be >= 0")
        if min(self.base_lr, self.weight_decay, self.lambda_expl, self.lambda_sparse) < 0:
            raise ContractError("rates and loss weights must be nonnegative")
        if self.snapshot_every < 1:
            raise ContractError("snapshot_every must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ContractError("dtype must be float64 or float32")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_expl, self.lambda_sparse)

    def to_dict(self) -> dict:
        return asdict(self)


def iters_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)


def lr_at(it: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup from ``base_lr / warmup`` to ``base_lr``, then cosine decay to 0 at ``total - 1``."""
    if it < 0:
        raise ContractError("iteration must be nonnegative")
    if total <= warmup:
        raise ContractError(f"degenerate schedule: total iterations {total} <= warmup {warmup}")
    if it < warmup:
        return base_lr * (it + 1) / warmup
    span = total - 1 - warmup
    if span <= 0:
        return 0.0
    progress = min(it - warmup, span) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict[str, np.ndarray]) -> "AdamWState":
        return cls({k: np.zeros_like(t) for k, t in tensors.items()},
                   {k: np.zeros_like(t) for k, t in tensors.items()})

    def copy(self) -> "AdamWState":
        return AdamWState({k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()}, self.step)


def adamw_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, weight_decay: float, decay_filter: Callable[[str], bool] = decays) -> None:
    """In-place AdamW update: decoupled decay first, then the bias-corrected Adam step."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    state.step += 1
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    for name, theta in tensors.items():
        g = grads[name]
        if weight_decay and decay_filter(name):
            theta -= lr * weight_decay * theta
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


@dataclass
class EpochSnapshot:
    epoch: int
    zeta: np.ndarray
    metrics: dict


@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly from an epoch boundary."""

    params: BiIceParams
    opt: AdamWState
    epoch: int = 0
    iteration: int = 0


class FitResult(NamedTuple):
    params: BiIceParams
    snapshots: list
    state: TrainState


def _annotation_blocks(ann: AnnotationSet | None, idx, dtype):
    if ann is None:
        return None, None
    return ann.q_global[idx].astype(dtype), ann.q_spatial[idx].astype(dtype)


def train_epoch(dataset: EmbeddingDataset, state: TrainState, config: BiIceConfig, cfg: TrainConfig,
                rng: np.random.Generator, total_iters: int, ann: AnnotationSet | None = None) -> dict:
    """One shuffled pass of minibatch AdamW; returns mean loss and accuracy over the pass."""
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    weights = cfg.weights
    tensors = state.params.named_tensors()
    dtype = state.params.zeta.dtype
    order = rng.permutation(len(dataset))
    loss_sum = 0.0
    correct = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        qg, qs = _annotation_blocks(ann if weights.lambda_expl > 0 else None, idx, dtype)
        losses, grads = loss_and_grad(state.params, config, dataset.z[idx].astype(dtype),
                                      dataset.labels[idx], weights, qg, qs)
        lr = lr_at(state.iteration, cfg.base_lr, cfg.warmup_iters, total_iters)
        adamw_step(tensors, grads, state.opt, lr, cfg.weight_decay)
        state.iteration += 1
        loss_sum += losses.total * len(idx)
        correct += losses.correct
    state.epoch += 1
    return {"train_loss": loss_sum / len(dataset), "train_acc": correct / len(dataset)}


def accuracy(params: BiIceParams, config: BiIceConfig, dataset: EmbeddingDataset,
             batch_size: int = 256) -> float:
    if len(dataset) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        logits = forward(dataset.z[sl].astype(params.zeta.dtype), params, config).logits
        correct += int((logits.argmax(axis=-1) == dataset.labels[sl]).sum())
    return correct / len(dataset)


def split_validation(dataset: EmbeddingDataset, ann: AnnotationSet | None, seed: int):
    """Hold out ``VAL_FRACTION`` of samples by a seeded shuffle."""
    perm = make_rng([seed, STREAM_VAL_SPLIT]).permutation(len(dataset))
    n_val = int(round(VAL_FRACTION * len(dataset)))
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    train_ann = ann.subset(train_idx) if ann is not None else None
    return dataset.subset(train_idx), train_ann, dataset.subset(val_idx)


def init_state(config: BiIceConfig, cfg: TrainConfig) -> TrainState:
    params = BiIceParams.init(config, make_rng([cfg.seed, STREAM_INIT]))
    if cfg.dtype == "float32":
        params = params.astype(np.float32)
    return TrainState(params, AdamWState.zeros_like(params.named_tensors()))


def fit(dataset: EmbeddingDataset, val: EmbeddingDataset | None, config: BiIceConfig, cfg: TrainConfig,
        ann: AnnotationSet | None = None, state: TrainState | None = None,
        log: Callable[[dict], None] | None = None, until: int | None = None) -> FitResult:
    """Train for ``cfg.epochs`` epochs (counting any already done in ``state``).

    When ``val`` is None a seeded 10% hold-out is carved from ``dataset``.
    Epoch ``e`` shuffles with a generator seeded by ``(seed, STREAM_SHUFFLE, e)``, so resuming
    from a saved state replays the same batches. ``until`` stops early at that
    epoch count (the schedule still spans ``cfg.epochs``), for checkpointing.
    """
    if cfg.lambda_expl > 0 and ann is None:
        raise ContractError("lambda_expl > 0 requires concept annotations; set lambda_expl=0 to train without")
    if dataset.dim != config.dim or dataset.n_patches != config.n_patches:
        raise ContractError(
            f"dataset is L={dataset.n_patches}, D={dataset.dim}; model expects "
            f"L={config.n_patches}, D={config.dim}"
        )
    if dataset.n_classes != config.n_classes:
        raise ContractError(f"dataset has {dataset.n_classes} classes, model expects {config.n_classes}")
    if val is None:
        dataset, ann, val = split_validation(dataset, ann, cfg.seed)
    if state is None:
        state = init_state(config, cfg)
    state.params.check(config)
    total = cfg.epochs * iters_per_epoch(len(dataset), cfg.batch_size)
    snapshots = []
    stop = cfg.epochs if until is None else min(until, cfg.epochs)
    while state.epoch < stop:
        rng = make_rng([cfg.seed, STREAM_SHUFFLE, state.epoch])
        metrics = train_epoch(dataset, state, config, cfg, rng, total, ann)
        metrics["val_acc"] = accuracy(state.params, config, val)
        metrics["epoch"] = state.epoch
        if log is not None:
            log(metrics)
        if state.epoch % cfg.snapshot_every == 0 or state.epoch == cfg.epochs:
            snapshots.append(EpochSnapshot(state.epoch, state.params.zeta.copy(), metrics))
    return FitResult(state.params, snapshots, state)


# --- gradient checking ---------------------------------------------------------

def gradient_check(params: BiIceParams, config: BiIceConfig, z, labels, weights: LossWeights,
                   q_global=None, q_spatial=None, eps: float = 1e-5, entries_per_tensor: int = 20,
                   seed: int = 0, grads: dict | None = None) -> dict[str, float]:
    """Max relative error per tensor between analytic and central-difference gradients.

    Relative error is ``|analytic - fd| / max(1, |fd|)`` over up to
    ``entries_per_tensor`` sampled entries (all entries for small tensors).
    ``grads`` may be supplied to test the harness itself.
    """
    z = np.asarray(z, dtype=np.float64)
    params = params.astype(np.float64)
    if grads is None:
        _, grads = loss_and_grad(params, config, z, labels, weights, q_global, q_spatial)
    rng = make_rng(seed)
    report = {}
    for name, theta in params.named_tensors().items():
        flat = theta.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= entries_per_tensor else rng.choice(n, entries_per_tensor, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            up = batch_loss(params, config, z, labels, weights, q_global, q_spatial)[0].total
            flat[i] = orig - eps
            down = batch_loss(params, config, z, labels, weights, q_global, q_spatial)[0].total
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            err = abs(grads[name].reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
        report[name] = worst
    return report
