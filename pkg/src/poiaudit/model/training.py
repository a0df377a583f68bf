"""Mini-batch training and top-k evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..data import TRAIN, VALID, MobilityDataset, Trajectory
from . import _backend
from .network import PoiModel, SequenceBatch

log = logging.getLogger(__name__)

# per-example gradients (B, P) -> update direction (P,)
StepHook = Callable[[np.ndarray], np.ndarray]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 200
    optimizer: str = "adam"  # "adam" | "sgd-momentum"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    early_stop_patience: int | None = None
    seed: int = 0
    snapshot_epochs: tuple[int, ...] = ()
    evaluate: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snapshot_epochs"] = list(self.snapshot_epochs)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_top1: float
    val_top10: float


@dataclass
class TrainResult:
    model: PoiModel
    history: list[EpochRecord]
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    stopped_early: bool = False

    def log_rows(self) -> list[str]:
        rows = ["epoch,train_loss,val_top1,val_top10"]
        rows += [f"{r.epoch},{r.train_loss!r},{r.val_top1!r},{r.val_top10!r}" for r in self.history]
        return rows


class Adam:
    def __init__(self, n, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, w, g):
        self.t += 1
        _backend.adam_step(w, np.ascontiguousarray(g), self.m, self.v, self.lr, self.b1, self.b2,
                           self.eps, self.t)


class SgdMomentum:
    def __init__(self, n, lr, momentum):
        self.lr, self.mu = lr, momentum
        self.buf = np.zeros(n)

    def step(self, w, g):
        self.buf *= self.mu
        self.buf += g
        w -= self.lr * self.buf


def make_optimizer(cfg: TrainConfig, n: int):
    if cfg.optimizer == "adam":
        return Adam(n, cfg.lr)
    return SgdMomentum(n, cfg.lr, cfg.momentum)


def prefix_examples(trajs: Sequence[Trajectory], ignore_target: int | None = None) -> list[tuple]:
    """All ``(user, prefix_locs, prefix_times, next_loc)`` examples of trajectories."""
    out = []
    for t in trajs:
        for i in range(1, len(t.locations)):
            if t.locations[i] != ignore_target:
                out.append((t.user_id, t.locations[:i], t.times[:i], t.locations[i]))
    return out


def _batches(items, batch_size, rng):
    order = rng.permutation(len(items))
    for s in range(0, len(items), batch_size):
        yield [items[i] for i in order[s:s + batch_size]]


def train(model: PoiModel, ds: MobilityDataset | Sequence[Trajectory], cfg: TrainConfig | None = None,
          step_hook: StepHook | None = None, valid: Sequence[Trajectory] | None = None) -> TrainResult:
    """Train ``model`` in place on the TRAIN trajectories of ``ds``.

    Without a hook, each batch packs ``batch_size`` trajectories and the loss is
    the mean over all of their prefix examples.  With a hook, batches hold
    ``batch_size`` prefix examples, the hook receives their per-example
    gradients and returns the update direction (the DP-SGD insertion point).
    """
    cfg = cfg or TrainConfig()
    if isinstance(ds, MobilityDataset):
        train_trajs = ds.split(TRAIN)
        if valid is None:
            valid = ds.split(VALID)
    else:
        train_trajs = list(ds)
    valid = list(valid or [])
    if not train_trajs:
        raise TrainingError("no TRAIN trajectories")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg, model.n_params)
    mask_id = model.mask_id
    examples = prefix_examples(train_trajs, mask_id)
    if not examples:
        raise TrainingError("no training examples (every target is masked)")
    units = examples if step_hook is not None else list(train_trajs)
    history: list[EpochRecord] = []
    snapshots: dict[int, np.ndarray] = {}
    best = (-np.inf, None)
    since_best = 0
    stopped = False

    for epoch in range(1, cfg.epochs + 1):
        losses, weights = [], []
        for chunk in _batches(units, cfg.batch_size, rng):
            if step_hook is None:
                batch = SequenceBatch.from_trajectories(chunk, mask_id)
                n_pos = int((batch.targets >= 0).sum())
                if n_pos == 0:
                    continue  # every target in the batch is masked
                loss, grad = model.loss_and_grad(batch)
            else:
                batch = SequenceBatch.from_examples(chunk)
                loss, per_ex = model.loss_and_grad(batch, per_example=True)
                if not np.all(np.isfinite(per_ex)):
                    raise TrainingError(f"non-finite per-example gradient at epoch {epoch}")
                grad = step_hook(per_ex)
                n_pos = len(chunk)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch} (batch of {len(chunk)})")
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * model.flat
            opt.step(model.flat, grad)
            if not np.all(np.isfinite(model.flat)):
                raise TrainingError(f"parameters became non-finite at epoch {epoch}")
            losses.append(loss * n_pos)
            weights.append(n_pos)
        model.epoch += 1
        train_loss = float(sum(losses) / sum(weights)) if weights else float("nan")
        if cfg.evaluate and valid:
            acc = evaluate_topk(model, valid, (1, 10))
            rec = EpochRecord(epoch, train_loss, acc[1], acc[10])
        else:
            rec = EpochRecord(epoch, train_loss, float("nan"), float("nan"))
        history.append(rec)
        log.debug("epoch %d loss %.4f top1 %.4f top10 %.4f", epoch, rec.train_loss, rec.val_top1, rec.val_top10)
        if epoch in cfg.snapshot_epochs:
            snapshots[epoch] = model.flat.copy()

        if cfg.early_stop_patience is not None and valid:
            if rec.val_top10 > best[0]:
                best = (rec.val_top10, model.flat.copy())
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.early_stop_patience:
                    model.flat[...] = best[1]
                    stopped = True
                    break
    return TrainResult(model, history, snapshots, stopped)


def evaluate_topk(model: PoiModel, trajs: Sequence[Trajectory], ks: Sequence[int] = (1, 5, 10),
                  chunk: int = 256) -> dict[int, float]:
    """Top-k accuracy over every (prefix, next location) pair; ties go to the lower index."""
    if not trajs:
        raise ValueError("empty split")
    hits = {k: 0 for k in ks}
    total = 0
    for s in range(0, len(trajs), chunk):
        part = trajs[s:s + chunk]
        batch = SequenceBatch.from_trajectories(part)
        logits = model.prefix_logits(batch.users, batch.locs, batch.times, batch.lengths)
        bi, ti = np.nonzero(batch.targets >= 0)
        ranks = target_ranks(logits[bi, ti], batch.targets[bi, ti])
        for k in ks:
            hits[k] += int((ranks < k).sum())
        total += len(bi)
    return {k: hits[k] / total for k in ks}


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """0-based rank of each target under descending score, ties to the lower index."""
    tgt = scores[np.arange(len(targets)), targets][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > tgt) | ((scores == tgt) & (idx < targets[:, None]))
    return ahead.sum(axis=1)


def popularity_topk(trajs_train: Sequence[Trajectory], trajs_eval: Sequence[Trajectory], n_locations: int,
                    ks: Sequence[int] = (1, 10)) -> dict[int, float]:
    """Accuracy of always predicting the globally most frequent training POIs."""
    counts = np.zeros(n_locations)
    for t in trajs_train:
        np.add.at(counts, list(t.locations), 1)
    order = np.argsort(-counts, kind="stable")
    rank = np.empty(n_locations, dtype=np.int64)
    rank[order] = np.arange(n_locations)
    targets = np.array([l for t in trajs_eval for l in t.locations[1:]])
    return {k: float((rank[targets] < k).mean()) for k in ks}
