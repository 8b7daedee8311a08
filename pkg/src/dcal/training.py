"""Optimisation loop, schedules, optimisers and evaluation metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, Split
from .model import BRANCHES, DcalConfig, DcalParams, forward_batch, infer_batch, init_params, total_loss

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainHyper:
    optimizer: str = "adam"
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    momentum: float = 0.9
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    samples_per_id: int = 4  # retrieval batches: images per identity
    eval_every: int = 1  # epochs between test-split evaluations; 0 disables


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    losses: dict[str, float]
    loss_weights: tuple[float, float, float]
    train_acc: float
    test_acc: float

    COLUMNS = (
        "epoch", "lr", "loss_sa", "loss_glca", "loss_pwca",
        "w_sa", "w_glca", "w_pwca", "train_acc", "test_acc",
    )

    def as_row(self) -> list[float]:
        return [
            self.epoch,
            self.lr,
            *(self.losses.get(b, math.nan) for b in BRANCHES),
            *self.loss_weights,
            self.train_acc,
            self.test_acc,
        ]

    @classmethod
    def from_row(cls, row) -> "EpochMetrics":
        row = [float(v) for v in row]
        losses = {b: v for b, v in zip(BRANCHES, row[2:5]) if not math.isnan(v)}
        return cls(int(row[0]), row[1], losses, tuple(row[5:8]), row[8], row[9])


@dataclass
class TrainState:
    params: DcalParams
    opt_state: dict[str, np.ndarray]  # "m.<name>", "v.<name>" / "buf.<name>"
    opt_step: int = 0
    epoch: int = 0  # completed epochs
    seed: int = 0
    history: list[EpochMetrics] = field(default_factory=list)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """0.5 * base_lr * (1 + cos(pi * step / total_steps))."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only (not biases, norms,
    class/position embeddings or loss weights)."""
    if name in ("embed.cls", "embed.pos", "loss_weights"):
        return False
    return not (name.endswith(("gamma", "beta", ".bias")) or name.split(".")[-1].startswith("b"))


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.weight_decay, self.betas, self.eps = weight_decay, betas, eps

    def step(self, named: dict[str, T.Tensor], state: dict, t: int, lr: float) -> None:
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for name, p in named.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m = state.setdefault(f"m.{name}", np.zeros_like(p.data))
            v = state.setdefault(f"v.{name}", np.zeros_like(p.data))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and decays(name):
                p.data *= p.dtype.type(1.0 - lr * self.weight_decay)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    """SGD with momentum and L2 weight decay folded into the gradient."""

    def __init__(self, weight_decay: float, momentum: float):
        self.weight_decay, self.momentum = weight_decay, momentum

    def step(self, named: dict[str, T.Tensor], state: dict, t: int, lr: float) -> None:
        for name, p in named.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=True)
            if self.weight_decay and decays(name):
                g += p.dtype.type(self.weight_decay) * p.data
            buf = state.get(f"buf.{name}")
            if buf is None:
                buf = state[f"buf.{name}"] = g.copy()
            else:
                buf *= self.momentum
                buf += g
            p.data -= (lr * buf).astype(p.dtype)


def make_optimizer(hyper: TrainHyper):
    if hyper.optimizer == "adam":
        return Adam(hyper.weight_decay)
    if hyper.optimizer == "sgd":
        return SGD(hyper.weight_decay, hyper.momentum)
    raise ValueError(f"unknown optimizer {hyper.optimizer!r}; expected one of {OPTIMIZERS}")


def epoch_batches(labels: np.ndarray, cfg: DcalConfig, hyper: TrainHyper, rng) -> list[np.ndarray]:
    """Shuffled index batches. Retrieval batches are built from groups of
    ``samples_per_id`` images of one identity; a trailing batch smaller than
    2 is dropped."""
    n = len(labels)
    if cfg.task == "retrieval":
        groups = []
        for c in np.unique(labels):
            idx = rng.permutation(np.flatnonzero(labels == c))
            k = hyper.samples_per_id
            groups += [idx[i : i + k] for i in range(0, len(idx) - k + 1, k)]
        order = rng.permutation(len(groups))
        per_batch = max(1, hyper.batch_size // hyper.samples_per_id)
        batches = [
            np.concatenate([groups[g] for g in order[i : i + per_batch]])
            for i in range(0, len(order), per_batch)
        ]
    else:
        perm = rng.permutation(n)
        batches = [perm[i : i + hyper.batch_size] for i in range(0, n, hyper.batch_size)]
    return [b for b in batches if len(b) >= 2]


def _check_inputs(dataset: Dataset, cfg: DcalConfig, hyper: TrainHyper) -> None:
    n = len(dataset.train)
    if n == 0:
        raise ValueError("training split is empty")
    if hyper.batch_size < 2:
        raise ValueError("batch_size must be >= 2 (pairs are formed within a batch)")
    if hyper.batch_size > n:
        raise ValueError(f"batch_size {hyper.batch_size} exceeds the {n} training images")
    if cfg.task == "retrieval":
        if len(np.unique(dataset.train.labels)) < 2:
            raise ValueError("retrieval training needs at least two identities for the triplet loss")
        if hyper.samples_per_id < 2 or hyper.batch_size % hyper.samples_per_id:
            raise ValueError("retrieval batches need batch_size divisible by samples_per_id >= 2")
    make_optimizer(hyper)


def steps_per_epoch(dataset: Dataset, cfg: DcalConfig, hyper: TrainHyper) -> int:
    # batch composition varies per epoch for retrieval, its count does not
    return len(epoch_batches(dataset.train.labels, cfg, hyper, np.random.default_rng(0)))


def new_state(cfg: DcalConfig, hyper: TrainHyper) -> TrainState:
    return TrainState(params=init_params(cfg, hyper.seed), opt_state={}, seed=hyper.seed)


def train(
    dataset: Dataset,
    cfg: DcalConfig,
    hyper: TrainHyper,
    state: TrainState | None = None,
    until_epoch: int | None = None,
    on_epoch=None,
) -> TrainState:
    """Train (or resume) up to ``until_epoch`` (default ``hyper.epochs``).

    Each epoch draws from a generator seeded by (seed, epoch), so a resumed
    run replays exactly the trajectory of an uninterrupted one.
    """
    cfg.validate()
    _check_inputs(dataset, cfg, hyper)
    state = state or new_state(cfg, hyper)
    optimizer = make_optimizer(hyper)
    named = state.params.named()
    per_epoch = steps_per_epoch(dataset, cfg, hyper)
    total_steps = hyper.epochs * per_epoch
    stop = hyper.epochs if until_epoch is None else min(until_epoch, hyper.epochs)
    images, labels = dataset.train.images, dataset.train.labels

    while state.epoch < stop:
        rng = np.random.default_rng([state.seed, state.epoch])
        sums = {b: 0.0 for b in BRANCHES}
        correct = seen = 0
        epoch_lr = None
        for idx in epoch_batches(labels, cfg, hyper, rng):
            lr = cosine_lr(min(state.opt_step, total_steps), total_steps, hyper.base_lr)
            epoch_lr = lr if epoch_lr is None else epoch_lr
            partner = np.roll(np.arange(len(idx)), -1)
            out = forward_batch(images[idx], cfg, state.params, partner=partner, rng=rng, training=True)
            loss, parts = total_loss(out, labels[idx], cfg, state.params)
            state.params.zero_grad()
            T.backward(loss)
            state.opt_step += 1
            optimizer.step(named, state.opt_state, state.opt_step, lr)
            for k, v in parts.items():
                sums[k] += v.item() * len(idx)
            probs = T.row_softmax(out.logits_sa).data
            if out.logits_glca is not None:
                probs = probs + T.row_softmax(out.logits_glca).data
            correct += int((probs.argmax(-1) == labels[idx]).sum())
            seen += len(idx)
        state.epoch += 1
        test_acc = math.nan
        last = state.epoch == hyper.epochs
        if len(dataset.test) and hyper.eval_every and (state.epoch % hyper.eval_every == 0 or last):
            test_acc = evaluate_classification(dataset.test, state.params, cfg, default_mode(cfg))
        metrics = EpochMetrics(
            epoch=state.epoch,
            lr=epoch_lr,
            losses={k: v / seen for k, v in sums.items() if k in parts},
            loss_weights=tuple(float(w) for w in state.params.loss_weights.data),
            train_acc=correct / seen,
            test_acc=test_acc,
        )
        state.history.append(metrics)
        log.info(
            "epoch %d lr %.2e loss %s train_acc %.3f test_acc %.3f",
            metrics.epoch, metrics.lr,
            " ".join(f"{k}={v:.4f}" for k, v in metrics.losses.items()),
            metrics.train_acc, metrics.test_acc,
        )
        if on_epoch is not None:
            on_epoch(state, metrics)
    return state


def default_mode(cfg: DcalConfig) -> str:
    return "sa+glca" if cfg.glca_blocks else "sa"


def predict_labels(split: Split, params: DcalParams, cfg: DcalConfig, mode: str, batch: int = 64):
    out = [infer_batch(split.images[i : i + batch], cfg, params, mode).label for i in range(0, len(split), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_classification(split: Split, params: DcalParams, cfg: DcalConfig, mode: str = "sa+glca") -> float:
    """Top-1 accuracy under the given inference mode."""
    if len(split) == 0:
        return math.nan
    return float(np.mean(predict_labels(split, params, cfg, mode) == split.labels))


def extract_features(split: Split, params: DcalParams, cfg: DcalConfig, mode: str, batch: int = 64):
    feats = []
    for i in range(0, len(split), batch):
        pred = infer_batch(split.images[i : i + batch], cfg, params, mode)
        feats.append(pred.feature)
    return np.concatenate(feats)


@dataclass
class RetrievalResult:
    map: float
    rank1: float
    skipped: int  # queries with no true match in the gallery


def retrieval_metrics(
    query_feats: np.ndarray,
    query_labels: np.ndarray,
    gallery_feats: np.ndarray,
    gallery_labels: np.ndarray,
    same_set: bool = False,
) -> RetrievalResult:
    """mAP and rank-1 under Euclidean ranking (ties keep gallery order).

    With ``same_set`` the query's own gallery entry (same index) is removed.
    """
    query_labels, gallery_labels = np.asarray(query_labels), np.asarray(gallery_labels)
    dist = np.sqrt(
        np.maximum(((query_feats[:, None, :] - gallery_feats[None, :, :]) ** 2).sum(-1), 0.0)
    )
    aps, hits, skipped = [], [], 0
    for q in range(len(query_labels)):
        keep = np.ones(len(gallery_labels), dtype=bool)
        if same_set:
            keep[q] = False
        order = np.flatnonzero(keep)[np.argsort(dist[q][keep], kind="stable")]
        match = gallery_labels[order] == query_labels[q]
        if not match.any():
            skipped += 1
            continue
        ranks = np.flatnonzero(match) + 1
        aps.append(float(np.mean(np.arange(1, len(ranks) + 1) / ranks)))
        hits.append(bool(match[0]))
    if not aps:
        return RetrievalResult(math.nan, math.nan, skipped)
    return RetrievalResult(float(np.mean(aps)), float(np.mean(hits)), skipped)


def evaluate_retrieval(
    query: Split, gallery: Split, params: DcalParams, cfg: DcalConfig, mode: str = "sa+glca"
) -> RetrievalResult:
    q = extract_features(query, params, cfg, mode)
    g = q if gallery is query else extract_features(gallery, params, cfg, mode)
    return retrieval_metrics(q, query.labels, g, gallery.labels, same_set=gallery is query)
