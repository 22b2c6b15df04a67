"""Triplet-loss metric learning over trajectory embeddings."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .interaction import InteractionTrajectory
from .recurrent import EncoderModel, backward, encode

log = logging.getLogger(__name__)

DEFAULT_SPLIT_SEEDS = (17, 53, 101)  # the three built-in split repetitions


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


@dataclass
class TrainConfig:
    margin: float = 1.0
    epochs: int = 200
    batch_triplets: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"        # "adam" | "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    split_ratios: tuple[float, float, float] = (0.70, 0.20, 0.10)
    seed: int = 0
    k_neighbors: int = 8
    semi_hard: bool = False
    triplets_per_epoch: int | None = None  # None: one per training trajectory

    def __post_init__(self):
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def triplet_loss(c_i: np.ndarray, c_j: np.ndarray, c_k: np.ndarray,
                 m: float = 1.0) -> float:
    """Hinge on squared distances: max(|ci-cj|^2 - |ci-ck|^2 + m, 0)."""
    if not (c_i.shape == c_j.shape == c_k.shape):
        raise ValueError("context vectors must share one dimension")
    d_pos = float(np.sum((c_i - c_j) ** 2))
    d_neg = float(np.sum((c_i - c_k) ** 2))
    return max(d_pos - d_neg + m, 0.0)


def triplet_grads(c_i: np.ndarray, c_j: np.ndarray, c_k: np.ndarray,
                  m: float = 1.0) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Loss and its gradients w.r.t. the three context vectors."""
    loss = triplet_loss(c_i, c_j, c_k, m)
    if loss <= 0.0:
        zero = np.zeros_like(c_i)
        return loss, zero, zero.copy(), zero.copy()
    d_i = 2.0 * (c_k - c_j)
    d_j = -2.0 * (c_i - c_j)
    d_k = 2.0 * (c_i - c_k)
    return loss, d_i, d_j, d_k


def _apportion(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Largest-remainder split of n items into len(ratios) parts."""
    exact = [n * r for r in ratios]
    base = [int(np.floor(e)) for e in exact]
    rem = n - sum(base)
    order = np.argsort([base[i] - exact[i] for i in range(len(ratios))])
    for i in order[:rem]:
        base[i] += 1
    return base


def split_dataset(trajs: list[InteractionTrajectory], cfg: TrainConfig,
                  seed: int) -> tuple[list, list, list]:
    """Label-stratified, seed-reproducible (train, test, validation) split."""
    rng = np.random.default_rng(seed)
    by_label: dict[str, list[int]] = {}
    for idx, tr in enumerate(trajs):
        by_label.setdefault(tr.label, []).append(idx)
    parts: tuple[list, list, list] = ([], [], [])
    for label in sorted(by_label):
        idxs = np.array(by_label[label])
        rng.shuffle(idxs)
        counts = _apportion(len(idxs), cfg.split_ratios)
        pos = 0
        for part, cnt in zip(parts, counts):
            part.extend(int(i) for i in idxs[pos:pos + cnt])
            pos += cnt
    return tuple([trajs[i] for i in sorted(p)] for p in parts)


def sample_triplets(labels: list[str], n: int, rng: np.random.Generator,
                    semi_hard: bool = False,
                    embeddings: np.ndarray | None = None,
                    margin: float = 1.0) -> list[Triplet]:
    """Uniform random triplets; optionally pick semi-hard negatives by distance."""
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("cannot form triplets: a label class is absent")
    idx_by_class = {c: [i for i, l in enumerate(labels) if l == c] for c in classes}
    for c, members in idx_by_class.items():
        if len(members) < 2:
            raise ValueError(f"cannot form triplets: class {c!r} has <2 members")
    out = []
    for _ in range(n):
        cls = classes[rng.integers(len(classes))]
        other = [c for c in classes if c != cls]
        neg_cls = other[rng.integers(len(other))]
        a, p = rng.choice(idx_by_class[cls], size=2, replace=False)
        negatives = idx_by_class[neg_cls]
        if semi_hard and embeddings is not None:
            d_pos = np.sum((embeddings[a] - embeddings[p]) ** 2)
            d_negs = np.sum((embeddings[negatives] - embeddings[a]) ** 2, axis=1)
            valid = [i for i, d in zip(negatives, d_negs) if d > d_pos]
            k = (min(valid, key=lambda i: np.sum((embeddings[i] - embeddings[a]) ** 2))
                 if valid else negatives[int(np.argmin(d_negs))])
        else:
            k = negatives[rng.integers(len(negatives))]
        out.append(Triplet(int(a), int(p), int(k)))
    return out


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.lr = cfg.learning_rate
        self.b1, self.b2, self.eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            m_hat = self.m[k] / (1 - self.b1 ** self.t)
            v_hat = self.v[k] / (1 - self.b2 ** self.t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class _SGD:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.lr = cfg.learning_rate

    def step(self, params, grads):
        for k in params:
            params[k] -= self.lr * grads[k]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    saved: bool


def _mean_val_loss(model: EncoderModel, trajs, triplets, margin: float) -> float:
    ctx = [encode(model, tr, mode="infer").context for tr in trajs]
    losses = [triplet_loss(ctx[t.anchor], ctx[t.positive], ctx[t.negative], margin)
              for t in triplets]
    return float(np.mean(losses))


def train(model: EncoderModel, train_set: list[InteractionTrajectory],
          val_set: list[InteractionTrajectory],
          cfg: TrainConfig) -> tuple[EncoderModel, list[EpochRecord]]:
    """Triplet-loss training with best-validation checkpointing.

    Per epoch: sample triplets, encode in train mode, backpropagate the hinge
    gradients, and apply one optimizer step per batch. The parameters of the
    best validation epoch are restored into the returned model.
    """
    train_labels = [tr.label for tr in train_set]
    val_labels = [tr.label for tr in val_set]
    if len(set(train_labels)) < 2 or len(set(val_labels)) < 2:
        raise ValueError("cannot form triplets: a label class is absent")
    rng = np.random.default_rng([cfg.seed, 0x7261])
    dropout_rng = np.random.default_rng([cfg.seed, 0x6d6b])
    val_triplets = sample_triplets(val_labels, len(val_set),
                                   np.random.default_rng([cfg.seed, 0x76a1]))
    opt = (_Adam if cfg.optimizer == "adam" else _SGD)(model.params, cfg)
    n_triplets = cfg.triplets_per_epoch or len(train_set)

    history: list[EpochRecord] = []
    best_val = np.inf
    best_params = model.copy_params()
    for epoch in range(1, cfg.epochs + 1):
        embeddings = None
        if cfg.semi_hard:
            embeddings = np.stack([encode(model, tr, mode="infer").context
                                   for tr in train_set])
        triplets = sample_triplets(train_labels, n_triplets, rng,
                                   semi_hard=cfg.semi_hard, embeddings=embeddings,
                                   margin=cfg.margin)
        epoch_losses = []
        for start in range(0, len(triplets), cfg.batch_triplets):
            batch = triplets[start:start + cfg.batch_triplets]
            grads = {k: np.zeros_like(v) for k, v in model.params.items()}
            for trip in batch:
                res_a = encode(model, train_set[trip.anchor], "train", dropout_rng)
                res_p = encode(model, train_set[trip.positive], "train", dropout_rng)
                res_n = encode(model, train_set[trip.negative], "train", dropout_rng)
                loss, d_a, d_p, d_n = triplet_grads(res_a.context, res_p.context,
                                                    res_n.context, cfg.margin)
                epoch_losses.append(loss)
                if loss > 0.0:
                    for res, d in ((res_a, d_a), (res_p, d_p), (res_n, d_n)):
                        g = backward(model, res.cache, d)
                        for k in grads:
                            grads[k] += g[k]
            scale = 1.0 / len(batch)
            for k in grads:
                grads[k] *= scale
            opt.step(model.params, grads)
        val_loss = _mean_val_loss(model, val_set, val_triplets, cfg.margin)
        saved = val_loss < best_val
        if saved:
            best_val = val_loss
            best_params = model.copy_params()
        history.append(EpochRecord(epoch=epoch, train_loss=float(np.mean(epoch_losses)),
                                   val_loss=val_loss, saved=saved))
        log.debug("epoch %d: train %.4f val %.4f%s", epoch, history[-1].train_loss,
                  val_loss, " *" if saved else "")
    model.load_params(best_params)
    return model, history


def write_history_csv(history: list[EpochRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "saved"])
        for rec in history:
            w.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss),
                        int(rec.saved)])
