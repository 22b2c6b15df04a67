"""kNN retrieval of unsafe trajectories in embedding space, metrics, ablations."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .interaction import InteractionTrajectory, apply_scaler, build_interactions, fit_scaler
from .recurrent import EncoderModel, build_architecture, encode
from .siamese import DEFAULT_SPLIT_SEEDS, TrainConfig, split_dataset, train
from .tracks import TrackDataset

log = logging.getLogger(__name__)

DEFAULT_KNN_K = 5


@dataclass(frozen=True)
class Metrics:
    """Unsafe-class retrieval counts and the derived recall/precision/F1."""

    tp: int
    fp: int
    fn: int

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class RetrievalReport:
    arch: str
    k_neighbors: int
    knn_k: int
    split: str
    overall: Metrics
    per_intersection: dict[str, Metrics]


@dataclass(frozen=True)
class Prediction:
    vehicle_id: str
    intersection: str
    true: str
    pred: str
    dist_to_1nn: float


def knn_classify(train_embeddings: np.ndarray, train_labels: list[str],
                 query: np.ndarray, knn_k: int) -> str:
    """Majority label of the knn_k nearest training embeddings (Euclidean)."""
    if len(train_embeddings) == 0:
        raise ValueError("training set must be non-empty")
    if knn_k < 1 or knn_k % 2 == 0:
        raise ValueError("knn_k must be a positive odd integer")
    if knn_k > len(train_embeddings):
        raise ValueError(f"knn_k={knn_k} exceeds training size {len(train_embeddings)}")
    dists = np.linalg.norm(train_embeddings - query, axis=1)
    nearest = np.argsort(dists, kind="stable")[:knn_k]
    votes: dict[str, int] = {}
    for i in nearest:
        votes[train_labels[i]] = votes.get(train_labels[i], 0) + 1
    return max(sorted(votes), key=lambda l: votes[l])


def embed_all(model: EncoderModel, trajs: list[InteractionTrajectory]) -> np.ndarray:
    return np.stack([encode(model, tr, mode="infer").context for tr in trajs])


def _metrics(preds: list[Prediction]) -> Metrics:
    tp = sum(1 for p in preds if p.pred == "unsafe" and p.true == "unsafe")
    fp = sum(1 for p in preds if p.pred == "unsafe" and p.true != "unsafe")
    fn = sum(1 for p in preds if p.pred != "unsafe" and p.true == "unsafe")
    return Metrics(tp=tp, fp=fp, fn=fn)


def evaluate(model: EncoderModel, train_set: list[InteractionTrajectory],
             test_set: list[InteractionTrajectory], knn_k: int = DEFAULT_KNN_K,
             arch: str = "", k_neighbors: int = 0,
             split: str = "0") -> tuple[RetrievalReport, list[Prediction]]:
    """Embed, classify every test trajectory, and score the unsafe class."""
    train_emb = embed_all(model, train_set)
    train_labels = [tr.label for tr in train_set]
    preds = []
    for tr in test_set:
        q = encode(model, tr, mode="infer").context
        label = knn_classify(train_emb, train_labels, q, knn_k)
        d1 = float(np.min(np.linalg.norm(train_emb - q, axis=1)))
        preds.append(Prediction(vehicle_id=tr.vehicle_id, intersection=tr.intersection,
                                true=tr.label, pred=label, dist_to_1nn=d1))
    per_inter = {}
    for tag in sorted({p.intersection for p in preds}):
        per_inter[tag] = _metrics([p for p in preds if p.intersection == tag])
    report = RetrievalReport(arch=arch, k_neighbors=k_neighbors, knn_k=knn_k,
                             split=str(split), overall=_metrics(preds),
                             per_intersection=per_inter)
    return report, preds


@dataclass(frozen=True)
class MeanMetrics:
    recall: float
    precision: float
    f1: float


@dataclass
class AblationRow:
    arch: str
    k_neighbors: int
    knn_k: int
    split: str          # split seed, or "mean" for the split average
    scope: str          # "overall" or an intersection tag
    recall: float
    precision: float
    f1: float


def _rows_from_report(report: RetrievalReport) -> list[AblationRow]:
    rows = [AblationRow(report.arch, report.k_neighbors, report.knn_k, report.split,
                        "overall", report.overall.recall, report.overall.precision,
                        report.overall.f1)]
    for tag, m in report.per_intersection.items():
        rows.append(AblationRow(report.arch, report.k_neighbors, report.knn_k,
                                report.split, tag, m.recall, m.precision, m.f1))
    return rows


def ablate(ds: TrackDataset, labels: dict[str, str], architectures: list[str],
           neighbor_counts: list[int], split_seeds: tuple[int, ...] = DEFAULT_SPLIT_SEEDS,
           train_cfg: TrainConfig | None = None, knn_k: int = DEFAULT_KNN_K,
           model_seed: int = 0) -> list[AblationRow]:
    """Full grid of (architecture x neighbor count x split), plus split means.

    Interaction features are rebuilt per neighbor count; the scaler is fitted
    on each split's training portion only.
    """
    base_cfg = train_cfg or TrainConfig()
    rows: list[AblationRow] = []
    for k in neighbor_counts:
        trajs = build_interactions(ds, k)
        for tr in trajs:
            tr.label = labels.get(tr.vehicle_id, "unlabeled")
        trajs = [tr for tr in trajs if tr.label != "unlabeled"]
        for arch in architectures:
            split_reports = []
            for seed in split_seeds:
                train_set, test_set, val_set = split_dataset(trajs, base_cfg, seed)
                scaler = fit_scaler(train_set)
                train_s = [apply_scaler(scaler, t) for t in train_set]
                test_s = [apply_scaler(scaler, t) for t in test_set]
                val_s = [apply_scaler(scaler, t) for t in val_set]
                model = build_architecture(arch, input_dim=2 * k + 1, seed=model_seed)
                model, _ = train(model, train_s, val_s, base_cfg)
                report, _ = evaluate(model, train_s, test_s, knn_k=knn_k, arch=arch,
                                     k_neighbors=k, split=str(seed))
                split_reports.append(report)
                rows.extend(_rows_from_report(report))
            scopes = sorted({s for r in split_reports
                             for s in ["overall", *r.per_intersection]})
            for scope in scopes:
                picks = [(r.overall if scope == "overall"
                          else r.per_intersection.get(scope)) for r in split_reports]
                picks = [m for m in picks if m is not None]
                rows.append(AblationRow(
                    arch, k, knn_k, "mean", scope,
                    float(np.mean([m.recall for m in picks])),
                    float(np.mean([m.precision for m in picks])),
                    float(np.mean([m.f1 for m in picks]))))
    return rows


REPORT_CSV_HEADER = ["arch", "k_neighbors", "knn_k", "split", "scope",
                     "recall", "precision", "f1"]


def write_report_csv(rows: list[AblationRow] | list[RetrievalReport],
                     path: str | Path) -> None:
    flat: list[AblationRow] = []
    for item in rows:
        if isinstance(item, RetrievalReport):
            flat.extend(_rows_from_report(item))
        else:
            flat.append(item)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_CSV_HEADER)
        for r in flat:
            w.writerow([r.arch, r.k_neighbors, r.knn_k, r.split, r.scope,
                        f"{r.recall:.6f}", f"{r.precision:.6f}", f"{r.f1:.6f}"])


def write_preds_csv(preds: list[Prediction], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "true", "pred", "dist_to_1nn"])
        for p in sorted(preds, key=lambda x: x.vehicle_id):
            w.writerow([p.vehicle_id, p.true, p.pred, repr(p.dist_to_1nn)])
