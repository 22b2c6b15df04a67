"""Per-vehicle interaction trajectories: k nearest neighbor distances and speeds."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tracks import TrackDataset

log = logging.getLogger(__name__)

PAD_DISTANCE = 100.0  # sentinel for missing neighbors (meters)
STD_FLOOR = 1e-8

LABELS = ("unsafe", "safe", "unlabeled")


@dataclass(frozen=True)
class InteractionFeature:
    """One time-step: distances to the k nearest co-present vehicles plus speeds.

    The flattened vector layout is [d_1..d_k, v_self, v_1..v_k], nearest first.
    """

    t: int
    neighbor_ids: tuple
    d: tuple
    v_self: float
    v_nbr: tuple

    def vector(self) -> np.ndarray:
        return np.array([*self.d, self.v_self, *self.v_nbr], dtype=float)


@dataclass
class InteractionTrajectory:
    vehicle_id: str
    intersection: str
    features: list[InteractionFeature]
    label: str = "unlabeled"
    _matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def k(self) -> int:
        return len(self.features[0].d)

    def __len__(self) -> int:
        return len(self.features)

    def matrix(self) -> np.ndarray:
        """(N, 2k+1) feature matrix, cached."""
        if self._matrix is None:
            self._matrix = np.stack([f.vector() for f in self.features])
        return self._matrix


def build_interactions(ds: TrackDataset, k: int) -> list[InteractionTrajectory]:
    """One trajectory per track; at each step the k nearest co-present vehicles.

    Slots are re-sorted by distance every step (ties broken by vehicle id);
    missing neighbors are padded with distance PAD_DISTANCE and speed 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    # index co-present vehicles per time-step
    per_step: dict[int, list] = {}
    for tr in ds.tracks:
        speeds = tr.speeds()
        for i, pt in enumerate(tr.points):
            per_step.setdefault(pt.t, []).append((tr.id, pt.p, float(speeds[i])))

    step_cache: dict[int, tuple] = {}
    for t, entries in per_step.items():
        entries.sort(key=lambda e: e[0])
        ids = [e[0] for e in entries]
        pos = np.stack([e[1] for e in entries])
        spd = np.array([e[2] for e in entries])
        step_cache[t] = (ids, pos, spd, {vid: j for j, vid in enumerate(ids)})

    out = []
    for tr in ds.tracks:
        feats = []
        own_speeds = tr.speeds()
        for i, pt in enumerate(tr.points):
            ids, pos, spd, index = step_cache[pt.t]
            me = index[tr.id]
            dists = np.linalg.norm(pos - pos[me], axis=1)
            order = [j for j in np.lexsort((np.arange(len(ids)), dists)) if j != me]
            slots = [(float(dists[j]), ids[j], float(spd[j])) for j in order[:k]]
            while len(slots) < k:
                slots.append((PAD_DISTANCE, None, 0.0))
            slots.sort(key=lambda s: (s[0], s[1] is None, s[1] or ""))
            feats.append(InteractionFeature(
                t=pt.t,
                neighbor_ids=tuple(s[1] for s in slots),
                d=tuple(s[0] for s in slots),
                v_self=float(own_speeds[i]),
                v_nbr=tuple(s[2] for s in slots),
            ))
        out.append(InteractionTrajectory(vehicle_id=tr.id,
                                         intersection=tr.intersection,
                                         features=feats))
    return out


@dataclass(frozen=True)
class FeatureScaler:
    """Per-dimension z-normalization fitted on training trajectories."""

    mean: np.ndarray
    std: np.ndarray

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        return (matrix - self.mean) / self.std

    def inverse(self, matrix: np.ndarray) -> np.ndarray:
        return matrix * self.std + self.mean


def fit_scaler(train: list[InteractionTrajectory]) -> FeatureScaler:
    if not train:
        raise ValueError("cannot fit scaler on an empty trajectory list")
    stacked = np.concatenate([tr.matrix() for tr in train], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    constant = std < STD_FLOOR
    if constant.any():
        log.warning("scaler: %d constant feature dimension(s), std clamped to %g",
                    int(constant.sum()), STD_FLOOR)
        std = np.where(constant, STD_FLOOR, std)
    return FeatureScaler(mean=mean, std=std)


def apply_scaler(sc: FeatureScaler, traj: InteractionTrajectory) -> InteractionTrajectory:
    """Return a z-normalized copy. Applying a scaler twice is NOT the identity."""
    k = traj.k
    scaled = sc.transform(traj.matrix())
    feats = []
    for f, row in zip(traj.features, scaled):
        feats.append(InteractionFeature(
            t=f.t, neighbor_ids=f.neighbor_ids,
            d=tuple(float(x) for x in row[:k]),
            v_self=float(row[k]),
            v_nbr=tuple(float(x) for x in row[k + 1:]),
        ))
    return InteractionTrajectory(vehicle_id=traj.vehicle_id,
                                 intersection=traj.intersection,
                                 features=feats, label=traj.label)


def dump_interactions(trajs: list[InteractionTrajectory], path: str | Path) -> None:
    """One JSON record per trajectory, one per line."""
    path = Path(path)
    with path.open("w") as fh:
        for tr in trajs:
            rec = {
                "vehicle_id": tr.vehicle_id,
                "intersection": tr.intersection,
                "n_steps": len(tr),
                "k": tr.k,
                "label": tr.label,
                "t": [f.t for f in tr.features],
                "features": [list(f.vector()) for f in tr.features],
            }
            fh.write(json.dumps(rec) + "\n")


def load_interactions(path: str | Path) -> list[InteractionTrajectory]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            k = rec["k"]
            feats = []
            for t, row in zip(rec["t"], rec["features"]):
                if len(row) != 2 * k + 1:
                    raise ValueError(f"{path}: feature row length {len(row)} != 2k+1")
                feats.append(InteractionFeature(
                    t=t, neighbor_ids=(None,) * k,
                    d=tuple(row[:k]), v_self=row[k], v_nbr=tuple(row[k + 1:])))
            out.append(InteractionTrajectory(
                vehicle_id=rec["vehicle_id"], intersection=rec["intersection"],
                features=feats, label=rec.get("label", "unlabeled")))
    return out
