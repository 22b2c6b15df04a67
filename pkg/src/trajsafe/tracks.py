"""Vehicle track data model, file ingestion, and temporal resampling."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

VEHICLE_CLASSES = ("car", "bus", "two-wheeler", "auto-rickshaw", "other")

TRACK_CSV_HEADER = ["vehicle_id", "class", "intersection", "frame", "x_m", "y_m"]
SCALE_COMMENT_PREFIX = "# scale_m_per_px="


class TrackFormatError(ValueError):
    """Raised when a track file cannot be parsed into a valid dataset."""


@dataclass(frozen=True)
class TrackPoint:
    """One observation of a vehicle: time-step index, position (m), velocity (m/step)."""

    t: int
    p: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class VehicleTrack:
    id: str
    vehicle_class: str
    intersection: str
    points: tuple[TrackPoint, ...]

    def times(self) -> np.ndarray:
        return np.array([pt.t for pt in self.points], dtype=int)

    def positions(self) -> np.ndarray:
        return np.stack([pt.p for pt in self.points])

    def velocities(self) -> np.ndarray:
        return np.stack([pt.v for pt in self.points])

    def speeds(self) -> np.ndarray:
        return np.linalg.norm(self.velocities(), axis=1)


@dataclass(frozen=True)
class TrackDataset:
    tracks: tuple[VehicleTrack, ...]
    sample_rate: float = 3.0

    @property
    def by_id(self) -> dict[str, VehicleTrack]:
        return {tr.id: tr for tr in self.tracks}

    def __len__(self) -> int:
        return len(self.tracks)


def _velocities(times: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Backward finite difference per step; the first step copies the second."""
    v = np.zeros_like(positions)
    gaps = np.diff(times).astype(float)
    v[1:] = (positions[1:] - positions[:-1]) / gaps[:, None]
    v[0] = v[1]
    return v


def _make_track(vehicle_id: str, vclass: str, intersection: str,
                raw_points: list[tuple[int, float, float]]) -> VehicleTrack:
    raw_points.sort(key=lambda r: r[0])
    times = np.array([r[0] for r in raw_points], dtype=int)
    positions = np.array([[r[1], r[2]] for r in raw_points], dtype=float)
    vel = _velocities(times, positions)
    points = tuple(
        TrackPoint(t=int(t), p=positions[i].copy(), v=vel[i].copy())
        for i, t in enumerate(times)
    )
    return VehicleTrack(id=vehicle_id, vehicle_class=vclass,
                        intersection=intersection, points=points)


def _assemble(rows: list[tuple[str, str, str, int, float, float]],
              sample_rate: float) -> TrackDataset:
    """Group parsed rows by vehicle id into tracks, dropping <2-point tracks."""
    if not rows:
        raise TrackFormatError("empty dataset: no track rows found")
    grouped: dict[str, dict] = {}
    for vid, vclass, inter, frame, x, y in rows:
        g = grouped.setdefault(vid, {"class": vclass, "intersection": inter,
                                     "points": [], "frames": set()})
        if g["class"] != vclass:
            raise TrackFormatError(f"vehicle {vid!r}: inconsistent class "
                                   f"({g['class']!r} vs {vclass!r})")
        if g["intersection"] != inter:
            raise TrackFormatError(f"vehicle {vid!r}: inconsistent intersection tag "
                                   f"({g['intersection']!r} vs {inter!r})")
        if frame in g["frames"]:
            raise TrackFormatError(f"vehicle {vid!r}: duplicate frame {frame}")
        g["frames"].add(frame)
        g["points"].append((frame, x, y))
    tracks = []
    for vid in sorted(grouped):
        g = grouped[vid]
        if len(g["points"]) < 2:
            log.warning("dropping track %r: fewer than 2 points", vid)
            continue
        tracks.append(_make_track(vid, g["class"], g["intersection"], g["points"]))
    if not tracks:
        raise TrackFormatError("empty dataset: no track has 2 or more points")
    return TrackDataset(tracks=tuple(tracks), sample_rate=sample_rate)


def _parse_csv(path: Path) -> list[tuple[str, str, str, int, float, float]]:
    scale = 1.0
    rows = []
    with path.open(newline="") as fh:
        lines = list(csv.reader(fh))
    start = 0
    if lines and lines[0] and lines[0][0].startswith("#"):
        comment = ",".join(lines[0]).strip()
        if not comment.startswith(SCALE_COMMENT_PREFIX):
            raise TrackFormatError(f"line 1: unrecognized comment {comment!r}")
        try:
            scale = float(comment[len(SCALE_COMMENT_PREFIX):])
        except ValueError as exc:
            raise TrackFormatError(f"line 1: bad scale value in {comment!r}") from exc
        start = 1
    if start >= len(lines) or [c.strip() for c in lines[start]] != TRACK_CSV_HEADER:
        raise TrackFormatError(
            f"line {start + 1}: expected header {','.join(TRACK_CSV_HEADER)}")
    for lineno, rec in enumerate(lines[start + 1:], start=start + 2):
        if not rec or rec == [""]:
            continue
        if len(rec) != 6:
            raise TrackFormatError(f"line {lineno}: expected 6 fields, got {len(rec)}")
        vid, vclass, inter, frame_s, x_s, y_s = [c.strip() for c in rec]
        if vclass not in VEHICLE_CLASSES:
            raise TrackFormatError(f"line {lineno}: unknown vehicle class {vclass!r}")
        try:
            frame = int(frame_s)
            x, y = float(x_s), float(y_s)
        except ValueError as exc:
            raise TrackFormatError(f"line {lineno}: malformed numeric field") from exc
        rows.append((vid, vclass, inter, frame, x * scale, y * scale))
    return rows


def _parse_json(path: Path) -> list[tuple[str, str, str, int, float, float]]:
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TrackFormatError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise TrackFormatError("expected a top-level JSON array of tracks")
    rows = []
    for idx, obj in enumerate(data):
        try:
            vid = str(obj["id"])
            vclass = str(obj["class"])
            inter = str(obj["intersection"])
            pts = obj["points"]
        except (KeyError, TypeError) as exc:
            raise TrackFormatError(f"track #{idx}: missing field {exc}") from exc
        if vclass not in VEHICLE_CLASSES:
            raise TrackFormatError(f"track #{idx}: unknown vehicle class {vclass!r}")
        for pt in pts:
            try:
                rows.append((vid, vclass, inter, int(pt["frame"]),
                             float(pt["x"]), float(pt["y"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise TrackFormatError(f"track #{idx} ({vid!r}): bad point") from exc
    return rows


def ingest_tracks(path: str | Path, fmt: str = "csv",
                  sample_rate: float = 3.0) -> TrackDataset:
    """Read a track file (csv or json) into a TrackDataset with derived velocities."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"track file not found: {path}")
    if fmt == "csv":
        rows = _parse_csv(path)
    elif fmt == "json":
        rows = _parse_json(path)
    else:
        raise ValueError(f"unknown format {fmt!r}: expected 'csv' or 'json'")
    return _assemble(rows, sample_rate)


def write_tracks_csv(ds: TrackDataset, path: str | Path) -> None:
    """Emit the canonical CSV track format (positions already in meters)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACK_CSV_HEADER)
        for tr in ds.tracks:
            for pt in tr.points:
                w.writerow([tr.id, tr.vehicle_class, tr.intersection,
                            pt.t, repr(float(pt.p[0])), repr(float(pt.p[1]))])


def resample(raw: TrackDataset, source_fps: float, target_rate: float) -> TrackDataset:
    """Decimate to target_rate by nearest-frame selection on a shared frame grid.

    Frames nearest to multiples of source_fps/target_rate (anchored at the
    dataset's first frame) are retained, so co-presence across tracks is
    preserved. t is reindexed to the grid position; velocities are recomputed
    at the new spacing.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate > source_fps:
        raise ValueError("target_rate must not exceed source_fps")
    stride = source_fps / target_rate
    all_frames = np.concatenate([tr.times() for tr in raw.tracks])
    f0, f1 = int(all_frames.min()), int(all_frames.max())
    n_grid = int(np.floor((f1 - f0) / stride)) + 1
    grid_frames = f0 + np.rint(np.arange(n_grid) * stride).astype(int)
    frame_to_slot = {int(f): m for m, f in enumerate(grid_frames)}

    tracks = []
    for tr in raw.tracks:
        kept = [(frame_to_slot[pt.t], pt) for pt in tr.points if pt.t in frame_to_slot]
        if len(kept) < 2:
            log.warning("dropping track %r after resampling: fewer than 2 points", tr.id)
            continue
        times = np.array([m for m, _ in kept], dtype=int)
        positions = np.stack([pt.p for _, pt in kept])
        vel = _velocities(times, positions)
        points = tuple(TrackPoint(t=int(times[i]), p=positions[i].copy(), v=vel[i].copy())
                       for i in range(len(kept)))
        tracks.append(VehicleTrack(id=tr.id, vehicle_class=tr.vehicle_class,
                                   intersection=tr.intersection, points=points))
    if not tracks:
        raise TrackFormatError("resampling dropped every track")
    return TrackDataset(tracks=tuple(tracks), sample_rate=target_rate)
