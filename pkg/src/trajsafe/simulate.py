"""Synthetic lane-less intersection traffic with calm and aggressive agents.

Agents traverse from an entry arm to an exit arm under goal attraction plus
pairwise repulsion scaled by a per-agent preferred distance. Calm agents
yield early to crossing traffic; aggressive agents keep a small preferred
distance, brake late, and drive faster, producing near-misses around the
intersection core.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tracks import TrackDataset, TrackPoint, VehicleTrack

ARM_CHOICES = (3, 4, 7)

# m/step at 3 steps/s; two-wheelers are the fastest in mixed traffic
CLASS_SPEED_CAP = {
    "two-wheeler": 4.0,
    "car": 3.3,
    "other": 3.0,
    "auto-rickshaw": 2.7,
    "bus": 2.0,
}

SPAWN_RADIUS = 42.0
EXIT_RADIUS = 46.0
SCENE_HALF = 70.0       # bounding box half-width
STOP_LINE = 18.0        # signal hold distance from center
GREEN_STEPS = 30

CALM_PREFERRED = (5.0, 8.0)        # preferred-distance draw range (m)
AGGRESSIVE_PREFERRED = (1.0, 2.0)
CALM_REPULSION = 0.6
AGGRESSIVE_REPULSION = 0.04
CALM_BRAKE = 0.22                  # speed multiplier while yielding
AGGRESSIVE_BRAKE = 0.92
AGGRESSIVE_SPEED_MULT = 1.25
GOAL_GAIN = 0.35
EMERGENCY_CREEP = 0.08             # calm agents crawl when boxed in
SPAWN_CLEARANCE = 9.0              # delay entry while the spawn point is occupied
CORE_RADIUS = 16.0                 # conflict area around the intersection center
CALM_PATIENCE = 60                 # steps a calm agent waits for an empty core
AGGRESSIVE_PATIENCE = 10           # aggressive drivers dart into small gaps
AGGRESSIVE_GAP_TOLERANCE = 2       # they enter unless the core holds >= this many
CALM_LANE_OFFSET = (3.5, 5.5)      # keep-right shift of the straight route (m)
AGGRESSIVE_LANE_OFFSET = (0.0, 1.5)
SPAWN_WINDOW_FRAC = 0.1            # arrivals bunched early so queues form


@dataclass(frozen=True)
class ScenarioConfig:
    n_arms: int = 4
    signalized: bool = False
    class_counts: dict = field(default_factory=lambda: {"car": 10, "two-wheeler": 20,
                                                        "auto-rickshaw": 8, "bus": 2})
    fraction_aggressive: float = 0.5
    duration: int = 300
    seed: int = 0
    intersection: str = ""   # default tag derived from geometry
    id_prefix: str = "v"

    def __post_init__(self):
        if self.n_arms not in ARM_CHOICES:
            raise ValueError(f"n_arms must be one of {ARM_CHOICES}")
        if not 0.0 <= self.fraction_aggressive <= 1.0:
            raise ValueError("fraction_aggressive must be in [0, 1]")
        if any(c < 0 for c in self.class_counts.values()):
            raise ValueError("class counts must be >= 0")
        unknown = set(self.class_counts) - set(CLASS_SPEED_CAP)
        if unknown:
            raise ValueError(f"unknown vehicle classes {sorted(unknown)}")

    @property
    def tag(self) -> str:
        if self.intersection:
            return self.intersection
        return f"arms{self.n_arms}{'s' if self.signalized else 'n'}"


@dataclass
class _Agent:
    vid: str
    vclass: str
    aggressive: bool
    spawn_step: int
    pos: np.ndarray
    vel: np.ndarray
    goal: np.ndarray
    arm: int
    preferred: float
    repulsion: float
    max_speed: float
    brake: float
    held: int = 0
    done: bool = False
    history: list = field(default_factory=list)  # (step, x, y)


def _arm_angle(arm: int, n_arms: int) -> float:
    return 2.0 * math.pi * arm / n_arms


def _green(arm: int, step: int, n_arms: int) -> bool:
    """Round-robin signal phases; opposite arms share a phase on 4-arm scenes."""
    groups = 2 if n_arms == 4 else n_arms
    phase = (step // GREEN_STEPS) % groups
    return (arm % groups) == phase


def generate(cfg: ScenarioConfig) -> tuple[TrackDataset, dict[str, bool]]:
    """Run the scenario; returns the track dataset and per-vehicle aggressiveness."""
    n_agents = sum(cfg.class_counts.values())
    if n_agents == 0:
        raise ValueError("scenario has zero agents")
    rng = np.random.default_rng(cfg.seed)

    roster = [c for c, n in sorted(cfg.class_counts.items()) for _ in range(n)]
    rng.shuffle(roster)
    n_aggressive = int(round(cfg.fraction_aggressive * n_agents))
    flags = np.array([True] * n_aggressive + [False] * (n_agents - n_aggressive))
    rng.shuffle(flags)

    width = len(str(max(n_agents - 1, 1)))
    agents = []
    for i, (vclass, aggressive) in enumerate(zip(roster, flags)):
        arm = int(rng.integers(cfg.n_arms))
        dest = int((arm + 1 + rng.integers(cfg.n_arms - 1)) % cfg.n_arms)
        ang_in, ang_out = _arm_angle(arm, cfg.n_arms), _arm_angle(dest, cfg.n_arms)
        lateral = rng.uniform(-3.0, 3.0)
        normal = np.array([-math.sin(ang_in), math.cos(ang_in)])
        pos = SPAWN_RADIUS * np.array([math.cos(ang_in), math.sin(ang_in)]) + lateral * normal
        goal = EXIT_RADIUS * np.array([math.cos(ang_out), math.sin(ang_out)])
        cap = CLASS_SPEED_CAP[vclass] * (AGGRESSIVE_SPEED_MULT if aggressive else 1.0)
        if aggressive:
            preferred = rng.uniform(*AGGRESSIVE_PREFERRED)
            repulsion, brake = AGGRESSIVE_REPULSION, AGGRESSIVE_BRAKE
            lane = rng.uniform(*AGGRESSIVE_LANE_OFFSET)
        else:
            preferred = rng.uniform(*CALM_PREFERRED)
            repulsion, brake = CALM_REPULSION, CALM_BRAKE
            lane = rng.uniform(*CALM_LANE_OFFSET)
        direction = goal - pos
        direction = direction / np.linalg.norm(direction)
        # keep-right convention: shift the whole route to the right of travel
        right = np.array([direction[1], -direction[0]])
        goal = goal + lane * right
        pos = pos + lane * right
        agents.append(_Agent(
            vid=f"{cfg.id_prefix}{i:0{width}d}", vclass=vclass, aggressive=aggressive,
            spawn_step=int(rng.uniform(0, SPAWN_WINDOW_FRAC * cfg.duration)),
            pos=pos, vel=0.5 * cap * direction, goal=goal, arm=arm,
            preferred=preferred, repulsion=repulsion, max_speed=cap, brake=brake))

    for step in range(cfg.duration):
        active = [a for a in agents if a.spawn_step <= step and not a.done]
        # hold late spawners outside until their entry point is clear
        waiting = [a for a in agents if a.spawn_step > step and not a.done]
        for w in waiting:
            if w.spawn_step == step + 1 and any(
                    np.linalg.norm(w.pos - b.pos) < SPAWN_CLEARANCE for b in active):
                w.spawn_step += 1
        for a in active:
            a.history.append((step, float(a.pos[0]), float(a.pos[1])))
        if not active:
            continue
        positions = np.stack([a.pos for a in active])
        goal_dists = np.array([np.linalg.norm(a.goal - a.pos) for a in active])
        new_vel = []
        for i, a in enumerate(active):
            to_goal = a.goal - a.pos
            dist_goal = goal_dists[i]
            desired = a.max_speed * to_goal / max(dist_goal, 1e-9)
            vel = a.vel + GOAL_GAIN * (desired - a.vel)
            speed_now = float(np.linalg.norm(vel))
            # stopped vehicles look where they intend to go, not where they drift
            heading = (vel / speed_now if speed_now > 0.3
                       else to_goal / max(dist_goal, 1e-9))

            diffs = a.pos - positions
            dists = np.linalg.norm(diffs, axis=1)
            force = np.zeros(2)
            speed_scale = 1.0
            for j, b in enumerate(active):
                if b is a or dists[j] < 1e-9:
                    continue
                force += (a.repulsion * math.exp(-dists[j] / a.preferred)
                          * diffs[j] / dists[j])
                ahead = float(np.dot(-diffs[j] / dists[j], heading)) > 0.3
                if a.aggressive:
                    # tailgate: close to a fraction of the (tiny) preferred gap
                    if ahead and dists[j] < 0.9 * a.preferred:
                        speed_scale = min(speed_scale, 0.5)
                    if ahead and dists[j] < 0.35 * a.preferred:
                        speed_scale = min(speed_scale, 0.1)
                    continue
                has_priority = (goal_dists[j], b.vid) < (dist_goal, a.vid)
                if ahead and dists[j] < 2.0 * a.preferred and has_priority:
                    speed_scale = min(speed_scale, a.brake)
                if dists[j] < 0.8 * a.preferred:
                    # too close for comfort: halt whatever the bearing,
                    # creeping only while holding priority over the blocker
                    creep = EMERGENCY_CREEP if has_priority else 0.0
                    speed_scale = min(speed_scale, creep)
            # gap acceptance at the core boundary; aggressive drivers accept
            # much smaller gaps and lose patience almost immediately
            from_center = float(np.linalg.norm(a.pos))
            at_boundary = CORE_RADIUS - 2.0 < from_center < CORE_RADIUS + 8.0
            inward = float(np.dot(heading, -a.pos / max(from_center, 1e-9))) > 0.0
            if at_boundary and inward:
                occupancy = sum(1 for b in active
                                if b is not a and float(np.linalg.norm(b.pos)) < CORE_RADIUS)
                if a.aggressive:
                    if occupancy >= AGGRESSIVE_GAP_TOLERANCE and a.held < AGGRESSIVE_PATIENCE:
                        speed_scale = min(speed_scale, 0.1)
                        a.held += 1
                elif occupancy >= 1 and a.held < CALM_PATIENCE:
                    speed_scale = 0.0
                    a.held += 1
            vel = (vel + force) * speed_scale
            if cfg.signalized and dist_goal > 1e-9:
                from_center = float(np.linalg.norm(a.pos))
                approaching = from_center > float(np.linalg.norm(
                    a.pos + vel))  # moving inward
                if (approaching and STOP_LINE < from_center < STOP_LINE + 14.0
                        and not _green(a.arm, step, cfg.n_arms)):
                    vel = vel * 0.05
            speed = float(np.linalg.norm(vel))
            if speed > a.max_speed:
                vel = vel * (a.max_speed / speed)
            new_vel.append(vel)
        for a, vel in zip(active, new_vel):
            a.vel = vel
            a.pos = np.clip(a.pos + vel, -SCENE_HALF, SCENE_HALF)
            if float(np.linalg.norm(a.goal - a.pos)) < 3.0:
                a.done = True

    tracks = []
    truth = {}
    for a in agents:
        if len(a.history) < 2:
            continue
        times = np.array([h[0] for h in a.history], dtype=int)
        positions = np.array([[h[1], h[2]] for h in a.history])
        vel = np.zeros_like(positions)
        vel[1:] = (positions[1:] - positions[:-1]) / np.diff(times)[:, None]
        vel[0] = vel[1]
        points = tuple(TrackPoint(t=int(times[i]), p=positions[i], v=vel[i])
                       for i in range(len(times)))
        tracks.append(VehicleTrack(id=a.vid, vehicle_class=a.vclass,
                                   intersection=cfg.tag, points=points))
        truth[a.vid] = a.aggressive
    return TrackDataset(tracks=tuple(tracks), sample_rate=3.0), truth


def generate_many(configs: list[ScenarioConfig]) -> tuple[TrackDataset, dict[str, bool]]:
    """Concatenate several scenarios into one dataset with unique vehicle ids."""
    all_tracks: list[VehicleTrack] = []
    truth: dict[str, bool] = {}
    for idx, cfg in enumerate(configs):
        if len(configs) > 1 and cfg.id_prefix == "v":
            cfg = ScenarioConfig(**{**cfg.__dict__, "id_prefix": f"s{idx}_v"})
        ds, t = generate(cfg)
        all_tracks.extend(ds.tracks)
        truth.update(t)
    return TrackDataset(tracks=tuple(all_tracks), sample_rate=3.0), truth


def write_truth_csv(truth: dict[str, bool], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "aggressive"])
        for vid in sorted(truth):
            w.writerow([vid, int(truth[vid])])


def read_truth_csv(path: str | Path) -> dict[str, bool]:
    truth = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            truth[row["vehicle_id"]] = bool(int(row["aggressive"]))
    return truth


def min_pairwise_distances(ds: TrackDataset) -> dict[str, float]:
    """Per vehicle: the minimum center distance to any co-present vehicle."""
    per_step: dict[int, list] = {}
    for tr in ds.tracks:
        for pt in tr.points:
            per_step.setdefault(pt.t, []).append((tr.id, pt.p))
    out = {tr.id: math.inf for tr in ds.tracks}
    for entries in per_step.values():
        if len(entries) < 2:
            continue
        ids = [e[0] for e in entries]
        pos = np.stack([e[1] for e in entries])
        diffs = pos[:, None, :] - pos[None, :, :]
        dmat = np.linalg.norm(diffs, axis=2)
        np.fill_diagonal(dmat, np.inf)
        nearest = dmat.min(axis=1)
        for vid, d in zip(ids, nearest):
            out[vid] = min(out[vid], float(d))
    return out
