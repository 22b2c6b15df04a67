"""Collision-energy model, per-vehicle parameter fitting (GA), and 2-means labeling."""
from __future__ import annotations

import csv
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tracks import TrackDataset, VehicleTrack

log = logging.getLogger(__name__)

EPS = 1e-9

SIGMA_D_BOUNDS = (0.1, 20.0)
SIGMA_W_BOUNDS = (0.1, 20.0)
BETA_BOUNDS = (0.1, 10.0)
ISOLATED_PARAMS = (20.0, 20.0, 0.1)  # maximal caution for vehicles never near anyone


@dataclass(frozen=True)
class AgentState:
    """Position (m) and velocity (m/step) of one vehicle at one time-step."""

    p: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class CollisionParams:
    sigma_d: float  # preferred distance (m)
    sigma_w: float  # reaction/turning distance (m)
    beta: float     # angular peakiness

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma_d, self.sigma_w, self.beta])


DIRECTION_SPEED_REF = 1.0  # m/step at which a heading is fully trusted


def _pair_terms(p_i, v_i, v_cand, p_j, v_j, horizon: float | None = None,
                blend_direction: bool = False):
    """Parameter-independent pieces of one neighbor's energy contribution.

    Returns (|dp|, half-cosine weight in [0,1], closest-approach distance).
    With horizon=None the closest approach is the unclamped perpendicular
    distance to the relative-velocity line. A finite horizon restricts the
    approach time to [0, horizon] steps, so receding or quasi-stationary
    pairs fall back toward the current distance instead of projecting onto
    a past or numerically meaningless approach point. blend_direction fades
    the half-cosine toward its neutral value at low own-speed, where the
    heading direction carries no information.
    """
    dp = p_i - p_j
    dist = float(np.linalg.norm(dp))
    speed_i = float(np.linalg.norm(v_i))
    if dist < EPS or speed_i < EPS:
        half = 0.5  # unit vector undefined; neutral direction weight
    else:
        half = 0.5 * (1.0 - float(np.dot(dp / dist, v_i / speed_i)))
        half = min(max(half, 0.0), 1.0)
        if blend_direction:
            trust = min(speed_i / DIRECTION_SPEED_REF, 1.0)
            half = 0.5 + trust * (half - 0.5)
    dv = v_cand - v_j
    rel = float(np.linalg.norm(dv))
    if rel < EPS:
        dca = dist  # no relative motion: closest approach is the current distance
    elif horizon is None:
        dca = float(np.linalg.norm(dp - (np.dot(dp, dv) / rel**2) * dv))
    else:
        t_star = -float(np.dot(dp, dv)) / rel**2
        t_star = min(max(t_star, 0.0), horizon)
        dca = float(np.linalg.norm(dp + t_star * dv))
    return dist, half, dca


def collision_energy(v_cand: np.ndarray, self_state: AgentState,
                     others: list[AgentState], params: CollisionParams,
                     weight_mode: str = "decay") -> float:
    """Summed collision potential of candidate velocity v_cand against neighbors.

    Each neighbor contributes a Gaussian in the predicted closest-approach
    distance, weighted by a distance kernel and a forward-cone term. The
    distance kernel decays with separation by default; "growth" selects the
    increasing variant for comparison.
    """
    if not others:
        raise ValueError("others must be non-empty")
    if weight_mode not in ("decay", "growth"):
        raise ValueError(f"unknown weight_mode {weight_mode!r}")
    sign = -1.0 if weight_mode == "decay" else 1.0
    v_cand = np.asarray(v_cand, dtype=float)
    total = 0.0
    for other in others:
        dist, half, dca = _pair_terms(self_state.p, self_state.v, v_cand,
                                      other.p, other.v)
        w = math.exp(sign * dist / (2.0 * params.sigma_w)) * half**params.beta
        total += w * math.exp(-dca / (2.0 * params.sigma_d**2))
    return total


@dataclass
class GAConfig:
    """Real-valued GA settings for per-vehicle parameter fitting."""

    population: int = 64
    generations: int = 100
    tournament_size: int = 3
    crossover_alpha: float = 0.5
    mutation_sigma_frac: float = 0.05  # of each parameter's range
    mutation_prob: float = 0.2
    elitism: int = 2
    energy_budget: float = 0.05  # comfort threshold on mean per-step exposure
    budget_penalty: float = 100.0
    beta_tiebreak: float = 0.01
    approach_horizon: float = 10.0  # steps of lookahead for predicted approaches
    weight_mode: str = "decay"
    seed: int = 0
    n_workers: int = 1


@dataclass(frozen=True)
class FitResult:
    vehicle_id: str
    params: CollisionParams
    objective: float
    isolated: bool = False


_LO = np.array([SIGMA_D_BOUNDS[0], SIGMA_W_BOUNDS[0], BETA_BOUNDS[0]])
_HI = np.array([SIGMA_D_BOUNDS[1], SIGMA_W_BOUNDS[1], BETA_BOUNDS[1]])
_RANGE = _HI - _LO


def vehicle_terms(vehicle: VehicleTrack, ds: TrackDataset,
                  horizon: float | None = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """Precompute (|dp|, half-cos, closest-approach) for every (step, neighbor) pair.

    The candidate velocity is the vehicle's observed velocity at that step.
    Returns the term array (n, 3), step-grouped, plus the offsets of each
    step's first term (for per-step reductions).
    """
    per_step: dict[int, list] = {}
    for tr in ds.tracks:
        if tr.id == vehicle.id:
            continue
        for pt in tr.points:
            per_step.setdefault(pt.t, []).append(pt)
    rows = []
    offsets = []
    for pt in vehicle.points:
        others = per_step.get(pt.t)
        if not others:
            continue
        offsets.append(len(rows))
        for opt in others:
            rows.append(_pair_terms(pt.p, pt.v, pt.v, opt.p, opt.v, horizon,
                                    blend_direction=True))
    if not rows:
        return np.zeros((0, 3)), np.zeros(0, dtype=int)
    return np.asarray(rows, dtype=float), np.asarray(offsets, dtype=int)


def threat_exposure(param_sets: np.ndarray, terms: np.ndarray, offsets: np.ndarray,
                    weight_mode: str = "decay") -> tuple[np.ndarray, np.ndarray]:
    """Per-channel threat exposure, vectorized over rows of (sigma_d, sigma_w, beta).

    Each channel is the mean over steps of the worst single-neighbor factor:
    the reaction-distance kernel (governed by sigma_w) and the
    closest-approach kernel (governed by sigma_d), both weighted by the
    forward-cone term. Using the per-step maximum instead of the neighbor sum
    keeps the measure about the closest encounter, not bystander density;
    keeping the channels separate means each sigma must account for its own
    geometry rather than one parameter zeroing the whole product.
    """
    param_sets = np.atleast_2d(np.asarray(param_sets, dtype=float))
    if len(terms) == 0:
        z = np.zeros(len(param_sets))
        return z, z.copy()
    sd = param_sets[:, 0:1]
    sw = param_sets[:, 1:2]
    beta = param_sets[:, 2:3]
    sign = -1.0 if weight_mode == "decay" else 1.0
    dist, half, dca = terms[:, 0], terms[:, 1], terms[:, 2]
    cone = half[None, :] ** beta
    e_w = np.exp(sign * dist[None, :] / (2.0 * sw)) * cone
    e_d = np.exp(-dca[None, :] / (2.0 * sd**2)) * cone
    exp_w = np.maximum.reduceat(e_w, offsets, axis=1).mean(axis=1)
    exp_d = np.maximum.reduceat(e_d, offsets, axis=1).mean(axis=1)
    return exp_d, exp_w


def fit_objective(param_sets: np.ndarray, terms: np.ndarray, offsets: np.ndarray,
                  cfg: "GAConfig") -> np.ndarray:
    """Revealed-caution fitting objective (lower is better).

    The raw energy alone is monotone in each parameter, so its minimizer is
    the same bounds corner for every vehicle. Instead we look for the most
    cautious parameters a vehicle's observed behavior supports: maximize the
    sigma_d * sigma_w product subject to each threat-exposure channel staying
    within a comfort budget (enforced as penalties). Vehicles with close,
    fast encounters can only afford small sigmas; relaxed drivers support
    large ones. beta gets a small tiebreak toward its low bound.
    """
    param_sets = np.atleast_2d(np.asarray(param_sets, dtype=float))
    caution = (param_sets[:, 0] * param_sets[:, 1]) / (_HI[0] * _HI[1])
    tiebreak = cfg.beta_tiebreak * (param_sets[:, 2] - _LO[2]) / _RANGE[2]
    exp_d, exp_w = threat_exposure(param_sets, terms, offsets, cfg.weight_mode)
    violation = (np.maximum(exp_d - cfg.energy_budget, 0.0)
                 + np.maximum(exp_w - cfg.energy_budget, 0.0))
    return -caution + tiebreak + cfg.budget_penalty * violation


def _ga_minimize(terms: np.ndarray, offsets: np.ndarray, cfg: GAConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, float, list[float]]:
    """Tournament GA with BLX-alpha crossover, Gaussian mutation, and elitism."""

    def evaluate(pop):
        return fit_objective(pop, terms, offsets, cfg)

    pop = rng.uniform(_LO, _HI, size=(cfg.population, 3))
    fit = evaluate(pop)
    best_per_gen = [float(fit.min())]
    for _ in range(cfg.generations):
        elite_idx = np.argsort(fit)[:cfg.elitism]
        elites = pop[elite_idx].copy()

        def tournament():
            cand = rng.integers(0, cfg.population, size=cfg.tournament_size)
            return pop[cand[np.argmin(fit[cand])]]

        children = np.empty((cfg.population - cfg.elitism, 3))
        for c in range(len(children)):
            pa, pb = tournament(), tournament()
            lo = np.minimum(pa, pb)
            hi = np.maximum(pa, pb)
            span = hi - lo
            child = rng.uniform(lo - cfg.crossover_alpha * span,
                                hi + cfg.crossover_alpha * span)
            mutate = rng.random(3) < cfg.mutation_prob
            child = child + mutate * rng.normal(0.0, cfg.mutation_sigma_frac * _RANGE)
            children[c] = np.clip(child, _LO, _HI)
        pop = np.vstack([elites, children])
        fit = evaluate(pop)
        best_per_gen.append(float(fit.min()))
    best = int(np.argmin(fit))
    return pop[best].copy(), float(fit[best]), best_per_gen


def _vehicle_seed(base: int, vehicle_id: str) -> list[int]:
    return [base, zlib.crc32(vehicle_id.encode())]


def _fit_one(args) -> FitResult:
    vid, terms, offsets, cfg = args
    if len(offsets) == 0:
        return FitResult(vehicle_id=vid, params=CollisionParams(*ISOLATED_PARAMS),
                         objective=math.nan, isolated=True)
    rng = np.random.default_rng(_vehicle_seed(cfg.seed, vid))
    best, obj, _ = _ga_minimize(terms, offsets, cfg, rng)
    return FitResult(vehicle_id=vid,
                     params=CollisionParams(*(float(x) for x in best)),
                     objective=obj)


def fit_params(vehicle: VehicleTrack, ds: TrackDataset, cfg: GAConfig) -> FitResult:
    """Fit (sigma_d, sigma_w, beta) for one vehicle by GA over the caution-regularized
    mean collision energy at its observed velocities."""
    terms, offsets = vehicle_terms(vehicle, ds, cfg.approach_horizon)
    return _fit_one((vehicle.id, terms, offsets, cfg))


def fit_all(ds: TrackDataset, cfg: GAConfig) -> list[FitResult]:
    """Fit every vehicle; deterministic order by vehicle id regardless of workers."""
    log.info("fitting collision params for %d vehicles (distance kernel: %s)",
             len(ds.tracks), cfg.weight_mode)
    jobs = []
    for tr in sorted(ds.tracks, key=lambda t: t.id):
        terms, offsets = vehicle_terms(tr, ds, cfg.approach_horizon)
        jobs.append((tr.id, terms, offsets, cfg))
    if cfg.n_workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_workers) as pool:
            results = list(pool.map(_fit_one, jobs, chunksize=4))
    else:
        results = [_fit_one(j) for j in jobs]
    return sorted(results, key=lambda r: r.vehicle_id)


@dataclass
class SafetyLabeling:
    """Per-vehicle labels from 2-means clustering in standardized (sigma_d, sigma_w)."""

    fits: list[FitResult]
    labels: dict[str, str]
    centroids: np.ndarray          # (2, 2) standardized, row 0 = unsafe cluster
    standardize_mean: np.ndarray   # (2,)
    standardize_std: np.ndarray    # (2,)

    def standardized(self, fit: FitResult) -> np.ndarray:
        raw = np.array([fit.params.sigma_d, fit.params.sigma_w])
        return (raw - self.standardize_mean) / self.standardize_std

    def cluster_of(self, fit: FitResult) -> int:
        z = self.standardized(fit)
        return int(np.argmin(np.linalg.norm(self.centroids - z, axis=1)))


def _two_means(points: np.ndarray, max_iter: int = 200, tol: float = 1e-10):
    """Deterministic 2-means seeded by a balanced split at the median norm.

    A farthest-pair seed latches onto tail outliers on skewed parameter
    clouds; starting from the means of the lower and upper halves keeps the
    boundary between the bulk groups.
    """
    norms = np.linalg.norm(points, axis=1)
    med = np.median(norms)
    lower = points[norms <= med]
    upper = points[norms > med]
    if len(lower) == 0 or len(upper) == 0:
        raise ValueError("degenerate parameter distribution: all params identical")
    centroids = np.stack([lower.mean(axis=0), upper.mean(axis=0)])
    assign = np.zeros(len(points), dtype=int)
    for _ in range(max_iter):
        dists = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
        assign = np.argmin(dists, axis=1)
        new = centroids.copy()
        for c in (0, 1):
            members = points[assign == c]
            if len(members) == 0:  # reseed empty cluster with the farthest point
                far = int(np.argmax(np.linalg.norm(points - centroids[1 - c], axis=1)))
                new[c] = points[far]
            else:
                new[c] = members.mean(axis=0)
        if np.linalg.norm(new - centroids) < tol:
            centroids = new
            break
        centroids = new
    dists = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
    return np.argmin(dists, axis=1), centroids


def label_dataset(fits: list[FitResult]) -> SafetyLabeling:
    """Cluster non-isolated vehicles; the lower-norm cluster is labeled unsafe."""
    active = [f for f in fits if not f.isolated]
    if len(active) < 2:
        raise ValueError("need >=2 vehicles with non-isolated params to label")
    raw = np.array([[f.params.sigma_d, f.params.sigma_w] for f in active])
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    if np.all(std < EPS):
        raise ValueError("degenerate parameter distribution: all params identical")
    std = np.where(std < EPS, 1.0, std)
    z = (raw - mean) / std
    assign, centroids = _two_means(z)
    norms = np.linalg.norm(centroids, axis=1)
    if abs(norms[0] - norms[1]) < EPS:
        raise ValueError("degenerate parameter distribution: cluster norms tie")
    unsafe_cluster = int(np.argmin(norms))
    # reorder so row 0 is always the unsafe centroid
    order = [unsafe_cluster, 1 - unsafe_cluster]
    centroids = centroids[order]
    labels = {}
    for f, c in zip(active, assign):
        labels[f.vehicle_id] = "unsafe" if c == unsafe_cluster else "safe"
    for f in fits:
        if f.isolated:
            labels[f.vehicle_id] = "safe"
    return SafetyLabeling(fits=list(fits), labels=labels, centroids=centroids,
                          standardize_mean=mean, standardize_std=std)


PARAMS_CSV_HEADER = ["vehicle_id", "sigma_d", "sigma_w", "beta",
                     "objective", "label", "isolated"]


def write_params_csv(fits: list[FitResult], path: str | Path,
                     labels: dict[str, str] | None = None) -> None:
    labels = labels or {}
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARAMS_CSV_HEADER)
        for f in sorted(fits, key=lambda r: r.vehicle_id):
            w.writerow([f.vehicle_id, repr(f.params.sigma_d), repr(f.params.sigma_w),
                        repr(f.params.beta), repr(f.objective),
                        labels.get(f.vehicle_id, "unlabeled"), int(f.isolated)])


def read_params_csv(path: str | Path) -> tuple[list[FitResult], dict[str, str]]:
    fits, labels = [], {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PARAMS_CSV_HEADER:
            raise ValueError(f"{path}: unexpected params header {reader.fieldnames}")
        for row in reader:
            fits.append(FitResult(
                vehicle_id=row["vehicle_id"],
                params=CollisionParams(float(row["sigma_d"]), float(row["sigma_w"]),
                                       float(row["beta"])),
                objective=float(row["objective"]),
                isolated=bool(int(row["isolated"]))))
            labels[row["vehicle_id"]] = row["label"]
    return fits, labels


def write_scatter_csv(labeling: SafetyLabeling, path: str | Path) -> None:
    """Standardized (sigma_d, sigma_w) coordinates with cluster index, for plotting."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "sigma_d_std", "sigma_w_std", "cluster", "label"])
        for f in sorted(labeling.fits, key=lambda r: r.vehicle_id):
            if f.isolated:
                continue
            z = labeling.standardized(f)
            w.writerow([f.vehicle_id, repr(float(z[0])), repr(float(z[1])),
                        labeling.cluster_of(f), labeling.labels[f.vehicle_id]])
