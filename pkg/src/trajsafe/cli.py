"""Command-line pipeline: simulate/ingest -> features -> fit-energy -> label -> train -> eval."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import energy, evaluation, interaction, siamese, simulate, tracks
from .recurrent import ARCHITECTURES, EncoderModel, build_architecture
from .siamese import DEFAULT_SPLIT_SEEDS, TrainConfig

log = logging.getLogger(__name__)

TRACKS_CSV = "tracks.csv"
TRUTH_CSV = "truth.csv"
INTERACTIONS_JSONL = "interactions.jsonl"
PARAMS_CSV = "params.csv"
SCATTER_CSV = "scatter.csv"
MODEL_NPZ = "model.npz"
HISTORY_CSV = "history.csv"
REPORT_CSV = "report.csv"
PREDS_CSV = "preds.csv"

SUBCOMMANDS = ("simulate", "ingest", "features", "fit-energy", "label",
               "train", "eval", "pipeline")


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


_SIMULATE_KEYS = {f.name for f in dataclasses.fields(simulate.ScenarioConfig)}
_ENERGY_KEYS = {f.name for f in dataclasses.fields(energy.GAConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} | {"arch", "split_seed"}
_INGEST_KEYS = {"path", "format", "source_fps", "target_rate"}
_FEATURES_KEYS = {"k"}
_EVAL_KEYS = {"knn_k"}
_TOP_KEYS = {"seed", "simulate", "ingest", "features", "energy", "train", "eval"}

DEFAULT_CONFIG = {
    "seed": 0,
    "simulate": {"n_arms": 4, "signalized": False, "fraction_aggressive": 0.5,
                 "duration": 300,
                 "class_counts": {"car": 10, "two-wheeler": 20,
                                  "auto-rickshaw": 8, "bus": 2}},
    "features": {"k": 8},
    "energy": {},
    "train": {"arch": "blstm2l_a"},
    "eval": {"knn_k": evaluation.DEFAULT_KNN_K},
}


def _check_keys(section: str, given: dict, valid: set) -> None:
    bad = set(given) - valid
    if bad:
        raise ConfigError(f"invalid config key(s) {sorted(bad)} in section "
                          f"{section!r}; valid keys: {sorted(valid)}")


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(str(p))
        user = json.loads(p.read_text())
        _check_keys("<top-level>", user, _TOP_KEYS)
        for key, val in user.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key] = {**cfg[key], **val}
            else:
                cfg[key] = val
    scenes = cfg.get("simulate")
    for scene in (scenes if isinstance(scenes, list) else [scenes] if scenes else []):
        _check_keys("simulate", scene, _SIMULATE_KEYS)
    if "ingest" in cfg:
        _check_keys("ingest", cfg["ingest"], _INGEST_KEYS)
    _check_keys("features", cfg.get("features", {}), _FEATURES_KEYS)
    _check_keys("energy", cfg.get("energy", {}), _ENERGY_KEYS)
    _check_keys("train", cfg.get("train", {}), _TRAIN_KEYS)
    _check_keys("eval", cfg.get("eval", {}), _EVAL_KEYS)
    if cfg["train"].get("arch", "blstm2l_a") not in ARCHITECTURES:
        raise ConfigError(f"invalid arch {cfg['train'].get('arch')!r}; "
                          f"valid: {list(ARCHITECTURES)}")
    return cfg


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} (produce it with `trajsafe {hint}`)")
    return path


def _scene_configs(cfg: dict) -> list[simulate.ScenarioConfig]:
    seed = cfg["seed"]
    scenes = cfg["simulate"]
    if isinstance(scenes, dict):
        scenes = [scenes]
    out = []
    for i, sc in enumerate(scenes):
        sc = dict(sc)
        sc.setdefault("seed", seed + i)
        out.append(simulate.ScenarioConfig(**sc))
    return out


def cmd_simulate(cfg: dict, out: Path) -> None:
    ds, truth = simulate.generate_many(_scene_configs(cfg))
    tracks.write_tracks_csv(ds, out / TRACKS_CSV)
    simulate.write_truth_csv(truth, out / TRUTH_CSV)
    log.info("simulated %d tracks -> %s", len(ds), out / TRACKS_CSV)


def cmd_ingest(cfg: dict, out: Path) -> None:
    if "ingest" not in cfg:
        raise ConfigError("config has no 'ingest' section (set ingest.path)")
    section = cfg["ingest"]
    src = Path(section.get("path", ""))
    if not src.exists():
        raise MissingArtifact(str(src))
    ds = tracks.ingest_tracks(src, section.get("format", "csv"))
    if "source_fps" in section:
        ds = tracks.resample(ds, section["source_fps"], section.get("target_rate", 3.0))
    tracks.write_tracks_csv(ds, out / TRACKS_CSV)
    log.info("ingested %d tracks -> %s", len(ds), out / TRACKS_CSV)


def cmd_features(cfg: dict, out: Path) -> None:
    ds = tracks.ingest_tracks(_require(out / TRACKS_CSV, "simulate or ingest"), "csv")
    trajs = interaction.build_interactions(ds, cfg["features"]["k"])
    interaction.dump_interactions(trajs, out / INTERACTIONS_JSONL)
    log.info("built %d interaction trajectories (k=%d)", len(trajs), cfg["features"]["k"])


def cmd_fit_energy(cfg: dict, out: Path) -> None:
    ds = tracks.ingest_tracks(_require(out / TRACKS_CSV, "simulate or ingest"), "csv")
    ga_cfg = energy.GAConfig(**{"seed": cfg["seed"], **cfg["energy"]})
    fits = energy.fit_all(ds, ga_cfg)
    energy.write_params_csv(fits, out / PARAMS_CSV)
    log.info("fitted %d vehicles -> %s", len(fits), out / PARAMS_CSV)


def cmd_label(cfg: dict, out: Path) -> None:
    fits, _ = energy.read_params_csv(_require(out / PARAMS_CSV, "fit-energy"))
    labeling = energy.label_dataset(fits)
    energy.write_params_csv(fits, out / PARAMS_CSV, labels=labeling.labels)
    energy.write_scatter_csv(labeling, out / SCATTER_CSV)
    n_unsafe = sum(1 for v in labeling.labels.values() if v == "unsafe")
    log.info("labeled %d unsafe / %d safe", n_unsafe, len(labeling.labels) - n_unsafe)


def _labeled_trajectories(cfg: dict, out: Path) -> list:
    trajs = interaction.load_interactions(_require(out / INTERACTIONS_JSONL, "features"))
    _, labels = energy.read_params_csv(_require(out / PARAMS_CSV, "fit-energy"))
    if all(l == "unlabeled" for l in labels.values()):
        raise ConfigError(f"{out / PARAMS_CSV} has no labels (run `trajsafe label`)")
    for tr in trajs:
        tr.label = labels.get(tr.vehicle_id, "unlabeled")
    return [tr for tr in trajs if tr.label != "unlabeled"]


def _train_config(cfg: dict) -> tuple[TrainConfig, str, int]:
    section = dict(cfg["train"])
    arch = section.pop("arch", "blstm2l_a")
    split_seed = section.pop("split_seed", DEFAULT_SPLIT_SEEDS[0])
    section.setdefault("seed", cfg["seed"])
    section.setdefault("k_neighbors", cfg["features"]["k"])
    section["split_ratios"] = tuple(section.get("split_ratios", (0.70, 0.20, 0.10)))
    return TrainConfig(**section), arch, split_seed


def cmd_train(cfg: dict, out: Path) -> None:
    trajs = _labeled_trajectories(cfg, out)
    train_cfg, arch, split_seed = _train_config(cfg)
    train_set, test_set, val_set = siamese.split_dataset(trajs, train_cfg, split_seed)
    scaler = interaction.fit_scaler(train_set)
    train_s = [interaction.apply_scaler(scaler, t) for t in train_set]
    val_s = [interaction.apply_scaler(scaler, t) for t in val_set]
    k = cfg["features"]["k"]
    model = build_architecture(arch, input_dim=2 * k + 1, seed=train_cfg.seed)
    model, history = siamese.train(model, train_s, val_s, train_cfg)
    model.save(out / MODEL_NPZ, extra={
        "scaler_mean": scaler.mean, "scaler_std": scaler.std,
        "k": np.array(k), "split_seed": np.array(split_seed),
        "arch": np.array(arch)})
    siamese.write_history_csv(history, out / HISTORY_CSV)
    log.info("trained %s for %d epochs -> %s", arch, train_cfg.epochs, out / MODEL_NPZ)


def cmd_eval(cfg: dict, out: Path) -> None:
    model_path = out / MODEL_NPZ
    if not model_path.exists():
        raise MissingArtifact(f"{model_path} (produce it with `trajsafe train`)")
    model, extra = EncoderModel.load(model_path)
    scaler = interaction.FeatureScaler(mean=extra["scaler_mean"], std=extra["scaler_std"])
    trajs = _labeled_trajectories(cfg, out)
    train_cfg, arch, _ = _train_config(cfg)
    split_seed = int(extra["split_seed"])
    train_set, test_set, _ = siamese.split_dataset(trajs, train_cfg, split_seed)
    train_s = [interaction.apply_scaler(scaler, t) for t in train_set]
    test_s = [interaction.apply_scaler(scaler, t) for t in test_set]
    report, preds = evaluation.evaluate(
        model, train_s, test_s, knn_k=cfg["eval"]["knn_k"],
        arch=str(extra.get("arch", arch)), k_neighbors=int(extra["k"]),
        split=str(split_seed))
    evaluation.write_report_csv([report], out / REPORT_CSV)
    evaluation.write_preds_csv(preds, out / PREDS_CSV)
    m = report.overall
    log.info("eval: recall %.3f precision %.3f f1 %.3f", m.recall, m.precision, m.f1)


def cmd_pipeline(cfg: dict, out: Path) -> None:
    if "ingest" in cfg:
        cmd_ingest(cfg, out)
    else:
        cmd_simulate(cfg, out)
    cmd_features(cfg, out)
    cmd_fit_energy(cfg, out)
    cmd_label(cfg, out)
    cmd_train(cfg, out)
    cmd_eval(cfg, out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajsafe",
        description="Detect collision-prone vehicle interaction trajectories "
                    "at intersections.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "generate synthetic intersection traffic (tracks.csv, truth.csv)",
        "ingest": "read and resample a raw track file into tracks.csv",
        "features": "build neighbor-interaction feature sequences",
        "fit-energy": "fit per-vehicle collision-energy parameters by GA",
        "label": "cluster fitted parameters into unsafe/safe labels",
        "train": "train the trajectory encoder with triplet loss",
        "eval": "kNN retrieval metrics for unsafe trajectories",
        "pipeline": "run every step in order with one seed set",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--k-neighbors", type=int, default=None,
                       help="neighbor count per step (default 8)")
        p.add_argument("--arch", choices=ARCHITECTURES, default=None,
                       help="encoder architecture")
        p.add_argument("--out", type=str, default="out", help="artifact directory")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "features": cmd_features,
    "fit-energy": cmd_fit_energy,
    "label": cmd_label,
    "train": cmd_train,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.k_neighbors is not None:
            cfg["features"]["k"] = args.k_neighbors
        if args.arch is not None:
            cfg["train"]["arch"] = args.arch
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except MissingArtifact as exc:
        print(f"error: missing required artifact: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
