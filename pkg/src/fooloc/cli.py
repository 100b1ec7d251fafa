"""Command-line pipeline driver.

Subcommands mirror the offline methodology stage by stage::

    fooloc synth-data   # grid + the three dataset roles
    fooloc train        # victim models on uplink A-spot data
    fooloc attack       # white-box targeted + untargeted attacks
    fooloc transfer     # black-box transfer through a substitute model
    fooloc baseline     # random multiplicative-weight baselines
    fooloc report       # csv / plot-data / consolidated summary
    fooloc all          # everything above, in order

Global flags: ``--config`` (JSON file), ``--set section.key=value`` overrides,
``--seed``, ``--out`` (or the FOOLOC_SIM_OUT environment variable), ``--jobs``.
Artifact filenames carry a content hash of the configuration, and every
artifact embeds that hash plus the master seed, so a rerun with the same
configuration reproduces every file byte for byte.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .attack import AttackConfig
from .channel import DatasetRecord, load_dataset, save_dataset
from .errors import ContractError, StageError
from .harness import ExperimentReport, RoleDataset, SpotGrid, SpotSamples
from .models import LocalizationModel, TrainConfig, train_localizer

log = logging.getLogger(__name__)

ENV_OUT = "FOOLOC_SIM_OUT"
DEFAULT_OUT = "fooloc_out"

DEFAULTS = {
    "channel": {
        "k_subcarriers": 56,  # offline preset; 52 matches the online rig
        "n_antennas": 2,
        "center_frequency_hz": 2.412e9,
        "subcarrier_spacing_hz": 312500.0,
        "phase_reference_hz": 2.0e7,
        "noise_sigma": 0.002,
        "reciprocity_sigma": 0.05,
        "agc_gains": [],
        "reflector_range": [10, 14],
        "path_delay_jitter": 0.0,
        "path_gain_jitter": 0.0,
    },
    "grid": {
        "area_bounds": [0.0, 9.0, 0.0, 9.0],
        "spacing": 1.5,
        "counts": [6, 6],
        "offset_fraction": 0.5,
        "samples_per_spot": 250,
    },
    "train": {
        # desk-scale calibration; plain SGD needs the larger step size
        "epochs": 12,
        "batch_size": 64,
        "learning_rate": 0.1,
        "validation_fraction": 0.2,
        "architectures": ["dnn_a", "dnn_b"],
    },
    "attack": {
        "delta_max": 0.15,
        "beta": 1.0,
        "eta": 0.1,
        "iterations": 500,
        "batch_size": 32,
        "victims": ["dnn_a"],
        "targeted": True,
        "untargeted": True,
        "transfer_victim": "dnn_a",
        "transfer_substitute": "dnn_b",
    },
    "baseline": {
        "delta_max_values": [0.15, 0.3, 0.45],
        "repeats": 10,
        "victim": "dnn_a",
    },
    "io": {
        "include_complex": False,
        "store_predictions": True,
    },
    "master_seed": 77,
    "output_dir": None,
}

STAGES = ("synth", "train", "attack", "transfer", "baseline", "report", "all")


class RunConfig:
    """Validated configuration tree with a content hash."""

    def __init__(self, data: dict):
        self.data = data

    def __getitem__(self, key):
        return self.data[key]

    @property
    def master_seed(self):
        return int(self.data["master_seed"])

    @property
    def output_dir(self) -> Path:
        out = self.data.get("output_dir") or os.environ.get(ENV_OUT) or DEFAULT_OUT
        return Path(out)

    def hash(self) -> str:
        """Hash of everything that shapes results (output_dir excluded)."""
        semantic = {k: v for k, v in self.data.items() if k != "output_dir"}
        blob = json.dumps(semantic, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    @property
    def stamp(self) -> str:
        return self.hash()[:12]


def _check_keys(data, schema, prefix=""):
    for key, value in data.items():
        if key not in schema:
            raise ContractError(f"unknown configuration key {prefix + key!r}")
        default = schema[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ContractError(f"configuration key {prefix + key!r} must be a section")
            _check_keys(value, default, prefix=f"{prefix}{key}.")
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ContractError(f"configuration key {prefix + key!r} must be a boolean")
        elif isinstance(default, (int, float)) and default is not None:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ContractError(f"configuration key {prefix + key!r} must be a number")
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ContractError(f"configuration key {prefix + key!r} must be a list")


def _merge(base, override, prefix=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, prefix=f"{prefix}{key}.")
        else:
            out[key] = value
    return out


def _semantic_checks(data):
    if not (0.0 < data["attack"]["delta_max"] < 1.0):
        raise ContractError(
            f"attack.delta_max must lie in (0, 1), got {data['attack']['delta_max']}")
    for d in data["baseline"]["delta_max_values"]:
        if not (0.0 < d < 1.0):
            raise ContractError(f"baseline delta_max values must lie in (0, 1), got {d}")
    if data["grid"]["spacing"] <= 0:
        raise ContractError("grid.spacing must be positive")
    for arch in (data["train"]["architectures"] + data["attack"]["victims"]
                 + [data["attack"]["transfer_victim"], data["attack"]["transfer_substitute"],
                    data["baseline"]["victim"]]):
        if arch not in ("dnn_a", "dnn_b"):
            raise ContractError(f"unknown architecture {arch!r} in configuration")


def parse_config(path=None, overrides=(), seed=None, output_dir=None) -> RunConfig:
    """Load, override and validate a run configuration.

    Precedence: built-in defaults < config file < --set overrides < --seed/--out.
    Unknown keys are rejected with the offending key named.
    """
    data = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ContractError(f"malformed configuration file {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ContractError(f"configuration file {path} must hold a JSON object")
        _check_keys(loaded, DEFAULTS)
        data = _merge(data, loaded)
    for item in overrides:
        if "=" not in item:
            raise ContractError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        keys = dotted.split(".")
        node, schema = data, DEFAULTS
        for key in keys[:-1]:
            if not isinstance(schema.get(key), dict):
                raise ContractError(f"unknown configuration key {dotted!r}")
            node, schema = node[key], schema[key]
        if keys[-1] not in schema:
            raise ContractError(f"unknown configuration key {dotted!r}")
        node[keys[-1]] = value
        _check_keys(data, DEFAULTS)
    if seed is not None:
        data["master_seed"] = int(seed)
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    _check_keys(data, DEFAULTS)
    _semantic_checks(data)
    return RunConfig(data)


# -- artifact plumbing ---------------------------------------------------------


def _artifact(cfg: RunConfig, name: str) -> Path:
    return cfg.output_dir / name.format(stamp=cfg.stamp)


def _require(cfg: RunConfig, name: str, producer: str) -> Path:
    path = _artifact(cfg, name)
    if not path.exists():
        raise StageError(f"missing artifact {path.name}; run the '{producer}' stage first")
    return path


def _provenance(cfg: RunConfig):
    return {"config_hash": cfg.hash(), "master_seed": cfg.master_seed}


def _build_grid(cfg: RunConfig) -> SpotGrid:
    g = cfg["grid"]
    return harness.build_grid(g["area_bounds"], g["spacing"], g["counts"],
                              g["offset_fraction"])


def _channel_kwargs(cfg: RunConfig):
    ch = cfg["channel"]
    return {
        "k_subcarriers": int(ch["k_subcarriers"]),
        "n_antennas": int(ch["n_antennas"]),
        "center_frequency": float(ch["center_frequency_hz"]),
        "subcarrier_spacing": float(ch["subcarrier_spacing_hz"]),
        "phase_reference": float(ch["phase_reference_hz"]),
        "noise_sigma": float(ch["noise_sigma"]),
        "reciprocity_sigma": float(ch["reciprocity_sigma"]),
        "agc_gains": tuple(ch["agc_gains"]),
        "reflector_range": tuple(ch["reflector_range"]),
        "path_delay_jitter": float(ch["path_delay_jitter"]),
        "path_gain_jitter": float(ch["path_gain_jitter"]),
        "samples_per_spot": int(cfg["grid"]["samples_per_spot"]),
    }


_ROLE_FILES = {"train": "dataset_a.{stamp}.jsonl",
               "attack": "dataset_b.{stamp}.jsonl",
               "eval": "dataset_c.{stamp}.jsonl"}


def _save_role(cfg: RunConfig, role_ds: RoleDataset, path):
    records = [DatasetRecord(spot_id=s.spot_id, location=s.location, link=role_ds.link,
                             amps=amps)
               for s in role_ds.spots.values() for amps in s.amps]
    header = dict(_provenance(cfg))
    header.update({"role": role_ds.role, "link": role_ds.link})
    save_dataset(path, records, header=header,
                 include_complex=bool(cfg["io"]["include_complex"]))


def _load_role(cfg: RunConfig, role: str, producer="synth-data") -> RoleDataset:
    path = _require(cfg, _ROLE_FILES[role], producer)
    header, records = load_dataset(path)
    if header.get("role") != role:
        raise StageError(f"{path.name} carries role {header.get('role')!r}, expected {role!r}")
    spots = {}
    for rec in records:
        spots.setdefault(rec.spot_id, []).append(rec)
    grouped = {sid: SpotSamples(sid, recs[0].location, np.stack([r.amps for r in recs]))
               for sid, recs in sorted(spots.items())}
    return RoleDataset(role, header.get("link", "up"), grouped)


def _model_path(cfg, arch, prefix="model"):
    return _artifact(cfg, f"{prefix}_{arch}.{{stamp}}.bin")


def _load_model(cfg, arch, prefix="model", producer="train") -> LocalizationModel:
    path = _artifact(cfg, f"{prefix}_{arch}.{{stamp}}.bin")
    if not path.exists():
        raise StageError(f"missing artifact {path.name}; run the '{producer}' stage first")
    return LocalizationModel.load(path)


def _train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                       learning_rate=float(t["learning_rate"]),
                       validation_fraction=float(t["validation_fraction"]), seed=seed)


def _attack_config(cfg: RunConfig) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(delta_max=float(a["delta_max"]), beta=float(a["beta"]),
                        eta=float(a["eta"]), iterations=int(a["iterations"]),
                        batch_size=int(a["batch_size"]))


def _save_perturbations(cfg, path, report: ExperimentReport):
    with open(path, "w", encoding="utf-8") as fh:
        head = dict(_provenance(cfg))
        head.update({"kind": "fooloc-perturbations", "report": report.kind,
                     "victim": report.victim})
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for rec in report.perturbations:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- stages --------------------------------------------------------------------


def stage_synth(cfg: RunConfig, jobs=1):
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"config.{cfg.stamp}.json", "w", encoding="utf-8") as fh:
        json.dump(dict(cfg.data, config_hash=cfg.hash()), fh, sort_keys=True, indent=2)
    grid = _build_grid(cfg)
    datasets, reflectors = harness.synthesize_datasets(grid, _channel_kwargs(cfg),
                                                       cfg.master_seed)
    grid_doc = dict(_provenance(cfg))
    grid_doc.update({
        "a_spots": grid.a_spots.tolist(), "b_spots": grid.b_spots.tolist(),
        "spacing": grid.spacing, "ap_location": list(grid.ap_location),
        "area_bounds": list(grid.area_bounds),
        "reflectors": [[list(p), c] for p, c in reflectors],
    })
    with open(_artifact(cfg, "grid.{stamp}.json"), "w", encoding="utf-8") as fh:
        json.dump(grid_doc, fh, sort_keys=True)
    for role, name in _ROLE_FILES.items():
        _save_role(cfg, datasets[role], _artifact(cfg, name))
    log.info("synth: wrote grid and %d dataset roles to %s", len(_ROLE_FILES), out)


def stage_train(cfg: RunConfig, jobs=1):
    train_ds = _load_role(cfg, "train")
    x, y = train_ds.arrays()
    bounds = cfg["grid"]["area_bounds"]
    for i, arch in enumerate(cfg["train"]["architectures"]):
        seed = int(np.random.SeedSequence([cfg.master_seed, 20, i]).generate_state(1)[0])
        model = train_localizer(arch, (x, y), _train_config(cfg, seed), bounds)
        model.save(_model_path(cfg, arch), extra_header=dict(
            _provenance(cfg), validation_median_le=model.validation_median_le))
        log.info("train: %s validation median LE %.3f m", arch, model.validation_median_le)


def _thresholds_and_tasks(cfg, model, eval_ds, grid):
    thresholds = harness.selection_thresholds(model, eval_ds, cfg["grid"]["spacing"])
    return thresholds, harness.untargeted_tasks(grid, thresholds), harness.select_targets(grid, thresholds)


def _load_grid(cfg) -> SpotGrid:
    path = _require(cfg, "grid.{stamp}.json", "synth-data")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return SpotGrid(np.asarray(doc["a_spots"]), np.asarray(doc["b_spots"]),
                    doc["spacing"], tuple(doc["ap_location"]), tuple(doc["area_bounds"]))


def stage_attack(cfg: RunConfig, jobs=1):
    grid = _load_grid(cfg)
    attack_ds = _load_role(cfg, "attack")
    eval_ds = _load_role(cfg, "eval")
    datasets = {"attack": attack_ds, "eval": eval_ds}
    acfg = _attack_config(cfg)
    for victim in cfg["attack"]["victims"]:
        model = _load_model(cfg, victim)
        thresholds, untargeted, targeted = _thresholds_and_tasks(cfg, model, eval_ds, grid)
        runs = []
        if cfg["attack"]["untargeted"]:
            runs.append((1, untargeted))
        if cfg["attack"]["targeted"]:
            runs.append((0, targeted))
        for omega, tasks in runs:
            report = harness.run_whitebox(
                model, datasets, tasks, omega, acfg, master_seed=cfg.master_seed,
                config_hash=cfg.hash(), jobs=jobs,
                store_predictions=bool(cfg["io"]["store_predictions"]))
            report.save(_artifact(cfg, f"report_{report.kind}_{victim}.{{stamp}}.jsonl"))
            _save_perturbations(cfg, _artifact(
                cfg, f"perturbations_{report.kind}_{victim}.{{stamp}}.jsonl"), report)
            log.info("attack: %s %s ASR %.3f -> %.3f", victim, report.kind,
                     report.summary.get("asr_before_mean", float("nan")),
                     report.summary.get("asr_after_mean", float("nan")))


def stage_transfer(cfg: RunConfig, jobs=1):
    grid = _load_grid(cfg)
    attack_ds = _load_role(cfg, "attack")
    eval_ds = _load_role(cfg, "eval")
    datasets = {"attack": attack_ds, "eval": eval_ds}
    victim_arch = cfg["attack"]["transfer_victim"]
    sub_arch = cfg["attack"]["transfer_substitute"]
    victim = _load_model(cfg, victim_arch)

    sub_path = _model_path(cfg, sub_arch, prefix="substitute")
    if sub_path.exists():
        substitute = LocalizationModel.load(sub_path)
    else:
        x, y = attack_ds.arrays()
        seed = int(np.random.SeedSequence([cfg.master_seed, 21]).generate_state(1)[0])
        substitute = train_localizer(sub_arch, (x, y), _train_config(cfg, seed),
                                     cfg["grid"]["area_bounds"])
        substitute.save(sub_path, extra_header=dict(
            _provenance(cfg), validation_median_le=substitute.validation_median_le,
            trained_on="attack-role downlink data"))
        log.info("transfer: substitute %s validation median LE %.3f m",
                 sub_arch, substitute.validation_median_le)

    victim_thresholds = harness.selection_thresholds(victim, eval_ds, cfg["grid"]["spacing"])
    tasks = harness.untargeted_tasks(grid, victim_thresholds)
    report = harness.run_transfer(
        victim, substitute, datasets, omega=1, cfg=_attack_config(cfg),
        tasks=tasks, master_seed=cfg.master_seed,
        config_hash=cfg.hash(), jobs=jobs,
        store_predictions=bool(cfg["io"]["store_predictions"]))
    report.save(_artifact(cfg, f"report_transfer_{victim_arch}.{{stamp}}.jsonl"))
    _save_perturbations(cfg, _artifact(
        cfg, f"perturbations_transfer_{victim_arch}.{{stamp}}.jsonl"), report)
    log.info("transfer: %s via %s ASR %.3f", victim_arch, sub_arch,
             report.summary["asr_after_mean"])


def stage_baseline(cfg: RunConfig, jobs=1):
    grid = _load_grid(cfg)
    attack_ds = _load_role(cfg, "attack")
    eval_ds = _load_role(cfg, "eval")
    victim_arch = cfg["baseline"]["victim"]
    victim = _load_model(cfg, victim_arch)
    thresholds = harness.selection_thresholds(victim, eval_ds, cfg["grid"]["spacing"])
    tasks = harness.untargeted_tasks(grid, thresholds)
    report = harness.run_random_baseline(
        victim, {"attack": attack_ds, "eval": eval_ds}, tasks,
        delta_maxes=tuple(cfg["baseline"]["delta_max_values"]),
        repeats=int(cfg["baseline"]["repeats"]), master_seed=cfg.master_seed,
        config_hash=cfg.hash())
    report.save(_artifact(cfg, f"report_baseline_{victim_arch}.{{stamp}}.jsonl"))
    log.info("baseline: %s per-delta ASR %s", victim_arch,
             {d: round(v["asr_after_mean"], 3)
              for d, v in report.summary["per_delta"].items()})


CSV_COLUMNS = ["pair_id", "omega", "p_x", "p_y", "q_x", "q_y",
               "le_p_p50_before", "le_p_p90_before", "le_p_p50_after", "le_p_p90_after",
               "le_q_p50_before", "le_q_p90_before", "le_q_p50_after", "le_q_p90_after",
               "asr_before", "asr_after", "psr_db", "seed", "config_hash"]


def emit_report(report: ExperimentReport, fmt: str, path) -> Path:
    """Write one report in the requested format; returns the path written."""
    path = Path(path)
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True)
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in report.rows:
                q = row.get("q") or ["", ""]
                le_q_b = row.get("le_q_before") or {}
                le_q_a = row.get("le_q_after") or {}
                writer.writerow([
                    row["pair_id"], row["omega"], row["p"][0], row["p"][1], q[0], q[1],
                    row["le_p_before"]["p50"], row["le_p_before"]["p90"],
                    row["le_p_after"]["p50"], row["le_p_after"]["p90"],
                    le_q_b.get("p50", ""), le_q_b.get("p90", ""),
                    le_q_a.get("p50", ""), le_q_a.get("p90", ""),
                    row["asr_before"], row["asr_after"],
                    row["psr_db"] if row.get("psr_db") is not None else "",
                    row["seed"], row["config_hash"],
                ])
    elif fmt == "plotdata":
        label_after = {0: "targeted", 1: "untargeted"}
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "label", "spot_id"])
            for row in report.rows:
                sid = row["pair_id"]
                for x, y in row.get("pred_before", []):
                    writer.writerow([x, y, "before", sid])
                for x, y in row.get("pred_after", []):
                    writer.writerow([x, y, label_after[row["omega"]], sid])
    else:
        raise ContractError(f"unknown report format {fmt!r} (json|csv|plotdata)")
    return path


def stage_report(cfg: RunConfig, jobs=1):
    out = cfg.output_dir
    reports = sorted(out.glob(f"report_*.{cfg.stamp}.jsonl"))
    if not reports:
        raise StageError("no report artifacts found; run the 'attack' stage first")
    summaries = {}
    for path in reports:
        report = ExperimentReport.load(path)
        base = path.name.rsplit(".", 2)[0]
        emit_report(report, "csv", out / f"{base}.{cfg.stamp}.csv")
        emit_report(report, "plotdata", out / f"{base}.plotdata.{cfg.stamp}.csv")
        summaries[base.replace("report_", "")] = report.summary
    with open(_artifact(cfg, "summary.{stamp}.json"), "w", encoding="utf-8") as fh:
        json.dump({"config_hash": cfg.hash(), "master_seed": cfg.master_seed,
                   "reports": summaries}, fh, sort_keys=True, indent=2)
    log.info("report: consolidated %d reports", len(reports))


_STAGE_FUNCS = {
    "synth": stage_synth,
    "train": stage_train,
    "attack": stage_attack,
    "transfer": stage_transfer,
    "baseline": stage_baseline,
    "report": stage_report,
}


def run_pipeline(cfg: RunConfig, stage: str, jobs: int = 1):
    """Run one pipeline stage (or 'all'); raises StageError/ContractError on failure."""
    if stage not in STAGES:
        raise ContractError(f"unknown stage {stage!r}; expected one of {STAGES}")
    stages = list(_STAGE_FUNCS) if stage == "all" else [stage]
    for name in stages:
        _STAGE_FUNCS[name](cfg, jobs=jobs)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fooloc",
        description="Over-the-air adversarial attacks on CSI fingerprint localization, desk-scale.")
    parser.add_argument("--config", metavar="PATH", help="JSON configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one configuration key")
    parser.add_argument("--seed", type=int, help="master seed (overrides configuration)")
    parser.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./{DEFAULT_OUT})")
    parser.add_argument("--jobs", type=int, default=1, help="worker pool size for attack runs")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("synth-data", "synthesize the spot grid and the three dataset roles"),
        ("train", "train victim localization models"),
        ("attack", "run white-box targeted and untargeted attacks"),
        ("transfer", "run the black-box substitute-model transfer attack"),
        ("baseline", "run random multiplicative-weight baselines"),
        ("report", "emit csv, plot data and the consolidated summary"),
        ("all", "run every stage in order"),
    ]:
        sub.add_parser(name, help=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = {"synth-data": "synth"}.get(args.command, args.command)
    try:
        cfg = parse_config(args.config, args.overrides, seed=args.seed, output_dir=args.out)
        run_pipeline(cfg, stage, jobs=max(1, args.jobs))
    except (ContractError, StageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
