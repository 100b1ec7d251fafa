"""Offline experiment methodology: grids, dataset roles, attacks, baselines.

The world is a rectangular service area with a lattice of training spots
(A spots) and a second set of attack spots (B spots) offset from them. Three
dataset roles keep optimization and evaluation honest:

- ``train`` -- uplink samples at A spots, used only to fit victim models
- ``attack`` -- downlink samples at B spots, the only data the attacker sees
- ``eval`` -- held-out uplink samples at B spots, used only for scoring

Perturbations are optimized per genuine spot (untargeted) or per
genuine/target spot pair (targeted), applied to the held-out uplink samples,
and scored with LE / ASR / PSR before and after. Everything is deterministic
for a fixed master seed, including parallel execution: each task derives its
own seed from the master seed and its task index, and results are assembled
in task order.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import json

import numpy as np

from .attack import AttackConfig, apply_perturbation, optimize_perturbation
from .channel import amplitude_features, sample_link_pair, synth_environment, synth_reflectors
from .errors import ContractError
from .metrics import aggregate_psr, percentile, psr_batch
from .models import LocalizationModel

log = logging.getLogger(__name__)

ROOM_MARGIN = 1.0  # meters of scatterer space beyond the service area


@dataclass
class SpotGrid:
    """A-spot lattice plus offset B spots inside one service area."""

    a_spots: np.ndarray
    b_spots: np.ndarray
    spacing: float
    ap_location: tuple
    area_bounds: tuple

    def __post_init__(self):
        self.a_spots = np.asarray(self.a_spots, dtype=np.float64)
        self.b_spots = np.asarray(self.b_spots, dtype=np.float64)
        if self.spacing <= 0:
            raise ContractError("spacing must be positive")
        x_min, x_max, y_min, y_max = self.area_bounds
        if (np.any(self.b_spots[:, 0] < x_min) or np.any(self.b_spots[:, 0] > x_max)
                or np.any(self.b_spots[:, 1] < y_min) or np.any(self.b_spots[:, 1] > y_max)):
            raise ContractError("every b_spot must lie inside the area bounds")
        if len(np.unique(self.b_spots.round(9), axis=0)) != len(self.b_spots):
            raise ContractError("b_spots must be pairwise distinct")

    @property
    def a_ids(self):
        return [f"a{i:02d}" for i in range(len(self.a_spots))]

    @property
    def b_ids(self):
        return [f"b{i:02d}" for i in range(len(self.b_spots))]


def build_grid(area_bounds, spacing, counts=(6, 6), offset_rule=0.5, seed=None) -> SpotGrid:
    """Regular A lattice centered in the area; B spots at a fixed diagonal
    offset (``offset_rule`` x spacing per axis), clipped to the area.

    ``seed`` is reserved for randomized offset rules; the fixed rule ignores it.
    """
    x_min, x_max, y_min, y_max = (float(v) for v in area_bounds)
    nx, ny = int(counts[0]), int(counts[1])
    span_x, span_y = (nx - 1) * spacing, (ny - 1) * spacing
    if span_x > x_max - x_min or span_y > y_max - y_min:
        raise ContractError("grid does not fit inside the area bounds")
    ox = x_min + ((x_max - x_min) - span_x) / 2.0
    oy = y_min + ((y_max - y_min) - span_y) / 2.0
    a_spots = np.array([(ox + i * spacing, oy + j * spacing)
                        for j in range(ny) for i in range(nx)])
    offset = float(offset_rule) * spacing
    b_spots = a_spots + np.array([offset, offset])
    b_spots[:, 0] = np.clip(b_spots[:, 0], x_min, x_max)
    b_spots[:, 1] = np.clip(b_spots[:, 1], y_min, y_max)
    ap = (x_min + (x_max - x_min) / 2.0, y_min - 0.5)
    return SpotGrid(a_spots, b_spots, spacing, ap, tuple(area_bounds))


@dataclass
class SpotSamples:
    spot_id: str
    location: tuple
    amps: np.ndarray  # (M, N, K)


@dataclass
class RoleDataset:
    """Samples for one dataset role, grouped per spot and tagged by link."""

    role: str  # train | attack | eval
    link: str  # up | down
    spots: dict

    def arrays(self):
        """Stack all spots into (X, y) training arrays."""
        xs = [s.amps for s in self.spots.values()]
        ys = [np.tile(s.location, (len(s.amps), 1)) for s in self.spots.values()]
        return np.concatenate(xs), np.concatenate(ys)


def synthesize_datasets(grid: SpotGrid, channel_cfg: dict, master_seed: int):
    """Generate the three dataset roles for one world.

    All spots share one room-level reflector set drawn from the master seed,
    so nearby spots produce similar fingerprints. Returns
    ({role: RoleDataset}, reflectors).
    """
    cfg = dict(channel_cfg)
    samples_per_spot = int(cfg.pop("samples_per_spot", 250))
    reflector_range = tuple(cfg.pop("reflector_range", (6, 9)))
    x_min, x_max, y_min, y_max = grid.area_bounds
    room = (x_min - ROOM_MARGIN, x_max + ROOM_MARGIN,
            min(y_min, grid.ap_location[1]) - ROOM_MARGIN, y_max + ROOM_MARGIN)
    reflectors = synth_reflectors(room, reflector_range,
                                  np.random.SeedSequence([master_seed, 0]),
                                  keep_clear=(grid.ap_location,))

    def collect(spots, ids, domain, n_up, n_down):
        up, down = {}, {}
        for idx, (sid, loc) in enumerate(zip(ids, spots)):
            env = synth_environment(loc, grid.ap_location, rng_seed=0,
                                    reflectors=reflectors, **cfg)
            rng = np.random.default_rng(np.random.SeedSequence([master_seed, domain, idx]))
            ups, downs = sample_link_pair(env, n_up, n_down, rng, spot_id=sid)
            if n_up:
                up[sid] = SpotSamples(sid, tuple(loc), np.stack(
                    [amplitude_features(m).amps for m in ups]))
            if n_down:
                down[sid] = SpotSamples(sid, tuple(loc), np.stack(
                    [amplitude_features(m).amps for m in downs]))
        return up, down

    a_up, _ = collect(grid.a_spots, grid.a_ids, 1, samples_per_spot, 0)
    b_up, b_down = collect(grid.b_spots, grid.b_ids, 2, samples_per_spot, samples_per_spot)
    return {
        "train": RoleDataset("train", "up", a_up),
        "attack": RoleDataset("attack", "down", b_down),
        "eval": RoleDataset("eval", "up", b_up),
    }, reflectors


# -- threshold selection -------------------------------------------------------


@dataclass
class Thresholds:
    d_max: float
    ball_radius: float
    d_min: dict  # spot_id -> meters
    le90_global: float
    le90_per_spot: dict


def selection_thresholds(model: LocalizationModel, eval_dataset: RoleDataset,
                         spacing: float) -> Thresholds:
    """Distance thresholds from the model's pre-attack errors.

    Ball radius (for target selection) = global 90th-percentile LE + spacing/2;
    d_max = spacing/2; per-spot d_min = that spot's 90th-percentile LE + spacing/2.
    """
    half = spacing / 2.0
    per_spot, d_min, pooled = {}, {}, []
    for sid, spot in eval_dataset.spots.items():
        les = np.linalg.norm(model.forward_batch(spot.amps) - np.asarray(spot.location), axis=1)
        per_spot[sid] = percentile(les, 90)
        d_min[sid] = per_spot[sid] + half
        pooled.append(les)
    le90_global = percentile(np.concatenate(pooled), 90)
    return Thresholds(d_max=half, ball_radius=le90_global + half,
                      d_min=d_min, le90_global=le90_global, le90_per_spot=per_spot)


@dataclass
class SpotPair:
    """One attack task: a genuine spot and (for targeted attacks) a target."""

    genuine_id: str
    genuine: tuple
    d_max: float
    d_min: float
    target_id: str | None = None
    target: tuple | None = None

    @property
    def pair_id(self):
        return self.genuine_id if self.target_id is None else f"{self.genuine_id}->{self.target_id}"


def select_targets(grid: SpotGrid, thresholds: Thresholds) -> list:
    """For every genuine B spot, the nearest B spots outside the ball.

    All candidates tied (within 1e-9 m) at the minimal feasible distance are
    kept, so one genuine spot can yield several pairs. Spots with no
    candidate outside the ball are skipped with a warning.
    """
    pairs = []
    ids = grid.b_ids
    for i, p in enumerate(grid.b_spots):
        dists = np.linalg.norm(grid.b_spots - p, axis=1)
        outside = np.flatnonzero(dists > thresholds.ball_radius)
        if outside.size == 0:
            log.warning("spot %s has no candidate target outside ball radius %.2f m; skipped",
                        ids[i], thresholds.ball_radius)
            continue
        nearest = dists[outside].min()
        for j in outside:
            if dists[j] <= nearest + 1e-9:
                pairs.append(SpotPair(
                    genuine_id=ids[i], genuine=tuple(p),
                    d_max=thresholds.d_max, d_min=thresholds.d_min[ids[i]],
                    target_id=ids[j], target=tuple(grid.b_spots[j])))
    return pairs


def untargeted_tasks(grid: SpotGrid, thresholds: Thresholds) -> list:
    """One task per genuine B spot, no target."""
    return [SpotPair(genuine_id=sid, genuine=tuple(p), d_max=thresholds.d_max,
                     d_min=thresholds.d_min[sid])
            for sid, p in zip(grid.b_ids, grid.b_spots)]


# -- reports -------------------------------------------------------------------


@dataclass
class ExperimentReport:
    """Rows plus aggregate summary for one experiment run."""

    kind: str
    victim: str
    rows: list
    summary: dict
    config_hash: str = ""
    master_seed: int = 0
    perturbations: list = field(default_factory=list)  # not persisted here

    def to_dict(self):
        return {"kind": self.kind, "victim": self.victim, "rows": self.rows,
                "summary": self.summary, "config_hash": self.config_hash,
                "master_seed": self.master_seed}

    @classmethod
    def from_dict(cls, doc):
        return cls(kind=doc["kind"], victim=doc["victim"], rows=doc["rows"],
                   summary=doc["summary"], config_hash=doc.get("config_hash", ""),
                   master_seed=doc.get("master_seed", 0))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            head = {"kind": "fooloc-report", "report": self.kind, "victim": self.victim,
                    "config_hash": self.config_hash, "master_seed": self.master_seed}
            fh.write(json.dumps(head, sort_keys=True) + "\n")
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.write(json.dumps({"summary": self.summary, "config_hash": self.config_hash,
                                 "master_seed": self.master_seed}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        head, rows, summary = {}, [], {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if rec.get("kind") == "fooloc-report":
                    head = rec
                elif "summary" in rec:
                    summary = rec["summary"]
                else:
                    rows.append(rec)
        return cls(kind=head.get("report", "unknown"), victim=head.get("victim", ""),
                   rows=rows, summary=summary, config_hash=head.get("config_hash", ""),
                   master_seed=head.get("master_seed", 0))


def _percentiles(values):
    return {"p50": percentile(values, 50), "p90": percentile(values, 90)}


def _task_seed(master_seed, domain, index):
    return int(np.random.SeedSequence([master_seed, domain, index]).generate_state(1)[0])


def _check_roles(datasets):
    attack_ds, eval_ds = datasets["attack"], datasets["eval"]
    if attack_ds.role != "attack" or attack_ds.link != "down":
        raise ContractError("perturbations must be optimized on downlink 'attack'-role data")
    if eval_ds.role != "eval" or eval_ds.link != "up":
        raise ContractError("attacks must be evaluated on uplink 'eval'-role data")
    if attack_ds is eval_ds:
        raise ContractError("attack and eval datasets must be distinct")
    return attack_ds, eval_ds


def _score_task(model, task, gamma, eval_amps, store_predictions):
    """LE / ASR / PSR before and after applying one perturbation."""
    p = np.asarray(task.genuine)
    before = model.forward_batch(eval_amps)
    perturbed = apply_perturbation(gamma, eval_amps)
    after = model.forward_batch(perturbed)
    le_p_before = np.linalg.norm(before - p, axis=1)
    le_p_after = np.linalg.norm(after - p, axis=1)
    row = {
        "pair_id": task.pair_id,
        "p": [float(v) for v in task.genuine],
        "q": None if task.target is None else [float(v) for v in task.target],
        "omega": 1 if task.target is None else 0,
        "d_max": task.d_max,
        "d_min": task.d_min,
        "le_p_before": _percentiles(le_p_before),
        "le_p_after": _percentiles(le_p_after),
        "psr_db": aggregate_psr(psr_batch(perturbed, eval_amps)),
    }
    raw = {"le_p_before": le_p_before, "le_p_after": le_p_after}
    if task.target is None:
        row["asr_before"] = float(np.mean(le_p_before >= task.d_min))
        row["asr_after"] = float(np.mean(le_p_after >= task.d_min))
        row["le_q_before"] = None
        row["le_q_after"] = None
    else:
        q = np.asarray(task.target)
        le_q_before = np.linalg.norm(before - q, axis=1)
        le_q_after = np.linalg.norm(after - q, axis=1)
        row["asr_before"] = float(np.mean(le_q_before <= task.d_max))
        row["asr_after"] = float(np.mean(le_q_after <= task.d_max))
        row["le_q_before"] = _percentiles(le_q_before)
        row["le_q_after"] = _percentiles(le_q_after)
        raw["le_q_before"] = le_q_before
        raw["le_q_after"] = le_q_after
    if store_predictions:
        row["pred_before"] = [[float(a), float(b)] for a, b in before]
        row["pred_after"] = [[float(a), float(b)] for a, b in after]
    return row, raw


def _summarize(kind, rows, raws, extra=None):
    if not rows:  # e.g. every spot was skipped during target selection
        summary = {"rows": 0}
        summary.update(extra or {})
        return summary
    pooled = {}
    for key in ("le_p_before", "le_p_after", "le_q_before", "le_q_after"):
        chunks = [r[key] for r in raws if key in r]
        if chunks:
            pooled[key] = _percentiles(np.concatenate(chunks))
    summary = {
        "rows": len(rows),
        "asr_before_mean": float(np.mean([r["asr_before"] for r in rows])),
        "asr_after_mean": float(np.mean([r["asr_after"] for r in rows])),
        "psr_db_mean": float(np.mean([r["psr_db"] for r in rows])),
        "le_pooled": pooled,
    }
    summary.update(extra or {})
    return summary


def _run_attack_tasks(opt_model, eval_model, tasks, opt_dataset, eval_dataset, cfg,
                      omega, master_seed, config_hash, jobs, store_predictions,
                      seed_domain):
    """Optimize and score every task; returns (rows, raws, perturbation records)."""

    def one(item):
        index, task = item
        seed = _task_seed(master_seed, seed_domain, index)
        task_cfg = AttackConfig(d_max=task.d_max, d_min=task.d_min,
                                delta_max=cfg.delta_max, beta=cfg.beta, eta=cfg.eta,
                                iterations=cfg.iterations, batch_size=cfg.batch_size,
                                seed=seed)
        pert = optimize_perturbation(opt_model, opt_dataset.spots[task.genuine_id].amps,
                                     task.genuine, task.target, omega, task_cfg)
        row, raw = _score_task(eval_model, task, pert.gamma,
                               eval_dataset.spots[task.genuine_id].amps, store_predictions)
        row["seed"] = seed
        row["config_hash"] = config_hash
        record = pert.to_record(spot_id=task.genuine_id, target_spot_id=task.target_id,
                                config={"beta": cfg.beta, "eta": cfg.eta,
                                        "iterations": cfg.iterations,
                                        "batch_size": cfg.batch_size,
                                        "d_max": task.d_max, "d_min": task.d_min},
                                seed=seed)
        return row, raw, record

    items = list(enumerate(tasks))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    rows = [r for r, _, _ in results]
    raws = [w for _, w, _ in results]
    records = [p for _, _, p in results]
    return rows, raws, records


def run_whitebox(model: LocalizationModel, datasets: dict, tasks: list, omega: int,
                 cfg: AttackConfig, *, master_seed=0, config_hash="", jobs=1,
                 store_predictions=True) -> ExperimentReport:
    """White-box attack: optimize on downlink data, score on held-out uplink.

    ``tasks`` are SpotPairs (targeted, omega=0) or untargeted tasks (omega=1).
    """
    attack_ds, eval_ds = _check_roles(datasets)
    if omega == 0 and any(t.target is None for t in tasks):
        raise ContractError("targeted runs need tasks with targets")
    if omega == 1 and any(t.target is not None for t in tasks):
        raise ContractError("untargeted runs iterate genuine spots only")
    kind = "whitebox_targeted" if omega == 0 else "whitebox_untargeted"
    rows, raws, records = _run_attack_tasks(
        model, model, tasks, attack_ds, eval_ds, cfg, omega, master_seed,
        config_hash, jobs, store_predictions, seed_domain=10 + omega)
    summary = _summarize(kind, rows, raws, extra={
        "victim": model.arch, "omega": omega, "delta_max": cfg.delta_max})
    return ExperimentReport(kind=kind, victim=model.arch, rows=rows, summary=summary,
                            config_hash=config_hash, master_seed=master_seed,
                            perturbations=records)


def run_transfer(victim: LocalizationModel, substitute: LocalizationModel,
                 datasets: dict, omega: int = 1, cfg: AttackConfig = None, *,
                 tasks: list = None, master_seed=0, config_hash="", jobs=1,
                 store_predictions=True) -> ExperimentReport:
    """Black-box transfer: optimize against the substitute, score on the victim.

    Only the victim's weights are hidden from the attacker; the distance
    thresholds baked into ``tasks`` are experiment-level settings shared with
    the white-box and baseline runs, so the reported ASRs are comparable.
    Per-task seeds match the white-box derivation, so a degenerate transfer
    with ``substitute is victim`` reproduces the white-box numbers exactly.
    """
    if cfg is None:
        cfg = AttackConfig()
    attack_ds, eval_ds = _check_roles(datasets)
    if tasks is None:
        raise ContractError("transfer needs the evaluation task list")
    rows, raws, records = _run_attack_tasks(
        substitute, victim, tasks, attack_ds, eval_ds, cfg, omega, master_seed,
        config_hash, jobs, store_predictions, seed_domain=10 + omega)
    summary = _summarize("transfer", rows, raws, extra={
        "victim": victim.arch, "substitute": substitute.arch, "omega": omega,
        "delta_max": cfg.delta_max})
    return ExperimentReport(kind="transfer", victim=victim.arch, rows=rows,
                            summary=summary, config_hash=config_hash,
                            master_seed=master_seed, perturbations=records)


def run_random_baseline(victim: LocalizationModel, datasets: dict, tasks: list,
                        delta_maxes=(0.15, 0.3, 0.45), repeats: int = 10, *,
                        cfg: AttackConfig = None, master_seed=0, config_hash="",
                        store_predictions=False) -> ExperimentReport:
    """Random multiplicative weights, uniform on (1-delta, 1+delta).

    Each (delta_max, repeat, spot) draws an independent gamma; the summary
    averages the repeats per delta_max and per-run values stay in the rows.
    """
    _, eval_ds = _check_roles(datasets)
    rows, raws = [], []
    per_delta = {}
    k = victim.k_subcarriers
    for d_idx, delta in enumerate(delta_maxes):
        delta_rows = []
        for rep in range(repeats):
            for s_idx, task in enumerate(tasks):
                rng = np.random.default_rng(np.random.SeedSequence(
                    [master_seed, 13, d_idx, rep, s_idx]))
                gamma = rng.uniform(1.0 - delta, 1.0 + delta, k)
                row, raw = _score_task(victim, task, gamma,
                                       eval_ds.spots[task.genuine_id].amps,
                                       store_predictions)
                row["pair_id"] = f"{task.genuine_id}@{delta}#r{rep}"
                row["delta_max"] = delta
                row["repeat"] = rep
                row["seed"] = _task_seed(master_seed, 13, d_idx * 10000 + rep * 100 + s_idx)
                row["config_hash"] = config_hash
                rows.append(row)
                raws.append(raw)
                delta_rows.append(row)
        per_delta[str(delta)] = {
            "asr_after_mean": float(np.mean([r["asr_after"] for r in delta_rows])),
            "asr_before_mean": float(np.mean([r["asr_before"] for r in delta_rows])),
            "psr_db_mean": float(np.mean([r["psr_db"] for r in delta_rows])),
            "le_p_after_p50_mean": float(np.mean(
                [r["le_p_after"]["p50"] for r in delta_rows])),
        }
    summary = _summarize("baseline", rows, raws, extra={
        "victim": victim.arch, "omega": 1, "repeats": repeats,
        "per_delta": per_delta})
    return ExperimentReport(kind="baseline", victim=victim.arch, rows=rows,
                            summary=summary, config_hash=config_hash,
                            master_seed=master_seed)
