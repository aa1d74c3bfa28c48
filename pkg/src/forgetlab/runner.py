"""Experiment plans, the run registry, and the single-task / sequence / Wise-FT drivers."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import evaluate as ev
from . import nets
from .datagen import TaskDataset, make_task, make_universe, merge_tasks, stream
from .evaluate import MetricRecord
from .finetune import (
    L2SP,
    LAMBDA_GRID,
    LDIFS,
    METHODS,
    FinetuneConfig,
    FinetuneTrajectory,
    feature_distance,
    finetune,
    finetune_selected,
)
from .nets import ConceptEmbedder, EncoderSpec, ModelSnapshot
from .pretrain import FoundationModel, PretrainConfig, pretrain

log = logging.getLogger(__name__)

FOUNDATION_FILE = "foundation.bin"
SINGLE_METHODS = tuple(m for m in METHODS if m != "joint")
# methods whose regulariser weight is grid-searched on validation unless a job pins it
LAMBDA_SEARCH = ("zs_init_l2sp", "lp_init_l2sp", "zs_init_ldifs", "lp_init_ldifs", "ldifs_last_layer")
SEQUENCE_METHODS = ("zs_init_ce", "lp_init_ce", "lp_init_l2sp", "lp_init_ldifs", "lwf", "lfl", "joint")
SEQUENCE_COLUMNS = ("run_id", "method", "sequence", "eval_dataset", "in_sequence", "a_lp_final", "continual_delta_lp")
WISEFT_COLUMNS = ("run_id", "method", "ft_dataset", "alpha", "mean_delta_lp_without", "mean_delta_lp_with")
LOSS_COLUMNS = ("step", "epoch", "lr", "loss_total", "loss_ce", "loss_reg")

# world defaults used by the default plan
DEFAULT_NOISE = 0.05
DEFAULT_STYLE_ANGLE = 0.5
DEFAULT_SHIFT = 0.5
DEFAULT_EPOCHS = 30


class PlanError(ValueError):
    pass


class RegistryError(RuntimeError):
    pass


class JobError(RuntimeError):
    pass


# -- plan ---------------------------------------------------------------------------


def _strict(cls, d, where: str) -> dict:
    if not isinstance(d, dict):
        raise PlanError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise PlanError(f"{where}: unknown keys {unknown}")
    return dict(d)


def _strict_keys(d, known: Iterable[str], where: str) -> dict:
    if not isinstance(d, dict):
        raise PlanError(f"{where}: expected an object")
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise PlanError(f"{where}: unknown keys {unknown}")
    return dict(d)


@dataclass(frozen=True)
class UniverseSpec:
    num_concepts: int = 40
    input_dim: int = 32
    within_concept_scale: float = 0.15


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    concept_ids: tuple[int, ...]
    style_seed: int | None
    noise_sigma: float = DEFAULT_NOISE
    style_angle: float = DEFAULT_STYLE_ANGLE
    shift_scale: float = DEFAULT_SHIFT
    n_train: int = 800
    n_val: int = 200
    n_test: int = 400

    def build(self, universe, seed: int) -> TaskDataset:
        return make_task(
            universe,
            self.concept_ids,
            self.style_seed,
            self.noise_sigma,
            n_train=self.n_train,
            n_val=self.n_val,
            n_test=self.n_test,
            task_id=self.task_id,
            style_angle=self.style_angle,
            shift_scale=self.shift_scale,
            seed=derive_seed(seed, "task", self.task_id),
        )


@dataclass(frozen=True)
class Job:
    method: str
    ft_task: str
    config: dict = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        return f"single-{self.ft_task}-{self.method}"


@dataclass(frozen=True)
class ExperimentPlan:
    seed: int = 0
    universe: UniverseSpec = UniverseSpec()
    encoder: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    tasks: tuple[TaskSpec, ...] = ()
    jobs: tuple[Job, ...] = ()
    sequences: tuple[tuple[str, ...], ...] = ()
    sequence_methods: tuple[str, ...] = SEQUENCE_METHODS
    wise_ft_methods: tuple[str, ...] = ("zs_init_ce",)
    wise_ft_alphas: tuple[float, ...] = ev.DEFAULT_ALPHA_GRID
    eval_tasks: tuple[str, ...] | None = None
    lambda_search: tuple[str, ...] = LAMBDA_SEARCH
    lambda_grid: tuple[float, ...] = LAMBDA_GRID

    def __post_init__(self) -> None:
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise PlanError("duplicate task ids")
        known = set(ids)
        for j in self.jobs:
            if j.method not in METHODS:
                raise PlanError(f"job {j.run_id}: unknown method {j.method!r}")
            if j.ft_task not in known:
                raise PlanError(f"job {j.run_id}: unknown task {j.ft_task!r}")
        run_ids = [j.run_id for j in self.jobs]
        if len(set(run_ids)) != len(run_ids):
            raise PlanError("duplicate jobs")
        for s in self.sequences:
            missing = [t for t in s if t not in known]
            if missing:
                raise PlanError(f"sequence {list(s)} references unknown tasks {missing}")
            if not s:
                raise PlanError("empty sequence")
        for m in self.lambda_search:
            if m not in LDIFS | L2SP:
                raise PlanError(f"lambda_search: {m!r} has no searchable regulariser weight")
        if not self.lambda_grid or any(g < 0 for g in self.lambda_grid):
            raise PlanError("lambda_grid must be non-empty and non-negative")
        for m in (*self.sequence_methods, *self.wise_ft_methods):
            if m not in METHODS:
                raise PlanError(f"unknown method {m!r}")
        if self.eval_tasks is not None and any(t not in known for t in self.eval_tasks):
            raise PlanError("eval_tasks references unknown tasks")
        if any(not 0.0 <= a <= 1.0 for a in self.wise_ft_alphas) or not self.wise_ft_alphas:
            raise PlanError("wise_ft_alphas must be a non-empty subset of [0, 1]")
        try:
            self.encoder_spec()
            self.pretrain_config()
            self.finetune_config("zs_init_ce")
            for j in self.jobs:
                self.finetune_config(j.method, j.config)
        except (TypeError, ValueError) as exc:
            raise PlanError(str(exc)) from exc

    # -- (de)serialisation

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = [asdict(t) for t in self.tasks]
        for t in d["tasks"]:
            t["concept_ids"] = list(t["concept_ids"])
        d["jobs"] = [asdict(j) for j in self.jobs]
        d["sequences"] = [list(s) for s in self.sequences]
        for k in ("sequence_methods", "wise_ft_methods", "wise_ft_alphas", "lambda_search", "lambda_grid"):
            d[k] = list(d[k])
        if self.eval_tasks is not None:
            d["eval_tasks"] = list(self.eval_tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = _strict(cls, d, "plan")
        if "universe" in d:
            d["universe"] = UniverseSpec(**_strict(UniverseSpec, d["universe"], "universe"))
        if "encoder" in d:
            _strict_keys(d["encoder"], ("hidden_widths", "embed_dim", "activation", "tap_layers"), "encoder")
        if "pretrain" in d:
            _strict(PretrainConfig, d["pretrain"], "pretrain")
        if "finetune" in d:
            _strict_keys(d["finetune"], [f.name for f in fields(FinetuneConfig) if f.name != "method"], "finetune")
        if "tasks" in d:
            tasks = []
            for i, t in enumerate(d["tasks"]):
                t = _strict(TaskSpec, t, f"tasks[{i}]")
                t["concept_ids"] = tuple(int(c) for c in t["concept_ids"])
                tasks.append(TaskSpec(**t))
            d["tasks"] = tuple(tasks)
        if "jobs" in d:
            jobs = []
            for i, j in enumerate(d["jobs"]):
                j = _strict(Job, j, f"jobs[{i}]")
                _strict_keys(j.get("config", {}), [f.name for f in fields(FinetuneConfig) if f.name != "method"], f"jobs[{i}].config")
                jobs.append(Job(**j))
            d["jobs"] = tuple(jobs)
        if "sequences" in d:
            d["sequences"] = tuple(tuple(s) for s in d["sequences"])
        for k in ("sequence_methods", "wise_ft_methods", "eval_tasks", "lambda_search"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        for k in ("wise_ft_alphas", "lambda_grid"):
            if k in d:
                d[k] = tuple(float(a) for a in d[k])
        try:
            return cls(**d)
        except TypeError as exc:
            raise PlanError(str(exc)) from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise PlanError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def plan_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    # -- derived objects

    def encoder_spec(self) -> EncoderSpec:
        d = dict(self.encoder)
        widths = tuple(d.pop("hidden_widths", (64, 64, 64, 64)))
        taps = d.pop("tap_layers", None)
        return EncoderSpec(
            self.universe.input_dim,
            widths,
            d.pop("embed_dim", 32),
            d.pop("activation", "relu"),
            tuple(taps) if taps is not None else None,
        )

    def pretrain_config(self) -> PretrainConfig:
        d = {"seed": derive_seed(self.seed, "pretrain")}
        d.update(self.pretrain)
        return PretrainConfig(**d)

    def finetune_config(self, method: str, overrides: dict | None = None, run_id: str | None = None) -> FinetuneConfig:
        d = dict(self.finetune)
        d.update(overrides or {})
        d["method"] = method
        if run_id is not None:
            d["seed"] = derive_seed(self.seed, run_id, "finetune")
        return FinetuneConfig(**d)

    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    def eval_task_ids(self) -> list[str]:
        return list(self.eval_tasks) if self.eval_tasks is not None else self.task_ids()

    def with_seed(self, seed: int) -> "ExperimentPlan":
        d = self.to_dict()
        d["seed"] = int(seed)
        return ExperimentPlan.from_dict(d)


def derive_seed(seed: int, *names) -> int:
    """64-bit seed derived from the plan seed and purpose strings."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for n in names:
        h.update(b"\x00" + str(n).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def default_plan(seed: int = 0, num_tasks: int = 9, concepts_per_task: int = 8) -> ExperimentPlan:
    """Nine 8-concept tasks, every non-joint method on every task, three 3-task sequences."""
    universe = UniverseSpec()
    tasks = []
    for i in range(num_tasks):
        ids = stream(seed, "plan", "task", i).choice(universe.num_concepts, size=concepts_per_task, replace=False)
        tasks.append(TaskSpec(f"t{i}", tuple(int(c) for c in np.sort(ids)), style_seed=derive_seed(seed, "style", i)))
    jobs = tuple(Job(m, t.task_id) for t in tasks for m in SINGLE_METHODS)
    ids = [t.task_id for t in tasks]
    sequences = tuple(tuple(ids[3 * s : 3 * s + 3]) for s in range(min(3, num_tasks // 3)))
    return ExperimentPlan(
        seed=int(seed),
        universe=universe,
        finetune={"epochs": DEFAULT_EPOCHS},
        tasks=tuple(tasks),
        jobs=jobs,
        sequences=sequences,
    )


# -- registry -------------------------------------------------------------------------


class RunRegistry:
    """Append-only JSON-lines index of runs; the last line per run_id is its state."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        with self.path.open() as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def status(self, run_id: str) -> str | None:
        state = None
        for e in self.entries():
            if e["run_id"] == run_id:
                state = e["status"]
        return state

    def completed(self) -> set[str]:
        return {e["run_id"] for e in self.entries() if e["status"] == "completed"}

    def _append(self, entry: dict) -> None:
        entry = dict(entry, timestamp=time.time())
        with self.path.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()

    def begin(self, run_id: str, plan_hash: str, config: dict) -> None:
        if self.status(run_id) == "completed":
            raise RegistryError(f"run {run_id} already completed; refusing to overwrite it")
        self._append({"run_id": run_id, "plan_hash": plan_hash, "config": config, "status": "started"})

    def finish(self, run_id: str, plan_hash: str, artifacts: dict, status: str = "completed", error: str = "") -> None:
        entry = {"run_id": run_id, "plan_hash": plan_hash, "status": status, "artifacts": artifacts}
        if error:
            entry["error"] = error
        self._append(entry)


# -- shared state --------------------------------------------------------------------------


@dataclass
class Context:
    """Everything a job needs: the plan, its universe, tasks and foundation."""

    plan: ExperimentPlan
    foundation: FoundationModel
    tasks: dict[str, TaskDataset]
    _baseline: dict[str, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def build(cls, plan: ExperimentPlan, foundation: FoundationModel | None = None) -> "Context":
        u = plan.universe
        universe = make_universe(derive_seed(plan.seed, "universe"), u.num_concepts, u.input_dim, u.within_concept_scale)
        if foundation is None:
            foundation = pretrain(universe, plan.encoder_spec(), plan.pretrain_config())
        tasks = {t.task_id: t.build(universe, plan.seed) for t in plan.tasks}
        return cls(plan, foundation, tasks)

    @property
    def origin(self) -> ModelSnapshot:
        return self.foundation.encoder

    @property
    def embedder(self) -> ConceptEmbedder:
        return self.foundation.embedder

    def baseline(self, task_id: str) -> tuple[float, float]:
        """(A_ZS, A_LP) of the foundation on a task's test split."""
        if task_id not in self._baseline:
            t = self.tasks[task_id]
            zs = ev.a_zs(self.origin, ev.zs_head(self.embedder, t.concept_ids), t)
            lp = ev.a_lp(self.origin, t, self.embedder)
            self._baseline[task_id] = (zs, lp)
        return self._baseline[task_id]


def load_or_pretrain(plan: ExperimentPlan, out) -> FoundationModel:
    path = Path(out) / FOUNDATION_FILE
    if path.exists():
        fm = FoundationModel.load(path)
        if fm.pretrain_config.get("plan_hash") not in (None, _foundation_key(plan)):
            raise PlanError(f"{path} was pre-trained under a different plan; use a fresh --out")
        return fm
    fm = Context.build(plan).foundation
    fm.pretrain_config["plan_hash"] = _foundation_key(plan)
    path.parent.mkdir(parents=True, exist_ok=True)
    fm.save(path)
    return fm


def _foundation_key(plan: ExperimentPlan) -> str:
    d = {"seed": plan.seed, "universe": asdict(plan.universe), "encoder": plan.encoder, "pretrain": plan.pretrain}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# -- evaluation of one model ------------------------------------------------------------------


def _embedder_for(snapshot: ModelSnapshot, fallback: ConceptEmbedder) -> ConceptEmbedder:
    if nets.EMBEDDER_KEY in snapshot.params:
        return ConceptEmbedder(snapshot.params[nets.EMBEDDER_KEY], fallback.temperature)
    return fallback


def evaluate_snapshot(
    ctx: Context,
    snapshot: ModelSnapshot,
    run_id: str,
    method: str,
    ft_task: str,
    fraction: float,
    origin: ModelSnapshot | None = None,
) -> list[MetricRecord]:
    """One record per eval task: accuracies, deltas against the foundation, distances to ``origin``."""
    origin = origin if origin is not None else ctx.origin
    zs_embedder = _embedder_for(snapshot, ctx.embedder)
    param_dist = nets.param_sq_distance(snapshot, origin)
    out = []
    for tid in ctx.plan.eval_task_ids():
        t = ctx.tasks[tid]
        base_zs, base_lp = ctx.baseline(tid)
        a_zs = ev.a_zs(snapshot, ev.zs_head(zs_embedder, t.concept_ids), t)
        a_lp = ev.a_lp(snapshot, t, ctx.embedder)
        feat = feature_distance(snapshot, origin, t.train.x)
        out.append(
            MetricRecord(run_id, method, ft_task, tid, fraction, a_zs, a_lp, a_zs - base_zs, a_lp - base_lp, param_dist, feat)
        )
    return out


# -- artifacts ------------------------------------------------------------------------------------


def write_losses(losses: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for row in losses:
            w.writerow([row[c] if isinstance(row[c], int) else ev.fmt_float(row[c]) for c in LOSS_COLUMNS])


def snapshot_path(out, run_id: str, fraction: float) -> Path:
    return Path(out) / "snapshots" / run_id / f"{fraction:g}.bin"


def save_trajectory(out, run_id: str, traj: FinetuneTrajectory) -> dict:
    paths = {"losses": str(Path("losses") / f"{run_id}.csv"), "snapshots": []}
    if "lambda_selected" in traj.extra:
        paths[traj.extra["lambda_field"]] = traj.extra["lambda_selected"]
        paths["lambda_val_accuracy"] = {ev.fmt_float(k): v for k, v in traj.extra["lambda_scores"].items()}
    write_losses(traj.losses, Path(out) / paths["losses"])
    for f, snap in traj.checkpoints:
        p = snapshot_path(out, run_id, f)
        nets.save_snapshot(snap, p)
        paths["snapshots"].append(str(p.relative_to(out)))
    return paths


# -- job bodies (picklable, executed in workers) ---------------------------------------------------


@dataclass
class JobResult:
    run_id: str
    records: list[MetricRecord]
    artifacts: dict
    error: str = ""
    extra: list = field(default_factory=list)


def train(plan: ExperimentPlan, start, embedder, task, cfg: FinetuneConfig, pinned=(), run_id: str = "run") -> FinetuneTrajectory:
    """Fine-tune, grid-searching the regulariser weight when the plan asks for it and the job does not pin it."""
    if cfg.method in plan.lambda_search and not {"lambda_l2sp", "lambda_ldifs"} & set(pinned):
        return finetune_selected(start, embedder, task, cfg, plan.lambda_grid, run_id=run_id)
    return finetune(start, embedder, task, cfg, run_id=run_id)


def _single_body(ctx: Context, job: Job, out, sink: Callable[[list[MetricRecord]], None]) -> JobResult:
    plan = ctx.plan
    run_id = job.run_id
    cfg = plan.finetune_config(job.method, job.config, run_id=run_id)
    task = ctx.tasks[job.ft_task]
    records: list[MetricRecord] = []
    artifacts: dict = {}
    try:
        traj = train(plan, ctx.origin, ctx.embedder, task, cfg, job.config, run_id=run_id)
        artifacts = save_trajectory(out, run_id, traj)
        for f, snap in traj.checkpoints:
            recs = evaluate_snapshot(ctx, snap, run_id, job.method, job.ft_task, f)
            records.extend(recs)
            sink(recs)
    except Exception as exc:  # noqa: BLE001 - any failure aborts just this job
        log.error("job %s failed: %s", run_id, exc)
        return JobResult(run_id, records, artifacts, error=f"{type(exc).__name__}: {exc}")
    return JobResult(run_id, records, artifacts)


def sequence_run_id(seq: Sequence[str], method: str) -> str:
    return f"seq-{'-'.join(seq)}-{method}"


def run_sequence_models(
    ctx: Context, seq: Sequence[str], method: str, out=None
) -> tuple[list[ModelSnapshot], list[FinetuneTrajectory]]:
    """Fine-tune through ``seq``; stage k starts from, and is regularised towards, stage k-1."""
    plan = ctx.plan
    base_id = sequence_run_id(seq, method)
    models = [ctx.origin]
    trajs = []
    for k, tid in enumerate(seq):
        stage_id = f"{base_id}-s{k + 1}"
        task = merge_tasks([ctx.tasks[t] for t in seq[: k + 1]], task_id="+".join(seq[: k + 1])) if method == "joint" else ctx.tasks[tid]
        # stage 1 starts from the foundation on one task, which is exactly the single-task job
        seed_id = Job(method, tid).run_id if k == 0 else stage_id
        cfg = plan.finetune_config(method, run_id=seed_id).with_(checkpoint_fractions=(1.0,))
        start = models[-1].with_updates(params=models[-1].encoder_params())
        traj = train(plan, start, ctx.embedder, task, cfg, run_id=stage_id)
        if out is not None:
            save_trajectory(out, stage_id, traj)
        models.append(traj.final)
        trajs.append(traj)
    return models, trajs


def _sequence_body(ctx: Context, seq: tuple[str, ...], method: str, out, sink) -> JobResult:
    run_id = sequence_run_id(seq, method)
    records: list[MetricRecord] = []
    rows: list[tuple] = []
    try:
        models, trajs = run_sequence_models(ctx, seq, method, out)
        stages = []
        for k, t in enumerate(trajs):
            st = {"run_id": f"{run_id}-s{k + 1}", "snapshot": str(Path("snapshots") / f"{run_id}-s{k + 1}")}
            if "lambda_selected" in t.extra:
                st[t.extra["lambda_field"]] = t.extra["lambda_selected"]
            stages.append(st)
        for k, (tid, m) in enumerate(zip(seq, models[1:])):
            recs = evaluate_snapshot(ctx, m, f"{run_id}-s{k + 1}", method, tid, 1.0)
            records.extend(recs)
            sink(recs)
        # LP accuracy of every model in the chain on every eval task
        final_lp = {r.eval_dataset_id: r.a_lp for r in records[-len(ctx.plan.eval_task_ids()) :]}
        by_stage = {}
        for r in records:
            by_stage.setdefault(r.eval_dataset_id, []).append(r.a_lp)
        for tid in ctx.plan.eval_task_ids():
            priors = [ctx.baseline(tid)[1], *by_stage[tid][:-1]]
            rows.append(
                (run_id, method, "+".join(seq), tid, int(tid in seq), final_lp[tid], ev.continual_delta(final_lp[tid], priors))
            )
    except Exception as exc:  # noqa: BLE001
        log.error("sequence %s failed: %s", run_id, exc)
        return JobResult(run_id, records, {}, error=f"{type(exc).__name__}: {exc}", extra=rows)
    return JobResult(run_id, records, {"stages": stages}, extra=rows)


def _wiseft_body(ctx: Context, job: Job, out, sink) -> JobResult:
    plan = ctx.plan
    base_id = job.run_id
    run_id = f"{base_id}-wiseft"
    try:
        path = snapshot_path(out, base_id, 1.0)
        if not path.exists():
            raise JobError(f"{base_id} has no final snapshot; run it first")
        final = nets.load_snapshot(path)
        task = ctx.tasks[job.ft_task]
        alpha, mixed, _ = ev.wise_ft_select(ctx.origin, final, task, ctx.embedder, plan.wise_ft_alphas)
        with_recs = evaluate_snapshot(ctx, mixed, run_id, job.method, job.ft_task, 1.0)
        sink(with_recs)
        without = evaluate_snapshot(ctx, final, base_id, job.method, job.ft_task, 1.0)
        others = {t.task_id for t in ev.others(task, [ctx.tasks[i] for i in plan.eval_task_ids()])}
        m_without = float(np.mean([r.delta_lp for r in without if r.eval_dataset_id in others]))
        m_with = float(np.mean([r.delta_lp for r in with_recs if r.eval_dataset_id in others]))
    except Exception as exc:  # noqa: BLE001
        log.error("wise-ft %s failed: %s", run_id, exc)
        return JobResult(run_id, [], {}, error=f"{type(exc).__name__}: {exc}")
    return JobResult(run_id, with_recs, {}, extra=[(base_id, job.method, job.ft_task, alpha, m_without, m_with)])


# worker-process state: the context is rebuilt once per worker from the plan and foundation file
_WORKER: dict = {}


def _worker_init(plan_doc: str, foundation_path: str) -> None:
    plan = ExperimentPlan.from_dict(json.loads(plan_doc))
    _WORKER["ctx"] = Context.build(plan, FoundationModel.load(foundation_path))


def _worker_call(kind: str, payload, out: str) -> JobResult:
    ctx = _WORKER["ctx"]
    body = {"single": _single_body, "sequence": _sequence_body, "wiseft": _wiseft_body}[kind]
    if kind == "sequence":
        return body(ctx, payload[0], payload[1], out, lambda recs: None)
    return body(ctx, payload, out, lambda recs: None)


# -- orchestration -----------------------------------------------------------------------------------


class Runner:
    """Drives plan jobs, writes artifacts under ``out`` and keeps the registry."""

    def __init__(self, plan: ExperimentPlan, out, workers: int = 1, foundation: FoundationModel | None = None):
        self.plan = plan
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.workers = max(1, int(workers))
        self.plan_hash = plan.plan_hash()
        plan_file = self.out / "plan.json"
        if plan_file.exists() and ExperimentPlan.load(plan_file).plan_hash() != self.plan_hash:
            raise PlanError(f"{self.out} holds results of a different plan")
        plan_file.write_text(plan.dumps() + "\n")
        self.foundation = foundation if foundation is not None else load_or_pretrain(plan, self.out)
        if foundation is not None and not (self.out / FOUNDATION_FILE).exists():
            foundation.save(self.out / FOUNDATION_FILE)
        self.registry = RunRegistry(self.out / "registry.jsonl")
        self.metrics_path = self.out / "metrics.csv"
        self._ctx: Context | None = None

    @property
    def ctx(self) -> Context:
        if self._ctx is None:
            self._ctx = Context.build(self.plan, self.foundation)
        return self._ctx

    def existing_keys(self) -> set:
        if not self.metrics_path.exists():
            return set()
        return {r.key() for r in ev.read_records(self.metrics_path)}

    def _append(self, records: Sequence[MetricRecord], seen: set) -> None:
        fresh = [r for r in records if r.key() not in seen]
        if fresh:
            ev.write_records(fresh, self.metrics_path, append=True)
            seen.update(r.key() for r in fresh)

    def _drive(self, kind: str, items: list, run_ids: list[str], configs: list[dict]) -> list[JobResult]:
        done = self.registry.completed()
        todo = [(it, rid, cfg) for it, rid, cfg in zip(items, run_ids, configs) if rid not in done]
        for rid in run_ids:
            if rid in done:
                log.info("skipping completed run %s", rid)
        seen = self.existing_keys()
        results: list[JobResult] = []

        def sink(recs):
            self._append(recs, seen)

        def finish(res: JobResult):
            self._append(res.records, seen)
            status = "failed" if res.error else "completed"
            self.registry.finish(res.run_id, self.plan_hash, res.artifacts, status, res.error)
            results.append(res)

        for _, rid, cfg in todo:
            self.registry.begin(rid, self.plan_hash, cfg)
        if self.workers == 1 or len(todo) <= 1:
            for it, rid, _ in todo:
                ctx = self.ctx
                if kind == "sequence":
                    res = _sequence_body(ctx, it[0], it[1], self.out, sink)
                else:
                    body = _single_body if kind == "single" else _wiseft_body
                    res = body(ctx, it, self.out, sink)
                finish(res)
        else:
            with ProcessPoolExecutor(
                max_workers=self.workers,
                initializer=_worker_init,
                initargs=(self.plan.dumps(), str(self.out / FOUNDATION_FILE)),
            ) as pool:
                futures = [pool.submit(_worker_call, kind, it, str(self.out)) for it, _, _ in todo]
                # results are consumed in submission order so file contents do not depend on scheduling
                for fut in futures:
                    finish(fut.result())
        failed = [r.run_id for r in results if r.error]
        if failed:
            raise JobError(f"{len(failed)} run(s) failed: {', '.join(failed)}")
        return results

    # public verbs

    def run_single(self, jobs: Sequence[Job] | None = None) -> list[JobResult]:
        jobs = list(self.plan.jobs if jobs is None else jobs)
        cfgs = [self.plan.finetune_config(j.method, j.config, run_id=j.run_id).to_dict() for j in jobs]
        return self._drive("single", jobs, [j.run_id for j in jobs], cfgs)

    def run_sequences(self, methods: Sequence[str] | None = None) -> list[JobResult]:
        methods = list(self.plan.sequence_methods if methods is None else methods)
        items = [(tuple(s), m) for s in self.plan.sequences for m in methods]
        ids = [sequence_run_id(s, m) for s, m in items]
        cfgs = [self.plan.finetune_config(m).to_dict() | {"sequence": list(s)} for s, m in items]
        results = self._drive("sequence", items, ids, cfgs)
        self._append_rows(self.out / "sequences.csv", SEQUENCE_COLUMNS, [row for r in results for row in r.extra])
        return results

    def run_wise_ft(self, methods: Sequence[str] | None = None) -> list[JobResult]:
        methods = list(self.plan.wise_ft_methods if methods is None else methods)
        jobs = [j for j in self.plan.jobs if j.method in methods]
        ids = [f"{j.run_id}-wiseft" for j in jobs]
        cfgs = [{"alpha_grid": list(self.plan.wise_ft_alphas), "base_run": j.run_id} for j in jobs]
        results = self._drive("wiseft", jobs, ids, cfgs)
        self._append_rows(self.out / "wiseft.csv", WISEFT_COLUMNS, [row for r in results for row in r.extra])
        return results

    @staticmethod
    def _append_rows(path: Path, columns, rows) -> None:
        new = not path.exists()
        with path.open("a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(columns)
            for row in rows:
                w.writerow([ev.fmt_float(v) if isinstance(v, float) else v for v in row])

    def report(self) -> "Report":
        return write_report(self.plan, self.out)


# -- single-call helpers -------------------------------------------------------------------------------


def run_single_task(ctx: Context, job: Job, out) -> list[MetricRecord]:
    """Fine-tune one job and evaluate every checkpoint on every eval task."""
    res = _single_body(ctx, job, out, lambda recs: None)
    if res.error:
        raise JobError(res.error)
    return res.records


def run_sequence(ctx: Context, seq: Sequence[str], method: str, out=None) -> tuple[list[MetricRecord], list[tuple]]:
    res = _sequence_body(ctx, tuple(seq), method, out, lambda recs: None)
    if res.error:
        raise JobError(res.error)
    return res.records, res.extra


def run_wise_ft_ablation(ctx: Context, job: Job, out) -> tuple[list[MetricRecord], tuple]:
    res = _wiseft_body(ctx, job, out, lambda recs: None)
    if res.error:
        raise JobError(res.error)
    return res.records, res.extra[0]


# -- report ----------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    ft_dataset: str
    method: str
    a_lp_self: float
    mean_delta_lp_others: float
    best: bool


@dataclass
class Report:
    rows: list[ReportRow]

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def datasets(self) -> list[str]:
        return list(dict.fromkeys(r.ft_dataset for r in self.rows))

    def render_text(self, plan_hash: str = "") -> str:
        methods = self.methods()
        cells = {(r.ft_dataset, r.method): r for r in self.rows}
        header = ["ft_dataset"] + methods
        lines = [header]
        for d in self.datasets():
            line = [d]
            for m in methods:
                r = cells.get((d, m))
                line.append("" if r is None else f"{r.a_lp_self:.2f} / {r.mean_delta_lp_others:+.2f}{'*' if r.best else ''}")
            lines.append(line)
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        text = ["A_LP on the fine-tune task / mean delta_LP on other tasks (* best delta per row)"]
        if plan_hash:
            text.append(f"plan {plan_hash}")
        text.append("")
        for row in lines:
            text.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        return "\n".join(text) + "\n"

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ft_dataset", "method", "a_lp_self", "mean_delta_lp_others", "best"])
            for r in self.rows:
                w.writerow([r.ft_dataset, r.method, ev.fmt_float(r.a_lp_self), ev.fmt_float(r.mean_delta_lp_others), int(r.best)])


def write_report(plan: ExperimentPlan, out) -> Report:
    """Summarise ``out/metrics.csv`` into report.txt and report.csv."""
    out = Path(out)
    rep = build_report(ev.read_records(out / "metrics.csv"), plan)
    (out / "report.txt").write_text(rep.render_text(plan.plan_hash()))
    rep.write_csv(out / "report.csv")
    return rep


def build_report(records: Sequence[MetricRecord], plan: ExperimentPlan | None = None) -> Report:
    """Table-1 style summary from the final-checkpoint records of single-task runs.

    With a plan, eval tasks sharing half or more of the fine-tune task's
    concepts are left out of the "others" average.
    """
    finals = [r for r in records if r.checkpoint_fraction == 1.0 and r.run_id.startswith("single-") and not r.run_id.endswith("-wiseft")]
    concepts = {t.task_id: t.concept_ids for t in plan.tasks} if plan is not None else {}
    groups: dict[tuple[str, str], list[MetricRecord]] = {}
    for r in finals:
        groups.setdefault((r.ft_dataset_id, r.method), []).append(r)
    rows = []
    for (ft, method), recs in groups.items():
        selfs = [r.a_lp for r in recs if r.eval_dataset_id == ft]
        oth = [
            r.delta_lp
            for r in recs
            if r.eval_dataset_id != ft
            and (not concepts or ev.concept_overlap(concepts[ft], concepts[r.eval_dataset_id]) < 0.5)
        ]
        rows.append(
            ReportRow(ft, method, selfs[0] if selfs else float("nan"), float(np.mean(oth)) if oth else float("nan"), False)
        )
    best: dict[str, float] = {}
    for r in rows:
        if not np.isnan(r.mean_delta_lp_others):
            best[r.ft_dataset] = max(best.get(r.ft_dataset, -np.inf), r.mean_delta_lp_others)
    rows = [
        ReportRow(r.ft_dataset, r.method, r.a_lp_self, r.mean_delta_lp_others, r.mean_delta_lp_others == best.get(r.ft_dataset))
        for r in rows
    ]
    return Report(rows)


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
