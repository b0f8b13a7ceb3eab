"""Online distillation pipeline.

One teacher trains continuously on the stream, publishes soft labels for
selected tasks into the columnar store, and a fleet of students trains on
the same stream consuming those labels through per-step snapshots. Students
never touch each other's state; a student's trajectory depends only on its
own init, the stream, and the store bytes, so adding or removing fleet
members (or changing the thread count) cannot change anyone else's params.

Per step t:
  1. draw batch_t from the stream
  2. teacher takes one gradient step on batch_t hard labels unless frozen
  3. on write steps, teacher infers on batch_{t-D} (D = label_delay) and
     appends one segment; a frozen teacher keeps writing (stale) labels
  4. open one snapshot, shared by every student this step
  5. students train on batch_t: hard labels plus whatever soft labels the
     snapshot covers (coverage < 1 when D > 0 or writes are throttled)

A segment's teacher_version is the teacher's optimizer step count at the
write.
"""

from __future__ import annotations

import csv
import hashlib
import struct
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Batch, GenConfig, WorldState, fork, init_world, next_batch, true_task_value
from .errors import ConfigError, SchemaError
from .labelstore import LabelStore, Snapshot
from .metrics import (
    OnlineSimConfig,
    calibration_ratio,
    draw_slates,
    policy_metrics,
    rank_auc,
    rmse,
)
from .nncore import TrainConfig
from .ranker import (
    AUXILIARY,
    BINARY,
    DIRECT,
    MODES,
    NO_DISTILL,
    PET,
    PST,
    ModelConfig,
    ModelOptimizer,
    RankingModel,
    SoftTargets,
    apply_gradients,
    build_model,
    compute_loss_and_grads,
    model_forward,
)

CSV_HEADER = ("step", "job", "task", "metric", "value", "lo", "hi")
JOB_LEVEL_TASK = "-"


def _domain(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def model_init_rng(seed: int, job_name: str) -> np.random.Generator:
    """Init generator keyed by (seed, job name) only, so a job's starting
    params never depend on which other jobs share the run."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, _domain("model-init"), _domain(job_name)])
    )


# ---------------------------------------------------------------------------
# metric rows


@dataclass
class MetricRow:
    step: int
    job: str
    task: str
    metric: str
    value: float
    lo: float | None = None
    hi: float | None = None


class MetricsLog:
    def __init__(self, rows: list[MetricRow] | None = None):
        self.rows: list[MetricRow] = rows if rows is not None else []

    def add(self, step, job, task, metric, value, lo=None, hi=None) -> None:
        self.rows.append(MetricRow(step, job, task, metric, float(value), lo, hi))

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def select(self, *, job=None, task=None, metric=None, step=None) -> list[MetricRow]:
        out = []
        for r in self.rows:
            if job is not None and r.job != job:
                continue
            if task is not None and r.task != task:
                continue
            if metric is not None and r.metric != metric:
                continue
            if step is not None and r.step != step:
                continue
            out.append(r)
        return out

    def value(self, *, job, metric, task=JOB_LEVEL_TASK, step=None) -> float:
        rows = self.select(job=job, task=task, metric=metric, step=step)
        if len(rows) != 1:
            raise KeyError(
                f"expected one row for job={job} task={task} metric={metric} "
                f"step={step}, found {len(rows)}"
            )
        return rows[0].value

    def last_step(self) -> int:
        if not self.rows:
            raise ValueError("no metric rows")
        return max(r.step for r in self.rows)


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(
                [
                    r.step,
                    r.job,
                    r.task,
                    r.metric,
                    repr(r.value),
                    "" if r.lo is None else repr(r.lo),
                    "" if r.hi is None else repr(r.hi),
                ]
            )


def read_metrics_csv(path) -> list[MetricRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise SchemaError(
                f"{path}: expected header {','.join(CSV_HEADER)}, "
                f"got {','.join(header) if header else '<empty>'}"
            )
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(CSV_HEADER):
                raise SchemaError(f"{path}:{line_no}: wrong column count")
            step, job, task, metric, value, lo, hi = rec
            rows.append(
                MetricRow(
                    int(step),
                    job,
                    task,
                    metric,
                    float(value),
                    float(lo) if lo else None,
                    float(hi) if hi else None,
                )
            )
    return rows


# ---------------------------------------------------------------------------
# jobs


@dataclass
class TeacherJob:
    """The continuously trained writer job."""

    name: str
    model: RankingModel
    opt: ModelOptimizer
    train: TrainConfig
    write_tasks: tuple[str, ...]
    write_every: int = 1
    label_delay: int = 0
    freeze_at: int | None = None
    bias: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        names = {t.name for t in self.model.tasks}
        for task in self.write_tasks:
            if task not in names:
                raise ConfigError(f"write task {task!r} not in model tasks")
        for task in self.bias:
            spec = self.model.config.task(task)
            if spec.kind == BINARY:
                raise ConfigError(
                    f"label bias is multiplicative and only fits regression "
                    f"tasks, not {task!r}"
                )
        if self.write_every < 1:
            raise ConfigError("write_every must be >= 1")
        if self.label_delay < 0:
            raise ConfigError("label_delay must be >= 0")

    @property
    def version(self) -> int:
        """Teacher version written into segments: its update count."""
        return self.opt.trunk.step


@dataclass
class StudentJob:
    name: str
    model: RankingModel
    opt: ModelOptimizer
    train: TrainConfig
    alpha: dict[str, float] = field(default_factory=dict)
    temperature: float = 1.0

    def __post_init__(self) -> None:
        distilled = set(self.model.config.distill_tasks)
        for task in self.alpha:
            if task not in distilled:
                raise ConfigError(f"alpha set for non-distilled task {task!r}")

    @property
    def distill_tasks(self) -> tuple[str, ...]:
        return self.model.config.distill_tasks

    def alpha_for(self, task: str) -> float:
        return self.alpha.get(task, 1.0)


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    batch_size: int = 256
    eval_every: int = 200  # 0 means final eval only
    eval_batches: int = 4
    online_sim: OnlineSimConfig | None = None
    online_sim_every: int = 0  # 0 means final eval point only
    durable_store: bool = False

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eval_every < 0 or self.eval_batches < 1:
            raise ConfigError("bad eval schedule")


# ---------------------------------------------------------------------------
# core loop


def _teacher_write(teacher: TeacherJob, writer, batch: Batch) -> None:
    preds = model_forward(
        teacher.model, batch.x, clip=teacher.train.activation_clip, job=teacher.name
    )
    values = {}
    for name in teacher.write_tasks:
        kind = teacher.model.config.task(name).kind
        col = preds.prob(name) if kind == BINARY else preds.value(name)
        values[name] = col.astype(np.float32)
    writer.append(batch.example_ids, values, teacher_version=teacher.version)


def _teacher_train(teacher: TeacherJob, batch: Batch, t: int) -> None:
    if teacher.freeze_at is not None and t >= teacher.freeze_at:
        return
    labels = dict(batch.labels)
    for task, factor in teacher.bias.items():
        labels[task] = labels[task] * factor
    _, grads, _ = compute_loss_and_grads(
        teacher.model,
        batch.x,
        labels,
        clip=teacher.train.activation_clip,
        job=teacher.name,
    )
    apply_gradients(teacher.model, grads, teacher.opt, teacher.train, job=teacher.name)


def _soft_targets_for(
    student: StudentJob, snapshot: Snapshot, batch: Batch
) -> tuple[dict[str, SoftTargets], float, np.ndarray, dict[str, np.ndarray]]:
    n = batch.n
    stored = set(snapshot.task_names)
    if snapshot.segments:
        present, values = snapshot.lookup_batch(batch.example_ids)
    else:
        present, values = np.zeros(n, dtype=bool), {}
    soft: dict[str, SoftTargets] = {}
    for task in student.distill_tasks:
        if task in stored:
            soft[task] = SoftTargets(
                values=values[task].astype(np.float64), present=present.copy()
            )
        else:
            soft[task] = SoftTargets(
                values=np.zeros(n), present=np.zeros(n, dtype=bool)
            )
    return soft, float(present.mean()) if n else 0.0, present, values


def _student_step(
    student: StudentJob, batch: Batch, snapshot: Snapshot
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    if not student.distill_tasks:
        _, grads, _ = compute_loss_and_grads(
            student.model,
            batch.x,
            batch.labels,
            clip=student.train.activation_clip,
            job=student.name,
        )
        apply_gradients(student.model, grads, student.opt, student.train, job=student.name)
        return 0.0, np.zeros(0, dtype=bool), {}
    soft, coverage, present, values = _soft_targets_for(student, snapshot, batch)
    alpha = {task: student.alpha_for(task) for task in student.distill_tasks}
    _, grads, _ = compute_loss_and_grads(
        student.model,
        batch.x,
        batch.labels,
        soft_labels=soft,
        alpha=alpha,
        clip=student.train.activation_clip,
        temperature=student.temperature,
        job=student.name,
    )
    apply_gradients(student.model, grads, student.opt, student.train, job=student.name)
    return coverage, present, values


def _eval_point(
    log: MetricsLog,
    step: int,
    eval_idx: int,
    world: WorldState,
    teacher: TeacherJob,
    students: list[StudentJob],
    sched: ScheduleConfig,
    run_online_sim: bool,
) -> None:
    ev = fork(world, "eval", eval_idx)
    batches = [next_batch(ev, sched.batch_size) for _ in range(sched.eval_batches)]
    x = np.concatenate([b.x for b in batches])
    hard = {
        t.name: np.concatenate([b.labels[t.name] for b in batches])
        for t in world.config.tasks
    }
    true_reg = {
        t.name: true_task_value(ev, x, t.name)
        for t in world.config.tasks
        if t.kind != BINARY
    }
    jobs: list[tuple[str, RankingModel, TrainConfig]] = [
        (teacher.name, teacher.model, teacher.train)
    ]
    jobs += [(s.name, s.model, s.train) for s in students]
    for name, model, train in jobs:
        preds = model_forward(model, x, clip=train.activation_clip, job=name)
        for spec in model.tasks:
            if spec.kind == BINARY:
                log.add(step, name, spec.name, "auc",
                        rank_auc(preds.hard_logits[spec.name], hard[spec.name]))
                log.add(step, name, spec.name, "calibration",
                        calibration_ratio(preds.prob(spec.name), hard[spec.name]))
            else:
                value = preds.value(spec.name)
                log.add(step, name, spec.name, "rmse", rmse(value, hard[spec.name]))
                log.add(step, name, spec.name, "rmse_true",
                        rmse(value, true_reg[spec.name]))
                log.add(step, name, spec.name, "calibration",
                        calibration_ratio(value, hard[spec.name]))
    log.add(step, teacher.name, JOB_LEVEL_TASK, "teacher_version", teacher.version)
    if run_online_sim and sched.online_sim is not None:
        sim = sched.online_sim
        slates = draw_slates(ev, sim, world.derive_rng("slates", eval_idx))
        flat = slates.x.reshape(-1, world.config.feature_dim)
        shape = slates.true_policy.shape
        for name, model, train in jobs:
            preds = model_forward(model, flat, clip=train.activation_clip, job=name)
            kind = model.config.task(sim.policy_task).kind
            scores = (
                preds.prob(sim.policy_task)
                if kind == BINARY
                else preds.value(sim.policy_task)
            )
            engagement, satisfaction = policy_metrics(slates, scores.reshape(shape))
            log.add(step, name, JOB_LEVEL_TASK, "engagement", engagement)
            log.add(step, name, JOB_LEVEL_TASK, "satisfaction", satisfaction)


def run_online(
    world: WorldState,
    teacher: TeacherJob,
    students: list[StudentJob],
    sched: ScheduleConfig,
    store_root,
    *,
    threads: int = 1,
    soft_collector=None,
) -> MetricsLog:
    """Drive the full loop; returns the metrics log.

    threads parallelizes the student updates within a step (results are
    bit-identical to the sequential order). soft_collector, when given, is
    called per student per step with (step, student name, manifest_version,
    present mask, value columns) for consistency auditing.
    """
    names = [teacher.name] + [s.name for s in students]
    if len(set(names)) != len(names):
        raise ConfigError("job names must be unique")
    store_root = Path(store_root)
    store_root.mkdir(parents=True, exist_ok=True)
    store = LabelStore(store_root)
    log = MetricsLog()
    pending: dict[int, Batch] = {}  # recent batches awaiting delayed writes
    cov_sum = {s.name: 0.0 for s in students}
    cov_n = {s.name: 0 for s in students}
    eval_idx = 0
    pool = (
        ThreadPoolExecutor(max_workers=threads)
        if threads > 1 and len(students) > 1
        else None
    )
    task_specs = {t.name: t for t in teacher.model.tasks}
    write_schema = [task_specs[n] for n in teacher.write_tasks]
    writer_cm = (
        store.writer(write_schema, durable=sched.durable_store)
        if teacher.write_tasks
        else None
    )
    try:
        writer = writer_cm.__enter__() if writer_cm is not None else None
        for t in range(sched.total_steps):
            batch = next_batch(world, sched.batch_size)
            pending[t] = batch
            _teacher_train(teacher, batch, t)
            src = t - teacher.label_delay
            if writer is not None and src >= 0 and t % teacher.write_every == 0:
                _teacher_write(teacher, writer, pending[src])
            for old in [k for k in pending if k <= src]:
                del pending[old]
            snapshot = store.open_snapshot()

            def train_one(student: StudentJob):
                coverage, present, values = _student_step(student, batch, snapshot)
                if student.distill_tasks:
                    cov_sum[student.name] += coverage
                    cov_n[student.name] += 1
                    if soft_collector is not None:
                        soft_collector(
                            t, student.name, snapshot.manifest_version, present, values
                        )

            if pool is not None:
                list(pool.map(train_one, students))
            else:
                for s in students:
                    train_one(s)
            final = t == sched.total_steps - 1
            periodic = sched.eval_every > 0 and (t + 1) % sched.eval_every == 0
            if final or periodic:
                eval_idx += 1
                sim_due = sched.online_sim is not None and (
                    final
                    or (
                        sched.online_sim_every > 0
                        and eval_idx % sched.online_sim_every == 0
                    )
                )
                _eval_point(log, t + 1, eval_idx, world, teacher, students, sched, sim_due)
                for s in students:
                    if s.distill_tasks and cov_n[s.name]:
                        log.add(
                            t + 1, s.name, JOB_LEVEL_TASK, "coverage",
                            cov_sum[s.name] / cov_n[s.name],
                        )
                        cov_sum[s.name] = 0.0
                        cov_n[s.name] = 0
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
        if writer_cm is not None:
            writer_cm.__exit__(None, None, None)
    return log


# ---------------------------------------------------------------------------
# fleet consistency audit


@dataclass
class ConsistencyReport:
    ok: bool
    steps: int
    fleet_size: int
    segments_committed: int
    violations: list[str] = field(default_factory=list)
    mean_coverage: float = 0.0


def run_fleet_consistency(
    world: WorldState,
    teacher: TeacherJob,
    students: list[StudentJob],
    sched: ScheduleConfig,
    store_root,
    *,
    threads: int = 1,
) -> ConsistencyReport:
    """Run the loop with k students and audit that every student consumed
    byte-identical soft labels at every step (same manifest version, same
    present mask, same float32 columns)."""
    if len(students) < 2:
        raise ConfigError("consistency audit needs at least 2 students")
    digests: dict[int, dict[str, str]] = {}
    lock = threading.Lock()

    def collector(t, name, manifest_version, present, values):
        h = hashlib.sha256()
        h.update(struct.pack("<Q", manifest_version))
        h.update(present.astype(np.uint8).tobytes())
        for task in sorted(values):
            h.update(task.encode("utf-8"))
            h.update(np.ascontiguousarray(values[task], dtype="<f4").tobytes())
        digest = h.hexdigest()
        with lock:
            digests.setdefault(t, {})[name] = digest

    log = run_online(
        world, teacher, students, sched, store_root,
        threads=threads, soft_collector=collector,
    )
    violations = []
    for t in range(sched.total_steps):
        per_student = digests.get(t, {})
        if len(per_student) != len(students):
            violations.append(f"step {t}: {len(per_student)} of {len(students)} students reported")
            continue
        if len(set(per_student.values())) != 1:
            violations.append(f"step {t}: digests diverge {sorted(per_student.items())}")
    snapshot = LabelStore(store_root).open_snapshot()
    cov_rows = [r for r in log.rows if r.metric == "coverage"]
    mean_cov = float(np.mean([r.value for r in cov_rows])) if cov_rows else 0.0
    return ConsistencyReport(
        ok=not violations,
        steps=sched.total_steps,
        fleet_size=len(students),
        segments_committed=len(snapshot.segments),
        violations=violations,
        mean_coverage=mean_cov,
    )


# ---------------------------------------------------------------------------
# experiment families


FAMILY_DISTILL = "distill-strategy"
FAMILY_SCALE = "teacher-scale"
FAMILY_OBJECTIVE = "objective-selection"
FAMILY_CUSTOM = "custom"
FAMILIES = (FAMILY_DISTILL, FAMILY_SCALE, FAMILY_OBJECTIVE, FAMILY_CUSTOM)

CONTROL_NAME = "control"


@dataclass
class StudentDef:
    name: str
    mode: str = NO_DISTILL
    distill: tuple[str, ...] = ()
    alpha: dict[str, float] = field(default_factory=dict)
    scale: int = 1

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown student mode {self.mode!r}")
        if self.mode == NO_DISTILL and self.distill:
            raise ConfigError(f"student {self.name!r}: distill tasks without a distill mode")
        if self.mode != NO_DISTILL and not self.distill:
            raise ConfigError(f"student {self.name!r}: distill mode without distill tasks")


@dataclass
class TeacherDef:
    name: str = "teacher"
    scale: int = 2
    write_tasks: tuple[str, ...] = ()
    bias: dict[str, float] = field(default_factory=dict)
    freeze_at: int | None = None


@dataclass
class RunDef:
    run_id: str
    teacher: TeacherDef
    students: list[StudentDef]


@dataclass
class ExperimentConfig:
    family: str
    seeds: tuple[int, ...]
    gen: GenConfig
    schedule: ScheduleConfig
    teacher_trunk: tuple[int, ...] = (48, 24)
    student_trunk: tuple[int, ...] = (32, 16)
    tower_widths: tuple[int, ...] = (12,)
    teacher_train: TrainConfig = field(default_factory=TrainConfig)
    student_train: TrainConfig = field(default_factory=TrainConfig)
    teacher_scale: int = 2
    teacher_scales: tuple[int, ...] = (1, 2, 4)
    distill_tasks: tuple[str, ...] = ("ctr",)
    distill_mode: str = AUXILIARY
    alpha: dict[str, float] = field(default_factory=dict)
    bias: dict[str, float] = field(default_factory=dict)
    freeze_at: int | None = None
    label_delay: int = 0
    write_every: int = 1
    students: tuple[StudentDef, ...] = ()

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; pick one of {FAMILIES}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("duplicate seeds")
        names = {t.name for t in self.gen.tasks}
        for task in self.distill_tasks:
            if task not in names:
                raise ConfigError(f"distill task {task!r} not generated by the stream")
        for task in list(self.alpha) + list(self.bias):
            if task not in names:
                raise ConfigError(f"unknown task {task!r} in alpha/bias")
        if self.distill_mode not in (DIRECT, AUXILIARY):
            raise ConfigError("distill_mode must be a distillation mode")


def _alpha_map(cfg: ExperimentConfig, tasks: tuple[str, ...]) -> dict[str, float]:
    return {t: cfg.alpha.get(t, 1.0) for t in tasks}


def build_runs(cfg: ExperimentConfig) -> list[RunDef]:
    """Expand a family into concrete runs (teacher + student set per run)."""
    if cfg.family == FAMILY_DISTILL:
        teacher = TeacherDef(
            "teacher", cfg.teacher_scale, cfg.distill_tasks, dict(cfg.bias), cfg.freeze_at
        )
        students = [
            StudentDef(CONTROL_NAME),
            StudentDef("direct", DIRECT, cfg.distill_tasks, _alpha_map(cfg, cfg.distill_tasks)),
            StudentDef("auxiliary", AUXILIARY, cfg.distill_tasks, _alpha_map(cfg, cfg.distill_tasks)),
        ]
        return [RunDef("main", teacher, students)]
    if cfg.family == FAMILY_SCALE:
        runs = []
        base = min(cfg.teacher_scales)
        for scale in cfg.teacher_scales:
            students = [
                StudentDef(
                    f"student-{scale}x",
                    cfg.distill_mode,
                    cfg.distill_tasks,
                    _alpha_map(cfg, cfg.distill_tasks),
                )
            ]
            if scale == base:
                students.insert(0, StudentDef(CONTROL_NAME))
            teacher = TeacherDef(f"teacher-{scale}x", scale, cfg.distill_tasks)
            runs.append(RunDef(f"t{scale}x", teacher, students))
        return runs
    if cfg.family == FAMILY_OBJECTIVE:
        all_tasks = tuple(t.name for t in cfg.gen.tasks)
        pet = tuple(t.name for t in cfg.gen.tasks if t.category == PET)
        pst = tuple(t.name for t in cfg.gen.tasks if t.category == PST)
        if not pet or not pst:
            raise ConfigError("objective-selection needs PET and PST tasks in the stream")
        teacher = TeacherDef("teacher", cfg.teacher_scale, all_tasks)
        mode = cfg.distill_mode
        students = [
            StudentDef(CONTROL_NAME),
            StudentDef("pet", mode, pet, _alpha_map(cfg, pet)),
            StudentDef("pet-pst", mode, pet + pst, _alpha_map(cfg, pet + pst)),
            StudentDef("pet-pst-others", mode, all_tasks, _alpha_map(cfg, all_tasks)),
        ]
        return [RunDef("main", teacher, students)]
    # custom: explicit students, one run
    if not cfg.students:
        raise ConfigError("custom family needs an explicit students list")
    write = cfg.distill_tasks or tuple(
        sorted({t for s in cfg.students for t in s.distill})
    )
    teacher = TeacherDef("teacher", cfg.teacher_scale, write, dict(cfg.bias), cfg.freeze_at)
    return [RunDef("main", teacher, list(cfg.students))]


def _scaled(widths: tuple[int, ...], scale: int) -> tuple[int, ...]:
    if scale < 1:
        raise ConfigError("width multiplier must be >= 1")
    return tuple(w * scale for w in widths)


def make_teacher_job(cfg: ExperimentConfig, tdef: TeacherDef, seed: int) -> TeacherJob:
    mc = ModelConfig(
        feature_dim=cfg.gen.feature_dim,
        trunk_widths=_scaled(cfg.teacher_trunk, tdef.scale),
        tower_widths=cfg.tower_widths,
        tasks=cfg.gen.tasks,
        mode=NO_DISTILL,
    )
    model = build_model(mc, model_init_rng(seed, tdef.name))
    return TeacherJob(
        name=tdef.name,
        model=model,
        opt=ModelOptimizer.for_model(model),
        train=cfg.teacher_train,
        write_tasks=tuple(tdef.write_tasks),
        write_every=cfg.write_every,
        label_delay=cfg.label_delay,
        freeze_at=tdef.freeze_at,
        bias=dict(tdef.bias),
    )


def make_student_job(cfg: ExperimentConfig, sdef: StudentDef, seed: int) -> StudentJob:
    mc = ModelConfig(
        feature_dim=cfg.gen.feature_dim,
        trunk_widths=_scaled(cfg.student_trunk, sdef.scale),
        tower_widths=cfg.tower_widths,
        tasks=cfg.gen.tasks,
        mode=sdef.mode,
        distill_tasks=tuple(sdef.distill),
    )
    model = build_model(mc, model_init_rng(seed, sdef.name))
    return StudentJob(
        name=sdef.name,
        model=model,
        opt=ModelOptimizer.for_model(model),
        train=cfg.student_train,
        alpha=dict(sdef.alpha),
    )


def seed_job_name(seed: int, job: str) -> str:
    return f"s{seed}/{job}"


def split_job_name(job: str) -> tuple[int, str]:
    prefix, _, rest = job.partition("/")
    if not prefix.startswith("s") or not rest:
        raise ValueError(f"job name {job!r} lacks the s<seed>/ prefix")
    return int(prefix[1:]), rest


def run_experiment(
    cfg: ExperimentConfig, work_dir, *, threads: int = 1, progress=None
) -> MetricsLog:
    """Execute family runs for every seed; returns the combined log with
    jobs renamed to s<seed>/<job>. threads parallelizes (seed, run) cells."""
    work_dir = Path(work_dir)
    runs = build_runs(cfg)
    cells = [(seed, run) for seed in cfg.seeds for run in runs]

    def exec_cell(cell) -> list[MetricRow]:
        seed, run = cell
        world = init_world(cfg.gen, seed)
        teacher = make_teacher_job(cfg, run.teacher, seed)
        students = [make_student_job(cfg, sdef, seed) for sdef in run.students]
        store_root = work_dir / f"{run.run_id}-s{seed}"
        log = run_online(world, teacher, students, cfg.schedule, store_root)
        if progress is not None:
            progress(f"finished run {run.run_id} seed {seed}")
        for r in log.rows:
            r.job = seed_job_name(seed, r.job)
        return log.rows

    rows: list[MetricRow] = []
    if threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for chunk in pool.map(exec_cell, cells):
                rows.extend(chunk)
    else:
        for cell in cells:
            rows.extend(exec_cell(cell))
    rows.sort(key=lambda r: (r.step, r.job, r.task, r.metric))
    return MetricsLog(rows)
