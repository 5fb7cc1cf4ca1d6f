"""Reproducible experiment runner for the three training modes.

Two substrates run the same scenarios:

- ``virtual``: every node lives in one process on a discrete-event clock.
  Teacher service, student compute and the scheduler run as timed events
  while the training math itself is executed for real, so runs are fully
  deterministic and fast enough for long stability sweeps.
- ``process``: coordinator, teachers and students are spawned as real OS
  processes over loopback sockets; faults are injected by SIGKILL with no
  chance for a graceful goodbye. Used for the integration and fail-over
  acceptance runs.

A Scenario describes mode, cluster shape, simulated delays, dataset,
training config and a fault schedule; a RunReport carries the measured
series plus final accuracy. Mode N_TRAINING trains on hard labels only,
ONLINE serializes teacher inference and the training step on one worker
(per-step latency d_t + d_s), EDL_DIST runs the full decoupled pipeline.
"""

from __future__ import annotations

import csv
import heapq
import json
import os
import signal
import subprocess
import sys
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nnkit
from .allreduce import ring_reduce_values
from .coordinator import Registry, RegistryConfig
from .nnkit import SoftLabelBatch, TrainConfig
from .runtime import FakeClock
from .student_node import (
    DataSpec, REQUEST_ADDITIONAL_TEACHER, SchedulerConfig, ShardSampler,
    ThroughputProfile, pick_teacher, scheduler_tick, static_schedule,
)

N_TRAINING = "N_TRAINING"
ONLINE = "ONLINE"
EDL_DIST = "EDL_DIST"
MODES = (N_TRAINING, ONLINE, EDL_DIST)


@dataclass(frozen=True)
class FaultEvent:
    action: str               # "kill" | "add"
    node: str                 # "t3" or "student-1"
    time: float | None = None
    iteration: int | None = None

    def __post_init__(self):
        if self.action not in ("kill", "add"):
            raise ValueError(f"unknown action {self.action!r}")
        if (self.time is None) == (self.iteration is None):
            raise ValueError("exactly one of time/iteration must be set")
        if self.time is not None and self.time < 0:
            raise ValueError("event time must be >= 0")

    @property
    def is_student(self) -> bool:
        return self.node.startswith("student-")


@dataclass(frozen=True)
class Scenario:
    mode: str = EDL_DIST
    substrate: str = "virtual"
    students: int = 1
    teachers: int = 1                 # initial pool size
    d_s: float = 0.01                 # simulated seconds per student step
    d_t: float = 0.01                 # simulated seconds per teacher batch
    teacher_speed_range: tuple[float, float] = (1.0, 1.0)
    data: DataSpec = field(default_factory=DataSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        eta=0.05, alpha=0.5, beta=0.5, temperature=2.0, batch_size=32, seed=0))
    sched: SchedulerConfig = field(default_factory=SchedulerConfig)
    teacher_count: int | str = "auto"  # n_static per student
    epochs: int = 1
    max_steps: int | None = None       # optional cap below the epoch budget
    teacher_hidden: tuple[int, ...] = (32,)
    teacher_pretrain_epochs: int = 3
    student_hidden: tuple[int, ...] = (64,)
    teacher_path: bool = True          # False: beta=0 run with dispatch disabled
    events: tuple[FaultEvent, ...] = ()
    checkpoint_interval: int = 100
    seed: int = 0                      # harness rng (teacher speed draws)
    deadline: float = 300.0            # watchdog, wall or virtual seconds

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.substrate not in ("virtual", "process"):
            raise ValueError("substrate must be virtual or process")
        if self.d_s < 0 or self.d_t < 0:
            raise ValueError("delays must be >= 0")
        if self.students < 1 or self.teachers < 0:
            raise ValueError("need >= 1 student and >= 0 teachers")
        times = [e.time for e in self.events if e.time is not None]
        if times != sorted(times):
            raise ValueError("timed fault events must be non-decreasing")
        if self.substrate == "virtual" and any(e.is_student for e in self.events):
            raise ValueError("student kill/add events need the process substrate")

    def total_steps(self, bpe: int) -> int:
        steps = self.epochs * bpe
        return min(steps, self.max_steps) if self.max_steps else steps

    def n_static(self) -> int:
        if self.teacher_count == "auto":
            if self.d_s == 0:
                return 1
            profile = ThroughputProfile(t_s=1.0 / self.d_s,
                                        t_t=1.0 / max(self.d_t, 1e-12))
            return static_schedule(profile)
        return int(self.teacher_count)

    def to_json(self) -> str:
        doc = asdict(self)
        doc["data"] = asdict(self.data)
        doc["train"] = asdict(self.train)
        doc["sched"] = asdict(self.sched)
        doc["events"] = [ {k: v for k, v in asdict(e).items() if v is not None}
                          for e in self.events ]
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        doc = json.loads(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        if "data" in doc:
            doc["data"] = DataSpec(**doc["data"])
        if "train" in doc:
            doc["train"] = TrainConfig(**doc["train"])
        if "sched" in doc:
            doc["sched"] = SchedulerConfig(**doc["sched"])
        if "events" in doc:
            doc["events"] = tuple(FaultEvent(**e) for e in doc["events"])
        for key in ("teacher_speed_range", "teacher_hidden", "student_hidden"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclass
class RunReport:
    mode: str
    substrate: str
    students: int
    iterations: int
    throughput_series: list[tuple[float, float]]      # (t, images/s)
    volume_series: list[tuple[float, int]]            # (t, total buffered)
    teacher_count_series: list[tuple[float, int]]     # (t, assigned teachers)
    final_top1: float
    final_top5: float
    wall_clock_total: float
    overall_throughput: float                         # images/s, whole run
    backlog_estimate: float                           # mean of volume + teachers
    starved: bool = False
    restarts: int = 0
    ledgers: list[dict] = field(default_factory=list)
    max_volume: int = 0
    inflight_capacity: int = 0
    final_params: bytes = b""

    def summary(self) -> str:
        lines = [
            f"mode={self.mode} substrate={self.substrate} students={self.students}",
            f"iterations={self.iterations} restarts={self.restarts} starved={self.starved}",
            f"throughput={self.overall_throughput:.2f} images/s "
            f"wall_clock={self.wall_clock_total:.2f}s",
            f"top1={self.final_top1:.4f} top5={self.final_top5:.4f}",
            f"backlog_estimate={self.backlog_estimate:.3f} "
            f"max_volume={self.max_volume} inflight_capacity={self.inflight_capacity}",
        ]
        return "\n".join(lines)


def build_teacher_model(scenario: Scenario) -> nnkit.Model:
    """Deterministic over-provisioned teacher for the scenario's dataset."""
    data = scenario.data.build()
    cfg = TrainConfig(eta=0.1, alpha=1.0, beta=0.0,
                      temperature=scenario.train.temperature,
                      batch_size=scenario.train.batch_size,
                      seed=scenario.train.seed)
    return nnkit.pretrain_teacher(data, cfg, scenario.teacher_pretrain_epochs,
                                  hidden=scenario.teacher_hidden)


# ---------------------------------------------------------------------------
# Virtual-clock substrate


class _VTeacher:
    __slots__ = ("node_id", "service_time", "queue", "in_service", "owner", "dead")

    def __init__(self, node_id: str, service_time: float):
        self.node_id = node_id
        self.service_time = service_time
        self.queue: deque = deque()
        self.in_service = None     # (student_idx, iteration) or None
        self.owner: int | None = None
        self.dead = False

    def outstanding(self) -> int:
        return len(self.queue) + (1 if self.in_service else 0)


class _VStudent:
    def __init__(self, idx: int, sampler: ShardSampler, model: nnkit.Model):
        self.idx = idx
        self.sampler = sampler
        self.model = model
        self.ready: set[int] = set()
        self.pending: deque = deque()
        self.next_new = 0
        self.sending_enabled = True
        self.last_acquire = -float("inf")
        self.teachers: dict[str, _VTeacher] = {}
        self.state = "idle"
        self.current = 0
        self.max_volume = 0

    @property
    def volume(self) -> int:
        return len(self.ready)

    def have_work(self, end: int) -> bool:
        return bool(self.pending) or self.next_new < end


class VirtualCluster:
    """Deterministic discrete-event engine running the real training math."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.rng = np.random.default_rng(
            np.random.SeedSequence([scenario.seed, 0x51D]))
        self.data = scenario.data.build()
        self.eval_set = scenario.data.build_eval()
        self.heap: list = []
        self._seq = 0
        self.now = 0.0
        self.starved = False
        classes = int(self.data.labels.max()) + 1
        dims = (self.data.dim, *scenario.student_hidden, classes)
        self.students = [
            _VStudent(i, ShardSampler(self.data, scenario.students, i,
                                      scenario.train.batch_size,
                                      scenario.train.seed),
                      nnkit.init_model(dims, scenario.train.seed))
            for i in range(scenario.students)
        ]
        self.total = scenario.total_steps(self.students[0].sampler.batches_per_epoch)
        self.train_cfg = scenario.train
        self.use_soft = scenario.mode != N_TRAINING and scenario.teacher_path \
            and scenario.train.beta > 0
        if not self.use_soft:
            t = scenario.train
            self.train_cfg = TrainConfig(eta=t.eta, alpha=t.alpha, beta=0.0,
                                         temperature=t.temperature,
                                         batch_size=t.batch_size, seed=t.seed)
        self.teacher_model = build_teacher_model(scenario) if self.use_soft else None
        # registry reused for acquire ordering + exclusivity semantics
        self.registry = Registry(RegistryConfig(ttl=1e9, sweep_interval=1.0),
                                 FakeClock())
        self.pool: dict[str, _VTeacher] = {}
        self._teacher_seq = 0
        self.barrier: dict[int, int] = {}
        self.commits = 0
        self.last_commit_time = 0.0
        self.samples: list[tuple[float, int, int]] = []   # (t, volume, teachers)
        self.commit_times: list[float] = []
        self.loss_trace: list[float] = []

    # -- event plumbing ----------------------------------------------------

    def _push(self, t: float, kind: str, data) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (t, self._seq, kind, data))

    # -- teachers ------------------------------------------------------------

    def _spawn_teacher(self, node_id: str | None = None) -> str:
        self._teacher_seq += 1
        nid = node_id or f"t{self._teacher_seq}"
        lo, hi = self.sc.teacher_speed_range
        speed = float(self.rng.uniform(lo, hi)) if hi > lo else lo
        service = self.sc.d_t / max(speed, 1e-9)
        self.pool[nid] = _VTeacher(nid, service)
        self.registry.register(nid, f"virtual:{nid}")
        return nid

    def _acquire(self, s: _VStudent, count: int) -> int:
        s.last_acquire = self.now
        granted = self.registry.acquire_teachers(f"student-{s.idx}", count)
        for rec in granted:
            teacher = self.pool[rec["node_id"]]
            teacher.owner = s.idx
            s.teachers[teacher.node_id] = teacher
        return len(granted)

    def _kill_teacher(self, nid: str) -> None:
        teacher = self.pool.get(nid)
        if teacher is None or teacher.dead:
            return
        teacher.dead = True
        unanswered = [it for (_, it) in
                      ([teacher.in_service] if teacher.in_service else [])
                      + list(teacher.queue)]
        teacher.queue.clear()
        teacher.in_service = None
        owner = self.students[teacher.owner] if teacher.owner is not None else None
        try:
            self.registry.report_failure(
                f"student-{teacher.owner}" if owner else "harness", nid)
        except Exception:
            pass
        if owner is None:
            return   # case 1: never assigned, nobody cares
        owner.teachers.pop(nid, None)
        for it in sorted(unanswered, reverse=True):
            owner.pending.appendleft(it)
        # cases 2 and 3: grab a replacement right away if the pool has one
        self._acquire(owner, 1)
        self._dispatch(owner)

    # -- pipeline ------------------------------------------------------------

    def _apply_inline_tick(self, s: _VStudent) -> None:
        action = scheduler_tick(s.volume, s.sending_enabled, True, self.sc.sched)
        if action == "STOP_SENDING":
            s.sending_enabled = False
        elif action == "RESUME_SENDING":
            s.sending_enabled = True
            self._dispatch(s)

    def _dispatch(self, s: _VStudent) -> None:
        if not self.use_soft:
            return
        while s.sending_enabled and s.have_work(self.total):
            out = {nid: t.outstanding() for nid, t in s.teachers.items()
                   if not t.dead}
            target = pick_teacher(out, self.sc.sched.pipeline_depth)
            if target is None:
                return
            it = s.pending.popleft() if s.pending else s.next_new
            if not s.pending and it == s.next_new:
                s.next_new += 1
            teacher = s.teachers[target]
            job = (s.idx, it)
            if teacher.in_service is None:
                teacher.in_service = job
                self._push(self.now + teacher.service_time, "teacher_done",
                           teacher.node_id)
            else:
                teacher.queue.append(job)

    def _deliver(self, s: _VStudent, it: int) -> None:
        s.ready.add(it)
        s.max_volume = max(s.max_volume, s.volume)
        self._apply_inline_tick(s)
        if s.state == "waiting_soft" and s.current == it:
            self._consume_and_compute(s)

    def _consume_and_compute(self, s: _VStudent) -> None:
        if self.use_soft:
            s.ready.discard(s.current)
            self._apply_inline_tick(s)
            self._dispatch(s)
        s.state = "computing"
        self._push(self.now + self.sc.d_s, "compute_done", (s.idx, s.current))

    def _begin_iteration(self, s: _VStudent) -> None:
        if s.current >= self.total:
            s.state = "done"
            return
        if self.sc.mode == ONLINE:
            s.state = "computing"
            extra = self.sc.d_t if self.use_soft else 0.0
            self._push(self.now + extra + self.sc.d_s, "compute_done",
                       (s.idx, s.current))
        elif self.sc.mode == EDL_DIST and self.use_soft:
            if s.current in s.ready:
                self._consume_and_compute(s)
            else:
                s.state = "waiting_soft"
        else:   # N_TRAINING, or EDL with the teacher path disabled
            s.state = "computing"
            self._push(self.now + self.sc.d_s, "compute_done", (s.idx, s.current))

    def _soft_for(self, s: _VStudent, it: int) -> SoftLabelBatch | None:
        if not self.use_soft:
            return None
        batch = s.sampler.batch_for(it)
        probs = nnkit.tempered_softmax(
            nnkit.forward(self.teacher_model, batch.inputs),
            self.train_cfg.temperature)
        return SoftLabelBatch(probs, self.train_cfg.temperature)

    def _commit(self, it: int) -> None:
        grads, losses = [], []
        for s in self.students:
            batch = s.sampler.batch_for(it)
            loss, g = nnkit.kd_loss(s.model, batch, self._soft_for(s, it),
                                    self.train_cfg)
            grads.append(nnkit.flatten_grads(g))
            losses.append(loss)
        avg = ring_reduce_values(grads) if len(grads) > 1 else grads[0]
        for s in self.students:
            s.model = nnkit.sgd_step(s.model, nnkit.unflatten_grads(avg, s.model),
                                     self.train_cfg.eta)
        self.commits += 1
        self.last_commit_time = self.now
        self.commit_times.append(self.now)
        self.loss_trace.append(losses[0])
        self.samples.append((self.now,
                             sum(s.volume for s in self.students),
                             sum(len([t for t in s.teachers.values() if not t.dead])
                                 for s in self.students)))
        for s in self.students:
            s.current = it + 1
            self._begin_iteration(s)

    # -- event handlers -----------------------------------------------------

    def _on_teacher_done(self, nid: str) -> None:
        teacher = self.pool[nid]
        if teacher.dead:
            return
        job = teacher.in_service
        teacher.in_service = None
        if teacher.queue:
            teacher.in_service = teacher.queue.popleft()
            self._push(self.now + teacher.service_time, "teacher_done", nid)
        if job is None:
            return
        sidx, it = job
        s = self.students[sidx]
        self._deliver(s, it)
        self._dispatch(s)

    def _on_probe(self, sidx: int) -> None:
        s = self.students[sidx]
        if s.state == "done":
            return
        if self.now - self.last_commit_time > self.sc.deadline:
            self.starved = True
            return
        cooldown = self.now - s.last_acquire >= self.sc.sched.acquire_cooldown
        action = scheduler_tick(s.volume, s.sending_enabled, cooldown, self.sc.sched)
        if action == "STOP_SENDING":
            s.sending_enabled = False
        elif action == "RESUME_SENDING":
            s.sending_enabled = True
            self._dispatch(s)
        elif action == REQUEST_ADDITIONAL_TEACHER and s.have_work(self.total):
            if self._acquire(s, 1):
                self._dispatch(s)
        self._push(self.now + self.sc.sched.probe_interval, "probe", sidx)

    # -- main loop -------------------------------------------------------------

    def run(self) -> RunReport:
        sc = self.sc
        for _ in range(sc.teachers):
            self._spawn_teacher()
        if self.use_soft:
            n_static = sc.n_static()
            for s in self.students:
                self._acquire(s, n_static)
                self._dispatch(s)
                self._push(sc.sched.probe_interval, "probe", s.idx)
        for ev in sc.events:
            if ev.time is not None:
                self._push(ev.time, "fault", ev)
        for s in self.students:
            self._begin_iteration(s)

        while self.heap:
            t, _, kind, data = heapq.heappop(self.heap)
            self.now = t
            if kind == "compute_done":
                sidx, it = data
                self.barrier[it] = self.barrier.get(it, 0) + 1
                if self.barrier[it] == len(self.students):
                    del self.barrier[it]
                    self._commit(it)
            elif kind == "teacher_done":
                self._on_teacher_done(data)
            elif kind == "probe":
                self._on_probe(data)
            elif kind == "fault":
                if data.action == "kill":
                    self._kill_teacher(data.node)
                else:
                    self._spawn_teacher(data.node)
            if self.commits >= self.total or self.starved:
                break

        return self._report()

    def _report(self) -> RunReport:
        sc = self.sc
        model = self.students[0].model
        classes = int(self.data.labels.max()) + 1
        span = self.commit_times[-1] if self.commit_times else float("nan")
        images = self.commits * sc.train.batch_size * sc.students
        throughput = images / span if span and span == span and span > 0 else 0.0
        tp_series, vol_series, tc_series = [], [], []
        if self.commit_times:
            bucket = max(span / 50, sc.d_s * 10, 1e-9)
            edges = np.arange(0, span + bucket, bucket)
            counts, _ = np.histogram(self.commit_times, bins=edges)
            for i, c in enumerate(counts):
                tp_series.append((float(edges[i + 1]),
                                  c * sc.train.batch_size * sc.students / bucket))
        for (t, v, k) in self.samples:
            vol_series.append((t, v))
            tc_series.append((t, k))
        backlog = float(np.mean([v + k for (_, v, k) in self.samples])) \
            if self.samples else 0.0
        max_vol = max((s.max_volume for s in self.students), default=0)
        capacity = sc.sched.pipeline_depth * max(
            (len(s.teachers) for s in self.students), default=0)
        return RunReport(
            mode=sc.mode, substrate="virtual", students=sc.students,
            iterations=self.commits,
            throughput_series=tp_series, volume_series=vol_series,
            teacher_count_series=tc_series,
            final_top1=nnkit.evaluate(model, self.eval_set, 1),
            final_top5=nnkit.evaluate(model, self.eval_set, min(5, classes)),
            wall_clock_total=span if span == span else 0.0,
            overall_throughput=throughput,
            backlog_estimate=backlog, starved=self.starved,
            max_volume=max_vol, inflight_capacity=capacity,
            final_params=nnkit.flatten_params(model).tobytes())


# ---------------------------------------------------------------------------
# Process substrate


def _free_port() -> int:
    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


class ProcessCluster:
    """Spawns the real CLI processes and injects faults by SIGKILL."""

    def __init__(self, scenario: Scenario, workdir: str):
        self.sc = scenario
        self.workdir = workdir
        self.metrics_dir = os.path.join(workdir, "metrics")
        self.ckpt_dir = os.path.join(workdir, "ckpt")
        os.makedirs(self.metrics_dir, exist_ok=True)
        os.makedirs(self.ckpt_dir, exist_ok=True)
        self.procs: dict[str, subprocess.Popen] = {}
        self.logs: list = []
        self.coordinator_addr = ""
        self.teacher_model_path = os.path.join(workdir, "teacher.edld")

    def _spawn(self, name: str, args: list[str]) -> subprocess.Popen:
        log = open(os.path.join(self.workdir, f"{name}.log"), "w")
        self.logs.append(log)
        proc = subprocess.Popen([sys.executable, "-m", "edl.cli", *args],
                                stdout=log, stderr=log)
        self.procs[name] = proc
        return proc

    def start_coordinator(self) -> None:
        port = _free_port()
        self.coordinator_addr = f"127.0.0.1:{port}"
        self._spawn("coordinator", [
            "coordinator", "--listen", self.coordinator_addr,
            "--ttl-ms", "2000", "--sweep-ms", "200"])

    def start_teacher(self, node_id: str) -> None:
        port = _free_port()
        self._spawn(node_id, [
            "teacher", "--id", node_id,
            "--coordinator", self.coordinator_addr,
            "--listen", f"127.0.0.1:{port}",
            "--model", self.teacher_model_path,
            "--temperature", str(self.sc.train.temperature),
            "--delay-ms", str(int(self.sc.d_t * 1000))])

    def student_args(self, rank: int) -> list[str]:
        sc = self.sc
        mode = {N_TRAINING: "ntrain", ONLINE: "online", EDL_DIST: "edl"}[sc.mode]
        args = [
            "student", "--rank", str(rank), "--world-size", str(sc.students),
            "--mode", mode,
            "--data-seed", str(sc.data.seed), "--data-n", str(sc.data.n),
            "--data-dim", str(sc.data.dim), "--data-classes", str(sc.data.classes),
            "--data-spread", str(sc.data.spread),
            "--alpha", str(sc.train.alpha), "--beta", str(sc.train.beta),
            "--temperature", str(sc.train.temperature), "--eta", str(sc.train.eta),
            "--batch-size", str(sc.train.batch_size), "--seed", str(sc.train.seed),
            "--epochs", str(sc.epochs),
            "--lt", str(sc.sched.lt), "--ut", str(sc.sched.ut),
            "--cooldown-ms", str(int(sc.sched.acquire_cooldown * 1000)),
            "--probe-ms", str(int(sc.sched.probe_interval * 1000)),
            "--pipeline-depth", str(sc.sched.pipeline_depth),
            "--teacher-count", str(sc.teacher_count),
            "--checkpoint-dir", self.ckpt_dir,
            "--checkpoint-interval", str(sc.checkpoint_interval),
            "--metrics-dir", self.metrics_dir,
            "--delay-ms", str(int(sc.d_s * 1000)),
        ]
        if sc.max_steps:
            args += ["--max-steps", str(sc.max_steps)]
        if sc.mode == EDL_DIST:
            args += ["--coordinator", self.coordinator_addr]
        if sc.mode == ONLINE:
            args += ["--teacher-model", self.teacher_model_path,
                     "--teacher-delay-ms", str(int(sc.d_t * 1000))]
        return args

    def start_student(self, rank: int) -> None:
        self._spawn(f"student-{rank}", self.student_args(rank))

    def kill(self, name: str) -> None:
        proc = self.procs.get(name)
        if proc and proc.poll() is None:
            proc.send_signal(signal.SIGKILL)
            proc.wait()

    def student_events(self, rank: int) -> list[dict]:
        path = os.path.join(self.metrics_dir, f"student-{rank}-events.jsonl")
        out = []
        try:
            with open(path) as fh:
                for line in fh:
                    try:
                        out.append(json.loads(line))
                    except ValueError:
                        continue
        except FileNotFoundError:
            pass
        return out

    def student_iteration(self, rank: int) -> int:
        steps = [e["iteration"] for e in self.student_events(rank)
                 if e.get("event") == "step"]
        return max(steps, default=0)

    def shutdown(self) -> None:
        for name, proc in self.procs.items():
            if proc.poll() is None:
                proc.send_signal(signal.SIGKILL)
        for proc in self.procs.values():
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass
        for log in self.logs:
            log.close()

    # -- the run ------------------------------------------------------------

    def run(self) -> RunReport:
        sc = self.sc
        nnkit.save_model(self.teacher_model_path, build_teacher_model(sc))
        if sc.mode == EDL_DIST:
            self.start_coordinator()
            time.sleep(0.3)
            for i in range(sc.teachers):
                self.start_teacher(f"t{i + 1}")
            time.sleep(0.3)
        t0 = time.monotonic()
        for rank in range(sc.students):
            self.start_student(rank)

        starved = False
        pending = deque(sc.events)
        deadline = t0 + sc.deadline
        while True:
            students_alive = [f"student-{r}" for r in range(sc.students)
                              if self.procs.get(f"student-{r}")
                              and self.procs[f"student-{r}"].poll() is None]
            if not students_alive and not pending:
                break
            if time.monotonic() > deadline:
                starved = True
                break
            self._fire_due_events(pending, t0)
            time.sleep(0.05)
        wall = time.monotonic() - t0
        self.shutdown()
        return self._report(wall, starved)

    def _fire_due_events(self, pending: deque, t0: float) -> None:
        while pending:
            ev = pending[0]
            due = False
            if ev.time is not None:
                due = time.monotonic() - t0 >= ev.time
            else:
                rank = int(ev.node.split("-")[1]) if ev.is_student else None
                if rank is not None:
                    due = self.student_iteration(rank) >= ev.iteration
                else:
                    due = any(self.student_iteration(r) >= ev.iteration
                              for r in range(self.sc.students))
            if not due:
                return
            pending.popleft()
            if ev.action == "kill":
                self.kill(ev.node)
            elif ev.is_student:
                self.start_student(int(ev.node.split("-")[1]))
            else:
                self.start_teacher(ev.node)

    def _report(self, wall: float, starved: bool) -> RunReport:
        sc = self.sc
        tp_series, vol_series, tc_series = [], [], []
        done_events, ledgers, restarts = [], [], 0
        iterations = 0
        for rank in range(sc.students):
            events = self.student_events(rank)
            iterations = max(iterations,
                             max((e["iteration"] for e in events
                                  if e.get("event") == "step"), default=0))
            for e in events:
                if e.get("event") == "done":
                    done_events.append(e)
                    ledgers.append(e.get("ledger", {}))
                    restarts += e.get("restarts", 0)
            path = os.path.join(self.metrics_dir, f"student-{rank}-intervals.csv")
            if os.path.exists(path):
                with open(path) as fh:
                    for row in csv.DictReader(fh):
                        t = float(row["timestamp"])
                        tp_series.append((t, float(row["images_per_s"])))
                        vol_series.append((t, int(row["buffer_volume"])))
                        tc_series.append((t, int(row["teacher_count"])))
        top1 = float(np.mean([e["top1"] for e in done_events])) if done_events else 0.0
        top5 = float(np.mean([e["top5"] for e in done_events])) if done_events else 0.0
        throughput = sum(e.get("throughput", 0.0) for e in done_events)
        backlog = float(np.mean([v + k for (_, v), (_, k)
                                 in zip(vol_series, tc_series)])) \
            if vol_series else 0.0
        return RunReport(
            mode=sc.mode, substrate="process", students=sc.students,
            iterations=iterations,
            throughput_series=sorted(tp_series), volume_series=sorted(vol_series),
            teacher_count_series=sorted(tc_series),
            final_top1=top1, final_top5=top5,
            wall_clock_total=wall, overall_throughput=throughput,
            backlog_estimate=backlog,
            starved=starved or not done_events,
            restarts=restarts, ledgers=ledgers,
            max_volume=max((v for _, v in vol_series), default=0))


# ---------------------------------------------------------------------------
# Entry points


def run_scenario(scenario: Scenario, workdir: str | None = None) -> RunReport:
    if scenario.substrate == "virtual":
        return VirtualCluster(scenario).run()
    if workdir is None:
        import tempfile
        workdir = tempfile.mkdtemp(prefix="edl-run-")
    cluster = ProcessCluster(scenario, workdir)
    try:
        return cluster.run()
    finally:
        cluster.shutdown()


def sweep_teachers(counts: list[int], base: Scenario) -> list[dict]:
    """Throughput/training-time table over teacher pool sizes."""
    rows = []
    for n in counts:
        scenario = replace(base, teachers=n, teacher_count=n)
        report = run_scenario(scenario)
        rows.append({"teachers": n,
                     "throughput": round(report.overall_throughput, 3),
                     "training_time": round(report.wall_clock_total, 3),
                     "starved": report.starved})
    return rows


def emit_report(report: RunReport, out_dir: str) -> None:
    """CSV series plus a plain-text summary."""
    os.makedirs(out_dir, exist_ok=True)
    series = {
        "throughput.csv": (("time", "images_per_s"), report.throughput_series),
        "volume.csv": (("time", "buffer_volume"), report.volume_series),
        "teacher_count.csv": (("time", "teachers"), report.teacher_count_series),
    }
    for name, (header, rows) in series.items():
        with open(os.path.join(out_dir, name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(report.summary() + "\n")
