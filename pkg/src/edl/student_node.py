"""Training worker: data shard, soft-label pipeline, scheduler, fail-over.

One student process runs three cooperating tasks:

- the training loop (owns the model): consume the next (batch, soft-label)
  pair, compute the combined loss, average gradients across the peer group,
  apply SGD, checkpoint periodically on rank 0;
- the dispatch pipeline (owns the buffer's send side): walk batches in
  iteration order and keep every assigned teacher loaded up to a small
  pipeline depth, picking the teacher with the shortest outstanding queue;
- the scheduler probe: the stop/acquire/resume hysteresis over the buffer
  volume, with stop/resume also applied inline on every volume change so
  the bound volume <= ut + in-flight capacity holds exactly.

Teacher failures follow three cases: an unassigned teacher dying is
invisible here; an assigned idle teacher is reported and replaced; an
assigned teacher with batches in flight is reported, replaced, and exactly
the unanswered batch ids are re-dispatched. Batches are never fabricated
and never trained twice within a session.

Group membership changes (a student dying or joining) abort the collective
on every survivor; everyone then reloads the newest checkpoint and
re-forms the ring at the next generation via the rendezvous directory.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import allreduce, nnkit, protocol
from .allreduce import MembershipChange
from .nnkit import Batch, Dataset, Model, SoftLabelBatch, TrainConfig
from .protocol import FrameConnection
from .runtime import Clock, atomic_write_bytes, atomic_write_text

STOP_SENDING = "STOP_SENDING"
RESUME_SENDING = "RESUME_SENDING"
REQUEST_ADDITIONAL_TEACHER = "REQUEST_ADDITIONAL_TEACHER"
NONE = "NONE"

MODE_EDL = "edl"
MODE_NTRAIN = "ntrain"
MODE_ONLINE = "online"

MAX_RESTARTS = 20


# ---------------------------------------------------------------------------
# Pure scheduling logic


@dataclass(frozen=True)
class SchedulerConfig:
    lt: int = 4
    ut: int = 32
    n_static: int = 1
    acquire_cooldown: float = 2.0
    probe_interval: float = 0.1
    pipeline_depth: int = 2     # in-flight batches per teacher

    def __post_init__(self):
        if not 0 <= self.lt < self.ut:
            raise ValueError("need 0 <= lt < ut")
        if self.n_static < 1:
            raise ValueError("n_static must be >= 1")
        if self.pipeline_depth < 1:
            raise ValueError("pipeline_depth must be >= 1")


@dataclass(frozen=True)
class ThroughputProfile:
    t_s: float   # student steps/s
    t_t: float   # teacher batches/s per teacher

    def __post_init__(self):
        if self.t_s <= 0 or self.t_t <= 0:
            raise ValueError("throughputs must be positive")


def static_schedule(profile: ThroughputProfile) -> int:
    """Teachers per student: ceil(t_s / t_t), at least 1.

    A student consuming t_s batches/s fed by teachers producing t_t each
    needs t_s/t_t of them to keep the buffer from draining.
    """
    return max(1, math.ceil(profile.t_s / profile.t_t))


def scheduler_tick(volume: int, sending_enabled: bool, cooldown_elapsed: bool,
                   cfg: SchedulerConfig) -> str:
    """One pass of the hysteresis controller, precedence stop > acquire > resume."""
    if volume > cfg.ut:
        return STOP_SENDING
    if volume == 0 and sending_enabled and cooldown_elapsed:
        return REQUEST_ADDITIONAL_TEACHER
    if volume < cfg.lt and not sending_enabled:
        return RESUME_SENDING
    return NONE


def pick_teacher(outstanding: dict[str, int], depth: int) -> str | None:
    """Join-shortest-queue with node-id tie break; None if all are full."""
    best = None
    for node_id in sorted(outstanding):
        n = outstanding[node_id]
        if n < depth and (best is None or n < outstanding[best]):
            best = node_id
    return best


# ---------------------------------------------------------------------------
# Data shard


class ShardSampler:
    """Deterministic epoch-shuffled batches over this rank's shard.

    All ranks use the same batches-per-epoch (computed from the smallest
    shard) so collective calls stay in lockstep; remainder samples never
    start a batch.
    """

    def __init__(self, data: Dataset, world_size: int, rank: int,
                 batch_size: int, seed: int):
        self.shard = nnkit.partition(data, world_size, rank)
        self.batch_size = batch_size
        self.seed = seed
        self.rank = rank
        self.batches_per_epoch = (data.size // world_size) // batch_size
        if self.batches_per_epoch < 1:
            raise ValueError("shard smaller than one batch")
        self._epoch = -1
        self._order: np.ndarray | None = None

    def batch_for(self, iteration: int) -> Batch:
        epoch, idx = divmod(iteration, self.batches_per_epoch)
        if epoch != self._epoch:
            self._order = nnkit.epoch_order(self.seed, epoch, self.rank, self.shard.size)
            self._epoch = epoch
        rows = self._order[idx * self.batch_size:(idx + 1) * self.batch_size]
        return Batch(self.shard.samples[rows], self.shard.labels[rows])


# ---------------------------------------------------------------------------
# Checkpoints


CKPT_RE = re.compile(r"ckpt-(\d{8})\.edld$")


def save_checkpoint(directory: str, model: Model, iteration: int,
                    dataset_id: str, world_size: int) -> str:
    """Atomic model + sidecar metadata write; returns the model file path."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"ckpt-{iteration:08d}.edld")
    atomic_write_bytes(path, nnkit.serialize_model(model, iteration))
    meta = {"iteration": iteration, "dataset_id": dataset_id,
            "world_size": world_size}
    atomic_write_text(path.replace(".edld", ".json"), json.dumps(meta))
    return path


def load_latest_checkpoint(directory: str,
                           dataset_id: str) -> tuple[Model, int] | None:
    """Newest loadable checkpoint whose dataset matches; None if there is
    no usable generation at all (corrupt files fall back to older ones)."""
    try:
        names = os.listdir(directory)
    except FileNotFoundError:
        return None
    candidates = sorted((m.group(1) for n in names if (m := CKPT_RE.search(n))),
                        reverse=True)
    for stamp in candidates:
        path = os.path.join(directory, f"ckpt-{stamp}.edld")
        try:
            with open(path.replace(".edld", ".json")) as fh:
                meta = json.load(fh)
            if meta.get("dataset_id") != dataset_id:
                continue
            model, iteration = nnkit.load_model(path)
            return model, iteration
        except (OSError, ValueError, nnkit.ModelFileError):
            continue
    return None


# ---------------------------------------------------------------------------
# Event log (JSON lines, one file per student; the harness replays these)


class EventLog:
    def __init__(self, path: str | None):
        self._lock = threading.Lock()
        self._fh = open(path, "a", buffering=1) if path else None
        self.entries: list[dict] = []

    def append(self, kind: str, **fields) -> None:
        entry = {"event": kind, "ts": round(time.time(), 6), **fields}
        with self._lock:
            self.entries.append(entry)
            if self._fh:
                self._fh.write(json.dumps(entry, separators=(",", ":")) + "\n")

    def close(self) -> None:
        with self._lock:
            if self._fh:
                self._fh.close()
                self._fh = None


# ---------------------------------------------------------------------------
# DistilReader: buffer + dispatch + teacher fail-over


class _TeacherHandle:
    def __init__(self, node_id: str, address: str, conn: FrameConnection):
        self.node_id = node_id
        self.address = address
        self.conn = conn
        self.outstanding: set[int] = set()
        self.dead = False
        self.reader: threading.Thread | None = None


class DistilReader:
    """Soft-label acquisition pipeline for one student.

    Owns the buffer of ready (iteration -> SoftLabelBatch) pairs, the
    in-flight bookkeeping, the assigned teacher set, and the hysteresis
    scheduler. The training loop only calls consume().
    """

    def __init__(self, student_id: str, coordinator: str, cfg: SchedulerConfig,
                 sampler: ShardSampler, start_iteration: int, end_iteration: int,
                 session: int, events: EventLog, expected_temperature: float,
                 clock: Clock | None = None):
        self.student_id = student_id
        self.cfg = cfg
        self.sampler = sampler
        self.session = session
        self.events = events
        self.expected_temperature = expected_temperature
        self.clock = clock or Clock()

        self._coord = FrameConnection.connect(coordinator)
        self._coord_lock = threading.Lock()

        self._lock = threading.Lock()
        self._wake_dispatch = threading.Condition(self._lock)
        self._wake_consume = threading.Condition(self._lock)
        self._teachers: dict[str, _TeacherHandle] = {}
        self._ready: dict[int, SoftLabelBatch] = {}
        self._pending: deque[int] = deque()
        self._next_new = start_iteration
        self._end = end_iteration
        self._consumed: set[int] = set()
        self.sending_enabled = True
        self._last_acquire = -float("inf")
        self._stopped = False
        self.max_volume_seen = 0
        self.max_teachers_seen = 0
        self.dispatch_count: dict[int, int] = {}
        self.consume_count: dict[int, int] = {}
        self.duplicate_replies = 0
        self.reply_times: list[float] = []
        self.started_at = self.clock.now()

        self._dispatcher = threading.Thread(target=self._dispatch_loop,
                                            daemon=True, name="dispatch")
        self._probe = threading.Thread(target=self._probe_loop,
                                       daemon=True, name="sched-probe")

    # -- metrics ----------------------------------------------------------

    @property
    def volume(self) -> int:
        return len(self._ready)

    @property
    def teacher_count(self) -> int:
        return sum(1 for h in self._teachers.values() if not h.dead)

    def in_flight_capacity(self) -> int:
        return self.cfg.pipeline_depth * max(self.max_teachers_seen, 1)

    # -- coordinator calls --------------------------------------------------

    def _coordinator(self, msg: dict) -> dict:
        with self._coord_lock:
            return self._coord.request(msg, timeout=10.0)

    def acquire(self, count: int) -> int:
        """Ask for up to ``count`` teachers; connect the granted ones."""
        with self._lock:
            self._last_acquire = self.clock.now()
        try:
            reply = self._coordinator(protocol.acquire_teachers(self.student_id, count))
        except (protocol.ConnectionClosed, TimeoutError, OSError):
            return 0
        if reply.get("type") != "ACQUIRE_REPLY":
            return 0
        added = 0
        for rec in reply["teachers"]:
            if self._connect_teacher(rec["node_id"], rec["address"]):
                added += 1
        return added

    def _connect_teacher(self, node_id: str, address: str) -> bool:
        try:
            conn = FrameConnection.connect(address, timeout=5.0)
        except OSError:
            self.events.append("teacher_connect_failed", node=node_id)
            try:
                self._coordinator(protocol.report_failure(self.student_id, node_id))
            except (protocol.ConnectionClosed, TimeoutError, OSError):
                pass
            return False
        handle = _TeacherHandle(node_id, address, conn)
        handle.reader = threading.Thread(target=self._reply_loop, args=(handle,),
                                         daemon=True, name=f"reader-{node_id}")
        with self._lock:
            self._teachers[node_id] = handle
            self.max_teachers_seen = max(self.max_teachers_seen, self.teacher_count)
            self._wake_dispatch.notify_all()
        handle.reader.start()
        self.events.append("teacher_added", node=node_id)
        return True

    # -- dispatch side ------------------------------------------------------

    def _have_work(self) -> bool:
        return bool(self._pending) or self._next_new < self._end

    def _take_next_iteration(self) -> int:
        if self._pending:
            return self._pending.popleft()
        it = self._next_new
        self._next_new += 1
        return it

    def _dispatch_loop(self) -> None:
        while True:
            with self._lock:
                while not self._stopped:
                    target = None
                    if self.sending_enabled and self._have_work():
                        out = {nid: len(h.outstanding)
                               for nid, h in self._teachers.items() if not h.dead}
                        target = pick_teacher(out, self.cfg.pipeline_depth)
                        if target is not None:
                            break
                    self._wake_dispatch.wait(0.2)
                if self._stopped:
                    return
                iteration = self._take_next_iteration()
                handle = self._teachers[target]
                handle.outstanding.add(iteration)
                self.dispatch_count[iteration] = self.dispatch_count.get(iteration, 0) + 1
            batch = self.sampler.batch_for(iteration)
            msg = protocol.infer_request(
                f"{self.session}:{iteration}",
                [list(map(float, row)) for row in batch.inputs])
            try:
                handle.conn.send(msg)
            except protocol.ConnectionClosed:
                self.handle_teacher_failure(handle.node_id, "send")

    def _reply_loop(self, handle: _TeacherHandle) -> None:
        while True:
            try:
                msg = handle.conn.recv()
            except (protocol.ConnectionClosed, protocol.ProtocolError, OSError):
                self.handle_teacher_failure(handle.node_id, "recv")
                return
            if msg["type"] == "INFER_REPLY":
                self._accept_reply(handle, msg)
            elif msg["type"] == "ERROR":
                # teacher refused the batch; requeue it for someone else
                self.events.append("teacher_error_reply", node=handle.node_id,
                                   reason=msg.get("reason"))
                bid = msg.get("batch_id")
                it = self._parse_batch_id(bid)
                if it is not None:
                    with self._lock:
                        handle.outstanding.discard(it)
                        self._pending.appendleft(it)
                        self._wake_dispatch.notify_all()

    def _parse_batch_id(self, batch_id) -> int | None:
        if not isinstance(batch_id, str):
            return None
        sess, _, it = batch_id.partition(":")
        if sess != str(self.session) or not it.isdigit():
            return None
        return int(it)

    def _accept_reply(self, handle: _TeacherHandle, msg: dict) -> None:
        iteration = self._parse_batch_id(msg["batch_id"])
        if iteration is None:
            return   # stale session; drop
        with self._lock:
            handle.outstanding.discard(iteration)
        try:
            if msg["temperature"] != self.expected_temperature:
                raise ValueError(f"teacher tempered at {msg['temperature']}, "
                                 f"expected {self.expected_temperature}")
            soft = SoftLabelBatch(np.asarray(msg["probs"], dtype=np.float64),
                                  msg["temperature"])
        except (ValueError, TypeError, nnkit.ShapeError, nnkit.NumericError) as exc:
            # a misbehaving teacher; requeue the batch for someone else
            self.events.append("bad_reply", node=handle.node_id, detail=str(exc))
            with self._lock:
                if iteration not in self._consumed and iteration not in self._ready:
                    self._pending.appendleft(iteration)
                    self._wake_dispatch.notify_all()
            return
        with self._lock:
            if iteration in self._consumed or iteration in self._ready:
                self.duplicate_replies += 1   # re-dispatch answered twice
                return
            self._ready[iteration] = soft
            self.reply_times.append(self.clock.now())
            self.max_volume_seen = max(self.max_volume_seen, self.volume)
            self._apply_tick_locked()
            self._wake_consume.notify_all()

    # -- consume side ---------------------------------------------------------

    def consume(self, iteration: int, timeout: float | None = None) -> SoftLabelBatch:
        """Block until the reply for ``iteration`` is buffered, then take it."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            while iteration not in self._ready:
                if self._stopped:
                    raise RuntimeError("reader stopped while waiting for soft labels")
                wait = 0.2
                if deadline is not None:
                    wait = min(wait, deadline - time.monotonic())
                    if wait <= 0:
                        raise TimeoutError(f"no soft labels for iteration {iteration}")
                self._wake_consume.wait(wait)
            soft = self._ready.pop(iteration)
            self._consumed.add(iteration)
            self.consume_count[iteration] = self.consume_count.get(iteration, 0) + 1
            self._apply_tick_locked()
            self._wake_dispatch.notify_all()
            return soft

    # -- scheduler -------------------------------------------------------------

    def _cooldown_elapsed_locked(self) -> bool:
        return self.clock.now() - self._last_acquire >= self.cfg.acquire_cooldown

    def _apply_tick_locked(self) -> str:
        """Inline stop/resume on volume changes; acquire only from the probe."""
        action = scheduler_tick(self.volume, self.sending_enabled,
                                self._cooldown_elapsed_locked(), self.cfg)
        if action == STOP_SENDING and self.sending_enabled:
            self.sending_enabled = False
            self.events.append("stop_sending", volume=self.volume)
        elif action == RESUME_SENDING:
            self.sending_enabled = True
            self.events.append("resume_sending", volume=self.volume)
            self._wake_dispatch.notify_all()
        return action

    def _probe_loop(self) -> None:
        while not self._stopped:
            self.clock.sleep(self.cfg.probe_interval)
            with self._lock:
                if self._stopped:
                    return
                action = self._apply_tick_locked()
                want_acquire = (action == REQUEST_ADDITIONAL_TEACHER
                                and self._have_work())
            if want_acquire:
                self.events.append("request_additional_teacher")
                self.acquire(1)

    # -- failure handling --------------------------------------------------------

    def handle_teacher_failure(self, node_id: str, context: str) -> None:
        """Cases 2 and 3: report, replace, re-dispatch unanswered batches.

        Case 1 (a teacher never assigned to us) never reaches this code:
        unassigned teachers are invisible to the student.
        """
        with self._lock:
            handle = self._teachers.get(node_id)
            if handle is None or handle.dead:
                return
            handle.dead = True
            del self._teachers[node_id]
            unanswered = sorted(handle.outstanding)
            for it in reversed(unanswered):
                self._pending.appendleft(it)
            if unanswered:
                self._wake_dispatch.notify_all()
            stopped = self._stopped
        handle.conn.close()
        self.events.append("teacher_failure", node=node_id, context=context,
                           unanswered=unanswered)
        if stopped:
            return
        try:
            self._coordinator(protocol.report_failure(self.student_id, node_id))
        except (protocol.ConnectionClosed, TimeoutError, OSError):
            pass
        replaced = self.acquire(1)
        self.events.append("teacher_replaced" if replaced else "no_replacement",
                           node=node_id)
        # with no replacement, training drains the buffer; once volume hits
        # zero the probe's acquire path keeps asking

    # -- lifecycle -----------------------------------------------------------------

    def start(self) -> None:
        self._dispatcher.start()
        self._probe.start()

    def ledger(self) -> dict:
        """Exactly-once evidence: every consumed batch exactly once, every
        consumed batch was dispatched at least once."""
        consumed_once = all(v == 1 for v in self.consume_count.values())
        dispatched = all(it in self.dispatch_count for it in self.consume_count)
        return {
            "consumed": len(self.consume_count),
            "dispatched": len(self.dispatch_count),
            "redispatches": sum(v - 1 for v in self.dispatch_count.values() if v > 1),
            "duplicate_replies": self.duplicate_replies,
            "ok": consumed_once and dispatched,
        }

    def close(self, release: bool = True) -> None:
        with self._lock:
            self._stopped = True
            handles = list(self._teachers.values())
            self._teachers.clear()
            self._wake_dispatch.notify_all()
            self._wake_consume.notify_all()
        for h in handles:
            h.conn.close()
            if release and not h.dead:
                try:
                    self._coordinator(protocol.release_teacher(self.student_id,
                                                               h.node_id))
                except (protocol.ConnectionClosed, TimeoutError, OSError):
                    pass
        with self._coord_lock:
            self._coord.close()


# ---------------------------------------------------------------------------
# The student process


@dataclass(frozen=True)
class DataSpec:
    seed: int = 0
    n: int = 2048
    dim: int = 16
    classes: int = 10
    spread: float = 1.0

    def build(self) -> Dataset:
        return nnkit.make_blobs(self.seed, self.n, self.dim, self.classes, self.spread)

    def build_eval(self, n: int = 1000) -> Dataset:
        return nnkit.make_blobs(self.seed + 7777, n, self.dim, self.classes, self.spread)


@dataclass(frozen=True)
class StudentConfig:
    rank: int
    world_size: int
    coordinator: str = ""
    mode: str = MODE_EDL
    data: DataSpec = field(default_factory=DataSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(beta=1.0, alpha=1.0))
    sched: SchedulerConfig = field(default_factory=SchedulerConfig)
    epochs: int = 1
    checkpoint_dir: str = ""
    checkpoint_interval: int = 100
    metrics_dir: str = ""
    metrics_interval: float = 0.5
    student_hidden: tuple[int, ...] = (64,)
    teacher_model: str = ""       # online mode only
    step_delay: float = 0.0       # simulated per-step compute time
    teacher_delay: float = 0.0    # online mode: simulated inference time
    peers: tuple[str, ...] = ()   # optional fixed generation-0 ring addresses
    teacher_count: int | str = "auto"
    max_steps: int = 0            # 0: run the full epoch budget
    consume_timeout: float | None = None

    def __post_init__(self):
        if self.mode not in (MODE_EDL, MODE_NTRAIN, MODE_ONLINE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == MODE_EDL and not self.coordinator:
            raise ValueError("edl mode requires a coordinator address")
        if self.mode == MODE_ONLINE and not self.teacher_model:
            raise ValueError("online mode requires a teacher model file")
        if self.world_size > 1 and not self.checkpoint_dir:
            raise ValueError("multi-student runs need a shared checkpoint dir")


@dataclass
class StudentResult:
    rank: int
    iterations: int
    restarts: int
    final_top1: float
    final_top5: float
    model: Model
    ledger: dict
    throughput: float    # images/s over the trained span


class StudentNode:
    def __init__(self, cfg: StudentConfig, clock: Clock | None = None):
        self.cfg = cfg
        self.clock = clock or Clock()
        self.dataset = cfg.data.build()
        self.eval_set = cfg.data.build_eval()
        self.sampler = ShardSampler(self.dataset, cfg.world_size, cfg.rank,
                                    cfg.train.batch_size, cfg.train.seed)
        self.total_steps = cfg.epochs * self.sampler.batches_per_epoch
        if cfg.max_steps:
            self.total_steps = min(self.total_steps, cfg.max_steps)
        self.student_id = f"student-{cfg.rank}"
        events_path = None
        if cfg.metrics_dir:
            os.makedirs(cfg.metrics_dir, exist_ok=True)
            events_path = os.path.join(cfg.metrics_dir,
                                       f"student-{cfg.rank}-events.jsonl")
        self.events = EventLog(events_path)
        self._interval_rows: list[dict] = []
        self._epoch_rows: list[dict] = []
        self.teacher = None
        if cfg.mode == MODE_ONLINE:
            self.teacher, _ = nnkit.load_model(cfg.teacher_model)

    # -- model bootstrap ----------------------------------------------------

    def initial_model(self) -> tuple[Model, int]:
        dims = (self.dataset.dim, *self.cfg.student_hidden,
                int(self.dataset.labels.max()) + 1)
        if self.cfg.checkpoint_dir:
            found = load_latest_checkpoint(self.cfg.checkpoint_dir, self.dataset.id)
            if found is not None:
                self.events.append("resume_from_checkpoint", iteration=found[1])
                return found
        return nnkit.init_model(dims, self.cfg.train.seed), 0

    # -- soft-label sources ---------------------------------------------------

    def _train_config(self) -> TrainConfig:
        cfg = self.cfg.train
        if self.cfg.mode == MODE_NTRAIN:
            # hard labels only; keep alpha, drop the soft term entirely
            return TrainConfig(eta=cfg.eta, alpha=cfg.alpha, beta=0.0,
                               temperature=cfg.temperature,
                               batch_size=cfg.batch_size, seed=cfg.seed)
        return cfg

    def _online_soft(self, batch: Batch) -> SoftLabelBatch:
        if self.cfg.teacher_delay > 0:
            self.clock.sleep(self.cfg.teacher_delay)
        probs = nnkit.tempered_softmax(nnkit.forward(self.teacher, batch.inputs),
                                       self.cfg.train.temperature)
        return SoftLabelBatch(probs, self.cfg.train.temperature)

    # -- main loop ---------------------------------------------------------------

    def run(self) -> StudentResult:
        cfg = self.cfg
        train_cfg = self._train_config()
        model, start_iter = self.initial_model()
        restarts = 0
        min_generation = 0
        session = 0
        trained_steps = 0
        train_t0 = None
        train_t1 = None
        last_metrics = time.monotonic()
        steps_in_interval = 0

        while start_iter < self.total_steps:
            group = transport = listener = reader = None
            session += 1
            try:
                if cfg.world_size > 1:
                    listener = protocol.open_listener("127.0.0.1:0")
                    rendezvous = os.path.join(cfg.checkpoint_dir, "rendezvous")
                    if cfg.peers and min_generation == 0:
                        group = allreduce.PeerGroup(cfg.peers, cfg.rank, 0)
                    else:
                        group = allreduce.form_group(
                            rendezvous, cfg.world_size, cfg.rank,
                            protocol.listener_address(listener),
                            min_generation=min_generation, timeout=120.0)
                    transport = allreduce.connect_ring(group, listener)
                    self.events.append("group_formed",
                                       generation=group.generation,
                                       size=group.size)
                generation = group.generation if group else 0

                if cfg.mode == MODE_EDL:
                    reader = DistilReader(
                        self.student_id, cfg.coordinator, cfg.sched,
                        self.sampler, start_iter, self.total_steps, session,
                        self.events, cfg.train.temperature, self.clock)
                    reader.start()
                    self._initial_acquire(reader)

                if train_t0 is None:
                    train_t0 = time.monotonic()

                for iteration in range(start_iter, self.total_steps):
                    batch = self.sampler.batch_for(iteration)
                    soft = None
                    if cfg.mode == MODE_EDL:
                        soft = reader.consume(iteration,
                                              timeout=cfg.consume_timeout)
                    elif cfg.mode == MODE_ONLINE:
                        soft = self._online_soft(batch)
                    if cfg.step_delay > 0:
                        self.clock.sleep(cfg.step_delay)
                    loss, grads = nnkit.kd_loss(model, batch, soft, train_cfg)
                    if cfg.world_size > 1:
                        flat = nnkit.flatten_grads(grads)
                        avg = allreduce.ring_allreduce(flat, cfg.world_size,
                                                       cfg.rank, transport,
                                                       generation)
                        grads = nnkit.unflatten_grads(avg, model)
                    model = nnkit.sgd_step(model, grads, train_cfg.eta)
                    done = iteration + 1
                    trained_steps += 1
                    steps_in_interval += 1
                    train_t1 = time.monotonic()
                    self.events.append("step", iteration=done,
                                       loss=round(loss, 6))
                    if cfg.checkpoint_dir and cfg.rank == 0 \
                            and done % cfg.checkpoint_interval == 0:
                        save_checkpoint(cfg.checkpoint_dir, model, done,
                                        self.dataset.id, cfg.world_size)
                        self.events.append("checkpoint", iteration=done)
                    now = time.monotonic()
                    if now - last_metrics >= cfg.metrics_interval:
                        self._record_interval(now, now - last_metrics,
                                              steps_in_interval, loss, reader)
                        last_metrics, steps_in_interval = now, 0
                    if done % self.sampler.batches_per_epoch == 0:
                        self._record_epoch(done, model)
                start_iter = self.total_steps
            except MembershipChange as exc:
                restarts += 1
                self.events.append("membership_change", detail=str(exc),
                                   restarts=restarts)
                if restarts > MAX_RESTARTS:
                    raise RuntimeError("too many membership changes") from exc
                min_generation = (group.generation + 1) if group else 0
                model, start_iter = self._reload_after_restart()
            finally:
                if reader is not None:
                    reader.close()
                if transport is not None:
                    transport.close()
                if listener is not None:
                    listener.close()

        ledger = reader.ledger() if reader is not None else {"ok": True}
        top1 = nnkit.evaluate(model, self.eval_set, 1)
        top5 = nnkit.evaluate(model, self.eval_set,
                              min(5, int(self.dataset.labels.max()) + 1))
        span = (train_t1 - train_t0) if (train_t0 and train_t1
                                         and train_t1 > train_t0) else float("nan")
        throughput = trained_steps * cfg.train.batch_size / span if span == span else 0.0
        self.events.append("done", iterations=self.total_steps, restarts=restarts,
                           top1=top1, top5=top5, throughput=round(throughput, 3),
                           ledger=ledger)
        self._flush_metrics()
        self.events.close()
        return StudentResult(cfg.rank, self.total_steps, restarts, top1, top5,
                             model, ledger, throughput)

    def _initial_acquire(self, reader: DistilReader) -> None:
        want = self.cfg.teacher_count
        if want == "auto":
            got = reader.acquire(1)
            n = self._auto_teacher_count(reader) if got else 1
            if n > 1:
                reader.acquire(n - 1)
            self.events.append("static_schedule", teachers=n)
        else:
            reader.acquire(int(want))

    def _auto_teacher_count(self, reader: DistilReader) -> int:
        """Measure our own step speed and one teacher's reply rate, then
        size the teacher set as ceil(t_s / t_t)."""
        batch = self.sampler.batch_for(0)
        dims = (self.dataset.dim, *self.cfg.student_hidden,
                int(self.dataset.labels.max()) + 1)
        model = nnkit.init_model(dims, self.cfg.train.seed)
        cfg = self._train_config()
        probes = 3
        uniform = SoftLabelBatch(
            np.full((batch.size, model.num_classes), 1.0 / model.num_classes),
            cfg.temperature)
        t0 = time.monotonic()
        for _ in range(probes):
            if self.cfg.step_delay > 0:
                self.clock.sleep(self.cfg.step_delay)
            nnkit.kd_loss(model, batch, uniform if cfg.beta > 0 else None, cfg)
        t_s = probes / max(time.monotonic() - t0, 1e-9)
        # the dispatcher is already streaming; time the first few replies
        deadline = time.monotonic() + 30.0
        while len(reader.reply_times) < probes and time.monotonic() < deadline:
            time.sleep(0.005)
        if len(reader.reply_times) < probes:
            return 1
        span = max(reader.reply_times[probes - 1] - reader.started_at, 1e-9)
        t_t = probes / span
        return static_schedule(ThroughputProfile(t_s=t_s, t_t=min(t_t, t_s * 64)))

    def _reload_after_restart(self) -> tuple[Model, int]:
        if self.cfg.checkpoint_dir:
            found = load_latest_checkpoint(self.cfg.checkpoint_dir, self.dataset.id)
            if found is not None:
                self.events.append("restart_from", iteration=found[1])
                return found
        self.events.append("restart_from", iteration=0)
        dims = (self.dataset.dim, *self.cfg.student_hidden,
                int(self.dataset.labels.max()) + 1)
        return nnkit.init_model(dims, self.cfg.train.seed), 0

    # -- metrics ------------------------------------------------------------------

    def _record_interval(self, now, span, steps, loss, reader) -> None:
        self._interval_rows.append({
            "timestamp": round(now, 3),
            "images_per_s": round(steps * self.cfg.train.batch_size / span, 3),
            "buffer_volume": reader.volume if reader else 0,
            "teacher_count": reader.teacher_count if reader else 0,
            "loss": round(loss, 6),
        })

    def _record_epoch(self, iteration, model) -> None:
        k5 = min(5, int(self.dataset.labels.max()) + 1)
        self._epoch_rows.append({
            "iteration": iteration,
            "epoch": iteration // self.sampler.batches_per_epoch,
            "top1": round(nnkit.evaluate(model, self.eval_set, 1), 4),
            "top5": round(nnkit.evaluate(model, self.eval_set, k5), 4),
        })

    def _flush_metrics(self) -> None:
        if not self.cfg.metrics_dir:
            return
        for name, rows in (("intervals", self._interval_rows),
                           ("epochs", self._epoch_rows)):
            if not rows:
                continue
            path = os.path.join(self.cfg.metrics_dir,
                                f"student-{self.cfg.rank}-{name}.csv")
            with open(path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
                writer.writeheader()
                writer.writerows(rows)


def run_student(cfg: StudentConfig) -> StudentResult:
    return StudentNode(cfg).run()
