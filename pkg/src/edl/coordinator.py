"""Service manager: in-memory teacher registry with TTL liveness.

The registry is an ordered map guarded by one lock, so every operation is
atomic and the whole history linearizes; a background sweep expires records
whose deadline has passed. Students acquire teachers exclusively (one
student per teacher) and return or condemn them explicitly. Each state
transition is appended to an event log the tests and the harness replay.

Legal transitions: (none)->AVAILABLE, AVAILABLE->ASSIGNED,
ASSIGNED->AVAILABLE, {AVAILABLE,ASSIGNED}->EXPIRED, EXPIRED->AVAILABLE.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

from . import protocol
from .protocol import FrameConnection
from .runtime import Clock

log = logging.getLogger("edl.coordinator")

AVAILABLE = "AVAILABLE"
ASSIGNED = "ASSIGNED"
EXPIRED = "EXPIRED"


class RegistryError(Exception):
    reason = "registry-error"


class ConflictError(RegistryError):
    """node_id already registered live at a different address."""
    reason = "conflict"


class StaleNodeError(RegistryError):
    """Heartbeat or lookup for an expired/unknown node; re-register."""
    reason = "stale-node"


class NotOwnerError(RegistryError):
    """Release attempted by a student that does not hold the assignment."""
    reason = "not-owner"


@dataclass
class TeacherRecord:
    node_id: str
    address: str
    status: str = AVAILABLE
    assigned_to: str | None = None
    deadline: float = 0.0          # monotonic: last heartbeat + ttl
    available_since: float = 0.0   # for longest-AVAILABLE-first ordering

    def snapshot(self, now: float) -> dict:
        return {
            "node_id": self.node_id,
            "address": self.address,
            "status": self.status,
            "assigned_to": self.assigned_to,
            "ttl_remaining_ms": max(0, int((self.deadline - now) * 1000)),
        }


@dataclass(frozen=True)
class RegistryConfig:
    ttl: float = 3.0
    sweep_interval: float = 0.5

    def __post_init__(self):
        if self.ttl <= 0 or self.sweep_interval <= 0:
            raise ValueError("ttl and sweep_interval must be positive")
        if self.sweep_interval >= self.ttl:
            raise ValueError("sweep_interval must be shorter than the ttl")


class Registry:
    """TTL registry of teacher workers. All mutations serialize on one lock."""

    def __init__(self, config: RegistryConfig | None = None, clock: Clock | None = None):
        self.config = config or RegistryConfig()
        self.clock = clock or Clock()
        self._lock = threading.Lock()
        self._records: dict[str, TeacherRecord] = {}
        self._seq = 0
        self.events: list[dict] = []

    def _transition(self, rec: TeacherRecord, new_status: str, **detail) -> None:
        self._seq += 1
        event = {"seq": self._seq, "node_id": rec.node_id,
                 "from": rec.status, "to": new_status, **detail}
        rec.status = new_status
        self.events.append(event)
        log.info("transition", extra={"event": event})

    def register(self, node_id: str, address: str) -> dict:
        with self._lock:
            now = self.clock.now()
            rec = self._records.get(node_id)
            if rec is None:
                rec = TeacherRecord(node_id, address, status=EXPIRED)
                self._records[node_id] = rec
                rec.deadline = now + self.config.ttl
                rec.available_since = now
                rec.status = "(none)"
                self._transition(rec, AVAILABLE, address=address)
            elif rec.status == EXPIRED:
                rec.address = address
                rec.assigned_to = None
                rec.deadline = now + self.config.ttl
                rec.available_since = now
                self._transition(rec, AVAILABLE, address=address)
            elif rec.address != address:
                raise ConflictError(
                    f"{node_id} is live at {rec.address}, refusing {address}")
            else:
                rec.deadline = now + self.config.ttl  # idempotent refresh
            return protocol.register_ack(node_id, int(self.config.ttl * 1000))

    def heartbeat(self, node_id: str) -> dict:
        with self._lock:
            rec = self._records.get(node_id)
            if rec is None or rec.status == EXPIRED:
                raise StaleNodeError(f"{node_id} unknown or expired; re-register")
            new_deadline = self.clock.now() + self.config.ttl
            # deadlines only ever move forward
            rec.deadline = max(rec.deadline, new_deadline)
            return protocol.heartbeat_ack(node_id)

    def sweep(self, now: float | None = None) -> list[str]:
        with self._lock:
            if now is None:
                now = self.clock.now()
            expired = []
            for rec in self._records.values():
                if rec.status != EXPIRED and rec.deadline < now:
                    detail = {}
                    if rec.assigned_to is not None:
                        detail["was_assigned_to"] = rec.assigned_to
                    rec.assigned_to = None
                    self._transition(rec, EXPIRED, cause="ttl", **detail)
                    expired.append(rec.node_id)
            return expired

    def acquire_teachers(self, student_id: str, count: int) -> list[dict]:
        if count < 1:
            raise ValueError("count must be >= 1")
        with self._lock:
            now = self.clock.now()
            free = sorted((r for r in self._records.values() if r.status == AVAILABLE),
                          key=lambda r: (r.available_since, r.node_id))
            granted = []
            for rec in free[:count]:
                rec.assigned_to = student_id
                self._transition(rec, ASSIGNED, student_id=student_id)
                granted.append(rec.snapshot(now))
            return granted

    def release_teacher(self, student_id: str, node_id: str) -> dict:
        with self._lock:
            rec = self._records.get(node_id)
            if rec is None or rec.status == EXPIRED:
                raise StaleNodeError(f"{node_id} unknown or expired")
            if rec.status != ASSIGNED or rec.assigned_to != student_id:
                raise NotOwnerError(f"{node_id} is not assigned to {student_id}")
            rec.assigned_to = None
            rec.available_since = self.clock.now()
            self._transition(rec, AVAILABLE, released_by=student_id)
            return {"type": "RELEASE_ACK", "node_id": node_id}

    def report_failure(self, student_id: str, node_id: str) -> dict:
        """Student-observed failure: expire immediately, no TTL wait."""
        with self._lock:
            rec = self._records.get(node_id)
            if rec is None:
                raise StaleNodeError(f"{node_id} unknown")
            if rec.status != EXPIRED:
                detail = {}
                if rec.assigned_to is not None:
                    detail["was_assigned_to"] = rec.assigned_to
                rec.assigned_to = None
                self._transition(rec, EXPIRED, cause="reported",
                                 reported_by=student_id, **detail)
            return {"type": "REPORT_ACK", "node_id": node_id}

    def list_teachers(self) -> list[dict]:
        with self._lock:
            now = self.clock.now()
            return [rec.snapshot(now) for rec in self._records.values()]

    def get_status(self, node_id: str) -> str | None:
        with self._lock:
            rec = self._records.get(node_id)
            return rec.status if rec else None


class CoordinatorServer:
    """TCP front end: one handler thread per connection plus a sweep timer."""

    def __init__(self, listen: str, config: RegistryConfig | None = None,
                 clock: Clock | None = None):
        self.registry = Registry(config, clock)
        self._listener = protocol.open_listener(listen)
        self.address = protocol.listener_address(self._listener)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        for target in (self._accept_loop, self._sweep_loop):
            t = threading.Thread(target=target, daemon=True,
                                 name=f"coordinator-{target.__name__}")
            t.start()
            self._threads.append(t)
        log.info("coordinator listening", extra={"event": {"address": self.address}})

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        for t in self._threads:
            t.join(timeout=2)

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.is_set():
                self._stop.wait(0.2)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.registry.config.sweep_interval):
            expired = self.registry.sweep()
            if expired:
                log.info("sweep expired", extra={"event": {"expired": expired}})

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            t = threading.Thread(target=self._serve_connection,
                                 args=(FrameConnection(sock),), daemon=True)
            t.start()

    def _serve_connection(self, conn: FrameConnection) -> None:
        try:
            while not self._stop.is_set():
                try:
                    msg = conn.recv()
                except (protocol.ConnectionClosed, protocol.ProtocolError):
                    return
                conn.send(self._dispatch(msg))
        finally:
            conn.close()

    def _dispatch(self, msg: dict) -> dict:
        reg = self.registry
        try:
            mtype = msg["type"]
            if mtype == "REGISTER":
                return reg.register(msg["node_id"], msg["address"])
            if mtype == "HEARTBEAT":
                return reg.heartbeat(msg["node_id"])
            if mtype == "ACQUIRE_TEACHERS":
                return protocol.acquire_reply(
                    reg.acquire_teachers(msg["student_id"], int(msg["count"])))
            if mtype == "RELEASE_TEACHER":
                return reg.release_teacher(msg["student_id"], msg["node_id"])
            if mtype == "REPORT_FAILURE":
                return reg.report_failure(msg["student_id"], msg["node_id"])
            if mtype == "LIST_TEACHERS":
                return {"type": "LIST_REPLY", "teachers": reg.list_teachers()}
            return protocol.error(f"unexpected request type {mtype}")
        except RegistryError as exc:
            return protocol.error(exc.reason, detail=str(exc))
        except (KeyError, TypeError, ValueError) as exc:
            return protocol.error("bad-request", detail=str(exc))


def run_coordinator(listen: str, ttl_ms: int, sweep_ms: int) -> int:
    """Blocking entry point used by ``edl coordinator``."""
    server = CoordinatorServer(
        listen, RegistryConfig(ttl=ttl_ms / 1000.0, sweep_interval=sweep_ms / 1000.0))
    print(f"coordinator listening on {server.address}", flush=True)
    server.serve_forever()
    return 0
