"""Inference worker: serves tempered soft labels for dispatched batches.

A teacher process loads a pre-trained model, registers with the
coordinator, then runs three concerns side by side: connection readers
feeding a bounded queue of 4 pending batches, one compute worker that
answers them in order (optionally throttled by a per-batch simulated
delay, modeling a slower device), and a heartbeat task at one third of
the TTL the coordinator granted. A stale-node response to a heartbeat
triggers re-registration and the teacher carries on.
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass

import numpy as np

from . import nnkit, protocol
from .protocol import FrameConnection
from .runtime import Clock

log = logging.getLogger("edl.teacher")

COMPUTE_QUEUE_DEPTH = 4


@dataclass(frozen=True)
class TeacherConfig:
    node_id: str
    coordinator: str
    listen: str
    model_path: str
    temperature: float = 2.0
    simulated_delay: float = 0.0      # seconds per batch, serialized
    register_deadline: float = 60.0   # give up on the coordinator after this

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.simulated_delay < 0:
            raise ValueError("simulated delay must be >= 0")


def soft_label_reply(model: nnkit.Model, temperature: float, request: dict) -> dict:
    """INFER_REQUEST -> INFER_REPLY (or an ERROR carrying the batch_id)."""
    batch_id = request.get("batch_id")
    try:
        inputs = np.asarray(request["inputs"], dtype=np.float64)
        if inputs.ndim != 2:
            raise nnkit.ShapeError(f"inputs must be a matrix, got shape {inputs.shape}")
        probs = nnkit.tempered_softmax(nnkit.forward(model, inputs), temperature)
    except (nnkit.ShapeError, ValueError, TypeError) as exc:
        return protocol.error(f"bad inference request: {exc}", batch_id=batch_id)
    return protocol.infer_reply(batch_id, [list(map(float, row)) for row in probs],
                                temperature)


class RegistrationFailed(RuntimeError):
    """Coordinator unreachable past the configured deadline."""


class TeacherServer:
    def __init__(self, config: TeacherConfig, clock: Clock | None = None):
        self.config = config
        self.clock = clock or Clock()
        self.model, _ = nnkit.load_model(config.model_path)
        self._listener = protocol.open_listener(config.listen)
        self.address = protocol.listener_address(self._listener)
        self._stop = threading.Event()
        self._queue: queue.Queue = queue.Queue(maxsize=COMPUTE_QUEUE_DEPTH)
        self._threads: list[threading.Thread] = []
        self._conns: set[FrameConnection] = set()
        self._conns_lock = threading.Lock()
        self._ttl_ms = 3000
        self.batches_served = 0

    # -- coordinator side -----------------------------------------------

    def _coordinator_request(self, msg: dict, deadline: float) -> dict:
        """Request/reply with capped exponential backoff until ``deadline``."""
        backoff = 0.2
        while True:
            try:
                conn = FrameConnection.connect(self.config.coordinator, timeout=2.0)
                try:
                    return conn.request(msg, timeout=5.0)
                finally:
                    conn.close()
            except (OSError, protocol.ConnectionClosed, TimeoutError) as exc:
                if self.clock.now() >= deadline or self._stop.is_set():
                    raise RegistrationFailed(
                        f"coordinator {self.config.coordinator} unreachable: {exc}")
                self.clock.sleep(min(backoff, 10.0))
                backoff = min(backoff * 2, 10.0)

    def register(self) -> None:
        deadline = self.clock.now() + self.config.register_deadline
        reply = self._coordinator_request(
            protocol.register(self.config.node_id, self.address), deadline)
        if reply["type"] != "REGISTER_ACK":
            raise RegistrationFailed(f"registration rejected: {reply}")
        self._ttl_ms = int(reply["ttl_ms"])
        log.info("registered", extra={"event": {
            "node_id": self.config.node_id, "address": self.address,
            "ttl_ms": self._ttl_ms}})

    def _heartbeat_loop(self) -> None:
        period = (self._ttl_ms / 1000.0) / 3.0
        while not self._stop.wait(period):
            try:
                reply = self._coordinator_request(
                    protocol.heartbeat(self.config.node_id),
                    self.clock.now() + self.config.register_deadline)
            except RegistrationFailed:
                continue   # coordinator assumed to come back; keep serving
            if reply["type"] == "ERROR" and reply["reason"] == "stale-node":
                log.warning("stale heartbeat, re-registering")
                try:
                    self.register()
                    period = (self._ttl_ms / 1000.0) / 3.0
                except RegistrationFailed:
                    continue

    # -- inference side ---------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            t = threading.Thread(target=self._reader,
                                 args=(FrameConnection(sock),), daemon=True)
            t.start()

    def _reader(self, conn: FrameConnection) -> None:
        with self._conns_lock:
            self._conns.add(conn)
        try:
            while not self._stop.is_set():
                try:
                    msg = conn.recv()
                except (protocol.ConnectionClosed, protocol.ProtocolError):
                    return
                if msg["type"] == "INFER_REQUEST":
                    self._queue.put((conn, msg))   # blocks at depth 4
                else:
                    conn.send(protocol.error(f"unexpected {msg['type']}"))
        finally:
            conn.close()
            with self._conns_lock:
                self._conns.discard(conn)

    def _compute_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, msg = self._queue.get(timeout=0.2)
            except queue.Empty:
                continue
            if self.config.simulated_delay > 0:
                self.clock.sleep(self.config.simulated_delay)
            reply = soft_label_reply(self.model, self.config.temperature, msg)
            try:
                conn.send(reply)
            except protocol.ConnectionClosed:
                pass   # student went away; the batch will be re-dispatched
            self.batches_served += 1

    # -- lifecycle --------------------------------------------------------

    def start(self) -> None:
        self.register()
        for target in (self._accept_loop, self._compute_loop, self._heartbeat_loop):
            t = threading.Thread(target=target, daemon=True,
                                 name=f"teacher-{target.__name__}")
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        """Abrupt shutdown matching a process kill: sockets just drop."""
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conns_lock:
            for conn in list(self._conns):
                conn.close()
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


def run_teacher(config: TeacherConfig) -> int:
    """Blocking entry point used by ``edl teacher``."""
    try:
        server = TeacherServer(config)
    except (OSError, nnkit.ModelFileError) as exc:
        print(f"teacher startup failed: {exc}", flush=True)
        return 2
    try:
        print(f"teacher {config.node_id} listening on {server.address}", flush=True)
        server.serve_forever()
    except RegistrationFailed as exc:
        print(f"teacher {config.node_id} giving up: {exc}", flush=True)
        return 2
    return 0
