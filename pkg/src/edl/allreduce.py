"""Ring all-reduce over the student peer group.

The collective averages equal-length float64 vectors across N peers in the
classic 2(N-1)-step ring: N-1 scatter-reduce steps over N chunks, then N-1
all-gather steps. Each step is one full-duplex neighbor exchange (send one
chunk right, receive one chunk left), so a rank performs exactly 2(N-1)
sends per call. Reduction runs into a scratch buffer and the caller's
vector is never mutated: a peer death mid-collective raises
MembershipChange on every survivor still inside the call, and nothing
partial can leak into a model. A survivor whose exchanges all completed
before the death returns the exact full mean (its inputs were already in
flight) and observes the membership change at its next collective.

Chunk payloads travel as CHUNK protocol frames with the raw little-endian
float64 bytes base64-encoded in the JSON payload field.

Group membership is re-formed through a rendezvous directory shared by all
students (normally the checkpoint directory): each generation has a
subdirectory where every peer publishes its (rank, address); a group forms
when all N ranks are present.
"""

from __future__ import annotations

import base64
import json
import os
import queue
import selectors
import socket
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import protocol
from .protocol import FrameConnection, FrameDecoder, ProtocolError


class MembershipChange(RuntimeError):
    """A peer vanished or changed generation; the collective aborted."""


class SimulatedKill(RuntimeError):
    """Raised inside a test rank whose transport was scheduled to die."""


@dataclass(frozen=True)
class PeerGroup:
    """Ordered ring membership for one generation."""

    addresses: tuple[str, ...]
    rank: int
    generation: int

    def __post_init__(self):
        n = len(self.addresses)
        if not 0 <= self.rank < n:
            raise ValueError(f"rank {self.rank} outside group of {n}")
        if len(set(self.addresses)) != n:
            raise ValueError("peer addresses must be unique")

    @property
    def size(self) -> int:
        return len(self.addresses)


def chunk_bounds(length: int, n: int) -> list[tuple[int, int]]:
    """N contiguous chunks; remainder elements fold into the last chunk."""
    base = length // n
    bounds = [(i * base, (i + 1) * base) for i in range(n - 1)]
    bounds.append(((n - 1) * base, length))
    return bounds


def ring_allreduce(local: np.ndarray, group_size: int, rank: int,
                   transport: "RingTransport | None",
                   generation: int = 0) -> np.ndarray:
    """Element-wise mean of every rank's ``local`` vector.

    ``local`` is read, never written; the result is a fresh array. For
    group_size == 1 no transport is needed.
    """
    vec = np.ascontiguousarray(local, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError(f"collective takes flat vectors, got shape {vec.shape}")
    n = group_size
    if n == 1:
        return vec.copy()
    if transport is None:
        raise ValueError("a transport is required for group_size > 1")
    bounds = chunk_bounds(vec.size, n)
    acc = vec.copy()   # scratch; committed only by returning

    def one_exchange(step: int, send_idx: int, recv_idx: int) -> np.ndarray:
        lo, hi = bounds[send_idx]
        payload = acc[lo:hi].tobytes()
        got_idx, got = transport.exchange(generation, step, send_idx, payload)
        if got_idx != recv_idx:
            raise ProtocolError(f"step {step}: expected chunk {recv_idx}, got {got_idx}")
        rlo, rhi = bounds[recv_idx]
        arr = np.frombuffer(got, dtype="<f8")
        if arr.size != rhi - rlo:
            raise ProtocolError(
                f"step {step}: chunk {recv_idx} has {arr.size} elements, want {rhi - rlo}")
        return arr

    for s in range(n - 1):
        recv_idx = (rank - s - 1) % n
        arr = one_exchange(s, (rank - s) % n, recv_idx)
        lo, hi = bounds[recv_idx]
        acc[lo:hi] += arr
    for s in range(n - 1):
        recv_idx = (rank - s) % n
        arr = one_exchange(n - 1 + s, (rank + 1 - s) % n, recv_idx)
        lo, hi = bounds[recv_idx]
        acc[lo:hi] = arr
    acc /= n
    return acc


def ring_reduce_values(vectors: list[np.ndarray]) -> np.ndarray:
    """The exact value the ring produces, computed without any transport.

    Reproduces the collective's floating-point order (chunk c accumulates
    x_c, then x_{c+1}, ... around the ring) so single-process simulations
    match multi-process runs bit for bit.
    """
    n = len(vectors)
    vecs = [np.ascontiguousarray(v, dtype=np.float64) for v in vectors]
    if n == 1:
        return vecs[0].copy()
    length = vecs[0].size
    if any(v.size != length for v in vecs):
        raise ProtocolError("vector length mismatch across ranks")
    out = np.empty(length)
    for c, (lo, hi) in enumerate(chunk_bounds(length, n)):
        seg = vecs[c][lo:hi].copy()
        for k in range(1, n):
            seg = seg + vecs[(c + k) % n][lo:hi]
        out[lo:hi] = seg
    out /= n
    return out


# ---------------------------------------------------------------------------
# Transports


class RingTransport:
    """One full-duplex neighbor exchange per collective step."""

    sends: int

    def exchange(self, generation: int, step: int, chunk_index: int,
                 payload: bytes) -> tuple[int, bytes]:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


_EOF = object()


class LocalRing:
    """In-process ring of queues, instrumented and fault-injectable."""

    def __init__(self, n: int):
        self.n = n
        self.queues: list[queue.Queue] = [queue.Queue() for _ in range(n)]

    def transport(self, rank: int, kill_after: int | None = None,
                  timeout: float = 10.0) -> "LocalRingTransport":
        return LocalRingTransport(self, rank, kill_after, timeout)


class LocalRingTransport(RingTransport):
    def __init__(self, ring: LocalRing, rank: int, kill_after: int | None,
                 timeout: float):
        self.ring = ring
        self.rank = rank
        self.kill_after = kill_after
        self.timeout = timeout
        self.sends = 0
        self._dead = False

    def _die(self) -> None:
        # a dying process closes its sockets: the right neighbor sees EOF
        if not self._dead:
            self._dead = True
            self.ring.queues[(self.rank + 1) % self.ring.n].put(_EOF)

    def exchange(self, generation, step, chunk_index, payload):
        if self._dead:
            raise SimulatedKill(f"rank {self.rank} is dead")
        if self.kill_after is not None and self.sends >= self.kill_after:
            self._die()
            raise SimulatedKill(f"rank {self.rank} killed before send {self.sends}")
        self.sends += 1
        self.ring.queues[(self.rank + 1) % self.ring.n].put(
            (generation, step, chunk_index, payload))
        try:
            item = self.ring.queues[self.rank].get(timeout=self.timeout)
        except queue.Empty:
            self._die()
            raise MembershipChange(f"rank {self.rank}: no data from left neighbor")
        if item is _EOF:
            self._die()   # cascade the abort around the ring
            raise MembershipChange(f"rank {self.rank}: left neighbor gone")
        got_gen, got_step, got_idx, got_payload = item
        if got_gen != generation:
            self._die()
            raise MembershipChange(f"generation {got_gen} != {generation}")
        if got_step != step:
            raise ProtocolError(f"step skew: got {got_step}, at {step}")
        return got_idx, got_payload

    def close(self) -> None:
        self._die()


class SocketRingTransport(RingTransport):
    """Neighbor exchange over two framed TCP connections.

    Send and receive are pumped together with a selector so simultaneous
    large sends around the ring cannot deadlock on full socket buffers.
    """

    def __init__(self, send_conn: FrameConnection, recv_conn: FrameConnection,
                 timeout: float = 60.0):
        self._send_sock = send_conn.socket
        self._recv_sock = recv_conn.socket
        self._send_conn = send_conn
        self._recv_conn = recv_conn
        self._decoder = FrameDecoder()
        self._inbox: list[dict] = []
        self.timeout = timeout
        self.sends = 0

    def exchange(self, generation, step, chunk_index, payload):
        msg = {"type": "CHUNK", "generation": generation, "step": step,
               "chunk_index": chunk_index,
               "payload": base64.b64encode(payload).decode("ascii")}
        try:
            frame = protocol.encode(msg)
            self.sends += 1
            got = self._pump(frame)
        except (OSError, protocol.ConnectionClosed) as exc:
            self.close()
            raise MembershipChange(f"peer connection failed: {exc}") from exc
        if got.get("generation") != generation:
            self.close()
            raise MembershipChange(
                f"peer at generation {got.get('generation')}, we are at {generation}")
        if got.get("step") != step:
            raise ProtocolError(f"step skew: got {got.get('step')}, at {step}")
        return got["chunk_index"], base64.b64decode(got["payload"])

    def _pump(self, frame: bytes) -> dict:
        """Push ``frame`` right while draining the left connection."""
        deadline = time.monotonic() + self.timeout
        out = memoryview(frame)
        sel = selectors.DefaultSelector()
        self._send_sock.setblocking(False)
        self._recv_sock.setblocking(False)
        try:
            sel.register(self._send_sock, selectors.EVENT_WRITE)
            sel.register(self._recv_sock, selectors.EVENT_READ)
            sent_all = False
            while not (sent_all and self._inbox):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise protocol.ConnectionClosed("exchange timed out")
                for key, _ in sel.select(remaining):
                    if key.fileobj is self._send_sock:
                        n = self._send_sock.send(out)
                        out = out[n:]
                        if not out:
                            sent_all = True
                            sel.unregister(self._send_sock)
                    else:
                        data = self._recv_sock.recv(65536)
                        if not data:
                            raise protocol.ConnectionClosed("left neighbor closed")
                        for m in self._decoder.feed(data):
                            if m.get("type") != "CHUNK":
                                raise ProtocolError(f"unexpected {m.get('type')} in ring")
                            self._inbox.append(m)
            return self._inbox.pop(0)
        finally:
            sel.close()
            try:
                self._send_sock.setblocking(True)
                self._recv_sock.setblocking(True)
            except OSError:
                pass

    def close(self) -> None:
        self._send_conn.close()
        if self._recv_conn is not self._send_conn:
            self._recv_conn.close()


def connect_ring(group: PeerGroup, listener: socket.socket,
                 timeout: float = 30.0, io_timeout: float = 60.0) -> SocketRingTransport:
    """Dial the right neighbor, accept the left one, validate the handshake."""
    n = group.size
    if n < 2:
        raise ValueError("a ring needs at least two peers")
    right = group.addresses[(group.rank + 1) % n]
    deadline = time.monotonic() + timeout
    send_conn = None
    while True:
        try:
            send_conn = FrameConnection.connect(right, timeout=2.0)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise MembershipChange(f"right neighbor {right} unreachable")
            time.sleep(0.05)
    hello = {"type": "CHUNK", "generation": group.generation, "step": -1,
             "chunk_index": group.rank, "payload": ""}
    send_conn.send(hello)

    listener.settimeout(max(0.1, deadline - time.monotonic()))
    try:
        sock, _ = listener.accept()
    except socket.timeout:
        send_conn.close()
        raise MembershipChange("left neighbor never connected")
    finally:
        listener.settimeout(None)
    recv_conn = FrameConnection(sock)
    try:
        greet = recv_conn.recv(timeout=max(0.1, deadline - time.monotonic()))
    except (protocol.ConnectionClosed, TimeoutError) as exc:
        send_conn.close()
        recv_conn.close()
        raise MembershipChange(f"handshake failed: {exc}")
    expected_left = (group.rank - 1) % n
    if (greet.get("type") != "CHUNK" or greet.get("step") != -1
            or greet.get("generation") != group.generation
            or greet.get("chunk_index") != expected_left):
        send_conn.close()
        recv_conn.close()
        raise MembershipChange(f"bad handshake from left neighbor: {greet}")
    return SocketRingTransport(send_conn, recv_conn, timeout=io_timeout)


# ---------------------------------------------------------------------------
# Rendezvous


def form_group(rendezvous_dir: str, world_size: int, rank: int, address: str,
               min_generation: int = 0, timeout: float = 60.0,
               poll: float = 0.02) -> PeerGroup:
    """Blocking barrier: publish (rank, address), wait for all N peers.

    Peers join generation max(min_generation, newest existing); a newest
    generation that is already full and does not contain this process is
    treated as stale and superseded. Survivors of an aborted collective
    call back in with min_generation = old generation + 1.
    """
    os.makedirs(rendezvous_dir, exist_ok=True)
    deadline = time.monotonic() + timeout

    def generations() -> list[int]:
        gens = []
        for name in os.listdir(rendezvous_dir):
            if name.startswith("gen-") and name[4:].isdigit():
                gens.append(int(name[4:]))
        return sorted(gens)

    def members(gen: int) -> dict[int, str]:
        gdir = os.path.join(rendezvous_dir, f"gen-{gen}")
        out = {}
        try:
            names = os.listdir(gdir)
        except FileNotFoundError:
            return out
        for name in names:
            if not (name.startswith("rank-") and name.endswith(".json")):
                continue
            try:
                with open(os.path.join(gdir, name)) as fh:
                    entry = json.load(fh)
                out[int(entry["rank"])] = entry["address"]
            except (OSError, ValueError, KeyError):
                continue   # torn read; the poll loop retries
        return out

    gens = generations()
    target = min_generation
    if gens:
        newest = gens[-1]
        peers = members(newest)
        if newest >= min_generation and len(peers) >= world_size \
                and peers.get(rank) != address:
            target = newest + 1   # full group that predates us: stale
        else:
            target = max(min_generation, newest)

    gdir = os.path.join(rendezvous_dir, f"gen-{target}")
    os.makedirs(gdir, exist_ok=True)
    entry = json.dumps({"rank": rank, "address": address})
    from .runtime import atomic_write_text
    atomic_write_text(os.path.join(gdir, f"rank-{rank}.json"), entry)

    while True:
        peers = members(target)
        if len(peers) >= world_size and set(peers) == set(range(world_size)):
            if peers[rank] != address:
                raise MembershipChange(
                    f"rank {rank} slot in generation {target} taken by {peers[rank]}")
            return PeerGroup(tuple(peers[r] for r in range(world_size)), rank, target)
        if time.monotonic() > deadline:
            raise TimeoutError(
                f"rendezvous gen-{target}: {len(peers)}/{world_size} peers after {timeout}s")
        time.sleep(poll)


def run_group_collective(vectors: list[np.ndarray], kill_rank: int | None = None,
                         kill_after: int | None = None,
                         timeout: float = 10.0) -> list:
    """Run one in-process collective across len(vectors) threads.

    Returns per-rank results; a rank that aborted yields the exception
    instance instead. Used by tests and the virtual-clock harness.
    """
    n = len(vectors)
    ring = LocalRing(n)
    results: list = [None] * n

    def work(r):
        tr = ring.transport(r, kill_after if r == kill_rank else None, timeout)
        try:
            results[r] = ring_allreduce(vectors[r], n, r, tr)
        except (MembershipChange, SimulatedKill, ProtocolError) as exc:
            results[r] = exc

    threads = [threading.Thread(target=work, args=(r,)) for r in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=timeout + 5)
    return results
