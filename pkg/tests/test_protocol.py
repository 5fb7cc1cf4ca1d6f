"""Frame and message vocabulary tests, including the fuzz harness."""

import json
import socket
import struct
import threading

import numpy as np
import pytest

from edl import protocol
from edl.protocol import (
    FrameConnection, FrameDecoder, FrameTooLarge, NeedMoreData, ProtocolError,
    decode, encode,
)

SAMPLE_MESSAGES = [
    protocol.register("t1", "127.0.0.1:7001"),
    protocol.register_ack("t1", 3000),
    protocol.heartbeat("t1"),
    protocol.heartbeat_ack("t1"),
    protocol.acquire_teachers("s0", 3),
    protocol.acquire_reply([{"node_id": "t1", "address": "127.0.0.1:7001"}]),
    protocol.release_teacher("s0", "t1"),
    {"type": "RELEASE_ACK", "node_id": "t1"},
    protocol.report_failure("s0", "t1"),
    {"type": "REPORT_ACK", "node_id": "t1"},
    protocol.infer_request("s0-7", [[1.0, 2.5], [3.0, -0.125]]),
    protocol.infer_reply("s0-7", [[0.25, 0.75]], 2.0),
    protocol.list_teachers(),
    {"type": "LIST_REPLY", "teachers": []},
    {"type": "CHUNK", "generation": 0, "step": 1, "chunk_index": 2, "payload": "AAA="},
    protocol.error("boom", batch_id="s0-7"),
]


class TestRoundTrip:
    def test_heartbeat_frame_contains_type(self):
        frame = encode(protocol.heartbeat("t1"))
        assert b'"type":"HEARTBEAT"' in frame
        msg, used = decode(frame)
        assert used == len(frame)
        assert msg == protocol.heartbeat("t1")

    @pytest.mark.parametrize("msg", SAMPLE_MESSAGES,
                             ids=[m["type"] for m in SAMPLE_MESSAGES])
    def test_every_type_round_trips(self, msg):
        assert decode(encode(msg))[0] == msg

    def test_floats_survive_bit_identically(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            mat = rng.normal(scale=1e3, size=(32, 8))
            msg = protocol.infer_request("b", [list(map(float, row)) for row in mat])
            back = decode(encode(msg))[0]
            assert np.array(back["inputs"]).tobytes() == mat.tobytes()

    def test_concatenated_frames_are_self_delimiting(self):
        stream = b"".join(encode(m) for m in SAMPLE_MESSAGES)
        dec = FrameDecoder()
        # feed in awkward 7-byte slices
        got = []
        for i in range(0, len(stream), 7):
            got.extend(dec.feed(stream[i:i + 7]))
        assert got == SAMPLE_MESSAGES
        assert dec.pending_bytes == 0


class TestErrors:
    def test_truncated_frame_needs_more_data(self):
        frame = encode(protocol.heartbeat("t"))
        for cut in (0, 3, len(frame) - 1):
            with pytest.raises(NeedMoreData):
                decode(frame[:cut])

    def test_header_claiming_32mib_rejected(self):
        with pytest.raises(FrameTooLarge):
            decode(struct.pack(">I", 32 * 1024 * 1024) + b"x")

    def test_oversize_payload_rejected_on_encode(self):
        big = protocol.error("x" * (protocol.MAX_FRAME_BYTES + 1))
        with pytest.raises(FrameTooLarge):
            encode(big)

    def test_unknown_type_rejected(self):
        payload = json.dumps({"type": "NOPE"}).encode()
        with pytest.raises(ProtocolError):
            decode(struct.pack(">I", len(payload)) + payload)

    def test_non_object_payload_rejected(self):
        payload = b"[1,2,3]"
        with pytest.raises(ProtocolError):
            decode(struct.pack(">I", len(payload)) + payload)

    def test_missing_required_field_rejected(self):
        payload = json.dumps({"type": "REGISTER", "node_id": "t"}).encode()
        with pytest.raises(ProtocolError):
            decode(struct.pack(">I", len(payload)) + payload)

    def test_nan_rejected_both_ways(self):
        with pytest.raises(ProtocolError):
            encode(protocol.infer_reply("b", [[float("nan")]], 1.0))
        payload = b'{"type":"ERROR","reason":"r","x":NaN}'
        with pytest.raises(ProtocolError):
            decode(struct.pack(">I", len(payload)) + payload)

    def test_fuzz_never_crashes(self):
        rng = np.random.default_rng(1)
        ok = 0
        for _ in range(100_000):
            n = int(rng.integers(0, 40))
            blob = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
            try:
                decode(blob)
                ok += 1
            except (NeedMoreData, ProtocolError):
                pass
        # sanity: the fuzz actually exercised the error paths
        assert ok < 100_000


class TestFrameConnection:
    def test_request_reply_over_loopback(self):
        listener = protocol.open_listener("127.0.0.1:0")
        addr = protocol.listener_address(listener)
        served = []

        def serve():
            sock, _ = listener.accept()
            conn = FrameConnection(sock)
            msg = conn.recv(timeout=5)
            served.append(msg)
            conn.send(protocol.heartbeat_ack(msg["node_id"]))
            conn.close()

        t = threading.Thread(target=serve, daemon=True)
        t.start()
        client = FrameConnection.connect(addr)
        reply = client.request(protocol.heartbeat("t9"), timeout=5)
        t.join(timeout=5)
        listener.close()
        client.close()
        assert served == [protocol.heartbeat("t9")]
        assert reply == protocol.heartbeat_ack("t9")

    def test_mid_frame_drop_is_a_clean_connection_error(self):
        listener = protocol.open_listener("127.0.0.1:0")
        addr = protocol.listener_address(listener)

        def serve():
            sock, _ = listener.accept()
            frame = encode(protocol.heartbeat("t"))
            sock.sendall(frame[: len(frame) // 2])   # half a frame, then vanish
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER,
                            struct.pack("ii", 1, 0))
            sock.close()

        t = threading.Thread(target=serve, daemon=True)
        t.start()
        client = FrameConnection.connect(addr)
        with pytest.raises(protocol.ConnectionClosed):
            client.recv(timeout=5)
        t.join(timeout=5)
        listener.close()
        client.close()
