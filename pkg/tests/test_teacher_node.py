"""Teacher worker: inference contract, liveness, throughput throttling."""

import time

import numpy as np
import pytest

from edl import nnkit, protocol
from edl.coordinator import CoordinatorServer, RegistryConfig
from edl.nnkit import TrainConfig, init_model, make_blobs
from edl.protocol import FrameConnection
from edl.teacher_node import (
    RegistrationFailed, TeacherConfig, TeacherServer, soft_label_reply,
)


@pytest.fixture
def teacher_model(tmp_path):
    model = init_model([8, 16, 5], seed=0)
    path = tmp_path / "teacher.edld"
    nnkit.save_model(str(path), model)
    return model, str(path)


@pytest.fixture
def coordinator():
    server = CoordinatorServer("127.0.0.1:0", RegistryConfig(ttl=1.0, sweep_interval=0.1))
    server.start()
    yield server
    server.stop()


def start_teacher(coordinator, model_path, **overrides):
    cfg = TeacherConfig(node_id=overrides.pop("node_id", "t1"),
                        coordinator=coordinator.address,
                        listen="127.0.0.1:0",
                        model_path=model_path,
                        **overrides)
    server = TeacherServer(cfg)
    server.start()
    return server


class TestSoftLabelReply:
    def test_echoes_batch_id(self, teacher_model):
        model, _ = teacher_model
        req = protocol.infer_request("s0-7", [[0.0] * 8])
        assert soft_label_reply(model, 2.0, req)["batch_id"] == "s0-7"

    def test_rows_sum_to_one(self, teacher_model):
        model, _ = teacher_model
        rng = np.random.default_rng(0)
        req = protocol.infer_request("b", rng.normal(size=(16, 8)).tolist())
        reply = soft_label_reply(model, 2.0, req)
        sums = np.array(reply["probs"]).sum(axis=1)
        assert np.abs(sums - 1).max() < 1e-9

    def test_dimension_mismatch_is_error_reply(self, teacher_model):
        model, _ = teacher_model
        req = protocol.infer_request("b", [[1.0, 2.0]])
        reply = soft_label_reply(model, 2.0, req)
        assert reply["type"] == "ERROR" and reply["batch_id"] == "b"


class TestServer:
    def test_serves_inference_matching_local_oracle(self, coordinator, teacher_model):
        model, path = teacher_model
        server = start_teacher(coordinator, path, temperature=3.0)
        try:
            conn = FrameConnection.connect(server.address)
            rng = np.random.default_rng(1)
            inputs = rng.normal(size=(12, 8))
            req = protocol.infer_request("q1", [list(map(float, r)) for r in inputs])
            reply = conn.request(req, timeout=10)
            conn.close()
            assert reply["type"] == "INFER_REPLY"
            assert reply["batch_id"] == "q1"
            assert reply["temperature"] == 3.0
            local = nnkit.tempered_softmax(nnkit.forward(model, inputs), 3.0)
            # decoded floats must be bit-identical to a local evaluation
            assert np.array(reply["probs"]).tobytes() == local.tobytes()
        finally:
            server.stop()

    def test_pipelined_requests_each_answered_once(self, coordinator, teacher_model):
        _, path = teacher_model
        server = start_teacher(coordinator, path)
        try:
            conn = FrameConnection.connect(server.address)
            ids = [f"b{i}" for i in range(10)]
            for bid in ids:
                conn.send(protocol.infer_request(bid, [[0.0] * 8]))
            got = [conn.recv(timeout=10)["batch_id"] for _ in ids]
            conn.close()
            assert sorted(got) == sorted(ids)
            assert len(set(got)) == len(ids)
        finally:
            server.stop()

    def test_error_reply_keeps_connection_open(self, coordinator, teacher_model):
        _, path = teacher_model
        server = start_teacher(coordinator, path)
        try:
            conn = FrameConnection.connect(server.address)
            bad = conn.request(protocol.infer_request("bad", [[1.0]]), timeout=10)
            assert bad["type"] == "ERROR"
            ok = conn.request(protocol.infer_request("ok", [[0.0] * 8]), timeout=10)
            assert ok["type"] == "INFER_REPLY" and ok["batch_id"] == "ok"
            conn.close()
        finally:
            server.stop()

    def test_registers_and_stays_alive_via_heartbeats(self, coordinator, teacher_model):
        _, path = teacher_model
        server = start_teacher(coordinator, path)
        try:
            # ttl is 1s; survive well past several ttl periods
            time.sleep(2.5)
            records = coordinator.registry.list_teachers()
            assert records[0]["node_id"] == "t1"
            assert records[0]["status"] == "AVAILABLE"
        finally:
            server.stop()

    def test_reregisters_after_forced_expiry(self, coordinator, teacher_model):
        _, path = teacher_model
        server = start_teacher(coordinator, path)
        try:
            coordinator.registry.report_failure("s0", "t1")
            assert coordinator.registry.get_status("t1") == "EXPIRED"
            deadline = time.monotonic() + 5
            while time.monotonic() < deadline:
                if coordinator.registry.get_status("t1") == "AVAILABLE":
                    break
                time.sleep(0.05)
            assert coordinator.registry.get_status("t1") == "AVAILABLE"
        finally:
            server.stop()

    def test_throughput_tracks_simulated_delay(self, coordinator, teacher_model):
        _, path = teacher_model
        delay = 0.04
        server = start_teacher(coordinator, path, simulated_delay=delay)
        try:
            conn = FrameConnection.connect(server.address)
            # keep the pipeline saturated: 3 in flight at all times
            sent = 0
            for _ in range(3):
                conn.send(protocol.infer_request(f"b{sent}", [[0.0] * 8]))
                sent += 1
            t0 = time.monotonic()
            answered = 0
            window = 2.0
            while time.monotonic() - t0 < window:
                conn.recv(timeout=5)
                answered += 1
                conn.send(protocol.infer_request(f"b{sent}", [[0.0] * 8]))
                sent += 1
            elapsed = time.monotonic() - t0
            conn.close()
            rate = answered / elapsed
            assert rate == pytest.approx(1.0 / delay, rel=0.10)
        finally:
            server.stop()

    def test_unreachable_coordinator_fails_after_deadline(self, teacher_model, tmp_path):
        _, path = teacher_model
        cfg = TeacherConfig(node_id="t1", coordinator="127.0.0.1:1",
                            listen="127.0.0.1:0", model_path=path,
                            register_deadline=0.5)
        server = TeacherServer(cfg)
        with pytest.raises(RegistrationFailed):
            server.register()
