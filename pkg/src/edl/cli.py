"""One entry binary, many roles.

``edl coordinator|teacher|student`` run the long-lived nodes,
``edl pretrain`` produces a teacher model file, and ``edl sim|bench|sweep``
drive the experiment harness. Flags can also come from a JSON config file
(--config) whose keys mirror the flag names with underscores; explicit
flags win. Exit codes: 0 success, 1 configuration error, 2 runtime failure.
Logs go to stderr as JSON lines (level from EDL_LOG_LEVEL), metrics and
reports go to files.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness, nnkit
from .coordinator import run_coordinator
from .nnkit import TrainConfig
from .runtime import setup_logging
from .student_node import (
    DataSpec, SchedulerConfig, StudentConfig, run_student,
)
from .teacher_node import TeacherConfig, run_teacher


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse, but usage errors exit with code 1 (configuration error)."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_hidden(text: str) -> tuple[int, ...]:
    dims = tuple(int(x) for x in text.split(",") if x.strip())
    if not dims or any(d < 1 for d in dims):
        raise ConfigError(f"bad layer list {text!r}; expected e.g. 256,256")
    return dims


def _parse_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",") if x.strip()]


def _apply_config_file(args: argparse.Namespace, parser_defaults: dict) -> None:
    """Fill flags the user did not pass from --config; flags win."""
    if not getattr(args, "config", None):
        return
    with open(args.config) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(doc) - set(parser_defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, value in doc.items():
        if getattr(args, key) == parser_defaults[key]:   # not set on argv
            setattr(args, key, value)


def build_parser() -> _Parser:
    parser = _Parser(prog="edl", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="JSON file whose keys mirror the flags; flags win")
        return p

    p = add("coordinator", "run the service registry")
    p.add_argument("--listen", default="127.0.0.1:7070", help="host:port to bind")
    p.add_argument("--ttl-ms", type=int, default=3000, help="teacher liveness TTL")
    p.add_argument("--sweep-ms", type=int, default=500, help="expiry sweep period")

    p = add("teacher", "serve soft labels for one teacher model")
    p.add_argument("--id", required=True, help="unique node id")
    p.add_argument("--coordinator", required=True, help="registry address")
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port to bind")
    p.add_argument("--model", required=True, help="teacher model file")
    p.add_argument("--temperature", type=float, default=2.0)
    p.add_argument("--delay-ms", type=int, default=0,
                   help="simulated per-batch inference time")
    p.add_argument("--register-deadline-s", type=float, default=60.0,
                   help="give up if the coordinator stays unreachable this long")

    p = add("student", "run one training worker")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--world-size", type=int, default=1)
    p.add_argument("--coordinator", default="",
                   help="registry address (required in edl mode)")
    p.add_argument("--peers", default="",
                   help="comma-separated generation-0 ring addresses (optional; "
                        "rendezvous in the checkpoint dir is used otherwise)")
    p.add_argument("--mode", choices=["edl", "ntrain", "online"], default="edl")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--data-n", type=int, default=2048)
    p.add_argument("--data-dim", type=int, default=16)
    p.add_argument("--data-classes", type=int, default=10)
    p.add_argument("--data-spread", type=float, default=1.0)
    p.add_argument("--teacher-count", default="auto", help="n of teachers or 'auto'")
    p.add_argument("--lt", type=int, default=4, help="lower buffer threshold")
    p.add_argument("--ut", type=int, default=32, help="upper buffer threshold")
    p.add_argument("--alpha", type=float, default=1.0, help="hard-loss weight")
    p.add_argument("--beta", type=float, default=1.0, help="soft-loss weight")
    p.add_argument("--temperature", type=float, default=2.0)
    p.add_argument("--eta", type=float, default=0.05, help="learning rate")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0, help="model init + shuffle seed")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=0,
                   help="stop after this many iterations (0: full epoch budget)")
    p.add_argument("--checkpoint-dir", default="")
    p.add_argument("--checkpoint-interval", type=int, default=100)
    p.add_argument("--metrics-dir", default="")
    p.add_argument("--hidden", default="64", help="student hidden dims, e.g. 64")
    p.add_argument("--delay-ms", type=int, default=0,
                   help="simulated per-step compute time")
    p.add_argument("--teacher-model", default="", help="online mode model file")
    p.add_argument("--teacher-delay-ms", type=int, default=0,
                   help="online mode simulated inference time")
    p.add_argument("--cooldown-ms", type=int, default=2000,
                   help="min gap between acquire requests")
    p.add_argument("--probe-ms", type=int, default=100, help="scheduler probe period")
    p.add_argument("--pipeline-depth", type=int, default=2,
                   help="in-flight batches per teacher")

    p = add("pretrain", "train a teacher model on seeded blobs")
    p.add_argument("--seed", type=int, default=0, help="init + shuffle seed")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--data-n", type=int, default=4096)
    p.add_argument("--data-dim", type=int, default=16)
    p.add_argument("--data-classes", type=int, default=10)
    p.add_argument("--data-spread", type=float, default=1.0)
    p.add_argument("--hidden", default="256,256")
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=32)

    p = add("sim", "run a scenario file")
    p.add_argument("--scenario", required=True, help="scenario JSON document")
    p.add_argument("--out", default="", help="directory for report CSVs")

    p = add("bench", "run one mode and print its report")
    p.add_argument("--mode", choices=["ntrain", "online", "edl"], required=True)
    p.add_argument("--substrate", choices=["virtual", "process"], default="virtual")
    p.add_argument("--students", type=int, default=1)
    p.add_argument("--teachers", type=int, default=1)
    p.add_argument("--teacher-count", default="auto")
    p.add_argument("--d-s-ms", type=float, default=10.0, help="student step delay")
    p.add_argument("--d-t-ms", type=float, default=10.0, help="teacher batch delay")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=0)
    p.add_argument("--data-n", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="", help="directory for report CSVs")

    p = add("sweep", "teacher-count sweep over one scenario")
    p.add_argument("--teachers", default="1..8", help="range like 1..8 or list 1,2,4")
    p.add_argument("--d-s-ms", type=float, default=10.0)
    p.add_argument("--d-t-ms", type=float, default=42.0)
    p.add_argument("--students", type=int, default=1)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=400)
    p.add_argument("--data-n", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="", help="write the table as CSV here")

    return parser


def _run_student_command(args) -> int:
    mode_map = {"edl": "edl", "ntrain": "ntrain", "online": "online"}
    peers = tuple(p for p in args.peers.split(",") if p.strip())
    if peers and len(peers) != args.world_size:
        raise ConfigError(f"--peers lists {len(peers)} addresses, "
                          f"--world-size is {args.world_size}")
    if args.mode == "edl" and not args.coordinator:
        raise ConfigError("--coordinator is required in edl mode")
    if args.mode == "online" and not args.teacher_model:
        raise ConfigError("--teacher-model is required in online mode")
    teacher_count = args.teacher_count
    if teacher_count != "auto":
        teacher_count = int(teacher_count)
    cfg = StudentConfig(
        rank=args.rank, world_size=args.world_size,
        coordinator=args.coordinator, mode=mode_map[args.mode],
        data=DataSpec(seed=args.data_seed, n=args.data_n, dim=args.data_dim,
                      classes=args.data_classes, spread=args.data_spread),
        train=TrainConfig(eta=args.eta, alpha=args.alpha, beta=args.beta,
                          temperature=args.temperature,
                          batch_size=args.batch_size, seed=args.seed),
        sched=SchedulerConfig(lt=args.lt, ut=args.ut,
                              acquire_cooldown=args.cooldown_ms / 1000.0,
                              probe_interval=args.probe_ms / 1000.0,
                              pipeline_depth=args.pipeline_depth),
        epochs=args.epochs,
        checkpoint_dir=args.checkpoint_dir,
        checkpoint_interval=args.checkpoint_interval,
        metrics_dir=args.metrics_dir,
        student_hidden=_parse_hidden(args.hidden),
        teacher_model=args.teacher_model,
        step_delay=args.delay_ms / 1000.0,
        teacher_delay=args.teacher_delay_ms / 1000.0,
        peers=peers, teacher_count=teacher_count, max_steps=args.max_steps)
    result = run_student(cfg)
    print(json.dumps({"student": result.rank, "iterations": result.iterations,
                      "restarts": result.restarts, "top1": result.final_top1,
                      "top5": result.final_top5,
                      "throughput": round(result.throughput, 3),
                      "ledger": result.ledger}))
    return 0


def _run_pretrain(args) -> int:
    data = nnkit.make_blobs(args.data_seed, args.data_n, args.data_dim,
                            args.data_classes, args.data_spread)
    cfg = TrainConfig(eta=args.eta, alpha=1.0, beta=0.0,
                      batch_size=args.batch_size, seed=args.seed)
    model = nnkit.pretrain_teacher(data, cfg, args.epochs,
                                   hidden=_parse_hidden(args.hidden))
    nnkit.save_model(args.out, model)
    holdout = nnkit.make_blobs(args.data_seed + 7777, 1000, args.data_dim,
                               args.data_classes, args.data_spread)
    top1 = nnkit.evaluate(model, holdout, 1)
    top5 = nnkit.evaluate(model, holdout, min(5, args.data_classes))
    print(json.dumps({"model": args.out, "top1": top1, "top5": top5}))
    return 0


def _bench_scenario(args) -> harness.Scenario:
    mode = {"ntrain": harness.N_TRAINING, "online": harness.ONLINE,
            "edl": harness.EDL_DIST}[args.mode]
    teacher_count = args.teacher_count if hasattr(args, "teacher_count") else "auto"
    if teacher_count != "auto":
        teacher_count = int(teacher_count)
    return harness.Scenario(
        mode=mode, substrate=args.substrate, students=args.students,
        teachers=args.teachers, teacher_count=teacher_count,
        d_s=args.d_s_ms / 1000.0, d_t=args.d_t_ms / 1000.0,
        data=DataSpec(seed=args.seed, n=args.data_n),
        train=TrainConfig(eta=0.05, alpha=0.5, beta=0.5, temperature=2.0,
                          batch_size=32, seed=args.seed),
        epochs=args.epochs, max_steps=args.max_steps or None, seed=args.seed)


def _dispatch(args) -> int:
    if args.command == "coordinator":
        return run_coordinator(args.listen, args.ttl_ms, args.sweep_ms)
    if args.command == "teacher":
        return run_teacher(TeacherConfig(
            node_id=args.id, coordinator=args.coordinator, listen=args.listen,
            model_path=args.model, temperature=args.temperature,
            simulated_delay=args.delay_ms / 1000.0,
            register_deadline=args.register_deadline_s))
    if args.command == "student":
        return _run_student_command(args)
    if args.command == "pretrain":
        return _run_pretrain(args)
    if args.command == "sim":
        with open(args.scenario) as fh:
            scenario = harness.Scenario.from_json(fh.read())
        report = harness.run_scenario(scenario)
        print(report.summary())
        if args.out:
            harness.emit_report(report, args.out)
        return 0
    if args.command == "bench":
        report = harness.run_scenario(_bench_scenario(args))
        print(report.summary())
        if args.out:
            harness.emit_report(report, args.out)
        return 0
    if args.command == "sweep":
        base = harness.Scenario(
            mode=harness.EDL_DIST, substrate="virtual", students=args.students,
            d_s=args.d_s_ms / 1000.0, d_t=args.d_t_ms / 1000.0,
            data=DataSpec(seed=args.seed, n=args.data_n),
            train=TrainConfig(eta=0.05, alpha=0.5, beta=0.5, temperature=2.0,
                              batch_size=32, seed=args.seed),
            epochs=args.epochs, max_steps=args.max_steps or None, seed=args.seed)
        rows = harness.sweep_teachers(_parse_range(args.teachers), base)
        header = f"{'teachers':>8} {'throughput':>12} {'training_time':>14}"
        print(header)
        for row in rows:
            print(f"{row['teachers']:>8} {row['throughput']:>12.2f} "
                  f"{row['training_time']:>14.3f}")
        if args.out:
            import csv as _csv
            import os as _os
            _os.makedirs(_os.path.dirname(args.out) or ".", exist_ok=True)
            with open(args.out, "w", newline="") as fh:
                w = _csv.DictWriter(fh, fieldnames=list(rows[0]))
                w.writeheader()
                w.writerows(rows)
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    defaults = {k: parser._subparsers._group_actions[0]
                .choices[args.command].get_default(k)
                for k in vars(args) if k != "command"}
    try:
        _apply_config_file(args, defaults)
        return _dispatch(args)
    except ConfigError as exc:
        print(f"edl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"edl {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2


if __name__ == "__main__":
    sys.exit(main())
