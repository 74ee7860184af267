"""Command-line front end and benchmark harness.

Benchmarks compare the copy-based boundary against the shared-memory
path, scenario by scenario, and emit one CSV row per grid point.  The
schema is fixed:

    scenario,param,baseline_ns,sbpf_ns,speedup,copies_baseline,copies_sbpf

Timing columns are per-operation means; copy columns are the counted
payload bytes of the measured phase, so a rerun with the same seed
reproduces every non-timing column exactly.  When rows go to a file the
report also renders one figure per scenario next to it.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import platform
import random
import secrets
import statistics
import struct
import sys
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from typing import NamedTuple

from . import integrity, isa, pss, transport
from .errors import (
    DecodeError,
    IntegrityError,
    SbpfError,
    TransportError,
    VerificationRejected,
    VmError,
)
from .transport import BoundaryChannel, UserSession, baseline_statfs, sbpf_statfs
from .verifier import VerifiedProgram, verify
from .vm import STANDARD_HELPER_IDS, VmInstance, standard_helper_table

CSV_HEADER = ("scenario", "param", "baseline_ns", "sbpf_ns",
              "speedup", "copies_baseline", "copies_sbpf")

DEFAULT_RING_SIZES = tuple(range(32, 257, 32))
DEFAULT_COPY_LENGTHS = (9, 38, 67, 96, 126, 155, 184, 214, 243)


class BenchRow(NamedTuple):
    scenario: str
    param: int
    baseline_ns: int
    sbpf_ns: int
    speedup: float
    copies_baseline: int
    copies_sbpf: int


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, scenario: str, param: int, baseline_ns: float, sbpf_ns: float,
            copies_baseline: int, copies_sbpf: int) -> BenchRow:
        row = BenchRow(scenario, param, int(round(baseline_ns)),
                       int(round(sbpf_ns)),
                       round(baseline_ns / sbpf_ns, 3),
                       copies_baseline, copies_sbpf)
        self.rows.append(row)
        return row

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in self.rows:
            writer.writerow([row.scenario, row.param, row.baseline_ns,
                             row.sbpf_ns, f"{row.speedup:.3f}",
                             row.copies_baseline, row.copies_sbpf])
        return out.getvalue()


def _metadata(iterations: int, seed: int) -> dict:
    return {
        "host": platform.platform(),
        "python": platform.python_version(),
        "iterations": iterations,
        "seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


def trimmed_mean(values: list[float]) -> float:
    """Drop the single fastest and slowest repetition, average the rest."""
    if len(values) <= 2:
        return statistics.fmean(values)
    ordered = sorted(values)
    return statistics.fmean(ordered[1:-1])


# --- ring scenario ---------------------------------------------------------------

def cmd_bench_ring(session: UserSession, sizes=DEFAULT_RING_SIZES,
                   repetitions: int = 5, seed: int = 2024) -> BenchReport:
    """Move batches of 8-byte records to the service through both paths.

    Baseline: one channel round trip per record.  Shared ring: push the
    whole batch from this side, then one drain request.  Producer and
    consumer costs are timed separately and summed; the drain request is
    the consumer cost, paid once per batch, which is where the batch-size
    amortization comes from.
    """
    channel = session.channel
    ring = session.ring
    rng = random.Random(seed)
    report = BenchReport(metadata=_metadata(repetitions, seed))

    # warm both paths so the first grid point is not measured cold
    warm = struct.pack("<Q", 0)
    for _ in range(512):
        channel.ring_record(warm)
    for _ in range(512):
        ring.push(warm)
    channel.ring_drain()

    batches = {}
    copy_columns = {}
    for size in sizes:
        records = [struct.pack("<Q", rng.getrandbits(63)) for _ in range(size)]
        batches[size] = records

        # counter calibration: one clean batch through each path
        copies0, base_trips0 = channel.copy_bytes, channel.round_trips
        for record in records:
            channel.ring_record(record)
        copies_baseline = channel.copy_bytes - copies0
        assert channel.round_trips - base_trips0 == size

        copies0 = channel.copy_bytes
        for record in records:
            if not ring.push(record):
                raise RuntimeError("ring full during calibration")
        channel.ring_drain()
        copy_columns[size] = (copies_baseline, channel.copy_bytes - copies0)

    # repetition-major order, and inside a repetition the two paths
    # alternate batch by batch: a slow scheduling phase then lands on
    # both paths and every size about equally instead of distorting
    # whichever grid point it happened to overlap
    baseline_samples = {size: [] for size in sizes}
    sbpf_samples = {size: [] for size in sizes}
    for _ in range(repetitions):
        for size in sizes:
            records = batches[size]
            inner = max(1, 32768 // size)

            base_ns = 0
            spsc_ns = 0
            for _ in range(inner):
                started = time.perf_counter_ns()
                for record in records:
                    channel.ring_record(record)
                base_ns += time.perf_counter_ns() - started

                started = time.perf_counter_ns()
                for record in records:
                    if not ring.push(record):
                        raise RuntimeError("ring full mid-batch")
                produced = time.perf_counter_ns() - started
                started = time.perf_counter_ns()
                channel.ring_drain()
                spsc_ns += produced + (time.perf_counter_ns() - started)
            baseline_samples[size].append(base_ns / (inner * size))
            sbpf_samples[size].append(spsc_ns / (inner * size))

    for size in sizes:
        copies_baseline, copies_sbpf = copy_columns[size]
        report.add("ring", size, trimmed_mean(baseline_samples[size]),
                   trimmed_mean(sbpf_samples[size]), copies_baseline, copies_sbpf)
    return report


# --- copy scenario ---------------------------------------------------------------

def _path_of_length(rng, length: int) -> bytes:
    alphabet = b"abcdefghijklmnopqrstuvwxyz0123456789"
    body = bytes(rng.choice(alphabet) for _ in range(length - 1))
    return b"/" + body


def cmd_bench_copy(session: UserSession, lengths=DEFAULT_COPY_LENGTHS,
                   iterations: int = 10_000, repetitions: int = 7,
                   seed: int = 2024) -> BenchReport:
    """Request the synthetic statfs record through both paths.

    The first path of every length is run through both and compared bit
    for bit; a mismatch aborts, since timing two different computations
    would be meaningless.
    """
    channel = session.channel
    machine = session.machine(0)
    rng = random.Random(seed)
    report = BenchReport(metadata=_metadata(iterations, seed))

    path_sets = {}
    copy_columns = {}
    for length in lengths:
        paths = [_path_of_length(rng, length) for _ in range(64)]
        path_sets[length] = paths

        probe = baseline_statfs(channel, paths[0])
        mirror = sbpf_statfs(channel, 0, paths[0], machine)
        if probe != mirror:
            raise RuntimeError(
                f"record mismatch at length {length}: {probe} != {mirror}")

        copies0 = channel.copy_bytes
        for k in range(iterations):
            baseline_statfs(channel, paths[k % len(paths)])
        copies_baseline = channel.copy_bytes - copies0

        copies0 = channel.copy_bytes
        for k in range(iterations):
            sbpf_statfs(channel, 0, paths[k % len(paths)], machine)
        copy_columns[length] = (copies_baseline, channel.copy_bytes - copies0)

    # same interleaving discipline as the ring scenario: repetitions on
    # the outside, the two paths alternating in chunks on the inside
    baseline_samples = {length: [] for length in lengths}
    sbpf_samples = {length: [] for length in lengths}
    chunk = max(1, iterations // 8)
    for _ in range(repetitions):
        for length in lengths:
            paths = path_sets[length]
            base_ns = 0
            spsc_ns = 0
            done = 0
            while done < iterations:
                n = min(chunk, iterations - done)
                started = time.perf_counter_ns()
                for k in range(done, done + n):
                    baseline_statfs(channel, paths[k % 64])
                base_ns += time.perf_counter_ns() - started
                started = time.perf_counter_ns()
                for k in range(done, done + n):
                    sbpf_statfs(channel, 0, paths[k % 64], machine)
                spsc_ns += time.perf_counter_ns() - started
                done += n
            baseline_samples[length].append(base_ns / iterations)
            sbpf_samples[length].append(spsc_ns / iterations)

    for length in lengths:
        copies_baseline, copies_sbpf = copy_columns[length]
        report.add("copy", length, trimmed_mean(baseline_samples[length]),
                   trimmed_mean(sbpf_samples[length]), copies_baseline,
                   copies_sbpf)
    return report


# --- pss scenario ----------------------------------------------------------------

def cmd_bench_pss(session: UserSession, samples: int = 20_000,
                  flip_period: int = 500, batch_size: int = 64,
                  seed: int = 2024) -> tuple[BenchReport, dict]:
    """Run the drifting prediction stream through both update disciplines.

    Returns the timing report plus the accuracy pair and per-sample hit
    series; staleness, not throughput, is the point of this scenario.
    """
    channel = session.channel
    flip_every = flip_period if flip_period and flip_period > 0 else 10 ** 18
    stream = list(pss.drift_stream(samples, flip_every, seed=seed))
    report = BenchReport(metadata=_metadata(samples, seed))

    channel.pss_reset()
    machine = session.machine(0)
    trips0, copies0 = channel.round_trips, channel.copy_bytes
    sbpf_hits = []
    started = time.perf_counter_ns()
    for features, label in stream:
        decision = pss.sbpf_predict_update(machine, features, label)
        sbpf_hits.append(1 if decision == label else 0)
    sbpf_ns = (time.perf_counter_ns() - started) / samples
    sbpf_trips = channel.round_trips - trips0
    copies_sbpf = channel.copy_bytes - copies0

    channel.pss_reset()
    batch = pss.UpdateBatch(batch_size=batch_size)
    trips0, copies0 = channel.round_trips, channel.copy_bytes
    baseline_hits = []
    started = time.perf_counter_ns()
    for features, label in stream:
        decision = pss.baseline_predict_update(channel, batch, features, label)
        baseline_hits.append(1 if decision == label else 0)
    baseline_ns = (time.perf_counter_ns() - started) / samples
    baseline_trips = channel.round_trips - trips0
    copies_baseline = channel.copy_bytes - copies0

    report.add("pss", flip_every if flip_every < 10 ** 18 else 0,
               baseline_ns, sbpf_ns, copies_baseline, copies_sbpf)
    accuracy = {
        "accuracy_sbpf": sum(sbpf_hits) / samples,
        "accuracy_baseline": sum(baseline_hits) / samples,
        "round_trips_sbpf": sbpf_trips,
        "round_trips_baseline": baseline_trips,
        "sbpf_hits": sbpf_hits,
        "baseline_hits": baseline_hits,
    }
    return report, accuracy


# --- figures ----------------------------------------------------------------------

def render_figures(report: BenchReport, out_csv: str,
                   pss_extras: dict | None = None) -> list[str]:
    """Draw one PNG per scenario next to the CSV; returns the file paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stem, _ = os.path.splitext(out_csv)
    written = []
    by_scenario: dict[str, list[BenchRow]] = {}
    for row in report.rows:
        by_scenario.setdefault(row.scenario, []).append(row)

    if "ring" in by_scenario:
        rows = by_scenario["ring"]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([r.param for r in rows], [r.speedup for r in rows],
                marker="o", color="tab:blue")
        ax.axhline(1.0, color="gray", linewidth=0.8, linestyle="--")
        ax.set_xlabel("records per batch")
        ax.set_ylabel("speedup (baseline / shared ring)")
        ax.set_title("Ring transfer speedup")
        path = f"{stem}_ring.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    if "copy" in by_scenario:
        rows = by_scenario["copy"]
        fig, ax = plt.subplots(figsize=(6, 4))
        xs = [r.param for r in rows]
        ax.plot(xs, [r.baseline_ns / 1000 for r in rows], marker="o",
                label="copy boundary", color="tab:red")
        ax.plot(xs, [r.sbpf_ns / 1000 for r in rows], marker="s",
                label="shared memory", color="tab:green")
        ax.set_xlabel("path length (bytes)")
        ax.set_ylabel("per-call latency (us)")
        ax.set_title("statfs-like request latency")
        ax.legend()
        path = f"{stem}_copy.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    if "pss" in by_scenario and pss_extras:
        window = 500
        fig, ax = plt.subplots(figsize=(7, 4))
        for key, label, color in (
                ("sbpf_hits", "immediate updates", "tab:green"),
                ("baseline_hits", "batched updates", "tab:red")):
            hits = pss_extras[key]
            rolling = [sum(hits[max(0, k - window):k]) / max(1, min(k, window))
                       for k in range(1, len(hits) + 1)]
            ax.plot(rolling, label=label, color=color, linewidth=1.0)
        ax.set_xlabel("sample")
        ax.set_ylabel(f"accuracy (rolling {window})")
        ax.set_ylim(0.0, 1.0)
        ax.set_title("Prediction accuracy under drift")
        ax.legend(loc="lower right")
        path = f"{stem}_pss.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


# --- service/session plumbing -------------------------------------------------------

def _load_key(key_file: str | None) -> bytes:
    return integrity.load_service_key(key_file)


@lru_cache(maxsize=None)
def default_library_payload() -> bytes:
    return transport.args_program().program.source_bytes


class _BenchContext:
    """Either connects to a running service or spawns a private one."""

    def __init__(self, socket_path: str | None, key_file: str | None,
                 seed: int) -> None:
        self._spawned = None
        self._workdir = None
        if socket_path is None:
            self.key = secrets.token_bytes(32)
            self._workdir = tempfile.TemporaryDirectory(prefix="sbpf-bench-")
            socket_path = os.path.join(self._workdir.name, "svc.sock")
            self._spawned = transport.spawn_service(socket_path, self.key,
                                                    rng_seed=seed)
        else:
            self.key = _load_key(key_file)
        self.channel = BoundaryChannel(socket_path)
        self.session = UserSession(self.channel,
                                   task_id=secrets.randbits(48))
        container = integrity.sign_library(default_library_payload(), self.key)
        self.session.load(container.to_bytes())

    def close(self) -> None:
        self.session.close()
        if self._spawned is not None:
            try:
                self.channel.shutdown_service()
            except SbpfError:
                pass
        self.channel.close()
        if self._spawned is not None:
            self._spawned.join(timeout=5)
            if self._spawned.is_alive():
                self._spawned.terminate()
        if self._workdir is not None:
            self._workdir.cleanup()


# --- subcommands ------------------------------------------------------------------

def _cmd_verify(args) -> int:
    raw = _read_file(args.program)
    try:
        program = isa.decode_program(raw)
    except DecodeError as exc:
        print(f"0\tDecodeError\t{exc}")
        return 1
    result = verify(program, STANDARD_HELPER_IDS)
    if isinstance(result, VerifiedProgram):
        print(f"accepted: {len(result.program)} instructions, "
              f"stack depth {result.max_stack_depth}")
        return 0
    for violation in result.violations:
        print(violation.format_line())
    return 1


def _cmd_run(args) -> int:
    raw = _read_file(args.program)
    try:
        program = isa.decode_program(raw)
    except DecodeError as exc:
        print(f"0\tDecodeError\t{exc}", file=sys.stderr)
        return 1
    result = verify(program, STANDARD_HELPER_IDS)
    if not isinstance(result, VerifiedProgram):
        for violation in result.violations:
            print(violation.format_line(), file=sys.stderr)
        return 1
    machine = VmInstance(standard_helper_table())
    value = machine.execute(result, context=(args.r1, args.r2))
    print(f"r0 = {value} (0x{value:016x})")
    return 0


def _cmd_sign(args) -> int:
    payload = _read_file(args.payload)
    key = _load_key(args.key_file)
    container = integrity.sign_library(payload, key)
    integrity.write_container(args.out, container)
    print(f"wrote {args.out} ({len(payload)} payload bytes)")
    return 0


def _cmd_load(args) -> int:
    container = _read_file(args.container)
    with BoundaryChannel(args.socket) as channel:
        session = UserSession(channel, task_id=args.task_id)
        try:
            handle = session.load(container)
            print(f"loaded: base handle 0x{handle:016x}")
            return 0
        finally:
            session.close(release=not args.keep)


def _cmd_serve(args) -> int:
    key = _load_key(args.key_file)
    print(f"serving on {args.socket}", file=sys.stderr)
    try:
        transport.serve(args.socket, key, rng_seed=args.seed)
    except KeyboardInterrupt:
        pass
    return 0


def _cmd_stats(args) -> int:
    with BoundaryChannel(args.socket) as channel:
        copy_bytes, round_trips = channel.stats()
        ext = channel.stats_ext()
    print(f"copy_bytes      {copy_bytes}")
    print(f"round_trips     {round_trips}")
    print(f"integrity_checks {ext['integrity_checks']}")
    print(f"verifier_runs   {ext['verifier_runs']}")
    print(f"drained_records {ext['drained_records']}")
    return 0


def _parse_grid(text: str | None, default: tuple) -> tuple:
    if not text:
        return default
    return tuple(int(part) for part in text.split(",") if part)


def _cmd_bench(args) -> int:
    context = _BenchContext(args.socket, args.key_file, args.seed)
    pss_extras = None
    report = None
    scenarios = ("ring", "copy", "pss") if args.scenario == "all" \
        else (args.scenario,)
    try:
        for scenario in scenarios:
            if scenario == "ring":
                part = cmd_bench_ring(
                    context.session,
                    sizes=_parse_grid(args.sizes, DEFAULT_RING_SIZES),
                    repetitions=args.repetitions or 5, seed=args.seed)
            elif scenario == "copy":
                part = cmd_bench_copy(
                    context.session,
                    lengths=_parse_grid(args.lengths, DEFAULT_COPY_LENGTHS),
                    iterations=args.iterations or 10_000,
                    repetitions=args.repetitions or 7, seed=args.seed)
            else:
                part, pss_extras = cmd_bench_pss(
                    context.session, samples=args.samples,
                    flip_period=args.flip_period, batch_size=args.batch_size,
                    seed=args.seed)
                print(f"accuracy immediate {pss_extras['accuracy_sbpf']:.4f}  "
                      f"batched {pss_extras['accuracy_baseline']:.4f}  "
                      f"round trips {pss_extras['round_trips_sbpf']} vs "
                      f"{pss_extras['round_trips_baseline']}", file=sys.stderr)
            if report is None:
                report = part
            else:
                report.rows.extend(part.rows)
    finally:
        context.close()

    rendered = report.to_csv()
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(rendered)
        if not args.no_figures:
            for path in render_figures(report, args.out, pss_extras):
                print(f"figure: {path}", file=sys.stderr)
    else:
        sys.stdout.write(rendered)
    return 0


def _read_file(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sbpf",
        description="verified BPF VM over an emulated kernel-user shared segment")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="statically verify a .bpf program")
    p.add_argument("program")
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("run", help="verify then interpret a .bpf program")
    p.add_argument("program")
    p.add_argument("--r1", type=int, default=0)
    p.add_argument("--r2", type=int, default=0)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("sign", help="wrap a payload in a signed container")
    p.add_argument("payload")
    p.add_argument("--out", required=True)
    p.add_argument("--key-file")
    p.set_defaults(fn=_cmd_sign)

    p = sub.add_parser("load", help="submit a signed container to the service")
    p.add_argument("container")
    p.add_argument("--socket", required=True)
    p.add_argument("--task-id", type=int, default=1)
    p.add_argument("--keep", action="store_true",
                   help="leave the segment allocated on exit")
    p.set_defaults(fn=_cmd_load)

    p = sub.add_parser("serve", help="run the kernel-emulation service")
    p.add_argument("--socket", required=True)
    p.add_argument("--key-file")
    p.add_argument("--seed", type=int, default=None,
                   help="base handle randomization seed (testing only)")
    p.set_defaults(fn=_cmd_serve)

    p = sub.add_parser("stats", help="print service counters")
    p.add_argument("--socket", required=True)
    p.set_defaults(fn=_cmd_stats)

    p = sub.add_parser("bench", help="run benchmark scenarios")
    p.add_argument("scenario", choices=("ring", "copy", "pss", "all"))
    p.add_argument("--socket", help="existing service (default: spawn one)")
    p.add_argument("--key-file")
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--sizes", help="ring: comma-separated record counts")
    p.add_argument("--lengths", help="copy: comma-separated path lengths")
    p.add_argument("--samples", type=int, default=20_000)
    p.add_argument("--flip-period", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=_cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (IntegrityError, VerificationRejected) as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return 1
    except VmError as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return 2
    except TransportError as exc:
        print(f"service error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
