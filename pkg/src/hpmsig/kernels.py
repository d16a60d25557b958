"""Benchmark kernels with analytically known work and traffic.

Each run owns a fixed team of threads.  Threads pin themselves where the
host allows it, first-touch the data they use, and meet the orchestrating
thread at a barrier before and after the measured region, which is timed
with a monotonic clock.
"""
from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .registry import MachineModel
from .traffic import ELEMENT_BYTES, KernelId, triangular_partition

log = logging.getLogger(__name__)

ALIGNMENT = 64
DOUBLES_PER_LINE = 8
SPIN_TIMEOUT_S = 60.0

_ARRAYS = {
    KernelId.LOAD: ("A",),
    KernelId.STORE: ("A",),
    KernelId.COPY: ("A", "B"),
    KernelId.STREAM: ("A", "B", "C"),
    KernelId.DAXPY: ("A", "B"),
    KernelId.TRIAD: ("A", "B", "C", "D"),
    KernelId.DDOT: ("A", "B"),
}
# kernels whose result is the vector A rather than a scalar reduction
_WRITES_A = {KernelId.STORE, KernelId.COPY, KernelId.STREAM, KernelId.DAXPY, KernelId.TRIAD}


class Level(str, Enum):
    L2 = "L2"
    L3 = "L3"
    MEM = "MEM"


class Placement(str, Enum):
    INTRA_SOCKET = "intra_socket"
    INTER_SOCKET = "inter_socket"


class KernelError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kernel: KernelId
    elements: int = 0
    iterations: int = 1
    threads: tuple[int, ...] = (0,)
    target_level: Level | None = None
    matrix_n: int = 0
    lines_per_step: int = 0
    steps: int = 0
    placement: Placement | None = None

    def __post_init__(self):
        object.__setattr__(self, "kernel", KernelId(self.kernel))
        object.__setattr__(self, "threads", tuple(self.threads))
        if self.target_level is not None:
            object.__setattr__(self, "target_level", Level(self.target_level))
        if self.placement is not None:
            object.__setattr__(self, "placement", Placement(self.placement))
        if not self.threads:
            raise ValueError("at least one thread is required")
        if len(set(self.threads)) != len(self.threads):
            raise ValueError("thread CPU ids must be distinct")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.kernel.is_streaming and self.elements <= 0:
            raise ValueError("streaming kernels need elements > 0")


@dataclass(frozen=True)
class RunRecord:
    spec: KernelSpec
    runtime_s: float
    checksum: float
    per_thread_work: tuple[int, ...]
    warnings: tuple[str, ...] = ()
    pinned: bool = True

    def __post_init__(self):
        if not self.runtime_s > 0:
            raise ValueError("runtime must be positive")
        if not np.isfinite(self.checksum):
            raise ValueError("checksum must be finite")


def aligned_empty(n: int, alignment: int = ALIGNMENT) -> np.ndarray:
    """Uninitialized float64 vector whose data pointer is *alignment*-aligned."""
    raw = np.empty(n * ELEMENT_BYTES + alignment, dtype=np.uint8)
    offset = (-raw.ctypes.data) % alignment
    return raw[offset:offset + n * ELEMENT_BYTES].view(np.float64)


def size_for_level(level, machine: MachineModel, num_arrays: int) -> int:
    """Element count per vector so that *num_arrays* vectors stream through
    *level*: between twice the next-inner cache and half the target cache,
    or at least four times L3 for memory.  Always a multiple of 8."""
    level = Level(level)
    if num_arrays < 1:
        raise ValueError("num_arrays must be >= 1")
    per_element = num_arrays * ELEMENT_BYTES
    if level is Level.MEM:
        lo = -(-4 * machine.l3_bytes // per_element)
        return -(-lo // DOUBLES_PER_LINE) * DOUBLES_PER_LINE
    inner, target = {Level.L2: ("L1", "L2"), Level.L3: ("L2", "L3")}[level]
    lo_bytes = 2 * machine.cache_bytes(inner)
    hi_bytes = machine.cache_bytes(target) // 2
    lo = -(-lo_bytes // per_element)
    hi = hi_bytes // per_element
    lo = -(-lo // DOUBLES_PER_LINE) * DOUBLES_PER_LINE
    hi = hi // DOUBLES_PER_LINE * DOUBLES_PER_LINE
    if lo > hi:
        raise ValueError(
            f"no working set streams through {level.value}: window "
            f"[{lo_bytes}, {hi_bytes}] bytes for {num_arrays} arrays is empty"
        )
    mid = (lo + hi) // 2
    return max(lo, mid // DOUBLES_PER_LINE * DOUBLES_PER_LINE)


def default_cpus(count: int) -> tuple[int, ...]:
    """The first *count* CPUs of this process's affinity mask, or plain
    ``0..count-1`` when the mask is too small (pinning will then warn)."""
    available = sorted(os.sched_getaffinity(0))
    if len(available) >= count:
        return tuple(available[:count])
    return tuple(range(count))


def cpu_socket(cpu: int) -> int | None:
    path = Path(f"/sys/devices/system/cpu/cpu{cpu}/topology/physical_package_id")
    try:
        return int(path.read_text())
    except (OSError, ValueError):
        return None


def _pin(cpu: int) -> str | None:
    try:
        os.sched_setaffinity(threading.get_native_id(), {cpu})
    except (OSError, ValueError, AttributeError) as exc:
        return f"could not pin thread to CPU {cpu}: {exc}"
    return None


class _Team:
    """Runs ``body(tid, team)`` on one thread per CPU.

    ``body`` prepares its data, calls :meth:`enter`, does the measured work,
    then calls :meth:`leave`.  The orchestrator takes its timestamps between
    the same barriers.
    """

    def __init__(self, cpus: Sequence[int]):
        self.cpus = tuple(cpus)
        self.size = len(self.cpus)
        self._edge = threading.Barrier(self.size + 1)
        self.sync = threading.Barrier(self.size)
        self.warnings: list[str] = []
        self._lock = threading.Lock()
        self._errors: list[BaseException] = []

    def enter(self):
        self._edge.wait()

    leave = enter

    def run(self, body: Callable[[int, "_Team"], None]) -> float:
        def worker(tid: int):
            warning = _pin(self.cpus[tid])
            if warning:
                with self._lock:
                    self.warnings.append(warning)
            try:
                body(tid, self)
            except BaseException as exc:
                with self._lock:
                    self._errors.append(exc)
                self._edge.abort()
                self.sync.abort()

        threads = [threading.Thread(target=worker, args=(t,), name=f"kernel-{t}")
                   for t in range(self.size)]
        for t in threads:
            t.start()
        try:
            self._edge.wait()
            start = time.perf_counter()
            self._edge.wait()
            stop = time.perf_counter()
        except threading.BrokenBarrierError:
            start = stop = 0.0
        for t in threads:
            t.join()
        if self._errors:
            raise KernelError(f"kernel thread failed: {self._errors[0]!r}") from self._errors[0]
        for warning in self.warnings:
            log.debug(warning)
        return max(stop - start, time.get_clock_info("perf_counter").resolution)


def _chunks(n: int, parts: int) -> list[tuple[int, int]]:
    base, extra = divmod(n, parts)
    bounds, start = [], 0
    for p in range(parts):
        stop = start + base + (1 if p < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def _default_values(kernel: KernelId) -> dict[str, float]:
    values = {name: 1.0 for name in _ARRAYS[kernel]}
    if kernel in _WRITES_A:
        values["A"] = 0.0
    values["c"] = 1.0
    return values


def run_streaming(spec: KernelSpec, values: dict[str, float] | None = None,
                  init_padding: int = 0) -> RunRecord:
    """Run a streaming kernel.

    *values* sets the initial constant of each vector (``A``..``D``) and the
    scalar ``c``; by default inputs are 1, a written ``A`` is 0 and ``c`` is 1.
    *init_padding* adds that many extra elements of per-thread
    initialization outside the measured region.
    """
    kernel = spec.kernel
    if not kernel.is_streaming:
        raise ValueError(f"{kernel.value} is not a streaming kernel")
    init = _default_values(kernel)
    init.update(values or {})
    c = init["c"]
    n = spec.elements
    arrays = {name: aligned_empty(n) for name in _ARRAYS[kernel]}
    bounds = _chunks(n, len(spec.threads))
    partial = [0.0] * len(spec.threads)
    padding = [None] * len(spec.threads)

    def body(tid: int, team: _Team):
        lo, hi = bounds[tid]
        # padding first, so the vectors' first touch is the last thing before
        # the measured region whatever the padding size
        if init_padding:
            padding[tid] = np.full(init_padding, 1.0)
        for name, arr in arrays.items():
            arr[lo:hi] = init[name]
        part = {name: arr[lo:hi] for name, arr in arrays.items()}
        tmp = np.empty(hi - lo) if kernel is KernelId.DAXPY else None
        team.enter()
        for _ in range(spec.iterations):
            if kernel is KernelId.LOAD:
                partial[tid] = float(np.sum(part["A"]))
            elif kernel is KernelId.STORE:
                part["A"].fill(c)
            elif kernel is KernelId.COPY:
                np.copyto(part["A"], part["B"])
            elif kernel is KernelId.STREAM:
                np.multiply(part["B"], c, out=part["A"])
                np.add(part["A"], part["C"], out=part["A"])
            elif kernel is KernelId.DAXPY:
                np.multiply(part["B"], c, out=tmp)
                np.add(part["A"], tmp, out=part["A"])
            elif kernel is KernelId.TRIAD:
                np.multiply(part["B"], part["C"], out=part["A"])
                np.add(part["A"], part["D"], out=part["A"])
            elif kernel is KernelId.DDOT:
                partial[tid] = float(np.dot(part["A"], part["B"]))
        team.leave()

    team = _Team(spec.threads)
    runtime = team.run(body)
    if kernel in _WRITES_A:
        checksum = float(np.sum(arrays["A"]))
    else:
        checksum = float(sum(partial))
    return RunRecord(spec, runtime, checksum, tuple(hi - lo for lo, hi in bounds),
                     tuple(team.warnings), not team.warnings)


def run_triangular_mvm(n: int, iterations: int = 1, threads: int | Sequence[int] = 2,
                       matrix_value: float = 1.0, x_value: float = 1.0) -> RunRecord:
    """Repeated ``y = U x`` with U upper triangular, rows split into
    contiguous blocks.  Each thread stores its rows packed and first-touches
    them; ``x`` is shared."""
    cpus = default_cpus(threads) if isinstance(threads, int) else tuple(threads)
    if n < 2:
        raise ValueError("n must be >= 2")
    partition = triangular_partition(n, len(cpus))
    spec = KernelSpec(KernelId.TRIANGULAR_MVM, iterations=iterations, threads=cpus,
                      matrix_n=n)
    x = aligned_empty(n)
    x.fill(x_value)
    y = aligned_empty(n)
    y.fill(0.0)
    done = [0] * len(cpus)

    def body(tid: int, team: _Team):
        r0, r1 = partition.rows[tid]
        packed = aligned_empty(partition.counts[tid])
        packed.fill(matrix_value)
        offsets = [0]
        for i in range(r0, r1):
            offsets.append(offsets[-1] + n - i)
        team.enter()
        for it in range(iterations):
            work = 0
            for k, i in enumerate(range(r0, r1)):
                row = packed[offsets[k]:offsets[k + 1]]
                y[i] = np.dot(row, x[i:])
                work += row.size
            done[tid] = work
            if it + 1 < iterations:
                team.sync.wait()
        team.leave()

    team = _Team(cpus)
    runtime = team.run(body)
    return RunRecord(spec, runtime, float(np.sum(y)), tuple(done), tuple(team.warnings),
                     not team.warnings)


class _Handoff:
    """Shared step flag.  Waiting blocks on a condition variable, so a waiter
    does not burn the interpreter's switch interval on hosts with few CPUs."""

    def __init__(self, deadline: float):
        self.flag = 0
        self._cond = threading.Condition()
        self._deadline = deadline

    def wait_for(self, value: int):
        with self._cond:
            remaining = self._deadline - time.monotonic()
            if not self._cond.wait_for(lambda: self.flag == value, timeout=max(remaining, 0)):
                raise KernelError("producer/consumer synchronization timed out")

    def set(self, value: int):
        with self._cond:
            self.flag = value
            self._cond.notify_all()


def placement_cpus(placement, cpus: Sequence[int] | None = None) -> tuple[tuple[int, int], list[str]]:
    """Pick a producer and a consumer CPU for *placement*.  Falls back to
    intra-socket (with a warning) when the host has a single socket."""
    placement = Placement(placement)
    available = list(cpus) if cpus is not None else sorted(os.sched_getaffinity(0))
    warnings = []
    by_socket: dict[int | None, list[int]] = {}
    for cpu in available:
        by_socket.setdefault(cpu_socket(cpu), []).append(cpu)
    if placement is Placement.INTER_SOCKET:
        sockets = [s for s in by_socket if s is not None]
        if len(sockets) >= 2:
            return (by_socket[sockets[0]][0], by_socket[sockets[1]][0]), warnings
        warnings.append("inter-socket placement infeasible on this host; "
                        "falling back to intra_socket")
    for group in by_socket.values():
        if len(group) >= 2:
            return (group[0], group[1]), warnings
    warnings.append("fewer than two CPUs available; producer and consumer share hardware")
    first = available[0] if available else 0
    return (first, first + 1), warnings


def run_producer_consumer(lines_per_step: int, steps: int,
                          placement=Placement.INTRA_SOCKET,
                          cpus: Sequence[int] | None = None) -> RunRecord:
    """Producer writes ``lines_per_step`` fresh cache lines per step and
    raises a flag; the consumer reads them, accumulates a checksum and
    drops the flag.  Each step uses the next range of the buffer."""
    if lines_per_step < 1 or steps < 1:
        raise ValueError("lines_per_step and steps must be >= 1")
    placement = Placement(placement)
    (producer_cpu, consumer_cpu), warnings = placement_cpus(placement, cpus)
    effective = Placement.INTRA_SOCKET if warnings and placement is Placement.INTER_SOCKET \
        else placement
    spec = KernelSpec(KernelId.PRODUCER_CONSUMER, threads=(producer_cpu, consumer_cpu),
                      lines_per_step=lines_per_step, steps=steps, placement=effective)
    width = lines_per_step * DOUBLES_PER_LINE
    buffer = aligned_empty(width * steps)
    produced = [0.0]
    consumed = [0.0]
    lines_read = [0, 0]
    handoff = _Handoff(time.monotonic() + SPIN_TIMEOUT_S)

    def body(tid: int, team: _Team):
        if tid == 0:
            buffer.fill(0.0)
        team.sync.wait()
        team.enter()
        for step in range(steps):
            lo = step * width
            if tid == 0:
                handoff.wait_for(0)
                chunk = buffer[lo:lo + width]
                chunk[:] = np.arange(lo + 1, lo + width + 1, dtype=np.float64)
                produced[0] += float(np.sum(chunk))
                lines_read[0] += lines_per_step
                handoff.set(1)
            else:
                handoff.wait_for(1)
                consumed[0] += float(np.sum(buffer[lo:lo + width]))
                lines_read[1] += lines_per_step
                handoff.set(0)
        team.leave()

    team = _Team(spec.threads)
    runtime = team.run(body)
    if produced[0] != consumed[0]:
        raise KernelError("consumer checksum differs from produced values")
    all_warnings = tuple(warnings) + tuple(team.warnings)
    return RunRecord(spec, runtime, consumed[0], tuple(lines_read), all_warnings,
                     not team.warnings)
