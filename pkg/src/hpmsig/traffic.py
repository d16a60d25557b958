"""Closed-form data-volume and instruction-count models for the benchmarks.

All streaming kernels operate on 8-byte doubles over vectors sized to stream
through one memory-hierarchy boundary, so the same per-iteration byte model
applies at every boundary.  Stores count a write-allocate line fetch unless
the target was already loaded by the kernel (daxpy).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

ELEMENT_BYTES = 8
CACHE_LINE_BYTES = 64
AVX_DOUBLES = 4
ORACLE_MAX_ELEMENTS = 10**6


class KernelId(str, Enum):
    LOAD = "load"
    STORE = "store"
    COPY = "copy"
    STREAM = "stream"
    DAXPY = "daxpy"
    TRIAD = "triad"
    DDOT = "ddot"
    TRIANGULAR_MVM = "triangular_mvm"
    PRODUCER_CONSUMER = "producer_consumer"

    @property
    def is_streaming(self) -> bool:
        return self in STREAMING_KERNELS


class Boundary(str, Enum):
    L1_L2 = "L1_L2"
    L2_L3 = "L2_L3"
    L3_MEM = "L3_MEM"


STREAMING_KERNELS = (
    KernelId.LOAD, KernelId.STORE, KernelId.COPY, KernelId.STREAM,
    KernelId.DAXPY, KernelId.TRIAD, KernelId.DDOT,
)

# bytes moved toward the core / written back, per scalar iteration
_BYTES_PER_ITERATION = {
    KernelId.LOAD: (8, 0),
    KernelId.STORE: (8, 8),
    KernelId.COPY: (16, 8),
    KernelId.STREAM: (24, 8),
    KernelId.DAXPY: (16, 8),
    KernelId.TRIAD: (32, 8),
    KernelId.DDOT: (16, 0),
}

FLOPS_PER_ELEMENT = {
    KernelId.STREAM: 2,
    KernelId.DAXPY: 2,
    KernelId.TRIAD: 2,
    KernelId.DDOT: 2,
    KernelId.TRIANGULAR_MVM: 2,
}

# Scalar access sequence per element, (vector, is_write) in program order.
# Used only by the trace oracle.
ACCESS_PATTERN = {
    KernelId.LOAD: (("A", False),),
    KernelId.STORE: (("A", True),),
    KernelId.COPY: (("B", False), ("A", True)),
    KernelId.STREAM: (("B", False), ("C", False), ("A", True)),
    KernelId.DAXPY: (("B", False), ("A", False), ("A", True)),
    KernelId.TRIAD: (("B", False), ("C", False), ("D", False), ("A", True)),
    KernelId.DDOT: (("A", False), ("B", False)),
}


@dataclass(frozen=True)
class TrafficPrediction:
    boundary: Boundary
    bytes_in: int
    bytes_out: int
    cache_line_bytes: int = CACHE_LINE_BYTES

    def __post_init__(self):
        if self.bytes_in < 0 or self.bytes_out < 0:
            raise ValueError("traffic volumes must be non-negative")

    @property
    def total_bytes(self) -> int:
        return self.bytes_in + self.bytes_out

    def _lines(self, nbytes: int) -> int | float:
        whole, rest = divmod(nbytes, self.cache_line_bytes)
        return whole if rest == 0 else nbytes / self.cache_line_bytes

    @property
    def cache_lines_in(self) -> int | float:
        return self._lines(self.bytes_in)

    @property
    def cache_lines_out(self) -> int | float:
        return self._lines(self.bytes_out)

    @property
    def cache_lines(self) -> int | float:
        return self._lines(self.total_bytes)

    def as_dict(self) -> dict:
        return {
            "boundary": self.boundary.value,
            "bytes_in": self.bytes_in,
            "bytes_out": self.bytes_out,
            "total_bytes": self.total_bytes,
            "cache_lines_in": self.cache_lines_in,
            "cache_lines_out": self.cache_lines_out,
        }


def _streaming(kernel) -> KernelId:
    kernel = KernelId(kernel)
    if not kernel.is_streaming:
        raise ValueError(f"{kernel.value} is not a streaming kernel")
    return kernel


def bytes_per_iteration(kernel) -> tuple[int, int]:
    return _BYTES_PER_ITERATION[_streaming(kernel)]


def expected_traffic(kernel, boundary, elements: int, iterations: int = 1,
                     cache_line_bytes: int = CACHE_LINE_BYTES) -> TrafficPrediction:
    """Bytes crossing *boundary* for ``iterations`` sweeps over vectors of
    *elements* doubles."""
    kernel = _streaming(kernel)
    if elements <= 0:
        raise ValueError("elements must be positive")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    per_in, per_out = _BYTES_PER_ITERATION[kernel]
    scale = elements * iterations
    return TrafficPrediction(Boundary(boundary), per_in * scale, per_out * scale,
                             cache_line_bytes)


def trace_oracle(kernel, elements: int, cache_line_bytes: int = CACHE_LINE_BYTES,
                 boundary=Boundary.L3_MEM) -> TrafficPrediction:
    """Brute-force line accounting for one sweep of a streaming kernel.

    Walks every scalar access over line-aligned vectors.  The first touch of
    a line (read, or write-allocate) costs one line in; every dirtied line
    costs one line out.
    """
    kernel = _streaming(kernel)
    if not 0 < elements <= ORACLE_MAX_ELEMENTS:
        raise ValueError(f"oracle supports 1..{ORACLE_MAX_ELEMENTS} elements")
    pattern = ACCESS_PATTERN[kernel]
    vectors = sorted({name for name, _ in pattern})
    span = -(-elements * ELEMENT_BYTES // cache_line_bytes) * cache_line_bytes
    base = {name: k * (span + cache_line_bytes) for k, name in enumerate(vectors)}

    touched: set[int] = set()
    dirty: set[int] = set()
    for i in range(elements):
        for name, is_write in pattern:
            line = (base[name] + i * ELEMENT_BYTES) // cache_line_bytes
            touched.add(line)
            if is_write:
                dirty.add(line)
    return TrafficPrediction(Boundary(boundary), len(touched) * cache_line_bytes,
                             len(dirty) * cache_line_bytes, cache_line_bytes)


def expected_avx_calc(kernel, elements: int, iterations: int = 1) -> int | float:
    """Packed 4-wide AVX arithmetic instructions executed.

    For ``triangular_mvm`` *elements* is the per-thread matrix-element count.
    Kernels without floating-point arithmetic return 0.
    """
    kernel = KernelId(kernel)
    flops = FLOPS_PER_ELEMENT.get(kernel, 0) * elements * iterations
    whole, rest = divmod(flops, AVX_DOUBLES)
    return whole if rest == 0 else flops / AVX_DOUBLES


@dataclass(frozen=True)
class WorkPartition:
    n: int
    rows: tuple[tuple[int, int], ...]
    counts: tuple[int, ...]

    @property
    def ratio(self) -> tuple[float, ...]:
        smallest = min(self.counts)
        return tuple(c / smallest for c in self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)


def _triangle_rows(n: int, r0: int, r1: int) -> int:
    # sum_{i=r0}^{r1-1} (n - i)
    rows = r1 - r0
    return rows * n - (r0 + r1 - 1) * rows // 2


def triangular_partition(n: int, num_threads: int) -> WorkPartition:
    """Split the rows of an upper-triangular n x n matrix into equal contiguous
    blocks; leftover rows go to the leading threads."""
    if num_threads < 1:
        raise ValueError("num_threads must be >= 1")
    if n < num_threads:
        raise ValueError(f"cannot split {n} rows over {num_threads} threads")
    base, extra = divmod(n, num_threads)
    rows = []
    start = 0
    for t in range(num_threads):
        stop = start + base + (1 if t < extra else 0)
        rows.append((start, stop))
        start = stop
    counts = tuple(_triangle_rows(n, r0, r1) for r0, r1 in rows)
    return WorkPartition(n, tuple(rows), counts)


def triangular_mvm_traffic(elements: int, iterations: int = 1,
                           boundary=Boundary.L3_MEM) -> TrafficPrediction:
    """Matrix-only streaming volume of one thread's share of the triangular
    MVM.  Reloads of the input and output vectors are not modeled."""
    if elements < 0:
        raise ValueError("elements must be non-negative")
    return TrafficPrediction(Boundary(boundary), elements * iterations * ELEMENT_BYTES, 0)


def false_sharing_model(lines_per_step: int, steps: int) -> int:
    """Cache lines the consumer must pull from the producer's cache."""
    if lines_per_step < 1 or steps < 1:
        raise ValueError("lines_per_step and steps must be >= 1")
    return lines_per_step * steps
