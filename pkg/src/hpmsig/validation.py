"""Repeated-run error statistics of derived metrics against the models, and
the load-imbalance and false-sharing verification tables."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import statistics
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .backend import BackendError, CapabilityError, SimConfig, open_session, os_read, sim_read
from .kernels import (KernelSpec, Level, Placement, RunRecord, default_cpus,
                      run_producer_consumer, run_streaming, run_triangular_mvm,
                      size_for_level)
from .registry import (Architecture, default_architecture, evaluate_exact,
                       total_bandwidth_metric, data_volume_metric)
from .traffic import (STREAMING_KERNELS, Boundary, KernelId,
                      expected_avx_calc, expected_traffic, false_sharing_model,
                      triangular_partition)
from .backend.sim import HITM_INTRA

log = logging.getLogger(__name__)

GROUP_BOUNDARY = {"L2": Boundary.L1_L2, "L3": Boundary.L2_L3,
                  "MEM": Boundary.L3_MEM, "HA": Boundary.L3_MEM}
# lowest level whose data crosses each group's boundary
GROUP_MIN_LEVEL = {"L2": Level.L2, "L3": Level.L3, "MEM": Level.MEM, "HA": Level.MEM}
LEVEL_ORDER = (Level.L2, Level.L3, Level.MEM)
AVX_KERNELS = (KernelId.TRIAD, KernelId.STREAM, KernelId.DAXPY, KernelId.DDOT)
FALSE_SHARING_LINES = tuple(2**k for k in range(1, 11))
HITM_EVENT = {Placement.INTRA_SOCKET: HITM_INTRA,
              Placement.INTER_SOCKET: "MEM_LOAD_UOPS_L3_MISS_RETIRED_REMOTE_HITM"}
_ARRAY_COUNT = {KernelId.LOAD: 1, KernelId.STORE: 1, KernelId.COPY: 2, KernelId.STREAM: 3,
                KernelId.DAXPY: 2, KernelId.TRIAD: 4, KernelId.DDOT: 2}
GBYTE = 1e9


def relative_error(measured, expected) -> float:
    """Signed error of *measured* relative to *expected*, in percent."""
    if expected == 0:
        raise ValueError("relative error undefined for expected == 0")
    return float(100 * (Fraction(measured) - Fraction(expected)) / Fraction(expected))


@dataclass(frozen=True)
class ErrorStats:
    metric_name: str
    runs: int
    min_pct: float
    avg_pct: float
    max_pct: float
    samples: tuple[float, ...] = ()
    label: str = ""
    partial: bool = False

    @classmethod
    def from_samples(cls, metric_name: str, samples: Sequence[float], label: str = "",
                     partial: bool = False, keep: bool = True) -> "ErrorStats":
        if not samples:
            raise ValueError("no samples")
        lo, hi = min(samples), max(samples)
        # the true mean lies in [lo, hi]; clamp away summation rounding
        avg = min(max(statistics.fmean(samples), lo), hi)
        return cls(metric_name, len(samples), lo, avg, hi,
                   tuple(samples) if keep else (), label, partial)

    @property
    def ordered(self) -> bool:
        return self.runs >= 1 and self.min_pct <= self.avg_pct <= self.max_pct


def group_applies(group: str, level) -> bool:
    return LEVEL_ORDER.index(Level(level)) >= LEVEL_ORDER.index(GROUP_MIN_LEVEL[group.upper()])


def _suite_elements(kernel: KernelId, level: Level, arch: Architecture,
                    elements: int | None) -> int:
    if elements:
        return elements
    return size_for_level(level, arch.machine, _ARRAY_COUNT[kernel])


def run_error_suite(kernel, level, group: str, runs: int = 100, backend: str = "sim",
                    config: SimConfig | None = None, elements: int | None = None,
                    iterations: int = 1, threads: Sequence[int] | None = None,
                    metric: str = "bandwidth", architecture: Architecture | None = None,
                    keep_samples: bool = True) -> ErrorStats:
    """Run *runs* measured executions of a streaming kernel and compare the
    group's total bandwidth (or data volume) against the traffic model.

    Run ``i`` uses seed ``config.rng_seed ^ i``.  Errors are exact rationals
    until the final conversion, so the runtime cancels out.
    """
    kernel = KernelId(kernel)
    level = Level(level)
    group = group.upper()
    if not kernel.is_streaming:
        raise ValueError(f"{kernel.value} is not a streaming kernel")
    if group not in GROUP_BOUNDARY:
        raise ValueError(f"bandwidth suites use groups {sorted(GROUP_BOUNDARY)}, not {group}")
    if not group_applies(group, level):
        raise ValueError(f"data in {level.value} never crosses the {group} boundary")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if backend not in ("sim", "os"):
        raise BackendError(f"unknown backend {backend!r}")
    arch = architecture or default_architecture()
    config = config or SimConfig()
    event_group = arch.group(group)
    metric_name = total_bandwidth_metric(event_group) if metric == "bandwidth" \
        else data_volume_metric(event_group)
    formula = event_group.metric(metric_name)
    n = _suite_elements(kernel, level, arch, elements)
    cpus = tuple(threads) if threads else default_cpus(1)
    spec = KernelSpec(kernel, elements=n, iterations=iterations, threads=cpus,
                      target_level=level)
    expected_bytes = expected_traffic(kernel, GROUP_BOUNDARY[group], n, iterations).total_bytes
    label = f"{group}_{kernel.value}_{level.value}"

    session = open_session(event_group, cpus, backend, architecture=arch)
    if session.unavailable:
        session.close()
        raise CapabilityError(f"{label}: cannot count {', '.join(sorted(session.unavailable))}")
    samples: list[float] = []
    partial = False
    for i in range(runs):
        try:
            if backend == "os":
                session.start()
                record = run_streaming(spec)
                session.stop()
                sample = os_read(session)
            else:
                record = run_streaming(spec)
                sample = sim_read(session, record, config.with_seed(config.rng_seed ^ i))
        except BackendError as exc:
            log.error("%s: run %d failed: %s", label, i, exc)
            partial = True
            break
        time_s = Fraction(record.runtime_s)
        measured = evaluate_exact(formula, sample.totals(), time_s)
        expected = Fraction(expected_bytes) / time_s if metric == "bandwidth" \
            else Fraction(expected_bytes)
        samples.append(relative_error(measured, expected))
    session.close()
    if not samples:
        raise BackendError(f"{label}: no run completed")
    return ErrorStats.from_samples(metric_name, samples, label, partial, keep_samples)


def bandwidth_combinations(kernels: Iterable = STREAMING_KERNELS,
                           groups: Iterable[str] = ("L2", "L3", "MEM", "HA"),
                           levels: Iterable = LEVEL_ORDER):
    for group in groups:
        for level in levels:
            if not group_applies(group, level):
                continue
            for kernel in kernels:
                yield KernelId(kernel), Level(level), group


def run_bandwidth_suites(runs: int = 100, config: SimConfig | None = None,
                         elements: int | None = None, **kwargs) -> list[ErrorStats]:
    return [run_error_suite(k, lvl, g, runs, config=config, elements=elements, **kwargs)
            for k, lvl, g in bandwidth_combinations()]


def run_avx_suite(kernel, runs: int = 100, config: SimConfig | None = None,
                  elements: int = 4096, iterations: int = 1,
                  architecture: Architecture | None = None,
                  keep_samples: bool = True) -> ErrorStats:
    """AVX FLOP-rate error of an arithmetic streaming kernel."""
    kernel = KernelId(kernel)
    arch = architecture or default_architecture()
    config = config or SimConfig()
    group = arch.group("AVX_FLOPS")
    metric_name = "AVX DP FLOP/s"
    formula = group.metric(metric_name)
    cpus = default_cpus(1)
    spec = KernelSpec(kernel, elements=elements, iterations=iterations, threads=cpus,
                      target_level=Level.L2)
    expected_flops = 4 * Fraction(expected_avx_calc(kernel, elements, iterations))
    if expected_flops == 0:
        raise ValueError(f"{kernel.value} performs no AVX arithmetic")
    session = open_session(group, cpus, "sim", architecture=arch)
    samples = []
    for i in range(runs):
        record = run_streaming(spec)
        sample = sim_read(session, record, config.with_seed(config.rng_seed ^ i))
        time_s = Fraction(record.runtime_s)
        measured = evaluate_exact(formula, sample.totals(), time_s)
        samples.append(relative_error(measured, expected_flops / time_s))
    return ErrorStats.from_samples(metric_name, samples, f"{kernel.value}_avx",
                                   keep=keep_samples)


# ---------------------------------------------------------------- load imbalance

@dataclass(frozen=True)
class ImbalanceRow:
    label: str
    per_thread_values: tuple[float, ...]
    ratio: tuple[float, ...]
    error_pct: float | None

    @property
    def imbalance(self) -> float:
        return max(self.ratio)


def _normalized(values: Sequence[float]) -> tuple[float, ...]:
    smallest = min(values)
    if smallest <= 0:
        raise ValueError("per-thread values must be positive to form a ratio")
    return tuple(float(Fraction(v) / Fraction(smallest)) for v in values)


def imbalance_row(label: str, values: Sequence[float], reference_ratio: float) -> ImbalanceRow:
    ratio = _normalized(values)
    return ImbalanceRow(label, tuple(values), ratio, relative_error(max(ratio), reference_ratio))


def load_imbalance_table(n: int = 8192, iterations: int = 1000, backend: str = "sim",
                         config: SimConfig | None = None, measure_sweeps: int = 1,
                         architecture: Architecture | None = None) -> list[ImbalanceRow]:
    """Triangular MVM on two threads: processed elements, AVX calc
    instructions and per-core L2/L3/memory volumes, each with its imbalance
    ratio and its error against the work-partition ratio.

    The kernel executes *measure_sweeps* sweeps; the record handed to the
    backend stands for *iterations* sweeps with the runtime scaled to match.
    """
    if backend != "sim":
        raise BackendError("the load-imbalance table needs --backend sim")
    arch = architecture or default_architecture()
    config = config or SimConfig()
    partition = triangular_partition(n, 2)
    reference = max(partition.ratio)
    sweeps = max(1, min(measure_sweeps, iterations))
    measured = run_triangular_mvm(n, sweeps, threads=2)
    spec = dataclasses.replace(measured.spec, iterations=iterations)
    record = RunRecord(spec, measured.runtime_s * iterations / sweeps, measured.checksum,
                       measured.per_thread_work, measured.warnings, measured.pinned)
    threads = tuple(range(len(record.per_thread_work)))

    rows = [imbalance_row("Process elements", list(record.per_thread_work), reference)]
    readings = (("AVX floating point ops", "AVX_FLOPS", "AVX calc instructions", 1.0),
                ("L2 data volume [GByte]", "L2", "L2 data volume [bytes]", GBYTE),
                ("L3 data volume [GByte]", "L3", "L3 data volume [bytes]", GBYTE),
                ("Memory data volume [GByte]", "MEM", "MEM data volume per core [bytes]", GBYTE))
    for k, (label, group_name, metric_name, unit) in enumerate(readings, start=1):
        group = arch.group(group_name)
        sample = sim_read(open_session(group, threads, architecture=arch), record,
                          config.with_seed(config.rng_seed ^ k))
        values = [float(evaluate_exact(group.metric(metric_name), sample.thread(t),
                                       record.runtime_s) / Fraction(unit))
                  for t in threads]
        rows.append(imbalance_row(label, values, reference))
    return rows


def _decimal_uncertainty(text: str) -> float:
    """Relative half-unit of the last printed digit of *text*."""
    value = Decimal(text)
    if value == 0:
        return float("inf")
    half = Decimal(5).scaleb(value.as_tuple().exponent - 1)
    return float(half / abs(value))


def _printed_ratio(text: str) -> str | None:
    text = text.strip()
    if not text:
        return None
    left, _, right = text.partition(":")
    try:
        Decimal(left)
    except InvalidOperation:
        return None
    if right and Decimal(right) != 1:
        return None
    return left


def replay_load_imbalance(rows: Iterable[Sequence[str]],
                          reference_ratio: float | None = None) -> list[ImbalanceRow]:
    """Recompute the imbalance error column from printed per-thread values.

    Each row is ``label, thread 0, thread 1[, ratio]`` as text.  The ratio is
    taken from whichever source carries fewer rounding digits lost: the
    quotient of the per-thread values or the printed ratio column.
    """
    if reference_ratio is None:
        reference_ratio = max(triangular_partition(8192, 2).ratio)
    out = []
    for row in rows:
        label, t0, t1 = row[0], row[1].strip(), row[2].strip()
        ratio_text = _printed_ratio(row[3]) if len(row) > 3 else None
        values = (float(t0), float(t1))
        ratio = _normalized(values)
        if ratio_text is not None:
            from_values = _decimal_uncertainty(t0) + _decimal_uncertainty(t1)
            if _decimal_uncertainty(ratio_text) < from_values:
                printed = float(ratio_text)
                ratio = (printed, 1.0) if values[0] >= values[1] else (1.0, printed)
        out.append(ImbalanceRow(label, values, ratio,
                                relative_error(max(ratio), reference_ratio)))
    return out


# ---------------------------------------------------------------- false sharing

@dataclass(frozen=True)
class FalseSharingRow:
    lines_per_step: int
    model_lines: int
    placement: Placement
    measured_lines: float
    error_pct: float
    runs: int


def false_sharing_table(line_counts: Iterable[int] = FALSE_SHARING_LINES, steps: int = 100,
                        runs: int = 100, placement=Placement.INTRA_SOCKET,
                        backend: str = "sim", config: SimConfig | None = None,
                        architecture: Architecture | None = None) -> list[FalseSharingRow]:
    """Producer/consumer runs per line count; mean HITM lines over *runs*
    against the model.  The simulation models the requested placement even
    when the host cannot provide it."""
    if backend != "sim":
        raise BackendError("the false-sharing table needs --backend sim")
    arch = architecture or default_architecture()
    config = config or SimConfig()
    placement = Placement(placement)
    event = HITM_EVENT[placement]
    session = open_session("FALSE_SHARE", (0, 1), architecture=arch)
    rows = []
    for lines in line_counts:
        model = false_sharing_model(lines, steps)
        totals = []
        for i in range(runs):
            record = run_producer_consumer(lines, steps, placement)
            record = dataclasses.replace(
                record, spec=dataclasses.replace(record.spec, placement=placement))
            sample = sim_read(session, record, config.with_seed(config.rng_seed ^ i))
            totals.append(sample.totals()[event])
        mean = statistics.fmean(totals)
        rows.append(FalseSharingRow(lines, model, placement, mean,
                                    relative_error(Fraction(sum(totals), len(totals)), model),
                                    runs))
    return rows


def replay_false_sharing(rows: Iterable[Sequence[str]], steps: int = 100
                         ) -> list[tuple[FalseSharingRow, FalseSharingRow]]:
    """Recompute both error columns from ``lines, model, intra, _, inter[, _]``
    rows.  The model column is recomputed, not read."""
    out = []
    for row in rows:
        lines = int(row[0])
        model = false_sharing_model(lines, steps)
        pair = []
        for placement, text in ((Placement.INTRA_SOCKET, row[2]), (Placement.INTER_SOCKET, row[4])):
            measured = Decimal(text.strip())
            pair.append(FalseSharingRow(lines, model, placement, float(measured),
                                        relative_error(measured, model), 0))
        out.append(tuple(pair))
    return out


# ---------------------------------------------------------------- fixtures and reports

def fixture_path(name: str) -> Path:
    """Path of a shipped fixture (``table2`` or ``table3``) or of a user file."""
    path = Path(name)
    if path.exists():
        return path
    shipped = resources.files(__package__) / "fixtures" / f"{path.stem}.csv"
    if shipped.is_file():
        return Path(str(shipped))
    raise FileNotFoundError(f"fixture {name!r} not found")


def read_fixture(name: str) -> list[list[str]]:
    with open(fixture_path(name), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"fixture {name!r} is empty")
    return rows[1:]


def _fmt(value: float | None, digits: int = 6) -> str:
    if value is None:
        return ""
    text = f"{value:.{digits}f}"
    return text[1:] if text.startswith("-") and float(text) == 0 else text


ERROR_SUITE_COLUMNS = ("label", "runs", "min_pct", "avg_pct", "max_pct")
TABLE2_COLUMNS = ("Event/Metric", "Thread 0", "Thread 1", "Ratio", "Error")
TABLE3_COLUMNS = ("Shared cache lines per step", "Model lines", "Intra-socket lines",
                  "Intra-socket error [%]", "Inter-socket lines", "Inter-socket error [%]")


def _csv(rows: Iterable[Sequence[str]], header: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def error_stats_csv(stats: Iterable[ErrorStats]) -> str:
    return _csv(([s.label, str(s.runs), _fmt(s.min_pct), _fmt(s.avg_pct), _fmt(s.max_pct)]
                 for s in stats), ERROR_SUITE_COLUMNS)


def imbalance_csv(rows: Iterable[ImbalanceRow]) -> str:
    def value(v: float) -> str:
        return str(int(v)) if float(v).is_integer() and abs(v) < 2**53 else f"{v:.6g}"
    return _csv(([r.label] + [value(v) for v in r.per_thread_values]
                 + [":".join(f"{x:.4f}" for x in r.ratio), _fmt(r.error_pct, 2)]
                 for r in rows), TABLE2_COLUMNS)


def false_sharing_csv(pairs: Iterable[Sequence[FalseSharingRow]]) -> str:
    """Table-3-shaped CSV; each item holds the intra and inter row of one
    line count (either may be ``None``)."""
    out = []
    for intra, inter in pairs:
        first = intra or inter
        out.append([str(first.lines_per_step), str(first.model_lines),
                    _fmt(intra.measured_lines, 2) if intra else "",
                    _fmt(intra.error_pct, 2) if intra else "",
                    _fmt(inter.measured_lines, 2) if inter else "",
                    _fmt(inter.error_pct, 2) if inter else ""])
    return _csv(out, TABLE3_COLUMNS)


def to_json(items) -> str:
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {k: plain(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if hasattr(obj, "value"):
            return obj.value
        return obj
    return json.dumps(plain(items), indent=2, sort_keys=True) + "\n"
