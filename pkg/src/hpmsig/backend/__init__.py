"""Counter acquisition: configure an event set, bracket a measured region,
read per-thread counts.

``sim`` derives counts from the traffic model with seeded multiplicative
noise and optional errata emulation.  ``os`` asks the Linux kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from ..kernels import RunRecord
from ..registry import (Architecture, EventSetGroup, EventSpec,
                        default_architecture)
from . import perf, sim

__all__ = [
    "BackendError", "CapabilityError", "CountSample", "Erratum", "Session",
    "SessionState", "SimConfig", "open_session", "os_read", "sim_read", "parse_errata",
]

DEFAULT_CORE_CAP = 4
NO_SMT_CORE_CAP = 8
FIXED_COUNTER_EVENTS = {"INSTR_RETIRED.ANY"}
HSW150_MIN_FACTOR = 0.6


class BackendError(RuntimeError):
    pass


class CapabilityError(BackendError):
    """The backend cannot count an event that was asked for."""


class Erratum(str, Enum):
    HSW150_HITM_UNDERCOUNT = "HSW150_hitm_undercount"
    AVX_HALFWIDE_OVERCOUNT = "avx_halfwide_overcount"
    # recognized, no emulation defined
    HSW149 = "HSW149"


_ERRATUM_ALIASES = {
    "hsw150": Erratum.HSW150_HITM_UNDERCOUNT,
    "hsw149": Erratum.HSW149,
    "halfwide": Erratum.AVX_HALFWIDE_OVERCOUNT,
    "vinsertf128": Erratum.AVX_HALFWIDE_OVERCOUNT,
}


def parse_errata(names: Iterable[str] | str) -> frozenset[Erratum]:
    if isinstance(names, str):
        names = [n for n in names.replace(",", " ").split() if n]
    out = set()
    for name in names:
        key = name.strip()
        try:
            out.add(Erratum(key))
        except ValueError:
            try:
                out.add(_ERRATUM_ALIASES[key.lower()])
            except KeyError:
                raise ValueError(f"unknown erratum {name!r}") from None
    return frozenset(out)


@dataclass(frozen=True)
class SimConfig:
    noise_epsilon: float = 0.0
    rng_seed: int = 0
    errata: frozenset[Erratum] = frozenset()
    hsw150_factor_range: tuple[float, float] = (0.6, 1.0)
    halfwide_inserts_per_kernel_iteration: int = 0
    # test hook: constant multiplicative bias on every modeled count
    bias_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "errata", parse_errata(self.errata))
        lo, hi = self.hsw150_factor_range
        object.__setattr__(self, "hsw150_factor_range", (float(lo), float(hi)))
        if not 0 <= self.noise_epsilon < 1:
            raise ValueError("noise_epsilon must be in [0, 1)")
        if not HSW150_MIN_FACTOR <= lo <= hi <= 1.0:
            raise ValueError("hsw150_factor_range must satisfy 0.6 <= lo <= hi <= 1.0")
        if self.halfwide_inserts_per_kernel_iteration < 0:
            raise ValueError("halfwide_inserts_per_kernel_iteration must be >= 0")
        if self.bias_scale <= 0:
            raise ValueError("bias_scale must be positive")

    def with_seed(self, seed: int) -> "SimConfig":
        return SimConfig(self.noise_epsilon, seed, self.errata, self.hsw150_factor_range,
                         self.halfwide_inserts_per_kernel_iteration, self.bias_scale)


@dataclass(frozen=True)
class CountSample:
    """Per-thread counts keyed by formula identifier.  Uncore events carry
    the socket total on thread 0 and zero elsewhere."""

    counts: tuple[Mapping[str, int], ...]
    uncore: frozenset[str] = frozenset()
    unmodeled: frozenset[str] = frozenset()
    unavailable: frozenset[str] = frozenset()
    hardware: bool = False

    def thread(self, index: int) -> Mapping[str, int]:
        return self.counts[index]

    def totals(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for per_thread in self.counts:
            for ident, value in per_thread.items():
                out[ident] = out.get(ident, 0) + value
        return out

    def modeled(self, identifier: str) -> bool:
        return identifier not in self.unmodeled


class SessionState(str, Enum):
    CONFIGURED = "configured"
    RUNNING = "running"
    STOPPED = "stopped"
    CLOSED = "closed"


@dataclass
class Session:
    backend: str
    events: tuple[EventSpec, ...]
    thread_ids: tuple[int, ...]
    architecture: Architecture
    state: SessionState = SessionState.CONFIGURED
    unavailable: frozenset[str] = frozenset()
    _perf: perf.PerfCounters | None = field(default=None, repr=False)

    @property
    def identifiers(self) -> tuple[str, ...]:
        return tuple(e.identifier for e in self.events)

    def start(self):
        if self.state not in (SessionState.CONFIGURED, SessionState.STOPPED):
            raise BackendError(f"cannot start a {self.state.value} session")
        if self._perf is not None:
            self._perf.enable()
        self.state = SessionState.RUNNING

    def stop(self):
        if self.state is not SessionState.RUNNING:
            raise BackendError(f"cannot stop a {self.state.value} session")
        if self._perf is not None:
            self._perf.disable()
        self.state = SessionState.STOPPED

    def close(self):
        if self._perf is not None:
            self._perf.close()
        self.state = SessionState.CLOSED

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _resolve_events(event_set, arch: Architecture) -> tuple[EventSpec, ...]:
    if isinstance(event_set, EventSetGroup):
        return event_set.events
    if isinstance(event_set, str):
        return arch.group(event_set).events
    resolved = []
    for item in event_set:
        if isinstance(item, EventSetGroup):
            resolved.extend(item.events)
        elif isinstance(item, EventSpec):
            resolved.append(item)
        else:
            resolved.append(arch.event(item))
    seen, unique = set(), []
    for event in resolved:
        if event.name not in seen:
            seen.add(event.name)
            unique.append(event)
    return tuple(unique)


def open_session(event_set, thread_ids: Iterable[int] = (0,), backend_kind: str = "sim",
                 core_cap: int | None = None, smt_enabled: bool = True,
                 architecture: Architecture | None = None, strict: bool = True) -> Session:
    """Configure counters for *event_set* (a group, group name or events).

    Core events beyond the general-purpose counter cap are rejected.  On the
    OS backend, uncore events without kernel support raise
    :class:`CapabilityError` when *strict*, else they are marked unavailable.
    """
    arch = architecture or default_architecture()
    events = _resolve_events(event_set, arch)
    threads = tuple(thread_ids)
    if not threads:
        raise BackendError("a session needs at least one thread")
    cap = core_cap if core_cap is not None else (DEFAULT_CORE_CAP if smt_enabled
                                                  else NO_SMT_CORE_CAP)
    core = [e for e in events if not e.is_uncore and e.name not in FIXED_COUNTER_EVENTS]
    if len(core) > cap:
        raise CapabilityError(f"{len(core)} core events exceed the cap of {cap} "
                              f"general-purpose counters")
    for event in events:
        if event.name not in arch.events:
            raise CapabilityError(f"event {event.name} unknown to architecture {arch.name}")

    if backend_kind == "sim":
        return Session("sim", events, threads, arch)
    if backend_kind != "os":
        raise BackendError(f"unknown backend {backend_kind!r}; choose 'sim' or 'os'")

    missing = {e.identifier for e in events if e.is_uncore and not perf.uncore_supported(e.unit)}
    if missing and strict:
        raise CapabilityError(f"no uncore access for {', '.join(sorted(missing))}; "
                              f"use the sim backend")
    try:
        counters = perf.PerfCounters([e for e in events if not e.is_uncore])
    except perf.PerfPermissionError as exc:
        raise BackendError(str(exc)) from exc
    return Session("os", events, threads, arch, unavailable=frozenset(missing | counters.unavailable),
                   _perf=counters)


def _draw_count(model: int, factor: float, lo_factor: float, hi_factor: float,
                noise: float, eps: float) -> int:
    value = model * factor * noise
    lower = math.ceil(model * lo_factor * (1 - eps) - 1e-9)
    upper = math.floor(model * hi_factor * (1 + eps) + 1e-9)
    count = round(value)
    if lower <= upper:
        count = min(max(count, lower), upper)
    return max(count, 0)


def sim_read(session: Session, workload: RunRecord, config: SimConfig | None = None) -> CountSample:
    """Counts the simulated backend reports for *workload*.

    count = model x bias x (HSW150 factor) x U(1-eps, 1+eps), rounded and
    kept inside the bounds those factors allow.  Events without a model read
    0 and are listed in ``unmodeled``.
    """
    config = config or SimConfig()
    if session.backend != "sim":
        raise BackendError("sim_read needs a sim session")
    if session.state is SessionState.CLOSED:
        raise BackendError("session is closed")
    rng = np.random.default_rng(config.rng_seed)
    eps = config.noise_epsilon
    line_bytes = session.architecture.machine.cache_line_bytes
    hsw150 = Erratum.HSW150_HITM_UNDERCOUNT in config.errata
    halfwide = Erratum.AVX_HALFWIDE_OVERCOUNT in config.errata
    nthreads = len(workload.per_thread_work)
    spec = workload.spec

    counts = []
    unmodeled = set()
    uncore = {e.identifier for e in session.events if e.is_uncore}
    for t in range(nthreads):
        per_thread = {}
        for event in session.events:
            ident = event.identifier
            if event.is_uncore:
                model = sim.model_count(ident, workload, None, line_bytes) if t == 0 else 0
            else:
                model = sim.model_count(ident, workload, t, line_bytes)
            if model is None:
                unmodeled.add(ident)
                per_thread[ident] = 0
                continue
            factor = lo = hi = config.bias_scale
            if hsw150 and ident == sim.HITM_INTRA:
                lo_f, hi_f = config.hsw150_factor_range
                factor *= rng.uniform(lo_f, hi_f) if hi_f > lo_f else lo_f
                lo, hi = lo * lo_f, hi * hi_f
            noise = rng.uniform(1 - eps, 1 + eps) if eps > 0 else 1.0
            value = _draw_count(model, factor, lo, hi, noise, eps)
            if halfwide and ident == sim.AVX_CALC and workload.per_thread_work[t] > 0:
                value += config.halfwide_inserts_per_kernel_iteration * spec.iterations
            per_thread[ident] = value
        counts.append(per_thread)
    return CountSample(tuple(counts), frozenset(uncore), frozenset(unmodeled))


def os_read(session: Session) -> CountSample:
    """Whatever the kernel reports, aggregated over the process on thread 0."""
    if session.backend != "os" or session._perf is None:
        raise BackendError("os_read needs an os session")
    if session.state is SessionState.CLOSED:
        raise BackendError("session is closed")
    raw = session._perf.read()
    first = {ident: raw.get(ident, 0) for ident in session.identifiers}
    rest = [{ident: 0 for ident in session.identifiers} for _ in session.thread_ids[1:]]
    uncore = {e.identifier for e in session.events if e.is_uncore}
    return CountSample(tuple([first] + rest), frozenset(uncore),
                       unavailable=session.unavailable, hardware=True)
