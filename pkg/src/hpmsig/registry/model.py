from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from . import formula as _formula


_WS = re.compile(r"\s+")


class RegistryError(ValueError):
    pass


class GroupSyntaxError(RegistryError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class Unit(str, Enum):
    CORE = "core"
    IMC = "imc"
    HA = "ha"
    CBOX = "cbox"
    OFFCORE_RESPONSE = "offcore_response"

    @property
    def is_uncore(self) -> bool:
        return self in (Unit.IMC, Unit.HA, Unit.CBOX)


class PatternId(str, Enum):
    BANDWIDTH_SATURATION = "bandwidth_saturation"
    LOAD_IMBALANCE = "load_imbalance"
    FALSE_SHARING = "false_sharing"


@dataclass(frozen=True)
class EventSpec:
    """A hardware event. ``boxes`` is the number of uncore boxes whose counts
    are summed into one value; it is 0 for core and offcore events."""

    name: str
    unit: Unit
    event_code: int
    umask: int
    filters: tuple[tuple[str, str], ...] = ()
    boxes: int = 0

    def __post_init__(self):
        if not 0 <= self.event_code <= 0xFF or not 0 <= self.umask <= 0xFF:
            raise RegistryError(f"{self.name}: event code and umask must be 8-bit")
        if self.unit.is_uncore and self.boxes < 1:
            raise RegistryError(f"{self.name}: uncore event needs boxes >= 1")
        if not self.unit.is_uncore and self.boxes != 0:
            raise RegistryError(f"{self.name}: core event cannot carry a box count")

    @property
    def identifier(self) -> str:
        return _formula.canonical_identifier(self.name)

    @property
    def is_uncore(self) -> bool:
        return self.unit.is_uncore


@dataclass(frozen=True)
class EventSetGroup:
    group_name: str
    events: tuple[EventSpec, ...]
    metrics: tuple[tuple[str, str], ...] = ()
    slots: tuple[str, ...] = ()
    short: str = ""

    def __post_init__(self):
        if self.slots and len(self.slots) != len(self.events):
            raise RegistryError(f"group {self.group_name}: one counter slot per event")
        known = {e.identifier for e in self.events} | {_formula.TIME}
        seen = set()
        for name, expr in self.metrics:
            if name in seen:
                raise RegistryError(f"group {self.group_name}: duplicate metric {name!r}")
            seen.add(name)
            unknown = _formula.identifiers(expr) - known
            if unknown:
                raise RegistryError(
                    f"group {self.group_name}: metric {name!r} uses undeclared "
                    f"event(s) {', '.join(sorted(unknown))}"
                )

    @property
    def identifiers(self) -> tuple[str, ...]:
        return tuple(e.identifier for e in self.events)

    def metric(self, name: str) -> str:
        for metric_name, expr in self.metrics:
            if metric_name == name:
                return expr
        raise KeyError(f"group {self.group_name} has no metric {name!r}")

    def evaluate(self, counts: Mapping[str, float], time_s: float) -> dict[str, float]:
        return {name: _formula.evaluate(expr, counts, time_s) for name, expr in self.metrics}

    def to_text(self) -> str:
        lines = []
        if self.short:
            lines.append(f"SHORT {self.short}")
            lines.append("")
        lines.append("EVENTSET")
        slots = self.slots or tuple(f"PMC{i}" for i in range(len(self.events)))
        for slot, event in zip(slots, self.events):
            lines.append(f"{slot} {event.identifier}")
        lines.append("")
        lines.append("METRICS")
        for name, expr in self.metrics:
            lines.append(f"{name} {_WS.sub('', expr)}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PatternRecord:
    pattern_id: PatternId
    description: str
    signature_groups: tuple[str, ...]
    qualitative_only: bool = False


@dataclass(frozen=True)
class MachineModel:
    """User-supplied description of the measured system. Never probed."""

    cache_line_bytes: int = 64
    l1_bytes: int = 32 * 1024
    l2_bytes: int = 256 * 1024
    l3_bytes: int = 35 * 1024 * 1024
    sockets: int = 2
    cores_per_socket: int = 14
    smt_threads: int = 2
    peak_memory_bandwidth: float = 136.5e9
    smt_enabled: bool = True

    def __post_init__(self):
        for name in ("cache_line_bytes", "l1_bytes", "l2_bytes", "l3_bytes", "sockets",
                     "cores_per_socket", "smt_threads", "peak_memory_bandwidth"):
            if getattr(self, name) <= 0:
                raise RegistryError(f"machine model: {name} must be positive")
        if not self.l1_bytes < self.l2_bytes < self.l3_bytes:
            raise RegistryError("machine model: cache sizes must satisfy L1 < L2 < L3")

    def cache_bytes(self, level: str) -> int:
        return {"L1": self.l1_bytes, "L2": self.l2_bytes, "L3": self.l3_bytes}[level.upper()]

    @classmethod
    def from_section(cls, section: Mapping[str, str]) -> "MachineModel":
        kwargs = {}
        for key, raw in section.items():
            if key not in cls.__dataclass_fields__:
                raise RegistryError(f"machine model: unknown key {key!r}")
            if key == "smt_enabled":
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif key == "peak_memory_bandwidth":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = _parse_size(raw)
        return cls(**kwargs)


_SIZE_SUFFIX = {"": 1, "k": 1000, "m": 1000**2, "g": 1000**3,
                "kib": 1024, "mib": 1024**2, "gib": 1024**3}


def _parse_size(raw: str) -> int:
    m = re.fullmatch(r"\s*(\d+)\s*([kKmMgG](?:i?[bB])?)?\s*", raw)
    if not m:
        raise RegistryError(f"cannot parse size {raw!r}")
    suffix = (m.group(2) or "").lower()
    if suffix in ("kb", "mb", "gb"):
        suffix = suffix[0]
    return int(m.group(1)) * _SIZE_SUFFIX[suffix]


@dataclass(frozen=True)
class Architecture:
    """Events, performance groups and pattern records of one processor model."""

    name: str
    events: Mapping[str, EventSpec]
    groups: Mapping[str, EventSetGroup] = field(default_factory=dict)
    patterns: Mapping[PatternId, PatternRecord] = field(default_factory=dict)
    machine: MachineModel = field(default_factory=MachineModel)

    def event(self, name: str) -> EventSpec:
        """Look up an event by dotted name or formula identifier."""
        if name in self.events:
            return self.events[name]
        ident = _formula.canonical_identifier(name)
        for event in self.events.values():
            if event.identifier == ident:
                return event
        raise KeyError(f"unknown event {name!r} for architecture {self.name}")

    def group(self, name: str) -> EventSetGroup:
        try:
            return self.groups[name.upper()]
        except KeyError:
            raise KeyError(f"unknown performance group {name!r}") from None

    def pattern(self, pattern_id: str | PatternId) -> PatternRecord:
        try:
            return self.patterns[PatternId(pattern_id)]
        except ValueError:
            raise KeyError(f"unknown pattern {pattern_id!r}") from None


def load_group(text: str, events: Architecture | Iterable[EventSpec] | None = None,
               name: str = "") -> EventSetGroup:
    """Parse a performance-group file.

    Event names in the EVENTSET section resolve against *events* (the built-in
    architecture when omitted).  A metric line is ``<name> <formula>`` with the
    formula as the last whitespace-free token.
    """
    if events is None:
        from . import default_architecture
        events = default_architecture()
    if not isinstance(events, Architecture):
        events = Architecture("adhoc", {e.name: e for e in events})

    section = None
    short = ""
    slots: list[str] = []
    group_events: list[EventSpec] = []
    metrics: list[tuple[str, str]] = []
    metric_lines: list[int] = []
    seen_sections = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword = line.split(None, 1)[0]
        if keyword == "SHORT":
            short = line[len("SHORT"):].strip()
            section = None
            continue
        if line in ("EVENTSET", "METRICS", "LONG"):
            if line in seen_sections:
                raise GroupSyntaxError(lineno, f"repeated {line} section")
            seen_sections.add(line)
            section = line
            continue
        if section == "EVENTSET":
            parts = line.split()
            if len(parts) != 2:
                raise GroupSyntaxError(lineno, "expected '<counter-slot> <EVENT_NAME>'")
            try:
                group_events.append(events.event(parts[1]))
            except KeyError as exc:
                raise GroupSyntaxError(lineno, exc.args[0]) from None
            slots.append(parts[0])
        elif section == "METRICS":
            parts = line.rsplit(None, 1)
            if len(parts) != 2:
                raise GroupSyntaxError(lineno, "expected '<metric name> <formula>'")
            metric_name, expr = parts
            try:
                _formula.parse(expr)
            except _formula.FormulaError as exc:
                raise GroupSyntaxError(lineno, str(exc)) from None
            if any(metric_name == m for m, _ in metrics):
                raise GroupSyntaxError(lineno, f"duplicate metric {metric_name!r}")
            metrics.append((metric_name, expr))
            metric_lines.append(lineno)
        elif section == "LONG":
            continue
        else:
            raise GroupSyntaxError(lineno, f"content outside a section: {line!r}")

    for required in ("EVENTSET", "METRICS"):
        if required not in seen_sections:
            raise GroupSyntaxError(len(text.splitlines()) or 1, f"missing {required} section")
    if len(set(e.name for e in group_events)) != len(group_events):
        raise RegistryError("event listed twice in EVENTSET")
    declared = {e.identifier for e in group_events} | {_formula.TIME}
    for lineno, (metric_name, expr) in zip(metric_lines, metrics):
        unknown = _formula.identifiers(expr) - declared
        if unknown:
            raise GroupSyntaxError(lineno, f"metric {metric_name!r} uses undeclared "
                                           f"event(s) {', '.join(sorted(unknown))}")
    return EventSetGroup(name.upper(), tuple(group_events), tuple(metrics),
                         tuple(slots), short)


def load_architecture(text: str, group_texts: Mapping[str, str] | None = None) -> Architecture:
    """Build an :class:`Architecture` from INI text.

    Sections: ``[architecture]`` (``name``), ``[machine]``, one
    ``[event <NAME>]`` per event and one ``[pattern <id>]`` per pattern.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)

    name = parser.get("architecture", "name", fallback="unnamed")
    machine = MachineModel.from_section(parser["machine"]) if parser.has_section("machine") \
        else MachineModel()

    events: dict[str, EventSpec] = {}
    patterns: dict[PatternId, PatternRecord] = {}
    for section in parser.sections():
        kind, _, ident = section.partition(" ")
        body = parser[section]
        if kind == "event":
            filters = tuple(
                tuple(item.split("=", 1)) for item in body.get("filters", "").split()
            )
            event = EventSpec(
                name=ident,
                unit=Unit(body["unit"]),
                event_code=int(body["event"], 0),
                umask=int(body["umask"], 0),
                filters=filters,
                boxes=body.getint("boxes", 0),
            )
            if event.name in events or any(e.identifier == event.identifier
                                           for e in events.values()):
                raise RegistryError(f"duplicate event {ident}")
            events[event.name] = event
        elif kind == "pattern":
            pid = PatternId(ident)
            patterns[pid] = PatternRecord(
                pattern_id=pid,
                description=body.get("description", ""),
                signature_groups=tuple(g.strip().upper()
                                       for g in body["groups"].split(",") if g.strip()),
                qualitative_only=body.getboolean("qualitative_only", False),
            )

    arch = Architecture(name, events, {}, patterns, machine)
    groups = {}
    for group_name, group_text in (group_texts or {}).items():
        groups[group_name.upper()] = load_group(group_text, arch, group_name)
    for record in patterns.values():
        missing = [g for g in record.signature_groups if g not in groups]
        if group_texts is not None and missing:
            raise RegistryError(f"pattern {record.pattern_id.value} references "
                                f"unknown group(s) {missing}")
    return Architecture(name, events, groups, patterns, machine)
