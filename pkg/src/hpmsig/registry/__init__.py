"""Architecture model, performance groups, patterns and metric formulas."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Mapping

from .formula import (FormulaError, MetricDivisionError, canonical_identifier,
                      evaluate, evaluate_exact, identifiers)
from .model import (Architecture, EventSetGroup, EventSpec, GroupSyntaxError,
                    MachineModel, PatternId, PatternRecord, RegistryError, Unit,
                    load_architecture, load_group)

__all__ = [
    "Architecture", "EventSetGroup", "EventSpec", "FormulaError", "GroupSyntaxError",
    "MachineModel", "MetricDivisionError", "PatternId", "PatternRecord", "PatternSignature",
    "RegistryError", "Unit", "canonical_identifier", "default_architecture",
    "evaluate_exact", "evaluate_metric", "identifiers", "load_architecture", "load_group",
    "pattern_signature", "total_bandwidth_metric", "data_volume_metric",
]


@lru_cache(maxsize=None)
def default_architecture() -> Architecture:
    """The built-in Haswell-EP-like model shipped as package data."""
    data = resources.files(__package__) / "data"
    groups = {
        entry.name[: -len(".txt")]: entry.read_text(encoding="utf-8")
        for entry in (data / "groups").iterdir()
        if entry.name.endswith(".txt")
    }
    return load_architecture((data / "haswell_ep.ini").read_text(encoding="utf-8"), groups)


def evaluate_metric(formula: str, counts: Mapping[str, float], time_s: float | None = None) -> float:
    return evaluate(formula, counts, time_s)


def total_bandwidth_metric(group: EventSetGroup) -> str:
    return f"{group.group_name} bandwidth [bytes/s]"


def data_volume_metric(group: EventSetGroup) -> str:
    return f"{group.group_name} data volume [bytes]"


@dataclass(frozen=True)
class PatternSignature:
    record: PatternRecord
    groups: tuple[EventSetGroup, ...]

    @property
    def pattern_id(self) -> PatternId:
        return self.record.pattern_id

    @property
    def qualitative_only(self) -> bool:
        return self.record.qualitative_only

    @property
    def group_names(self) -> list[str]:
        return [g.group_name for g in self.groups]

    @property
    def event_names(self) -> list[str]:
        return [e.name for g in self.groups for e in g.events]


def pattern_signature(pattern_id: str | PatternId,
                      architecture: Architecture | None = None) -> PatternSignature:
    arch = architecture or default_architecture()
    record = arch.pattern(pattern_id)
    return PatternSignature(record, tuple(arch.group(g) for g in record.signature_groups))
