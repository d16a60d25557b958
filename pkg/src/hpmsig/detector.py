"""Threshold-based pattern verdicts.

Thresholds come from the caller (machine model or run configuration); the
defaults here are conventions, not measured limits.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

from .registry import MachineModel, PatternId, default_architecture

DEFAULT_SATURATION_FRACTION = 0.8
DEFAULT_IMBALANCE_RATIO = 1.5
# placeholders: no quantitative false-sharing threshold is known
DEFAULT_FALSE_SHARING_RATE = 1e5
DEFAULT_FALSE_SHARING_PER_INSTRUCTION = 1e-4

FALSE_SHARING_NOTE = ("counts cannot tell true from false sharing; source analysis is "
                      "needed to confirm")


@dataclass(frozen=True)
class PatternVerdict:
    pattern_id: PatternId
    triggered: bool
    evidence: Mapping[str, float] = field(default_factory=dict)
    threshold_used: float | Mapping[str, float] = 0.0
    qualitative_only: bool = False
    notes: str = ""

    def __post_init__(self):
        if self.triggered and not self.evidence:
            raise ValueError("a triggered verdict needs evidence")

    def as_dict(self) -> dict:
        out = asdict(self)
        out["pattern_id"] = self.pattern_id.value
        out["evidence"] = {k: _json_number(v) for k, v in self.evidence.items()}
        if isinstance(self.threshold_used, Mapping):
            out["threshold_used"] = {k: _json_number(v) for k, v in self.threshold_used.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"


def _json_number(value: float):
    return "inf" if value == math.inf else value


def _qualitative(pattern: PatternId) -> bool:
    return default_architecture().pattern(pattern).qualitative_only


def detect_bandwidth_saturation(measured_bw: float, machine: MachineModel,
                                fraction: float = DEFAULT_SATURATION_FRACTION) -> PatternVerdict:
    """Triggered when the measured bandwidth reaches *fraction* of the
    configured peak (boundary inclusive)."""
    if measured_bw < 0:
        raise ValueError("measured bandwidth must be non-negative")
    if machine.peak_memory_bandwidth <= 0:
        raise ValueError("machine peak bandwidth must be positive")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    threshold = fraction * machine.peak_memory_bandwidth
    utilization = measured_bw / machine.peak_memory_bandwidth
    return PatternVerdict(
        PatternId.BANDWIDTH_SATURATION,
        triggered=measured_bw >= threshold,
        evidence={"measured_bandwidth": measured_bw, "utilization": utilization},
        threshold_used=threshold,
        qualitative_only=_qualitative(PatternId.BANDWIDTH_SATURATION),
    )


def _max_min_ratio(values) -> float:
    smallest, largest = min(values), max(values)
    if smallest == 0:
        return math.inf
    return largest / smallest


def detect_load_imbalance(per_thread: Mapping[object, tuple[float, float]],
                          ratio_threshold: float = DEFAULT_IMBALANCE_RATIO) -> PatternVerdict:
    """Max/min ratio of useful operations per thread, or of data volume when
    no thread reports useful operations."""
    if len(per_thread) < 2:
        raise ValueError("load imbalance needs at least two threads")
    ops = [float(v[0]) for v in per_thread.values()]
    volumes = [float(v[1]) for v in per_thread.values()]
    if any(x < 0 for x in ops + volumes):
        raise ValueError("per-thread values must be non-negative")
    notes = []
    if any(x > 0 for x in ops):
        signal, values = "useful_ops", ops
    else:
        signal, values = "data_volume", volumes
        notes.append("fallback=data")
    ratio = _max_min_ratio(values)
    if ratio == math.inf:
        notes.append("degenerate input: a thread reports zero")
    return PatternVerdict(
        PatternId.LOAD_IMBALANCE,
        triggered=ratio >= ratio_threshold,
        evidence={"imbalance_ratio": ratio, f"max_{signal}": max(values),
                  f"min_{signal}": min(values)},
        threshold_used=ratio_threshold,
        qualitative_only=_qualitative(PatternId.LOAD_IMBALANCE),
        notes="; ".join(notes),
    )


def classify_false_sharing(hitm_lines: float, region_runtime_s: float,
                           retired_instructions: float | None = None,
                           rate_threshold_lines_per_s: float = DEFAULT_FALSE_SHARING_RATE,
                           per_instr_threshold: float = DEFAULT_FALSE_SHARING_PER_INSTRUCTION
                           ) -> PatternVerdict:
    """Qualitative only: triggered when the HITM line rate or the HITM lines
    per retired instruction reach their threshold."""
    if region_runtime_s <= 0:
        raise ValueError("region runtime must be positive")
    if hitm_lines < 0:
        raise ValueError("hitm_lines must be non-negative")
    rate = hitm_lines / region_runtime_s
    evidence = {"hitm_lines": float(hitm_lines), "lines_per_s": rate}
    triggered = rate >= rate_threshold_lines_per_s
    notes = [FALSE_SHARING_NOTE]
    if retired_instructions:
        per_instr = hitm_lines / retired_instructions
        evidence["lines_per_instruction"] = per_instr
        triggered = triggered or per_instr >= per_instr_threshold
    else:
        notes.append("no retired-instruction count; per-instruction test skipped")
    if hitm_lines == 0:
        triggered = False
    if (rate_threshold_lines_per_s == DEFAULT_FALSE_SHARING_RATE
            or per_instr_threshold == DEFAULT_FALSE_SHARING_PER_INSTRUCTION):
        notes.append("placeholder threshold in use")
    return PatternVerdict(
        PatternId.FALSE_SHARING,
        triggered=triggered,
        evidence=evidence,
        threshold_used={"lines_per_s": rate_threshold_lines_per_s,
                        "lines_per_instruction": per_instr_threshold},
        qualitative_only=True,
        notes="; ".join(notes),
    )
