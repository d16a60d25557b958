"""Model counts of the simulated backend.

Every event maps onto a traffic-model quantity for the workload that ran.
Streaming data at a given level crosses every boundary between L1 and
that level; boundaries further out see no traffic.
"""
from __future__ import annotations

from ..kernels import KernelSpec, Level, Placement, RunRecord
from ..traffic import (Boundary, KernelId, expected_avx_calc, expected_traffic,
                       false_sharing_model, triangular_mvm_traffic)

_CROSSED = {
    Level.L2: (Boundary.L1_L2,),
    Level.L3: (Boundary.L1_L2, Boundary.L2_L3),
    Level.MEM: (Boundary.L1_L2, Boundary.L2_L3, Boundary.L3_MEM),
}

# identifier -> (boundary, direction); direction "in", "out" or "both"
TRAFFIC_EVENTS = {
    "L1D_REPLACEMENT": (Boundary.L1_L2, "in"),
    "L2_TRANS_L1D_WB": (Boundary.L1_L2, "out"),
    "L2_LINES_IN_ALL": (Boundary.L2_L3, "in"),
    "L2_TRANS_L2_WB": (Boundary.L2_L3, "out"),
    "LLC_LOOKUP_DATA_READ": (Boundary.L2_L3, "in"),
    "LLC_VICTIMS_M_STATE": (Boundary.L2_L3, "out"),
    "UNC_M_CAS_COUNT_RD": (Boundary.L3_MEM, "in"),
    "UNC_M_CAS_COUNT_WR": (Boundary.L3_MEM, "out"),
    "UNC_H_IMC_READS_NORMAL": (Boundary.L3_MEM, "in"),
    "UNC_H_IMC_WRITES_ALL": (Boundary.L3_MEM, "out"),
    "OFFCORE_RESPONSE_LLC_MISS_LOCAL_DRAM": (Boundary.L3_MEM, "both"),
}
ZERO_EVENTS = {"UNC_H_BYPASS_IMC_TAKEN", "ARITH_DIVIDER_UOPS"}
AVX_CALC = "AVX_INSTS_CALC"
HITM_INTRA = "MEM_LOAD_UOPS_L3_HIT_RETIRED_XSNP_HITM"
HITM_EVENTS = {
    HITM_INTRA: Placement.INTRA_SOCKET,
    "OFFCORE_RESPONSE_LLC_HIT_HITM_OTHER_CORE": Placement.INTRA_SOCKET,
    "MEM_LOAD_UOPS_L3_MISS_RETIRED_REMOTE_HITM": Placement.INTER_SOCKET,
    "OFFCORE_RESPONSE_LLC_MISS_REMOTE_HITM": Placement.INTER_SOCKET,
}
CONSUMER = 1


def _lines(nbytes: int, line_bytes: int) -> int:
    return (nbytes + line_bytes // 2) // line_bytes


def _traffic(spec: KernelSpec, work: int, boundary: Boundary):
    if spec.kernel.is_streaming:
        crossed = _CROSSED[spec.target_level or Level.MEM]
        if boundary not in crossed or work == 0:
            return 0, 0
        p = expected_traffic(spec.kernel, boundary, work, spec.iterations)
        return p.bytes_in, p.bytes_out
    if spec.kernel is KernelId.TRIANGULAR_MVM:
        p = triangular_mvm_traffic(work, spec.iterations, boundary)
        return p.bytes_in, p.bytes_out
    return 0, 0


def model_count(identifier: str, record: RunRecord, thread: int,
                line_bytes: int = 64) -> int | None:
    """Model count of one event on one thread, or ``None`` when unmodeled.
    Pass ``thread=None`` for the socket total of an uncore event."""
    spec = record.spec
    works = record.per_thread_work
    threads = range(len(works)) if thread is None else (thread,)

    if identifier in TRAFFIC_EVENTS:
        if spec.kernel is KernelId.PRODUCER_CONSUMER:
            return 0
        boundary, direction = TRAFFIC_EVENTS[identifier]
        total = 0
        for t in threads:
            b_in, b_out = _traffic(spec, works[t], boundary)
            total += {"in": b_in, "out": b_out, "both": b_in + b_out}[direction]
        return _lines(total, line_bytes)
    if identifier in ZERO_EVENTS:
        return 0
    if identifier == AVX_CALC:
        if spec.kernel is KernelId.PRODUCER_CONSUMER:
            return 0
        return sum(round(expected_avx_calc(spec.kernel, works[t], spec.iterations))
                   for t in threads)
    if identifier in HITM_EVENTS:
        if spec.kernel is not KernelId.PRODUCER_CONSUMER:
            return 0
        if HITM_EVENTS[identifier] is not (spec.placement or Placement.INTRA_SOCKET):
            return 0
        if CONSUMER not in threads:
            return 0
        return false_sharing_model(spec.lines_per_step, spec.steps)
    return None
