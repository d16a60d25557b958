"""Linux ``perf_event_open`` access for the OS backend.

Counts are process-wide with ``inherit`` set, so threads started after
:meth:`PerfCounters.enable` are included.  No accuracy contract.
"""
from __future__ import annotations

import ctypes
import errno
import os
import platform
import struct
from pathlib import Path

from ..registry import EventSpec, Unit

_NR_PERF_EVENT_OPEN = {"x86_64": 298, "aarch64": 241, "riscv64": 241}.get(platform.machine())

PERF_TYPE_HARDWARE = 0
PERF_TYPE_RAW = 4
PERF_COUNT_HW_INSTRUCTIONS = 1

_IOC_ENABLE = 0x2400
_IOC_DISABLE = 0x2401
_IOC_RESET = 0x2403

_FLAG_DISABLED = 1 << 0
_FLAG_INHERIT = 1 << 1
_FLAG_EXCLUDE_KERNEL = 1 << 5
_FLAG_EXCLUDE_HV = 1 << 6

PERMISSION_HINT = ("hardware counters need /proc/sys/kernel/perf_event_paranoid <= 2 "
                   "(<= 0 for uncore) or CAP_PERFMON; use --backend sim otherwise")

_UNCORE_PMU = {Unit.IMC: "uncore_imc_0", Unit.HA: "uncore_ha_0", Unit.CBOX: "uncore_cbox_0"}
_EVENT_SOURCES = Path("/sys/bus/event_source/devices")


class _PerfEventAttr(ctypes.Structure):
    _fields_ = [
        ("type", ctypes.c_uint32),
        ("size", ctypes.c_uint32),
        ("config", ctypes.c_uint64),
        ("sample_period", ctypes.c_uint64),
        ("sample_type", ctypes.c_uint64),
        ("read_format", ctypes.c_uint64),
        ("flags", ctypes.c_uint64),
        ("wakeup_events", ctypes.c_uint32),
        ("bp_type", ctypes.c_uint32),
        ("config1", ctypes.c_uint64),
        ("config2", ctypes.c_uint64),
    ]


class PerfPermissionError(PermissionError):
    pass


class EventUnavailable(OSError):
    pass


def uncore_supported(unit: Unit) -> bool:
    return (_EVENT_SOURCES / _UNCORE_PMU[unit]).exists()


def event_encoding(event: EventSpec) -> tuple[int, int] | None:
    """(perf type, config) for a core event, or ``None`` if it cannot be
    expressed without MSR filter programming."""
    if event.name == "INSTR_RETIRED.ANY":
        return PERF_TYPE_HARDWARE, PERF_COUNT_HW_INSTRUCTIONS
    if event.unit is Unit.CORE:
        return PERF_TYPE_RAW, event.event_code | (event.umask << 8)
    return None


def _libc():
    return ctypes.CDLL(None, use_errno=True)


def _open(perf_type: int, config: int) -> int:
    if _NR_PERF_EVENT_OPEN is None:
        raise EventUnavailable(errno.ENOSYS, f"perf_event_open unknown on {platform.machine()}")
    attr = _PerfEventAttr()
    attr.type = perf_type
    attr.size = ctypes.sizeof(_PerfEventAttr)
    attr.config = config
    attr.flags = _FLAG_DISABLED | _FLAG_INHERIT | _FLAG_EXCLUDE_KERNEL | _FLAG_EXCLUDE_HV
    libc = _libc()
    fd = libc.syscall(ctypes.c_long(_NR_PERF_EVENT_OPEN), ctypes.byref(attr),
                      ctypes.c_int(0), ctypes.c_int(-1), ctypes.c_int(-1), ctypes.c_ulong(0))
    if fd < 0:
        err = ctypes.get_errno()
        if err in (errno.EACCES, errno.EPERM):
            raise PerfPermissionError(err, f"{os.strerror(err)}: {PERMISSION_HINT}")
        raise EventUnavailable(err, os.strerror(err))
    return fd


class PerfCounters:
    """One file descriptor per supported event; the rest are unavailable."""

    def __init__(self, events: list[EventSpec]):
        self.fds: dict[str, int] = {}
        self.unavailable: set[str] = set()
        try:
            for event in events:
                encoding = event_encoding(event)
                if encoding is None:
                    self.unavailable.add(event.identifier)
                    continue
                try:
                    self.fds[event.identifier] = _open(*encoding)
                except EventUnavailable:
                    self.unavailable.add(event.identifier)
        except PerfPermissionError:
            self.close()
            raise

    def _ioctl(self, request: int):
        libc = _libc()
        for fd in self.fds.values():
            libc.ioctl(fd, request, 0)

    def enable(self):
        self._ioctl(_IOC_RESET)
        self._ioctl(_IOC_ENABLE)

    def disable(self):
        self._ioctl(_IOC_DISABLE)

    def read(self) -> dict[str, int]:
        return {ident: struct.unpack("Q", os.read(fd, 8))[0] for ident, fd in self.fds.items()}

    def close(self):
        for fd in self.fds.values():
            os.close(fd)
        self.fds.clear()
