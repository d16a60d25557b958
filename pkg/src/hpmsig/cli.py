"""``hpmsig`` command line: registry listings, model predictions, validation
suites and pattern detection.

Exit codes: 0 success, 1 a suite invariant failed, 2 usage or input error,
3 the requested backend is unavailable.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .backend import BackendError, SimConfig, open_session, parse_errata, sim_read
from .detector import (DEFAULT_FALSE_SHARING_PER_INSTRUCTION, DEFAULT_FALSE_SHARING_RATE,
                       DEFAULT_IMBALANCE_RATIO, DEFAULT_SATURATION_FRACTION,
                       classify_false_sharing, detect_bandwidth_saturation,
                       detect_load_imbalance)
from .kernels import (KernelSpec, Level, Placement, default_cpus, run_producer_consumer,
                      run_streaming, size_for_level)
from .registry import (Architecture, MachineModel, PatternId, default_architecture,
                       pattern_signature, total_bandwidth_metric, evaluate_exact)
from .registry.model import RegistryError
from .traffic import (STREAMING_KERNELS, Boundary, KernelId, expected_avx_calc,
                      expected_traffic, triangular_mvm_traffic, triangular_partition)
from . import validation as val

log = logging.getLogger("hpmsig")

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_USAGE = 2
EXIT_BACKEND = 3

LEVEL_BOUNDARY = {"L2": Boundary.L1_L2, "L3": Boundary.L2_L3, "MEM": Boundary.L3_MEM}
SIM_KEYS = {"noise_epsilon", "rng_seed", "errata", "hsw150_factor_range",
            "halfwide_inserts_per_kernel_iteration"}
SUITES = ("bandwidth", "avx", "imbalance", "false_sharing")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class DetectorThresholds:
    saturation_fraction: float = DEFAULT_SATURATION_FRACTION
    imbalance_ratio: float = DEFAULT_IMBALANCE_RATIO
    false_sharing_rate: float = DEFAULT_FALSE_SHARING_RATE
    false_sharing_per_instruction: float = DEFAULT_FALSE_SHARING_PER_INSTRUCTION


@dataclass(frozen=True)
class RunConfig:
    backend: str = "sim"
    sim: SimConfig = field(default_factory=SimConfig)
    machine_path: Path | None = None
    output_format: str = "csv"
    out_dir: Path | None = None
    seed: int = 0
    runs: int = 100
    architecture: Architecture = field(default_factory=default_architecture)
    thresholds: DetectorThresholds = field(default_factory=DetectorThresholds)

    def __post_init__(self):
        if self.runs < 1:
            raise UsageError("--runs must be >= 1")
        if self.machine_path is not None and not self.machine_path.is_file():
            raise UsageError(f"machine file {self.machine_path} does not exist")


def _read_machine_file(path: Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read machine file {path}: {exc}") from None
    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    """Machine-file sections first, then command-line flags on top."""
    machine_path = Path(args.machine) if args.machine else None
    if machine_path is not None and not machine_path.is_file():
        raise UsageError(f"machine file {machine_path} does not exist")
    arch = default_architecture()
    sim_kw: dict = {}
    thresholds = DetectorThresholds()
    if machine_path is not None:
        parser = _read_machine_file(machine_path)
        try:
            if parser.has_section("machine"):
                base = dataclasses.asdict(arch.machine)
                base = {k: str(v) for k, v in base.items()}
                base.update(parser["machine"])
                arch = dataclasses.replace(arch, machine=MachineModel.from_section(base))
            if parser.has_section("sim"):
                sec = parser["sim"]
                unknown = set(sec) - SIM_KEYS
                if unknown:
                    raise UsageError(f"unknown [sim] keys: {', '.join(sorted(unknown))}")
                if "noise_epsilon" in sec:
                    sim_kw["noise_epsilon"] = sec.getfloat("noise_epsilon")
                if "rng_seed" in sec:
                    sim_kw["rng_seed"] = sec.getint("rng_seed")
                if "errata" in sec:
                    sim_kw["errata"] = parse_errata(sec["errata"])
                if "hsw150_factor_range" in sec:
                    lo, hi = sec["hsw150_factor_range"].replace(",", " ").split()
                    sim_kw["hsw150_factor_range"] = (float(lo), float(hi))
                if "halfwide_inserts_per_kernel_iteration" in sec:
                    sim_kw["halfwide_inserts_per_kernel_iteration"] = \
                        sec.getint("halfwide_inserts_per_kernel_iteration")
            if parser.has_section("detector"):
                sec = parser["detector"]
                known = {f.name for f in dataclasses.fields(DetectorThresholds)}
                unknown = set(sec) - known
                if unknown:
                    raise UsageError(f"unknown [detector] keys: {', '.join(sorted(unknown))}")
                thresholds = DetectorThresholds(**{k: float(v) for k, v in sec.items()})
        except (ValueError, RegistryError) as exc:
            raise UsageError(f"machine file {machine_path}: {exc}") from None
    if args.noise is not None:
        sim_kw["noise_epsilon"] = args.noise
    if args.seed is not None:
        sim_kw["rng_seed"] = args.seed
    if args.errata is not None:
        sim_kw["errata"] = args.errata
    try:
        sim = SimConfig(**sim_kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return RunConfig(backend=args.backend, sim=sim, machine_path=machine_path,
                     output_format=args.format, out_dir=Path(args.out) if args.out else None,
                     seed=sim.rng_seed, runs=args.runs, architecture=arch,
                     thresholds=thresholds)


def _errata_arg(text: str):
    try:
        return parse_errata(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _emit(text: str, config: RunConfig, name: str):
    if config.out_dir is None:
        sys.stdout.write(text)
        return
    config.out_dir.mkdir(parents=True, exist_ok=True)
    path = config.out_dir / f"{name}.{config.output_format}"
    path.write_text(text, encoding="utf-8")
    print(path)


def _kv_csv(pairs) -> str:
    return "".join(f"{k},{v}\n" for k, v in [("key", "value")] + list(pairs))


# ---------------------------------------------------------------- list

def cmd_list(args) -> int:
    arch = default_architecture()
    if args.what == "patterns":
        for pid in sorted(arch.patterns, key=lambda p: p.value):
            sig = pattern_signature(pid, arch)
            print(f"{pid.value}\tqualitative_only={str(sig.qualitative_only).lower()}\t"
                  f"groups={','.join(sig.group_names)}")
    elif args.what == "groups":
        for name in sorted(arch.groups):
            group = arch.groups[name]
            print(f"{name}\t{', '.join(e.name for e in group.events)}")
    else:
        for name in sorted(arch.events):
            event = arch.events[name]
            print(f"{name}\t{event.unit.value}\tevent=0x{event.event_code:02X}\t"
                  f"umask=0x{event.umask:02X}")
    return EXIT_OK


# ---------------------------------------------------------------- model

def cmd_model(args, config: RunConfig) -> int:
    try:
        kernel = KernelId(args.kernel)
    except ValueError:
        raise UsageError(f"unknown kernel {args.kernel!r}") from None
    if kernel is KernelId.TRIANGULAR_MVM:
        partition = triangular_partition(args.n, args.threads)
        result = {"kernel": kernel.value, "n": args.n, "threads": args.threads,
                  "iterations": args.iterations,
                  "per_thread_elements": list(partition.counts),
                  "ratio": [round(r, 6) for r in partition.ratio],
                  "per_thread_avx_calc": [expected_avx_calc(kernel, c, args.iterations)
                                          for c in partition.counts],
                  "per_thread_matrix_bytes": [
                      triangular_mvm_traffic(c, args.iterations).total_bytes
                      for c in partition.counts]}
    elif kernel.is_streaming:
        if args.elements is None or args.level is None:
            raise UsageError("model needs KERNEL ELEMENTS ITERATIONS LEVEL")
        level = args.level.upper()
        if level not in LEVEL_BOUNDARY:
            raise UsageError(f"level must be one of {', '.join(LEVEL_BOUNDARY)}")
        prediction = expected_traffic(kernel, LEVEL_BOUNDARY[level], args.elements,
                                      args.iterations)
        result = {"kernel": kernel.value, "elements": args.elements,
                  "iterations": args.iterations, "level": level, **prediction.as_dict(),
                  "avx_calc": expected_avx_calc(kernel, args.elements, args.iterations)}
    else:
        raise UsageError(f"no command-line model for {kernel.value}")
    if config.output_format == "json":
        text = json.dumps(result, indent=2) + "\n"
    else:
        text = _kv_csv((k, ";".join(map(str, v)) if isinstance(v, list) else v)
                       for k, v in result.items())
    _emit(text, config, f"model_{kernel.value}")
    return EXIT_OK


# ---------------------------------------------------------------- validate

def _suite_bandwidth(args, config):
    stats = val.run_bandwidth_suites(runs=config.runs, config=config.sim, elements=args.elements,
                                     backend=config.backend, architecture=config.architecture,
                                     keep_samples=False)
    ok = all(s.ordered and not s.partial for s in stats)
    return stats, val.error_stats_csv(stats), ok


def _suite_avx(args, config):
    _require_sim(config, "avx")
    stats = [val.run_avx_suite(k, runs=config.runs, config=config.sim,
                               elements=args.elements or 4096, iterations=args.iterations,
                               architecture=config.architecture, keep_samples=False)
             for k in val.AVX_KERNELS]
    return stats, val.error_stats_csv(stats), all(s.ordered for s in stats)


def _suite_imbalance(args, config):
    if args.fixture:
        rows = val.replay_load_imbalance(val.read_fixture(args.fixture))
    else:
        _require_sim(config, "imbalance")
        rows = val.load_imbalance_table(n=args.n, iterations=args.iterations,
                                        config=config.sim, architecture=config.architecture)
    ok = all(min(r.ratio) == 1.0 and all(x >= 1 for x in r.ratio) for r in rows)
    return rows, val.imbalance_csv(rows), ok


def _suite_false_sharing(args, config):
    if args.fixture:
        pairs = val.replay_false_sharing(val.read_fixture(args.fixture), steps=args.steps)
    else:
        _require_sim(config, "false_sharing")
        tables = [val.false_sharing_table(steps=args.steps, runs=config.runs, placement=p,
                                          config=config.sim, architecture=config.architecture)
                  for p in Placement]
        pairs = list(zip(*tables))
    ok = all(intra.model_lines == inter.model_lines for intra, inter in pairs)
    return pairs, val.false_sharing_csv(pairs), ok


def _require_sim(config: RunConfig, suite: str):
    if config.backend != "sim":
        raise BackendError(f"the {suite} suite needs exact per-thread counts, which only the "
                           f"simulated backend provides")


_SUITE_RUNNERS = {"bandwidth": _suite_bandwidth, "avx": _suite_avx,
                  "imbalance": _suite_imbalance, "false_sharing": _suite_false_sharing}


def cmd_validate(args, config: RunConfig) -> int:
    if args.fixture and args.suite not in ("imbalance", "false_sharing"):
        raise UsageError("--fixture applies to the imbalance and false_sharing suites")
    if args.fixture:
        try:
            val.fixture_path(args.fixture)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from None
    items, csv_text, ok = _SUITE_RUNNERS[args.suite](args, config)
    text = val.to_json(items) if config.output_format == "json" else csv_text
    _emit(text, config, f"validate_{args.suite}")
    if not ok:
        print(f"error: {args.suite} suite invariant failed", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


# ---------------------------------------------------------------- detect

def _load_sample(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read sample file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed sample file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"malformed sample file {path}: expected a JSON object")
    return data


def _number(data: dict, key: str, optional: bool = False):
    if key not in data or data[key] is None:
        if optional:
            return None
        raise UsageError(f"sample is missing {key!r}")
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise UsageError(f"sample field {key!r} must be a number")
    return value


def _per_thread_from_sample(data: dict) -> dict:
    raw = data.get("per_thread")
    if isinstance(raw, list):
        raw = dict(enumerate(raw))
    if not isinstance(raw, dict):
        raise UsageError("sample needs 'per_thread' as a list or object of [ops, volume] pairs")
    out = {}
    for thread, pair in raw.items():
        if not (isinstance(pair, list) and len(pair) == 2
                and all(isinstance(x, (int, float)) for x in pair)):
            raise UsageError(f"per_thread[{thread}] must be [useful_ops, data_volume]")
        out[thread] = (pair[0], pair[1])
    return out


def _per_thread_from_table2(rows) -> dict:
    by_label = {r[0]: r for r in rows}
    try:
        ops = by_label["AVX floating point ops"]
        volume = by_label["Memory data volume [GByte]"]
    except KeyError as exc:
        raise UsageError(f"fixture lacks row {exc}") from None
    return {t: (float(ops[1 + t]), float(volume[1 + t])) for t in (0, 1)}


def _live_bandwidth(args, config: RunConfig) -> float:
    arch = config.architecture
    group = arch.group("MEM")
    elements = args.elements or size_for_level(Level.MEM, arch.machine, 3)
    spec = KernelSpec(KernelId.STREAM, elements=elements, threads=default_cpus(1),
                      target_level=Level.MEM)
    record = run_streaming(spec)
    sample = sim_read(open_session(group, spec.threads, architecture=arch), record, config.sim)
    return float(evaluate_exact(group.metric(total_bandwidth_metric(group)), sample.totals(),
                                record.runtime_s))


def _live_false_sharing(args, config: RunConfig) -> tuple[float, float, float | None]:
    record = run_producer_consumer(args.lines, args.steps, Placement.INTRA_SOCKET)
    session = open_session("FALSE_SHARE", (0, 1), architecture=config.architecture)
    totals = sim_read(session, record, config.sim).totals()
    hitm = sum(totals[e] for e in val.HITM_EVENT.values())
    return hitm, record.runtime_s, None


def cmd_detect(args, config: RunConfig) -> int:
    pattern = PatternId(args.pattern)
    th = config.thresholds
    source = args.sample or args.fixture
    data = _load_sample(source) if source and Path(source).suffix == ".json" else None
    live = source is None
    if live and config.backend != "sim":
        raise BackendError("live detection reads the simulated backend; pass a sample file "
                           "to use other measurements")

    if pattern is PatternId.BANDWIDTH_SATURATION:
        if data is not None:
            bw = _number(data, "measured_bandwidth")
        elif live:
            bw = _live_bandwidth(args, config)
        else:
            raise UsageError("bandwidth saturation needs a JSON sample or a live run")
        verdict = detect_bandwidth_saturation(bw, config.architecture.machine,
                                              th.saturation_fraction)
    elif pattern is PatternId.LOAD_IMBALANCE:
        if data is not None:
            per_thread = _per_thread_from_sample(data)
        elif live:
            rows = val.load_imbalance_table(n=args.n, iterations=args.iterations,
                                            config=config.sim, architecture=config.architecture)
            ops, volume = rows[1], rows[4]
            per_thread = {t: (ops.per_thread_values[t], volume.per_thread_values[t])
                          for t in range(len(ops.per_thread_values))}
        else:
            try:
                per_thread = _per_thread_from_table2(val.read_fixture(source))
            except (FileNotFoundError, ValueError, IndexError) as exc:
                raise UsageError(f"cannot use fixture {source}: {exc}") from None
        verdict = detect_load_imbalance(per_thread, th.imbalance_ratio)
    else:
        if data is not None:
            hitm = _number(data, "hitm_lines")
            runtime = _number(data, "runtime_s")
            instructions = _number(data, "retired_instructions", optional=True)
        elif live:
            hitm, runtime, instructions = _live_false_sharing(args, config)
        else:
            raise UsageError("false sharing needs a JSON sample or a live run")
        verdict = classify_false_sharing(hitm, runtime, instructions, th.false_sharing_rate,
                                         th.false_sharing_per_instruction)
    text = verdict.to_json()
    _emit(text, dataclasses.replace(config, output_format="json"), f"detect_{pattern.value}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--backend", choices=("sim", "os"), default="sim")
    common.add_argument("--noise", type=float, default=None, metavar="EPS",
                        help="relative noise half-width of the sim backend")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--runs", type=_positive_int, default=100)
    common.add_argument("--errata", type=_errata_arg, default=None,
                        help="comma-separated errata to emulate (hsw150, halfwide, hsw149)")
    common.add_argument("--machine", metavar="PATH",
                        help="INI file with [machine], [sim] and [detector] sections")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--out", metavar="DIR", help="write report files here")
    common.add_argument("--fixture", metavar="PATH",
                        help="replay a reference-table CSV (table2, table3 or a path)")
    common.add_argument("--elements", type=_positive_int, default=None,
                        help="vector length override (reduced sizes)")
    common.add_argument("--n", type=_positive_int, default=8192, help="matrix dimension")
    common.add_argument("--iterations", type=_positive_int, default=None)
    common.add_argument("--steps", type=_positive_int, default=100)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hpmsig", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("list", parents=[common], help="list registry contents")
    p.add_argument("what", choices=("patterns", "groups", "events"))

    p = sub.add_parser("model", parents=[common], help="print model predictions")
    p.add_argument("kernel", choices=[k.value for k in STREAMING_KERNELS] + ["triangular_mvm"])
    p.add_argument("model_elements", nargs="?", type=_positive_int, metavar="ELEMENTS")
    p.add_argument("model_iterations", nargs="?", type=_positive_int, metavar="ITERATIONS")
    p.add_argument("level", nargs="?", metavar="LEVEL", help="L2, L3 or MEM")
    p.add_argument("--threads", type=_positive_int, default=2)

    p = sub.add_parser("validate", parents=[common], help="run a validation suite")
    p.add_argument("suite", choices=SUITES)

    p = sub.add_parser("detect", parents=[common], help="evaluate a pattern")
    p.add_argument("pattern", choices=[pid.value for pid in PatternId])
    p.add_argument("--sample", metavar="PATH", help="JSON measurement file")
    p.add_argument("--lines", type=_positive_int, default=64,
                   help="shared lines per step for a live false-sharing run")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = build_config(args)
        if args.command == "list":
            return cmd_list(args)
        if args.command == "model":
            if args.model_elements is not None:
                args.elements = args.model_elements
            args.iterations = args.model_iterations or args.iterations or 1
            return cmd_model(args, config)
        if args.iterations is None:
            mvm = getattr(args, "suite", None) == "imbalance" or \
                getattr(args, "pattern", None) == PatternId.LOAD_IMBALANCE.value
            args.iterations = 1000 if mvm else 1
        if args.command == "validate":
            return cmd_validate(args, config)
        return cmd_detect(args, config)
    except UsageError as exc:
        print(f"hpmsig: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"hpmsig: backend unavailable: {exc}\nhint: rerun with --backend sim",
              file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
