"""Acceptance criteria 1-11.  Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` (or execute this file)
to see the summary lines.
"""
import math
import random
import sys
import time

import pytest

from hpmsig.backend import SimConfig, open_session, sim_read
from hpmsig.backend.sim import HITM_INTRA
from hpmsig.cli import main
from hpmsig.detector import (classify_false_sharing, detect_bandwidth_saturation,
                             detect_load_imbalance)
from hpmsig.kernels import KernelSpec, Placement, run_streaming, run_triangular_mvm
from hpmsig.registry import MachineModel, default_architecture
from hpmsig.traffic import (STREAMING_KERNELS, Boundary, expected_avx_calc, expected_traffic,
                            trace_oracle, triangular_partition)
from hpmsig.validation import (read_fixture, replay_false_sharing, replay_load_imbalance,
                               run_bandwidth_suites, run_error_suite)

from conftest import make_pc_record, make_record


@pytest.fixture(autouse=True)
def _report(request, capsys):
    yield
    rep = getattr(request.node, "rep_call", None)
    number = request.node.get_closest_marker("criterion")
    if rep is None or number is None:
        return
    with capsys.disabled():
        status = "PASS" if rep.passed else "FAIL"
        print(f"\ncriterion {number.args[0]:>2}: {status}  {number.args[1]}")


@pytest.mark.criterion(1, "trace oracle equals expected_traffic (7 kernels x 3 sizes), < 5 s")
def test_c01_oracle_equivalence():
    start = time.perf_counter()
    for kernel in STREAMING_KERNELS:
        for elements in (64, 1000, 4096):
            for boundary in Boundary:
                assert trace_oracle(kernel, elements, boundary=boundary) == \
                    expected_traffic(kernel, boundary, elements), (kernel, elements)
    assert time.perf_counter() - start < 5


@pytest.mark.criterion(2, "validate bandwidth --backend sim --noise 0: all errors 0, < 60 s")
def test_c02_exact_backend_zero_error(capsys):
    start = time.perf_counter()
    code = main(["validate", "bandwidth", "--backend", "sim", "--noise", "0",
                 "--elements", "1024"])
    out = capsys.readouterr().out
    elapsed = time.perf_counter() - start
    rows = out.splitlines()[1:]
    assert code == 0
    assert len(rows) == 49
    for row in rows:
        label, runs, lo, avg, hi = row.split(",")
        assert runs == "100"
        assert max(abs(float(lo)), abs(float(avg)), abs(float(hi))) < 1e-9, label
    # full precision, not just the printed digits
    for stats in run_bandwidth_suites(runs=2, elements=1024):
        assert max(abs(x) for x in stats.samples) < 1e-9
    assert elapsed < 60


@pytest.mark.criterion(3, "triangular_partition(8192, 2) exact; 1000 random sums = n(n+1)/2")
def test_c03_partition_fidelity():
    assert list(triangular_partition(8192, 2).counts) == [25167872, 8390656]
    rng = random.Random(20240503)
    for _ in range(1000):
        n = rng.randint(1, 20000)
        threads = rng.randint(1, min(n, 64))
        assert triangular_partition(n, threads).total == n * (n + 1) // 2


@pytest.mark.criterion(4, "table2 fixture replay reproduces {0.29, 17.42, 2.94, 0.88} within 0.05 pp")
def test_c04_table2_replay():
    rows = {r.label: r for r in replay_load_imbalance(read_fixture("table2"))}
    reference = {"AVX floating point ops": 0.29, "L2 data volume [GByte]": 17.42,
                 "L3 data volume [GByte]": 2.94, "Memory data volume [GByte]": 0.88}
    for label, value in reference.items():
        assert abs(abs(rows[label].error_pct) - value) <= 0.05, (label, rows[label].error_pct)


@pytest.mark.criterion(5, "table3 fixture replay reproduces all 20 error values within 0.1 pp")
def test_c05_table3_replay():
    fixture = read_fixture("table3")
    pairs = replay_false_sharing(fixture)
    assert len(pairs) == 10
    for (intra, inter), row in zip(pairs, fixture):
        assert abs(intra.error_pct - float(row[3])) <= 0.1, (row[0], intra.error_pct)
        assert abs(inter.error_pct - float(row[5])) <= 0.1, (row[0], inter.error_pct)


@pytest.mark.criterion(6, "expected_avx_calc rounds to 1.26e10 and 4.21e9 (3 s.f.)")
def test_c06_avx_model():
    t0 = expected_avx_calc("triangular_mvm", 25167872, 1000)
    t1 = expected_avx_calc("triangular_mvm", 8390656, 1000)
    assert f"{t0:.2e}" == "1.26e+10"
    assert f"{t1:.2e}" == "4.21e+09", f"model gives {t1:.6e}"


@pytest.mark.criterion(7, "eps=0.05: min<=avg<=max, samples within 5%; +2% bias -> avg 2.0+-0.01")
def test_c07_noise_band():
    cfg = SimConfig(noise_epsilon=0.05, rng_seed=1234)
    suites = run_bandwidth_suites(runs=100, config=cfg, elements=512)
    assert len(suites) == 49
    for s in suites:
        assert s.runs == 100 and s.min_pct <= s.avg_pct <= s.max_pct, s.label
        assert all(-5 <= x <= 5 for x in s.samples), s.label
    # default MEM working set: millions of lines, so integer rounding of the
    # biased counts stays far below the 0.01 pp tolerance
    biased = run_error_suite("copy", "MEM", "MEM", runs=100,
                             config=SimConfig(bias_scale=1.02, rng_seed=1234),
                             keep_samples=False)
    assert abs(biased.avg_pct - 2.0) <= 0.01


@pytest.mark.criterion(8, "HSW150 keeps intra HITM in [0.6, 1.0] x model only; "
                          "halfwide raises only AVX_INSTS.CALC")
def test_c08_errata():
    arch = default_architecture()
    every_event = list(arch.events)
    session = open_session(every_event, (0, 1), smt_enabled=False, core_cap=len(every_event))
    for lines in (2, 64, 1024):
        record = make_pc_record(lines, 100, Placement.INTRA_SOCKET)
        for seed in range(50):
            base = sim_read(session, record, SimConfig(rng_seed=seed)).totals()
            hit = sim_read(session, record, SimConfig(rng_seed=seed, errata={"hsw150"})).totals()
            model = base[HITM_INTRA]
            assert model == lines * 100
            assert 0.6 * model <= hit[HITM_INTRA] <= 1.0 * model
            assert {k: v for k, v in hit.items() if k != HITM_INTRA} == \
                {k: v for k, v in base.items() if k != HITM_INTRA}
    for kernel in ("triad", "daxpy", "stream", "ddot"):
        record = make_record(kernel, elements=4096, iterations=3, work=(2048, 2048))
        base = sim_read(session, record, SimConfig())
        over = sim_read(session, record, SimConfig(
            errata={"halfwide"}, halfwide_inserts_per_kernel_iteration=2))
        for t in range(2):
            for ident, value in base.thread(t).items():
                if ident == "AVX_INSTS_CALC":
                    assert over.thread(t)[ident] > value
                else:
                    assert over.thread(t)[ident] == value, ident


@pytest.mark.criterion(9, "detector monotonicity, scale/permutation invariance, qualitative flag, "
                          "table2 fixture ratio in [2.9, 3.1]")
def test_c09_detector():
    rng = random.Random(99)
    machine = MachineModel(peak_memory_bandwidth=100e9)
    for _ in range(500):
        a, b = sorted(rng.uniform(0, 2e11) for _ in range(2))
        fraction = rng.uniform(0.01, 1.0)
        if detect_bandwidth_saturation(a, machine, fraction).triggered:
            assert detect_bandwidth_saturation(b, machine, fraction).triggered
    for _ in range(500):
        ops = [rng.uniform(1, 1e10) for _ in range(rng.randint(2, 8))]
        scale = rng.uniform(1e-3, 1e3)
        base = detect_load_imbalance({i: (x, 0) for i, x in enumerate(ops)})
        scaled = detect_load_imbalance({i: (x * scale, 0) for i, x in enumerate(ops)})
        shuffled = ops[:]
        rng.shuffle(shuffled)
        permuted = detect_load_imbalance({i: (x, 0) for i, x in enumerate(shuffled)})
        ratio = base.evidence["imbalance_ratio"]
        assert math.isclose(scaled.evidence["imbalance_ratio"], ratio, rel_tol=1e-12)
        assert permuted.evidence["imbalance_ratio"] == ratio
        assert permuted.triggered == base.triggered
        if not math.isclose(ratio, 1.5, rel_tol=1e-9):
            assert scaled.triggered == base.triggered
    for _ in range(500):
        lines = rng.choice([0, rng.uniform(0, 1e9)])
        instr = rng.choice([None, rng.uniform(1, 1e12)])
        assert classify_false_sharing(lines, rng.uniform(1e-6, 10), instr).qualitative_only
    rows = {r[0]: r for r in read_fixture("table2")}
    avx = rows["AVX floating point ops"]
    verdict = detect_load_imbalance({0: (float(avx[1]), 0), 1: (float(avx[2]), 0)})
    assert verdict.triggered and 2.9 <= verdict.evidence["imbalance_ratio"] <= 3.1


VALIDATE_COMMANDS = [
    ["bandwidth", "--noise", "0.05", "--seed", "7", "--runs", "10", "--elements", "256"],
    ["avx", "--noise", "0.05", "--seed", "7", "--runs", "10"],
    ["imbalance", "--noise", "0.05", "--seed", "7"],
    ["imbalance", "--fixture", "table2"],
    ["false_sharing", "--errata", "hsw150", "--seed", "7", "--runs", "10"],
    ["false_sharing", "--fixture", "table3"],
]


@pytest.mark.criterion(10, "two identical validate invocations give byte-identical CSV")
def test_c10_determinism(tmp_path, capsys):
    for k, argv in enumerate(VALIDATE_COMMANDS):
        outputs = []
        for attempt in ("a", "b"):
            out_dir = tmp_path / f"{k}{attempt}"
            assert main(["validate", *argv, "--out", str(out_dir)]) == 0
            outputs.append((out_dir / f"validate_{argv[0]}.csv").read_bytes())
        assert outputs[0] == outputs[1], argv
        assert outputs[0].count(b"\n") > 1
    capsys.readouterr()


@pytest.mark.criterion(11, "streaming and MVM checksums match closed forms for unit inputs")
def test_c11_kernel_checksums():
    n = 1000
    closed_form = {"load": lambda n, it: n, "store": lambda n, it: n, "copy": lambda n, it: n,
                   "stream": lambda n, it: 2 * n, "daxpy": lambda n, it: it * n,
                   "triad": lambda n, it: 2 * n, "ddot": lambda n, it: n}
    for kernel, form in closed_form.items():
        for iterations in (1, 2):
            for threads in ((0,), (0, 1)):
                spec = KernelSpec(kernel, elements=n, iterations=iterations, threads=threads)
                assert run_streaming(spec).checksum == form(n, iterations), (kernel, iterations)
    small = run_triangular_mvm(4, 1, threads=2)
    assert small.checksum == 10
    for size in (2, 100, 1001):
        assert run_triangular_mvm(size, 2, threads=2).checksum == size * (size + 1) // 2
    assert run_triangular_mvm(8192, 1, threads=2).per_thread_work == (25167872, 8390656)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
