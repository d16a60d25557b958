import pytest
from hypothesis import given, settings, strategies as st

from hpmsig.backend import (BackendError, CapabilityError, Erratum, SessionState, SimConfig,
                            open_session, os_read, parse_errata, sim_read)
from hpmsig.backend import perf
from hpmsig.kernels import KernelSpec, Placement, run_streaming
from hpmsig.registry import default_architecture
from hpmsig.traffic import STREAMING_KERNELS, expected_avx_calc, expected_traffic

from conftest import make_pc_record, make_record

ALL_SIM_EVENTS = ["L1D.REPLACEMENT", "L2_TRANS.L1D_WB", "L2_LINES_IN.ALL", "L2_TRANS.L2_WB",
                  "UNC_M_CAS_COUNT.RD", "UNC_M_CAS_COUNT.WR", "UNC_H_IMC_READS.NORMAL",
                  "UNC_H_IMC_WRITES.ALL", "AVX_INSTS.CALC"]
HITM = "MEM_LOAD_UOPS_L3_HIT_RETIRED_XSNP_HITM"


class TestOpenSession:
    def test_l2_group(self):
        s = open_session("L2", thread_ids=(0, 1))
        assert s.state is SessionState.CONFIGURED
        assert s.identifiers == ("L1D_REPLACEMENT", "L2_TRANS_L1D_WB")

    def test_core_cap(self):
        six = ["L1D.REPLACEMENT", "L2_TRANS.L1D_WB", "L2_LINES_IN.ALL", "L2_TRANS.L2_WB",
               "AVX_INSTS.CALC", "ARITH.DIVIDER_UOPS"]
        with pytest.raises(CapabilityError, match="cap of 4"):
            open_session(six)
        assert len(open_session(six, smt_enabled=False).events) == 6

    def test_uncore_not_capped(self):
        s = open_session(["UNC_M_CAS_COUNT.RD", "UNC_M_CAS_COUNT.WR", "UNC_H_IMC_READS.NORMAL",
                          "UNC_H_BYPASS_IMC.TAKEN", "UNC_H_IMC_WRITES.ALL"])
        assert len(s.events) == 5

    def test_unknown_event(self):
        with pytest.raises(KeyError):
            open_session(["NOPE.NOPE"])

    def test_unknown_backend(self):
        with pytest.raises(BackendError):
            open_session("L2", backend_kind="papi")

    def test_os_uncore_capability(self, monkeypatch):
        monkeypatch.setattr(perf, "uncore_supported", lambda unit: False)
        with pytest.raises(CapabilityError, match="sim"):
            open_session("MEM", backend_kind="os")

    def test_state_machine(self):
        s = open_session("L2")
        with pytest.raises(BackendError):
            s.stop()
        s.start()
        s.stop()
        s.close()
        with pytest.raises(BackendError):
            s.start()


class TestSimRead:
    def test_copy_l2(self):
        rec = run_streaming(KernelSpec("copy", elements=1000, target_level="MEM"))
        sample = sim_read(open_session("L2"), rec, SimConfig())
        assert sample.thread(0) == {"L1D_REPLACEMENT": 250, "L2_TRANS_L1D_WB": 125}

    def test_mvm_avx_thread1(self, mvm_record):
        sample = sim_read(open_session("AVX_FLOPS", (0, 1)), mvm_record)
        assert sample.thread(1)["AVX_INSTS_CALC"] == 4195328000
        assert sample.thread(0)["AVX_INSTS_CALC"] == 12583936000

    def test_hsw150_fixed_factor(self, pc_record):
        cfg = SimConfig(errata={"hsw150"}, hsw150_factor_range=(0.6, 0.6))
        sample = sim_read(open_session("FALSE_SHARE", (0, 1)), pc_record(2, 100), cfg)
        assert sample.totals()[HITM] == 120
        assert sample.totals()["OFFCORE_RESPONSE_LLC_HIT_HITM_OTHER_CORE"] == 200

    def test_inter_socket_events(self, pc_record):
        rec = pc_record(8, 100, Placement.INTER_SOCKET)
        t = sim_read(open_session("FALSE_SHARE", (0, 1)), rec).totals()
        assert t["MEM_LOAD_UOPS_L3_MISS_RETIRED_REMOTE_HITM"] == 800
        assert t[HITM] == 0

    def test_level_limits_boundaries(self):
        rec = make_record("triad", 1024, target_level="L2")
        t = sim_read(open_session(ALL_SIM_EVENTS, smt_enabled=False), rec).totals()
        assert t["L1D_REPLACEMENT"] == 1024 * 32 // 64
        assert t["L2_LINES_IN_ALL"] == 0 and t["UNC_M_CAS_COUNT_RD"] == 0

    def test_uncore_on_thread0(self):
        rec = make_record("copy", work=(512, 512), target_level="MEM")
        sample = sim_read(open_session("MEM", (0, 1)), rec)
        assert sample.thread(0)["UNC_M_CAS_COUNT_RD"] == 2 * 512 * 16 // 64
        assert sample.thread(1)["UNC_M_CAS_COUNT_RD"] == 0
        assert sample.thread(1)["OFFCORE_RESPONSE_LLC_MISS_LOCAL_DRAM"] == 512 * 24 // 64
        assert "UNC_M_CAS_COUNT_RD" in sample.uncore

    def test_every_event_once_per_thread(self):
        rec = make_record("stream", work=(64, 64, 64))
        sample = sim_read(open_session("HA", (0, 1, 2)), rec)
        for per_thread in sample.counts:
            assert set(per_thread) == set(open_session("HA").identifiers)

    def test_unmodeled_reads_zero(self):
        rec = make_record("copy", 64)
        sample = sim_read(open_session(["INSTR_RETIRED.ANY", "L1D.REPLACEMENT"]), rec)
        assert sample.thread(0)["INSTR_RETIRED_ANY"] == 0
        assert not sample.modeled("INSTR_RETIRED_ANY")
        assert sample.modeled("L1D_REPLACEMENT")

    @pytest.mark.parametrize("kernel", STREAMING_KERNELS)
    def test_exact_equals_model(self, kernel):
        n, iters = 4096, 3
        rec = make_record(kernel, n, iters, target_level="MEM")
        t = sim_read(open_session(ALL_SIM_EVENTS, smt_enabled=False), rec).totals()
        for name, boundary in (("L1D_REPLACEMENT", "L1_L2"), ("L2_LINES_IN_ALL", "L2_L3"),
                               ("UNC_M_CAS_COUNT_RD", "L3_MEM")):
            assert t[name] == expected_traffic(kernel, boundary, n, iters).cache_lines_in
        assert t["UNC_M_CAS_COUNT_WR"] == expected_traffic(kernel, "L3_MEM", n, iters).cache_lines_out
        assert t["AVX_INSTS_CALC"] == expected_avx_calc(kernel, n, iters)

    def test_determinism(self):
        rec = make_record("triad", 8192, 5)
        cfg = SimConfig(noise_epsilon=0.1, rng_seed=42)
        s = open_session("L3")
        assert sim_read(s, rec, cfg) == sim_read(s, rec, cfg)
        assert sim_read(s, rec, cfg) != sim_read(s, rec, cfg.with_seed(43))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 0.5), st.integers(0, 2**32), st.sampled_from(STREAMING_KERNELS),
           st.integers(1, 10**6))
    def test_noise_bounds(self, eps, seed, kernel, n):
        rec = make_record(kernel, n, target_level="MEM")
        session = open_session(ALL_SIM_EVENTS, smt_enabled=False)
        exact = sim_read(session, rec).totals()
        noisy = sim_read(session, rec, SimConfig(noise_epsilon=eps, rng_seed=seed)).totals()
        for ident, model in exact.items():
            assert model * (1 - eps) - 1e-9 <= noisy[ident] <= model * (1 + eps) + 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 1024), st.integers(0, 2**32),
           st.floats(0.6, 1.0).flatmap(lambda lo: st.tuples(st.just(lo), st.floats(lo, 1.0))))
    def test_hsw150_bounds_and_isolation(self, lines, seed, rng_range):
        rec = make_pc_record(lines, 100)
        session = open_session("FALSE_SHARE", (0, 1))
        exact = sim_read(session, rec).totals()
        cfg = SimConfig(errata={Erratum.HSW150_HITM_UNDERCOUNT}, rng_seed=seed,
                        hsw150_factor_range=rng_range)
        hit = sim_read(session, rec, cfg).totals()
        assert 0.6 * exact[HITM] <= hit[HITM] <= exact[HITM]
        assert {k: v for k, v in hit.items() if k != HITM} == \
            {k: v for k, v in exact.items() if k != HITM}

    @pytest.mark.parametrize("kernel", ["stream", "daxpy", "triad", "ddot", "copy"])
    def test_halfwide_only_raises_avx(self, kernel):
        rec = make_record(kernel, 4096, 10, target_level="MEM")
        session = open_session(["AVX_INSTS.CALC", "L1D.REPLACEMENT", "L2_TRANS.L1D_WB",
                                "UNC_M_CAS_COUNT.RD"])
        base = sim_read(session, rec).totals()
        cfg = SimConfig(errata={"vinsertf128"}, halfwide_inserts_per_kernel_iteration=2)
        over = sim_read(session, rec, cfg).totals()
        assert over["AVX_INSTS_CALC"] == base["AVX_INSTS_CALC"] + 20
        assert {k: v for k, v in over.items() if k != "AVX_INSTS_CALC"} == \
            {k: v for k, v in base.items() if k != "AVX_INSTS_CALC"}

    def test_hsw149_inert(self, pc_record):
        session = open_session("FALSE_SHARE", (0, 1))
        rec = pc_record(4, 100)
        assert sim_read(session, rec, SimConfig(errata={"hsw149"})) == sim_read(session, rec)


class TestSimConfig:
    def test_defaults(self):
        cfg = SimConfig()
        assert cfg.hsw150_factor_range == (0.6, 1.0)

    @pytest.mark.parametrize("kwargs", [{"noise_epsilon": -0.1},
                                        {"hsw150_factor_range": (0.9, 0.7)},
                                        {"hsw150_factor_range": (0.5, 1.0)},
                                        {"halfwide_inserts_per_kernel_iteration": -1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SimConfig(**kwargs)

    def test_parse_errata(self):
        assert parse_errata("hsw150,vinsertf128") == {Erratum.HSW150_HITM_UNDERCOUNT,
                                                      Erratum.AVX_HALFWIDE_OVERCOUNT}
        with pytest.raises(ValueError):
            parse_errata("hsw999")


def _os_session(names):
    try:
        return open_session(names, backend_kind="os", strict=False)
    except BackendError as exc:
        pytest.skip(f"no OS counter access: {exc}")


class TestOsBackend:
    def test_instructions_smoke(self):
        session = _os_session(["INSTR_RETIRED.ANY"])
        if "INSTR_RETIRED_ANY" in session.unavailable:
            pytest.skip("instructions-retired not exposed by this host")
        session.start()
        sum(range(100000))
        session.stop()
        sample = os_read(session)
        session.close()
        assert sample.hardware
        assert sample.thread(0)["INSTR_RETIRED_ANY"] > 0

    def test_unsupported_uncore_marked(self):
        session = _os_session(["INSTR_RETIRED.ANY", "UNC_M_CAS_COUNT.RD"])
        session.start()
        session.stop()
        sample = os_read(session)
        session.close()
        if not perf.uncore_supported(default_architecture().event("UNC_M_CAS_COUNT.RD").unit):
            assert "UNC_M_CAS_COUNT_RD" in sample.unavailable

    def test_permission_hint(self, monkeypatch):
        def denied(*args):
            raise perf.PerfPermissionError(1, f"Operation not permitted: {perf.PERMISSION_HINT}")
        monkeypatch.setattr(perf, "_open", denied)
        with pytest.raises(BackendError, match="perf_event_paranoid"):
            open_session(["INSTR_RETIRED.ANY"], backend_kind="os")
