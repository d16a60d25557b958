import pytest

from hpmsig.kernels import KernelSpec, Placement, RunRecord
from hpmsig.traffic import triangular_partition


def make_record(kernel, elements=0, iterations=1, work=None, runtime=0.01, **kw):
    """A completed-run record without executing the kernel."""
    work = tuple(work) if work is not None else (elements,)
    elements = elements or sum(work)
    threads = tuple(range(len(work)))
    spec = KernelSpec(kernel, elements=elements, iterations=iterations, threads=threads, **kw)
    return RunRecord(spec, runtime, 0.0, work)


@pytest.fixture
def mvm_record():
    p = triangular_partition(8192, 2)
    return make_record("triangular_mvm", iterations=1000, work=p.counts, matrix_n=8192)


def make_pc_record(lines=2, steps=100, placement=Placement.INTRA_SOCKET):
    return make_record("producer_consumer", work=(lines * steps, lines * steps),
                       lines_per_step=lines, steps=steps, placement=placement)


@pytest.fixture
def pc_record():
    return make_pc_record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.rep_call = report
