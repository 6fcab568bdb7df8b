import pytest

from lmobilenet.bench import bench_forward
from lmobilenet.errors import ConfigurationError
from lmobilenet.presets import lmobilenet_narrow_config, preset_lmobilenet


@pytest.fixture(scope="module")
def narrow():
    return lmobilenet_narrow_config().build().init_params(0)


def test_report_invariants(narrow):
    rep = bench_forward(narrow, batch=2, reps=4, warmup=1)
    assert [n.node_id for n in rep.nodes] == [n.id for n in narrow.nodes]
    assert all(n.mean_s >= 0 and n.std_s >= 0 and n.calls == 4 for n in rep.nodes)
    for kind, total in rep.per_kind.items():
        assert total == pytest.approx(sum(n.mean_s for n in rep.nodes if n.kind == kind))
    assert sum(rep.per_kind_share.values()) == pytest.approx(1.0)
    assert rep.node_sum_s <= rep.end_to_end_s
    doc = rep.to_dict()
    assert doc["meta"]["reps"] == 4 and "bn" in doc["per_kind"]


def test_threads_recorded(narrow):
    rep = bench_forward(narrow, batch=2, reps=1, warmup=0, threads=1)
    assert rep.meta["threads"] == 1


@pytest.mark.parametrize("kw", [{"reps": 0}, {"warmup": -1}, {"threads": 0}])
def test_bad_arguments(narrow, kw):
    with pytest.raises(ConfigurationError):
        bench_forward(narrow, **kw)


@pytest.mark.slow
def test_gemm_not_slower_than_naive():
    g = preset_lmobilenet().init_params(0)
    gemm = bench_forward(g, batch=8, reps=3, warmup=1, kernel="gemm")
    naive = bench_forward(g, batch=8, reps=3, warmup=1, kernel="naive")
    assert gemm.end_to_end_s <= naive.end_to_end_s
