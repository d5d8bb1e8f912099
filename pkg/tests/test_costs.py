import numpy as np
import pytest

from dlora import protocol as P
from dlora.costs import CostLedger, delta, module_bytes, module_flops
from dlora.numeric import matmul


def test_unit_matmul():
    led = CostLedger()
    led.count_matmul("edge", 1, 1, 1)
    assert led.edge_flops == 2


def test_additive():
    led = CostLedger()
    led.count_matmul("cloud", 2, 3, 4)
    led.count_matmul("cloud", 1, 5, 1)
    assert led.cloud_flops == 48 + 10


def test_tally_routes_kernel_flops():
    led = CostLedger("cloud")
    with led.tally("backbone"):
        matmul(np.ones((3, 4)), np.ones((4, 2)))
    with led.tally("peft", "edge"):
        matmul(np.ones((1, 2)), np.ones((2, 1)))
    matmul(np.ones((9, 9)), np.ones((9, 9)))  # outside any tally
    assert led.cloud_flops == 48 and led.edge_flops == 4
    assert led.totals()["flops.cloud.backbone"] == 48


def test_shutdown_frame_bytes():
    led = CostLedger()
    led.record_frame("to_cloud", len(P.encode_frame(P.Shutdown())))
    assert led.bytes_to_cloud == 10 and led.frames_sent == 1


def test_short_frame_rejected():
    with pytest.raises(ValueError):
        CostLedger().record_frame("to_edge", 9)


def test_empty_report_is_zero():
    rep = CostLedger().report()
    assert all(v == 0 for v in rep["totals"].values())
    assert rep["epochs"] == []


def test_snapshots_sum_to_totals():
    led = CostLedger()
    for i in range(3):
        led.add_flops("edge", 10 * (i + 1), "peft")
        led.record_frame("to_cloud", 20 + i, "module", "FWD_DELTA")
        led.snapshot(f"e{i}")
    rows = led.report()["epochs"]
    tot = led.totals()
    for key in tot:
        assert sum(r[key] for r in rows) == tot[key]


def test_module_helpers():
    counters = {"bytes.to_cloud.module": 5, "bytes.to_edge.module": 7, "bytes.to_edge.base": 100,
                "flops.edge.peft": 3, "flops.edge.optim": 4, "flops.edge.embed": 50}
    assert module_bytes(counters) == 12
    assert module_flops(counters) == 7
    assert delta({"a": 5, "b": 1}, {"a": 2}) == {"a": 3, "b": 1}
