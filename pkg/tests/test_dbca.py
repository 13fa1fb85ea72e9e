import json

import pytest
from hypothesis import given, strategies as st

from actgradq.dbca import (
    BitWidthPlan, PipelineConfig, StagePlan, peak_memory_check, plan_bit_widths,
    plan_reuse_check, stage_policies, stored_activation_counts,
)
from actgradq.layers import LayerType


def test_counts():
    assert stored_activation_counts(PipelineConfig(4)) == [11, 9, 7, 5]
    assert stored_activation_counts(PipelineConfig(8)) == [23, 21, 19, 17, 15, 13, 11, 9]
    assert stored_activation_counts(PipelineConfig(1)) == [1]
    assert stored_activation_counts(PipelineConfig(2)) == [5, 3]


def test_counts_need_steady_state():
    with pytest.raises(ValueError):
        stored_activation_counts(PipelineConfig(4, micro_batches=7))
    with pytest.raises(ValueError):
        PipelineConfig(0)


def test_plan_n4():
    plan = plan_bit_widths(PipelineConfig(4))
    assert plan.assigned_bits == [4, 5, 6, 8]
    assert plan.raw_bits == pytest.approx([4.0, 44 / 9, 44 / 7, 8.8])


def test_plan_small():
    assert plan_bit_widths(PipelineConfig(1)).assigned_bits == [4]
    # counts (5, 3): raw (4, 6.67) -> (4, 7)
    assert plan_bit_widths(PipelineConfig(2)).assigned_bits == [4, 7]


@given(st.integers(1, 64))
def test_plan_properties(n):
    plan = plan_bit_widths(PipelineConfig(n))
    n_max = max(plan.counts)
    assert plan.assigned_bits[0] == 4
    for s in plan.stages:
        assert s.stored_minibatches * s.raw_bits == pytest.approx(4 * n_max)
        assert 4 <= s.assigned_bits <= 8
        assert s.assigned_bits <= -(-s.raw_bits // 1)  # never above ceil(raw)
    assert plan_bit_widths(PipelineConfig(n)) == plan
    assert peak_memory_check(plan)["verdict"] == "PASS"


def test_peak_check_n4():
    res = peak_memory_check(plan_bit_widths(PipelineConfig(4)), PipelineConfig(4))
    assert [s["bit_units"] for s in res["stages"]] == [44, 45, 42, 40]
    assert res["budget_bit_units"] == 44
    assert res["verdict"] == "PASS"


def test_peak_check_trivial_and_failing():
    four = BitWidthPlan(tuple(StagePlan(i, n, 4.0, 4) for i, n in enumerate([11, 9, 7, 5])))
    assert peak_memory_check(four)["verdict"] == "PASS"
    bad = BitWidthPlan(tuple(StagePlan(i, n, 4.0, 16 if i == 3 else 4) for i, n in enumerate([11, 9, 7, 5])))
    assert peak_memory_check(bad)["verdict"] == "FAIL"


def test_peak_check_memory_scaling():
    res = peak_memory_check(plan_bit_widths(PipelineConfig(4)), bytes_per_minibatch_at_16bit=1600)
    assert res["budget"] == 11 * 4 * 100
    assert res["stages"][1]["memory"] == 45 * 100


def test_peak_check_rejects_foreign_plan():
    with pytest.raises(ValueError):
        peak_memory_check(plan_bit_widths(PipelineConfig(4)), PipelineConfig(8))


def test_reuse():
    res = plan_reuse_check(PipelineConfig(4), PipelineConfig(8))
    assert res["verdict"] == "PASS"
    assert res["applied_bits"] == [4, 4, 4, 4, 4, 5, 6, 8]
    assert plan_reuse_check(PipelineConfig(4), PipelineConfig(4))["verdict"] == "PASS"
    with pytest.raises(ValueError):
        plan_reuse_check(PipelineConfig(8), PipelineConfig(4))


def test_stage_policies():
    pols = stage_policies(plan_bit_widths(PipelineConfig(4)))
    assert [p[LayerType.SILU_MUL].bit_width for p in pols] == [4, 5, 6, 8]
    assert all(p[LayerType.ATTENTION].bit_width is None for p in pols)


def test_json():
    data = json.loads(plan_bit_widths(PipelineConfig(4)).to_json())
    assert data["counts"] == [11, 9, 7, 5]
    assert data["assigned_bits"] == [4, 5, 6, 8]
    assert data["peak_check"]["verdict"] == "PASS"
