from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from actgradq.dbca import PipelineConfig, plan_bit_widths
from actgradq.layers import ActivationPolicy, LayerParams, layer_forward
from actgradq.memmodel import (
    OPS, Scheme, dbca_stage_memory, layer_bytes, measured_bytes, render_csv, render_text,
    scheme_table,
)

GOLDEN = Path(__file__).parent / "golden"


def test_table_rows():
    assert scheme_table("megatron").costs == (1, 5, 1, 4, 1, 12, 4)
    assert scheme_table(Scheme.AGOQ).costs == (0, 5, Fraction(1, 4), Fraction(1, 2), 0, 2, 0)
    assert scheme_table("coat").total == Fraction(33, 2)
    assert scheme_table("megatron").total == 28
    assert scheme_table("agoq").total == Fraction(31, 4)
    for s in Scheme:
        t = scheme_table(s)
        assert sum(t.costs) == t.total
        assert list(t.as_dict()) == list(OPS) + ["Total"]


def test_golden_renderings():
    assert render_text() == (GOLDEN / "memory_table.txt").read_text()
    assert render_csv() == (GOLDEN / "memory_table.csv").read_text()


def test_layer_bytes():
    assert layer_bytes(1, 1, 1, "megatron") == 56
    assert layer_bytes(1, 1, 1, "agoq") == 15.5
    assert layer_bytes(2, 3, 4, "agoq", n_layers=5) == 7.75 * 2 * 3 * 4 * 2 * 5
    assert layer_bytes(1, 1, 1, "megatron") / layer_bytes(1, 1, 1, "agoq") == pytest.approx(3.6129, abs=1e-4)
    with pytest.raises(ValueError):
        layer_bytes(0, 1, 1, "agoq")


def _saved(policy, L=32):
    p = LayerParams.init(L=L)
    x = np.random.default_rng(0).standard_normal((L, 64))
    return layer_forward(p, x, policy)[1]


def test_measured_ratio_within_analytic():
    full = measured_bytes(_saved(ActivationPolicy.full()))
    agoq = measured_bytes(_saved(ActivationPolicy.agoq()))
    assert agoq["total"] / full["total"] <= 7.75 / 28 + 0.05


def test_measured_full_not_above_megatron_per_op():
    m = measured_bytes(_saved(ActivationPolicy.full()))
    U = 32 * 64 * 2
    mega = scheme_table("megatron").as_dict()
    for op in OPS:
        assert m["per_op"][op] <= mega[op] * U


def test_measured_4bit_fraction_and_additivity():
    full = measured_bytes(_saved(ActivationPolicy.full()))
    agoq = measured_bytes(_saved(ActivationPolicy.agoq()))
    for role in ("norm1.x", "act.a", "out_proj.in"):
        r = agoq["roles"][role]
        assert r["code_bytes"] == full["roles"][role]["full_bytes"] * 4 // 16
        assert r["scale_bytes"] == 4 * -(-full["roles"][role]["full_bytes"] // 2 // 128)
    assert agoq["total"] == sum(r["total"] for r in agoq["roles"].values())
    assert agoq["total"] == sum(agoq["per_op"].values())


def test_measured_zero_length():
    assert measured_bytes(_saved(ActivationPolicy.agoq(), L=0))["total"] == 0


def test_dbca_stage_memory():
    plan = plan_bit_widths(PipelineConfig(4))
    assert dbca_stage_memory(plan) == [44 / 16, 45 / 16, 42 / 16, 40 / 16]
    four = plan_bit_widths(PipelineConfig(1))
    assert dbca_stage_memory(four, per_minibatch_U=2, unit_bytes=8) == [4]
