"""Bit-width compensation across interleaved 1F1B pipeline stages.

Under interleaved 1F1B the first device holds the most in-flight activation
mini-batches and later devices progressively fewer.  Giving lightly loaded
stages proportionally wider activation codes spends the memory they would
otherwise leave idle, without raising the pipeline's peak.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional

from .layers import ActivationPolicy

MIN_BITS, MAX_BITS, BASE_BITS = 4, 8, 4

__all__ = ["PipelineConfig", "StagePlan", "BitWidthPlan", "stored_activation_counts",
           "plan_bit_widths", "peak_memory_check", "plan_reuse_check", "stage_policies"]


@dataclass(frozen=True)
class PipelineConfig:
    n_stages: int
    micro_batches: Optional[int] = None
    interleave: int = 2

    def __post_init__(self):
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if self.interleave < 1:
            raise ValueError("interleave must be >= 1")
        if self.micro_batches is None:
            object.__setattr__(self, "micro_batches", 2 * self.n_stages)
        if self.micro_batches < 1:
            raise ValueError("micro_batches must be >= 1")


@dataclass(frozen=True)
class StagePlan:
    stage_index: int
    stored_minibatches: int
    raw_bits: float
    assigned_bits: int


@dataclass(frozen=True)
class BitWidthPlan:
    stages: tuple

    @property
    def counts(self) -> List[int]:
        return [s.stored_minibatches for s in self.stages]

    @property
    def raw_bits(self) -> List[float]:
        return [s.raw_bits for s in self.stages]

    @property
    def assigned_bits(self) -> List[int]:
        return [s.assigned_bits for s in self.stages]

    def to_dict(self, bytes_per_minibatch_at_16bit: float = 1.0) -> dict:
        return {"n_stages": len(self.stages), "counts": self.counts, "raw_bits": self.raw_bits,
                "assigned_bits": self.assigned_bits,
                "peak_check": peak_memory_check(self, None, bytes_per_minibatch_at_16bit)}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw), indent=1)


def stored_activation_counts(cfg: PipelineConfig) -> List[int]:
    """Peak in-flight activation mini-batches per device, device 1 first (largest).

    Device ``k`` (1-based) holds ``3n - 2k + 1``, i.e. ``n + 2i - 1`` with
    ``i = n - k + 1`` counted from the last device.  A single stage holds 1.
    """
    n = cfg.n_stages
    if n == 1:
        return [1]
    if cfg.micro_batches < 2 * n:
        raise ValueError(f"steady-state counts need micro_batches >= 2*n_stages "
                         f"({2 * n}), got {cfg.micro_batches}")
    return [3 * n - 2 * k + 1 for k in range(1, n + 1)]


def _assign(raw: float) -> int:
    # Python's round() is round-half-to-even
    return int(min(MAX_BITS, max(MIN_BITS, round(raw))))


def plan_bit_widths(cfg: PipelineConfig) -> BitWidthPlan:
    counts = stored_activation_counts(cfg)
    n_max = max(counts)
    stages = []
    for i, n_i in enumerate(counts):
        raw = BASE_BITS * n_max / n_i
        stages.append(StagePlan(i, n_i, raw, _assign(raw)))
    return BitWidthPlan(tuple(stages))


def _check(counts, bits, bytes16):
    n_max = max(counts)
    unit = bytes16 / 16.0
    budget = n_max * BASE_BITS * unit
    stages = []
    for n_i, b in zip(counts, bits):
        mem = n_i * b * unit
        slack = n_i * unit  # one bit per stored mini-batch: the cost of rounding up
        stages.append({"count": n_i, "bits": b, "bit_units": n_i * b, "memory": mem,
                       "slack": slack, "ok": mem <= budget + slack})
    return {"budget": budget, "budget_bit_units": n_max * BASE_BITS,
            "peak": max(s["memory"] for s in stages), "stages": stages,
            "verdict": "PASS" if all(s["ok"] for s in stages) else "FAIL",
            "slack_rule": "per stage: N_i*bits <= 4*N_max + N_i"}


def peak_memory_check(plan: BitWidthPlan, cfg: Optional[PipelineConfig] = None,
                      bytes_per_minibatch_at_16bit: float = 1.0) -> dict:
    """Per-stage activation memory against the all-4-bit peak.

    A stage passes when ``N_i * bits <= 4 * N_max + N_i`` (memory in units of
    ``bytes_per_minibatch_at_16bit / 16``); the extra ``N_i`` absorbs rounding.
    """
    if cfg is not None and plan.counts != stored_activation_counts(cfg):
        raise ValueError("plan does not belong to this config")
    return _check(plan.counts, plan.assigned_bits, bytes_per_minibatch_at_16bit)


def plan_reuse_check(low: PipelineConfig, high: PipelineConfig,
                     bytes_per_minibatch_at_16bit: float = 1.0) -> dict:
    """Apply ``low``'s bit assignment to ``high``'s counts.

    The low plan's widths go to high's *last* stages (the lightly loaded end,
    where wide codes fit); the leading stages are padded with 4 bits.
    """
    if low.n_stages > high.n_stages:
        raise ValueError("a plan can only be reused on at least as many stages")
    bits = plan_bit_widths(low).assigned_bits
    counts = stored_activation_counts(high)
    padded = [BASE_BITS] * (high.n_stages - low.n_stages) + bits
    result = _check(counts, padded, bytes_per_minibatch_at_16bit)
    result["applied_bits"] = padded
    return result


def stage_policies(plan: BitWidthPlan, base: Optional[ActivationPolicy] = None) -> List[ActivationPolicy]:
    """One activation policy per stage; attention stays unquantized."""
    base = ActivationPolicy.agoq() if base is None else base
    return [base.with_bits(b) for b in plan.assigned_bits]
