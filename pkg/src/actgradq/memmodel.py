"""Activation-memory accounting.

Costs are in ``U = batch * seq_len * hidden * 2`` bytes, the footprint of
one BF16 activation of model width.  The per-operation table is analytic and
hard-coded; :func:`measured_bytes` counts what a toy layer actually saved.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional

from . import codec
from .dbca import BitWidthPlan
from .layers import SavedActivations

__all__ = ["Scheme", "OPS", "SchemeTable", "scheme_table", "layer_bytes", "measured_bytes",
           "ROLE_TO_OP", "dbca_stage_memory", "render_csv", "render_text"]

OPS = ("QKV", "Attention", "Linear", "RMSNorm", "FFN1", "ActFunc", "FFN2")


class Scheme(str, enum.Enum):
    MEGATRON_BF16 = "MEGATRON_BF16"
    COAT = "COAT"
    AGOQ = "AGOQ"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, Scheme):
            return value
        key = str(value).strip().upper().replace("-", "_")
        return {"MEGATRON": cls.MEGATRON_BF16, "BF16": cls.MEGATRON_BF16}.get(key) or cls[key]


_TABLE = {
    Scheme.MEGATRON_BF16: (1, 5, 1, 4, 1, 12, 4),
    Scheme.COAT: (1, 5, 1, 1, Fraction(1, 2), 6, 2),
    Scheme.AGOQ: (0, 5, Fraction(1, 4), Fraction(1, 2), 0, 2, 0),
}

_LABEL = {Scheme.MEGATRON_BF16: "Megatron", Scheme.COAT: "COAT", Scheme.AGOQ: "AGoQ"}


@dataclass(frozen=True)
class SchemeTable:
    scheme: Scheme
    costs: tuple  # Fractions, in U, ordered as OPS

    @property
    def total(self) -> Fraction:
        return sum(self.costs, Fraction(0))

    def as_dict(self) -> Dict[str, float]:
        d = {op: float(c) for op, c in zip(OPS, self.costs)}
        d["Total"] = float(self.total)
        return d


def scheme_table(scheme) -> SchemeTable:
    s = Scheme.parse(scheme)
    return SchemeTable(s, tuple(Fraction(c) for c in _TABLE[s]))


def _unit_bytes(batch: int, seq_len: int, hidden: int) -> int:
    if min(batch, seq_len, hidden) < 1:
        raise ValueError("batch, seq_len and hidden must be positive")
    return batch * seq_len * hidden * 2


def layer_bytes(batch: int, seq_len: int, hidden: int, scheme, n_layers: int = 1) -> float:
    if n_layers < 1:
        raise ValueError("n_layers must be positive")
    return float(scheme_table(scheme).total * _unit_bytes(batch, seq_len, hidden) * n_layers)


ROLE_TO_OP = {
    "qkv.in": "QKV", "attn.q": "Attention", "attn.k": "Attention", "attn.v": "Attention",
    "attn.out": "Attention", "out_proj.in": "Linear", "norm1.x": "RMSNorm", "norm2.x": "RMSNorm",
    "norm1.r": "RMSNorm", "norm2.r": "RMSNorm", "ffn1.in": "FFN1", "act.a": "ActFunc",
    "act.b": "ActFunc", "act.sigma": "ActFunc", "ffn2.in": "FFN2",
}


def measured_bytes(saved: SavedActivations) -> dict:
    """Per-role ``{code_bytes, scale_bytes, full_bytes, total}`` plus per-op and overall sums.

    Quantized roles cost ``bit_width`` bits per element plus 4 bytes per
    block scale; full-precision roles are counted as 2-byte BF16 elements.
    """
    roles = {}
    for role, t in saved.tensors.items():
        if isinstance(t, codec.QuantizedTensor):
            entry = {"code_bytes": t.code_bytes, "scale_bytes": t.scale_bytes, "full_bytes": 0}
        else:
            entry = {"code_bytes": 0, "scale_bytes": 0, "full_bytes": int(t.size) * 2}
        entry["total"] = sum(entry.values())
        roles[role] = entry
    per_op = {op: 0 for op in OPS}
    for role, e in roles.items():
        per_op[ROLE_TO_OP.get(role, "Other")] = per_op.get(ROLE_TO_OP.get(role, "Other"), 0) + e["total"]
    return {"roles": roles, "per_op": per_op,
            "scale_bytes": sum(e["scale_bytes"] for e in roles.values()),
            "total": sum(e["total"] for e in roles.values())}


def dbca_stage_memory(plan: BitWidthPlan, per_minibatch_U: float = 1.0,
                      unit_bytes: float = 1.0) -> List[float]:
    """``N_i * bits_i / 16 * per_minibatch_U * unit_bytes`` per stage."""
    return [s.stored_minibatches * s.assigned_bits / 16 * per_minibatch_U * unit_bytes
            for s in plan.stages]


def _fmt(x) -> str:
    x = float(x)
    return str(int(x)) if x == int(x) else f"{x:g}"


def _rows(schemes):
    return [[_LABEL[t.scheme]] + [_fmt(c) for c in t.costs] + [_fmt(t.total)]
            for t in (scheme_table(s) for s in schemes)]


def render_csv(schemes: Optional[list] = None) -> str:
    schemes = list(Scheme) if schemes is None else schemes
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Scheme", *OPS, "Total"])
    w.writerows(_rows(schemes))
    return buf.getvalue()


def render_text(schemes: Optional[list] = None) -> str:
    schemes = list(Scheme) if schemes is None else schemes
    header = ["Scheme", *OPS, "Total"]
    rows = [header] + [[r[0]] + [c + "U" for c in r[1:]] for r in _rows(schemes)]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    return "\n".join(lines) + "\n"
