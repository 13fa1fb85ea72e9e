"""Toy decoder layer whose saved activations follow a per-layer-type policy.

Dataflow (row-vector convention, ``y = x @ W``)::

    u1 = RMSNorm(x)            -> QKV_PROJ -> Q, K, V -> ATTENTION -> A
    o  = A @ Wo (OUT_PROJ);  h1 = o (+ x with residuals)
    u2 = RMSNorm(h1)           -> FFN1 -> gate a, up b -> SILU_MUL -> z
    y  = z @ W2 (FFN2);      out = y (+ h1 with residuals)

Quantization only touches what is *saved*: the forward output never reads a
quantized value.  The backward pass dequantizes, recomputes what the policy
says to recompute, and runs the gradient formulas from ``erroranalysis``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Union

import numpy as np

from . import codec
from .erroranalysis import (
    DEFAULT_RMS_EPS, attention_forward, attention_grads, rmsnorm_rows, rmsnorm_rows_backward,
    sigmoid,
)

__all__ = [
    "LayerType", "Strategy", "PolicyEntry", "ActivationPolicy", "LayerParams",
    "SavedActivations", "MissingActivationError", "layer_forward", "layer_backward",
    "measure_layer_gradient_error", "ROLES",
]


class LayerType(str, enum.Enum):
    RMSNORM = "RMSNORM"
    QKV_PROJ = "QKV_PROJ"
    ATTENTION = "ATTENTION"
    OUT_PROJ = "OUT_PROJ"
    FFN1 = "FFN1"
    SILU_MUL = "SILU_MUL"
    FFN2 = "FFN2"


class Strategy(str, enum.Enum):
    RECOMPUTE_INTERMEDIATES = "RECOMPUTE_INTERMEDIATES"
    CACHE_INTERMEDIATES = "CACHE_INTERMEDIATES"
    NO_QUANT = "NO_QUANT"


FULL = None  # bit_width marker for full precision


@dataclass(frozen=True)
class PolicyEntry:
    bit_width: Optional[int]
    strategy: Strategy

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.strategy == Strategy.NO_QUANT:
            object.__setattr__(self, "bit_width", None)
        elif self.bit_width is None or not 4 <= int(self.bit_width) <= 8:
            raise ValueError(f"bit_width must be in [4, 8] unless NO_QUANT, got {self.bit_width}")

    @property
    def quantized(self) -> bool:
        return self.strategy != Strategy.NO_QUANT


@dataclass(frozen=True)
class ActivationPolicy:
    """Per-layer-type storage rules.

    For the GEMMs (QKV_PROJ, OUT_PROJ, FFN1, FFN2) RECOMPUTE means the input
    is rebuilt from upstream saved tensors and nothing is stored; CACHE stores
    the input quantized.  RMSNORM, SILU_MUL and ATTENTION always store their
    inputs (quantized unless NO_QUANT); CACHE additionally stores the
    intermediates ``r``, ``sigmoid(a)`` or the attention output.
    """

    entries: Dict[LayerType, PolicyEntry]
    codec_kind: codec.CodecKind = codec.CodecKind.SYMMETRIC_LINEAR
    block_size: int = codec.DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        entries = {LayerType(k): v for k, v in self.entries.items()}
        missing = set(LayerType) - set(entries)
        if missing:
            raise ValueError(f"policy is missing entries for {sorted(m.value for m in missing)}")
        object.__setattr__(self, "entries", entries)

    def __getitem__(self, key) -> PolicyEntry:
        return self.entries[LayerType(key)]

    def with_entry(self, key, bit_width, strategy) -> "ActivationPolicy":
        entries = dict(self.entries)
        entries[LayerType(key)] = PolicyEntry(bit_width, strategy)
        return replace(self, entries=entries)

    def with_bits(self, bits: int) -> "ActivationPolicy":
        """Same strategies, every quantized entry at ``bits``."""
        entries = {k: PolicyEntry(bits, e.strategy) if e.quantized else e
                   for k, e in self.entries.items()}
        return replace(self, entries=entries)

    @classmethod
    def agoq(cls, bits: int = 4, **kw) -> "ActivationPolicy":
        R, C, N = (Strategy.RECOMPUTE_INTERMEDIATES, Strategy.CACHE_INTERMEDIATES, Strategy.NO_QUANT)
        return cls({
            LayerType.RMSNORM: PolicyEntry(bits, R),
            LayerType.QKV_PROJ: PolicyEntry(bits, R),
            LayerType.ATTENTION: PolicyEntry(FULL, N),
            LayerType.OUT_PROJ: PolicyEntry(bits, C),
            LayerType.FFN1: PolicyEntry(bits, R),
            LayerType.SILU_MUL: PolicyEntry(bits, R),
            LayerType.FFN2: PolicyEntry(bits, R),
        }, **kw)

    @classmethod
    def full(cls) -> "ActivationPolicy":
        return cls({t: PolicyEntry(FULL, Strategy.NO_QUANT) for t in LayerType})

    def to_dict(self) -> dict:
        return {"codec_kind": self.codec_kind.name, "block_size": self.block_size,
                "entries": {k.value: {"bit_width": e.bit_width, "strategy": e.strategy.value}
                            for k, e in self.entries.items()}}


@dataclass
class LayerParams:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    W1: np.ndarray           # gate projection, M x hM
    W2: np.ndarray           # hM x M
    gamma1: np.ndarray
    gamma2: np.ndarray
    W1u: Optional[np.ndarray] = None   # up projection (gated MLP only)
    seq_len: int = 32
    residual: bool = False

    def __post_init__(self):
        M = self.Wq.shape[0]
        for name in ("Wq", "Wk", "Wv", "Wo"):
            if getattr(self, name).shape != (M, M):
                raise ValueError(f"{name} must be {M}x{M}")
        hM = self.W1.shape[1]
        if self.W1.shape != (M, hM) or self.W2.shape != (hM, M):
            raise ValueError("W1 must be M x hM and W2 hM x M")
        if hM // M not in (4, 8) or hM % M:
            raise ValueError("hidden multiplier h must be 4 or 8")
        if self.W1u is not None and self.W1u.shape != (M, hM):
            raise ValueError("W1u must match W1")
        if self.gamma1.shape != (M,) or self.gamma2.shape != (M,):
            raise ValueError("gamma vectors must have length M")

    @property
    def M(self) -> int:
        return self.Wq.shape[0]

    @property
    def h(self) -> int:
        return self.W1.shape[1] // self.M

    @property
    def gated(self) -> bool:
        return self.W1u is not None

    @classmethod
    def init(cls, M: int = 64, h: int = 4, L: int = 32, seed: int = 0, gated: bool = True,
             residual: bool = False) -> "LayerParams":
        rng = np.random.default_rng(seed)
        std = 1.0 / math.sqrt(M)

        def w(shape):
            return rng.normal(0.0, std, shape)

        return cls(Wq=w((M, M)), Wk=w((M, M)), Wv=w((M, M)), Wo=w((M, M)),
                   W1=w((M, h * M)), W2=w((h * M, M)), gamma1=np.ones(M), gamma2=np.ones(M),
                   W1u=w((M, h * M)) if gated else None, seq_len=L, residual=residual)

    def names(self):
        names = ["Wq", "Wk", "Wv", "Wo", "W1", "W2", "gamma1", "gamma2"]
        return names + (["W1u"] if self.gated else [])


class MissingActivationError(KeyError):
    """Backward asked for a tensor the forward pass did not save."""


Stored = Union[codec.QuantizedTensor, np.ndarray]


@dataclass
class SavedActivations:
    tensors: Dict[str, Stored] = field(default_factory=dict)

    def put(self, role: str, value: np.ndarray, entry: PolicyEntry, policy: ActivationPolicy):
        if entry.quantized:
            kind = policy.codec_kind
            if kind == codec.CodecKind.FP4_E2M1 and entry.bit_width != 4:
                kind = codec.CodecKind.SYMMETRIC_LINEAR
            if kind == codec.CodecKind.FP8_E4M3 and entry.bit_width != 8:
                kind = codec.CodecKind.SYMMETRIC_LINEAR
            self.tensors[role] = codec.quantize_blockwise(value, entry.bit_width, policy.block_size, kind)
        else:
            self.tensors[role] = np.array(value, dtype=np.float64, copy=True)

    def get(self, role: str) -> np.ndarray:
        try:
            t = self.tensors[role]
        except KeyError:
            raise MissingActivationError(f"saved activation {role!r} is missing") from None
        return t.dequantize() if isinstance(t, codec.QuantizedTensor) else t

    def __contains__(self, role):
        return role in self.tensors

    def nbytes(self) -> Dict[str, int]:
        out = {}
        for role, t in self.tensors.items():
            out[role] = t.nbytes if isinstance(t, codec.QuantizedTensor) else int(t.size * 2)
        return out


def _mlp_act(a, b):
    """Gated: ``z = b * a * sigmoid(a)``; ungated (``b is None``): ``z = a * sigmoid(a)``."""
    s = sigmoid(a)
    return a * s if b is None else b * a * s


def layer_forward(params: LayerParams, x, policy: ActivationPolicy):
    """Full-precision forward; returns ``(out, saved)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.M:
        raise ValueError(f"x must be L x {params.M}, got {x.shape}")
    P = policy
    saved = SavedActivations()

    u1, r1 = rmsnorm_rows(x, params.gamma1)
    Q, K, V = u1 @ params.Wq, u1 @ params.Wk, u1 @ params.Wv
    A = attention_forward(Q, K, V)
    h1 = A @ params.Wo + (x if params.residual else 0.0)
    u2, r2 = rmsnorm_rows(h1, params.gamma2)
    a = u2 @ params.W1
    b = u2 @ params.W1u if params.gated else None
    z = _mlp_act(a, b)
    out = z @ params.W2 + (h1 if params.residual else 0.0)

    e = P[LayerType.RMSNORM]
    saved.put("norm1.x", x, e, P)
    saved.put("norm2.x", h1, e, P)
    if e.strategy == Strategy.CACHE_INTERMEDIATES:
        saved.put("norm1.r", r1, e, P)
        saved.put("norm2.r", r2, e, P)
    for layer, role, value in ((LayerType.QKV_PROJ, "qkv.in", u1), (LayerType.FFN1, "ffn1.in", u2)):
        if P[layer].strategy != Strategy.RECOMPUTE_INTERMEDIATES:
            saved.put(role, value, P[layer], P)
    e = P[LayerType.ATTENTION]
    for role, value in (("attn.q", Q), ("attn.k", K), ("attn.v", V)):
        saved.put(role, value, e, P)
    if e.strategy == Strategy.CACHE_INTERMEDIATES:
        saved.put("attn.out", A, e, P)
    if P[LayerType.OUT_PROJ].strategy != Strategy.RECOMPUTE_INTERMEDIATES:
        saved.put("out_proj.in", A, P[LayerType.OUT_PROJ], P)
    e = P[LayerType.SILU_MUL]
    saved.put("act.a", a, e, P)
    if params.gated:
        saved.put("act.b", b, e, P)
    if e.strategy == Strategy.CACHE_INTERMEDIATES:
        saved.put("act.sigma", sigmoid(a), e, P)
    if P[LayerType.FFN2].strategy != Strategy.RECOMPUTE_INTERMEDIATES:
        saved.put("ffn2.in", z, P[LayerType.FFN2], P)
    return out, saved


def _rms(x):
    return np.sqrt(np.mean(x ** 2, axis=-1) + DEFAULT_RMS_EPS)


def layer_backward(params: LayerParams, saved: SavedActivations, upstream, policy: ActivationPolicy,
                   exact_trace: Optional[dict] = None, return_trace: bool = False):
    """Backward from saved activations; returns ``(dx, dparams)``.

    With ``exact_trace`` (the trace of a full-precision backward) every
    sub-layer receives the exact incoming gradient instead of the propagated
    one, isolating each sub-layer's own storage error.  ``return_trace`` adds
    a third element holding the internal gradients.
    """
    P = policy
    dout = np.asarray(upstream, dtype=np.float64)
    trace = {}

    def flow(key, value):
        trace[key] = value
        return exact_trace[key] if exact_trace is not None else value

    def norm_r(role):
        if P[LayerType.RMSNORM].strategy == Strategy.CACHE_INTERMEDIATES:
            return saved.get(role + ".r")
        return _rms(saved.get(role + ".x"))

    # MLP
    a = saved.get("act.a")
    b = saved.get("act.b") if params.gated else None
    if P[LayerType.SILU_MUL].strategy == Strategy.CACHE_INTERMEDIATES:
        s = saved.get("act.sigma")
    else:
        s = sigmoid(a)
    if "ffn2.in" in saved:
        z = saved.get("ffn2.in")
    else:
        z = a * s if b is None else b * a * s
    dW2 = z.T @ dout
    dz = dout @ params.W2.T
    if params.gated:
        da = flow("da", dz * (b * s + b * a * s * (1 - s)))
        db = flow("db", dz * (a * s))
    else:
        da = flow("da", dz * (s + a * s * (1 - s)))
        db = None

    u2 = saved.get("ffn1.in") if "ffn1.in" in saved else \
        rmsnorm_rows(saved.get("norm2.x"), params.gamma2)[0]
    dW1 = u2.T @ da
    du2 = da @ params.W1.T
    dW1u = None
    if params.gated:
        dW1u = u2.T @ db
        du2 = du2 + db @ params.W1u.T
    du2 = flow("du2", du2)

    dh1, dgamma2 = rmsnorm_rows_backward(saved.get("norm2.x"), params.gamma2, norm_r("norm2"), du2)
    if params.residual:
        dh1 = dh1 + dout
    dh1 = flow("dh1", dh1)

    # attention block
    Q, K, V = saved.get("attn.q"), saved.get("attn.k"), saved.get("attn.v")
    A = saved.get("out_proj.in") if "out_proj.in" in saved else attention_forward(Q, K, V)
    dWo = A.T @ dh1
    dA = flow("dA", dh1 @ params.Wo.T)
    A_cached = saved.get("attn.out") if P[LayerType.ATTENTION].strategy == Strategy.CACHE_INTERMEDIATES \
        else None
    dQ, dK, dV = attention_grads(Q, K, V, dA, A_cached=A_cached)
    dQ, dK, dV = flow("dQ", dQ), flow("dK", dK), flow("dV", dV)
    u1 = saved.get("qkv.in") if "qkv.in" in saved else \
        rmsnorm_rows(saved.get("norm1.x"), params.gamma1)[0]
    dWq, dWk, dWv = u1.T @ dQ, u1.T @ dK, u1.T @ dV
    du1 = flow("du1", dQ @ params.Wq.T + dK @ params.Wk.T + dV @ params.Wv.T)

    dx, dgamma1 = rmsnorm_rows_backward(saved.get("norm1.x"), params.gamma1, norm_r("norm1"), du1)
    if params.residual:
        dx = dx + dh1
    trace["dx"] = dx

    dparams = {"Wq": dWq, "Wk": dWk, "Wv": dWv, "Wo": dWo, "W1": dW1, "W2": dW2,
               "gamma1": dgamma1, "gamma2": dgamma2}
    if params.gated:
        dparams["W1u"] = dW1u
    if return_trace:
        return dx, dparams, trace
    return dx, dparams


def _role_grads(params, trace, dparams):
    cat = lambda *xs: np.concatenate([np.ravel(x) for x in xs if x is not None])
    w1 = [dparams["W1"], dparams.get("W1u")]
    roles = {
        "RMSNORM": cat(trace["dh1"], trace["dx"]),
        "QKV_PROJ": cat(dparams["Wq"], dparams["Wk"], dparams["Wv"]),
        "ATTENTION": cat(trace["dQ"], trace["dK"], trace["dV"]),
        "OUT_PROJ": cat(dparams["Wo"]),
        "FFN1": cat(*w1),
        "SILU_MUL": cat(trace["da"], trace.get("db")),
        "FFN2": cat(dparams["W2"]),
    }
    roles["GEMM_WEIGHT"] = cat(roles["QKV_PROJ"], roles["OUT_PROJ"], roles["FFN1"], roles["FFN2"])
    return roles


ROLES = ("RMSNORM", "QKV_PROJ", "ATTENTION", "OUT_PROJ", "FFN1", "SILU_MUL", "FFN2", "GEMM_WEIGHT")


def measure_layer_gradient_error(params: LayerParams, x=None, policy: Optional[ActivationPolicy] = None,
                                 seed: int = 0, upstream=None) -> Dict[str, Dict[str, float]]:
    """Per-role ``{"MAE", "normalized_L2"}`` of quantized-storage gradients.

    Each sub-layer is fed the exact full-precision incoming gradient, so a
    role's error is its own storage error.  RMSNORM reports the input
    gradients of both norms; GEMM_WEIGHT pools every projection weight.
    ``x`` and ``upstream`` default to standard normal draws from ``seed``.
    """
    rng = np.random.default_rng(seed)
    L, M = params.seq_len, params.M
    x = rng.standard_normal((L, M)) if x is None else np.asarray(x, dtype=np.float64)
    upstream = rng.standard_normal(x.shape) if upstream is None else np.asarray(upstream, dtype=np.float64)
    policy = ActivationPolicy.agoq() if policy is None else policy

    full = ActivationPolicy.full()
    _, saved_full = layer_forward(params, x, full)
    _, dp_full, tr_full = layer_backward(params, saved_full, upstream, full, return_trace=True)
    _, saved_q = layer_forward(params, x, policy)
    _, dp_q, tr_q = layer_backward(params, saved_q, upstream, policy, exact_trace=tr_full,
                                   return_trace=True)
    ref = _role_grads(params, tr_full, dp_full)
    got = _role_grads(params, tr_q, dp_q)
    out = {}
    for role in ROLES:
        diff = got[role] - ref[role]
        denom = float(np.linalg.norm(ref[role]))
        out[role] = {"MAE": float(np.mean(np.abs(diff))),
                     "normalized_L2": float(np.linalg.norm(diff)) / denom if denom > 0 else 0.0}
    return out
