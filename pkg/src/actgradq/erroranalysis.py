"""Exact gradients, perturbed gradients and first-order error bounds.

Covers four sub-layers whose saved activations may be stored quantized:
RMSNorm, SiLU & Multiply, RMSNorm followed by a GEMM, and single-head
attention.  For each one there are two storage strategies:

* ``CASE1_RECOMPUTE``: only the quantized inputs are kept; intermediates
  (``r``, ``sigma(y)``, the GEMM input, the attention probabilities) are
  recomputed from them during backward.
* ``CASE2_CACHE``: the intermediates are also stored, themselves quantized.

Perturbations are relative, ``X' = X * (1 + dX)``.  The empirical error is
always measured on the exact perturbed quantity; the bounds are the
first-order expressions evaluated with the measured ``max |d|`` norms.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import codec

__all__ = [
    "Case",
    "Source",
    "Layer",
    "PerturbationSpec",
    "ErrorReport",
    "RmsNormContext",
    "spectral_norm",
    "sigmoid",
    "rmsnorm_forward",
    "rmsnorm_jacobian",
    "rmsnorm_perturbed_jacobian",
    "rmsnorm_first_order_delta",
    "rmsnorm_case1_bound",
    "rmsnorm_case2_bound",
    "rmsnorm_error",
    "rmsnorm_rows",
    "rmsnorm_rows_backward",
    "silu_mul_forward",
    "silu_mul_grads",
    "silu_mul_bounds",
    "silu_mul_error",
    "gemm_case1_bound",
    "gemm_case2_bound",
    "rmsnorm_gemm_error",
    "softmax_rows",
    "attention_forward",
    "attention_grads",
    "attention_bounds",
    "attention_error",
    "bound_sweep",
    "dominance_rate",
    "error_slopes",
    "reports_to_csv",
    "reports_to_json",
]


class Case(str, enum.Enum):
    CASE1_RECOMPUTE = "CASE1_RECOMPUTE"
    CASE2_CACHE = "CASE2_CACHE"

    @classmethod
    def parse(cls, value) -> "Case":
        if isinstance(value, Case):
            return value
        key = str(value).strip().upper()
        if key in ("1", "C1", "CASE1", "RECOMPUTE"):
            return cls.CASE1_RECOMPUTE
        if key in ("2", "C2", "CASE2", "CACHE"):
            return cls.CASE2_CACHE
        return cls[key]


class Source(str, enum.Enum):
    SYNTHETIC_UNIFORM = "SYNTHETIC_UNIFORM"
    CODEC_ROUNDTRIP = "CODEC_ROUNDTRIP"


class Layer(str, enum.Enum):
    RMSNORM = "RMSNORM"
    SILU_MUL = "SILU_MUL"
    RMSNORM_GEMM = "RMSNORM_GEMM"
    ATTENTION = "ATTENTION"

    @classmethod
    def parse(cls, value) -> "Layer":
        if isinstance(value, Layer):
            return value
        key = str(value).strip().upper().replace("-", "_").replace("&", "_")
        aliases = {"SILU": "SILU_MUL", "GEMM": "RMSNORM_GEMM", "ATTN": "ATTENTION",
                   "NORM": "RMSNORM"}
        return cls[aliases.get(key, key)]


@dataclass(frozen=True)
class PerturbationSpec:
    """How relative perturbations are produced.

    ``SYNTHETIC_UNIFORM`` draws each delta independently from
    ``U[-epsilon_q, epsilon_q]``.  ``CODEC_ROUNDTRIP`` measures the delta of a
    real quantize/dequantize roundtrip at ``bit_width``; ``epsilon_q`` is then
    only a label.
    """

    epsilon_q: float
    mode: Case = Case.CASE1_RECOMPUTE
    source: Source = Source.SYNTHETIC_UNIFORM
    bit_width: int = 4
    block_size: int = codec.DEFAULT_BLOCK_SIZE
    codec_kind: codec.CodecKind = codec.CodecKind.SYMMETRIC_LINEAR

    def __post_init__(self):
        if not (self.epsilon_q >= 0 and math.isfinite(self.epsilon_q)):
            raise ValueError(f"epsilon_q must be finite and >= 0, got {self.epsilon_q}")
        if self.epsilon_q >= 1:
            raise ValueError("relative perturbations need epsilon_q < 1")
        object.__setattr__(self, "mode", Case.parse(self.mode))
        object.__setattr__(self, "source", Source(self.source))

    @classmethod
    def codec_roundtrip(cls, bit_width: int, mode=Case.CASE1_RECOMPUTE, **kw) -> "PerturbationSpec":
        return cls(0.0, mode, Source.CODEC_ROUNDTRIP, bit_width, **kw)

    def draw(self, reference: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Relative deltas shaped like ``reference``."""
        reference = np.asarray(reference, dtype=np.float64)
        if self.source == Source.CODEC_ROUNDTRIP:
            kind = self.codec_kind if self.bit_width == 4 or self.codec_kind != codec.CodecKind.FP4_E2M1 \
                else codec.CodecKind.SYMMETRIC_LINEAR
            q = codec.quantize_blockwise(reference, self.bit_width, self.block_size, kind)
            return codec.relative_perturbation(reference, q)
        if self.epsilon_q == 0:
            return np.zeros_like(reference)
        if rng is None:
            raise ValueError("synthetic perturbations need an rng")
        return rng.uniform(-self.epsilon_q, self.epsilon_q, size=reference.shape)


@dataclass
class ErrorReport:
    layer: str
    case: str
    dim: int
    epsilon_q: float
    empirical: float
    bound: float
    channel: str = ""
    trial: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        if self.bound > 0:
            return self.empirical / self.bound
        return 0.0 if self.empirical == 0 else math.inf

    @property
    def dominated(self) -> bool:
        return self.empirical <= self.bound

    def as_row(self) -> dict:
        return {"layer": self.layer, "case": self.case, "dim": self.dim,
                "epsilon_q": self.epsilon_q, "trial": self.trial,
                "empirical": self.empirical, "bound": self.bound, "ratio": self.ratio,
                "channel": self.channel, "dominated": self.dominated}


CSV_COLUMNS = ["layer", "case", "dim", "epsilon_q", "trial", "empirical", "bound", "ratio",
               "channel", "dominated"]


def reports_to_csv(reports: Iterable[ErrorReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        row = r.as_row()
        for k in ("epsilon_q", "empirical", "bound", "ratio"):
            row[k] = repr(float(row[k]))
        writer.writerow(row)
    return buf.getvalue()


def reports_to_json(reports: Iterable[ErrorReport]) -> str:
    return json.dumps([r.as_row() for r in reports], indent=1)


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def spectral_norm(a, max_iter: int = 100, rtol: float = 1e-10) -> float:
    """Largest singular value by power iteration.

    Iterates on the 8th power of the smaller Gram matrix (three squarings),
    so each of the ``max_iter`` steps advances eight plain power steps; this
    keeps nearly-degenerate top singular values accurate.  Stops early once
    the estimate changes by less than ``rtol`` relative.  Vectors get their
    Euclidean norm.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        return float(np.linalg.norm(a))
    if not np.any(a):
        return 0.0
    op = a if a.shape[1] <= a.shape[0] else a.T
    g = op.T @ op
    for _ in range(3):
        g = g / np.max(np.abs(g))
        g = g @ g
    v = np.random.default_rng(0x5EED).standard_normal(g.shape[0])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = g @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        v = w / nw
        new = float(np.linalg.norm(op @ v))
        if abs(new - sigma) <= rtol * new:
            return new
        sigma = new
    return float(np.linalg.norm(op @ v))


def _inf(x) -> float:
    x = np.asarray(x)
    return float(np.max(np.abs(x))) if x.size else 0.0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# RMSNorm
# ---------------------------------------------------------------------------

DEFAULT_RMS_EPS = 1e-6


@dataclass
class RmsNormContext:
    X: np.ndarray
    gamma: np.ndarray
    epsilon: float = DEFAULT_RMS_EPS

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        if self.X.size < 1 or self.gamma.shape != self.X.shape:
            raise ValueError("X and gamma must be non-empty vectors of equal length")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    @property
    def d(self) -> int:
        return self.X.size

    @property
    def sq_norm(self) -> float:
        return float(self.X @ self.X)

    @property
    def r(self) -> float:
        return math.sqrt(self.sq_norm / self.d + self.epsilon)


def _rms_jacobian(X, gamma, r) -> np.ndarray:
    d = X.size
    return np.diag(gamma) / r - np.outer(gamma * X, X) / (d * r ** 3)


def rmsnorm_forward(ctx: RmsNormContext) -> np.ndarray:
    r = ctx.r
    if r == 0:
        return np.zeros_like(ctx.X)
    return ctx.gamma * ctx.X / r


def rmsnorm_jacobian(ctx: RmsNormContext) -> np.ndarray:
    """``J = diag(g)/r - diag(g) X X^T / (d r^3)``."""
    return _rms_jacobian(ctx.X, ctx.gamma, ctx.r)


def _rmsnorm_deltas(ctx, pert, rng, delta_x, delta_r):
    if delta_x is None:
        delta_x = pert.draw(ctx.X, rng)
    delta_x = np.asarray(delta_x, dtype=np.float64)
    if pert.mode == Case.CASE2_CACHE and delta_r is None:
        delta_r = float(pert.draw(np.array([ctx.r]), rng)[0])
    return delta_x, delta_r


def rmsnorm_perturbed_jacobian(ctx: RmsNormContext, pert: PerturbationSpec,
                               rng: Optional[np.random.Generator] = None, *,
                               delta_x=None, delta_r: Optional[float] = None) -> np.ndarray:
    """Jacobian rebuilt from quantized storage.

    Case 1 recomputes ``r`` from ``X'``; Case 2 uses the cached
    ``r' = r (1 + delta_r)``.  Both are exact (no expansion).
    """
    delta_x, delta_r = _rmsnorm_deltas(ctx, pert, rng, delta_x, delta_r)
    Xp = ctx.X * (1 + delta_x)
    if pert.mode == Case.CASE1_RECOMPUTE:
        rp = math.sqrt(float(Xp @ Xp) / ctx.d + ctx.epsilon)
    else:
        rp = ctx.r * (1 + delta_r)
    assert rp > 0, "relative perturbations with |delta| < 1 keep r positive"
    return _rms_jacobian(Xp, ctx.gamma, rp)


def rmsnorm_first_order_delta(ctx: RmsNormContext, delta_x, delta_r: Optional[float] = None) -> np.ndarray:
    """First-order ``Delta J``.

    Without ``delta_r`` the change of ``r`` follows from ``delta_x``
    (recompute); with it, ``r`` moves by ``r * delta_r`` (cache).
    """
    X, g, d, r = ctx.X, ctx.gamma, ctx.d, ctx.r
    delta_x = np.asarray(delta_x, dtype=np.float64)
    if delta_r is None:
        dr = float(np.sum(X ** 2 * delta_x)) / (d * r)
    else:
        dr = r * delta_r
    Dg = np.diag(g)
    xd = X * delta_x
    return (-dr / r ** 2 * Dg
            + 3 * dr / (d * r ** 4) * (g[:, None] * np.outer(X, X))
            - (g[:, None] * (np.outer(X, xd) + np.outer(xd, X))) / (d * r ** 3))


def rmsnorm_case1_bound(ctx: RmsNormContext, delta_inf: float) -> float:
    if delta_inf < 0:
        raise ValueError("delta_inf must be >= 0")
    s, d, r = ctx.sq_norm, ctx.d, ctx.r
    return 3 * _inf(ctx.gamma) * delta_inf * (s / (d * r ** 3) + s ** 2 / (d ** 2 * r ** 5))


def rmsnorm_case2_bound(ctx: RmsNormContext, epsilon_q: float) -> float:
    if epsilon_q < 0:
        raise ValueError("epsilon_q must be >= 0")
    return 6 * _inf(ctx.gamma) * epsilon_q / ctx.r


def rmsnorm_error(ctx: RmsNormContext, pert: PerturbationSpec,
                  rng: Optional[np.random.Generator] = None, *,
                  delta_x=None, delta_r: Optional[float] = None, trial: int = 0) -> ErrorReport:
    delta_x, delta_r = _rmsnorm_deltas(ctx, pert, rng, delta_x, delta_r)
    Jp = rmsnorm_perturbed_jacobian(ctx, pert, delta_x=delta_x, delta_r=delta_r)
    empirical = spectral_norm(Jp - rmsnorm_jacobian(ctx))
    if pert.mode == Case.CASE1_RECOMPUTE:
        bound = rmsnorm_case1_bound(ctx, _inf(delta_x))
    else:
        bound = rmsnorm_case2_bound(ctx, max(_inf(delta_x), abs(delta_r)))
    return ErrorReport(Layer.RMSNORM.value, pert.mode.value, ctx.d, pert.epsilon_q,
                       empirical, bound, "dJ", trial)


def rmsnorm_rows(X, gamma, epsilon: float = DEFAULT_RMS_EPS):
    """Row-wise RMSNorm of an ``L x d`` matrix; returns ``(Y, r)``."""
    X = np.asarray(X, dtype=np.float64)
    r = np.sqrt(np.mean(X ** 2, axis=-1) + epsilon)
    safe = np.where(r > 0, r, 1.0)
    Y = np.where(r[:, None] > 0, gamma * X / safe[:, None], 0.0)
    return Y, r


def rmsnorm_rows_backward(X, gamma, r, dY):
    """Vector-Jacobian product of :func:`rmsnorm_rows`; returns ``(dX, dgamma)``.

    ``r`` is whatever the backward pass has (recomputed or cached).
    """
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[-1]
    r = np.asarray(r, dtype=np.float64)[:, None]
    safe = np.where(r > 0, r, 1.0)
    gdy = gamma * dY
    proj = np.sum(gdy * X, axis=-1, keepdims=True)
    dX = np.where(r > 0, gdy / safe - X * proj / (d * safe ** 3), 0.0)
    dgamma = np.sum(dY * np.where(r > 0, X / safe, 0.0), axis=0)
    return dX, dgamma


# ---------------------------------------------------------------------------
# SiLU & Multiply: z = x * y * sigmoid(y)
# ---------------------------------------------------------------------------

def silu_mul_forward(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return x * y * sigmoid(y)


def _silu_grads_from(x, y, s):
    return y * s, x * s + x * y * s * (1 - s)


def silu_mul_grads(x, y):
    """``(dz/dx, dz/dy)`` elementwise."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return _silu_grads_from(x, y, sigmoid(y))


def silu_mul_bounds(x, y, dx, dy, ds=None, mode: Case = Case.CASE1_RECOMPUTE):
    """Elementwise first-order bounds on the change of both partials.

    ``dx``, ``dy``, ``ds`` are the relative perturbations of ``x``, ``y`` and
    (Case 2 only) the cached sigmoid.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    ax, ay = np.abs(x), np.abs(y)
    adx, ady = np.abs(dx), np.abs(dy)
    s = sigmoid(y)
    ds1 = s * (1 - s)
    if Case.parse(mode) == Case.CASE1_RECOMPUTE:
        bx = ay * (s + ay * ds1) * ady
        by = ax * s * np.abs(1 + y * (1 - s)) * adx + ax * ds1 * ay * np.abs(2 + y * (1 - 2 * s)) * ady
    else:
        ads = np.abs(ds)
        bx = ay * s * (ady + ads)
        by = (ax * s * np.abs(1 + y * (1 - s)) * adx + ax * ay * ds1 * ady
              + ax * s * np.abs(1 + y * (1 - 2 * s)) * ads)
    return bx, by


def silu_mul_error(x, y, pert: PerturbationSpec, rng: Optional[np.random.Generator] = None, *,
                   delta_x=None, delta_y=None, delta_s=None, trial: int = 0):
    """Reports for ``dz/dx`` and ``dz/dy``; vectors aggregate by Euclidean norm."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if delta_x is None:
        delta_x = pert.draw(x, rng)
    if delta_y is None:
        delta_y = pert.draw(y, rng)
    xp, yp = x * (1 + delta_x), y * (1 + delta_y)
    gx, gy = silu_mul_grads(x, y)
    if pert.mode == Case.CASE1_RECOMPUTE:
        gxp, gyp = silu_mul_grads(xp, yp)
        bx, by = silu_mul_bounds(x, y, delta_x, delta_y, mode=pert.mode)
    else:
        s = sigmoid(y)
        if delta_s is None:
            delta_s = pert.draw(s, rng)
        gxp, gyp = _silu_grads_from(xp, yp, s * (1 + delta_s))
        bx, by = silu_mul_bounds(x, y, delta_x, delta_y, delta_s, mode=pert.mode)
    out = []
    for name, g, gp, b in (("dz_dx", gx, gxp, bx), ("dz_dy", gy, gyp, by)):
        out.append(ErrorReport(Layer.SILU_MUL.value, pert.mode.value, x.size, pert.epsilon_q,
                               float(np.linalg.norm(gp - g)), float(np.linalg.norm(b)), name, trial))
    return tuple(out)


# ---------------------------------------------------------------------------
# RMSNorm + GEMM: Y = W U, U = RMSNorm(X), dY/dW = U^T
# ---------------------------------------------------------------------------

def gemm_case1_bound(ctx: RmsNormContext, delta_inf: float) -> float:
    n = math.sqrt(ctx.sq_norm)
    d, r = ctx.d, ctx.r
    return _inf(ctx.gamma) * (n / r ** 2 + n ** 3 / (d * r ** 4)) * delta_inf


def gemm_case2_bound(U, delta_u_inf: float) -> float:
    return float(np.linalg.norm(U)) * delta_u_inf


def rmsnorm_gemm_error(ctx: RmsNormContext, W=None, pert: PerturbationSpec = None,
                       rng: Optional[np.random.Generator] = None, *, delta_x=None, delta_u=None,
                       trial: int = 0) -> ErrorReport:
    """Error of the GEMM weight gradient ``U^T`` when its input comes from storage.

    Case 1 rebuilds ``U`` from the quantized RMSNorm input; Case 2 stores ``U``
    quantized.  ``W`` (``m x d``) is optional and only used to report the
    output deviation ``||W (U' - U)||``.
    """
    if pert is None:
        raise ValueError("pert is required")
    if W is not None:
        W = np.asarray(W, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] != ctx.d:
            raise ValueError(f"W must have {ctx.d} columns, got shape {W.shape}")
    U = rmsnorm_forward(ctx)
    if pert.mode == Case.CASE1_RECOMPUTE:
        if delta_x is None:
            delta_x = pert.draw(ctx.X, rng)
        Up = rmsnorm_forward(RmsNormContext(ctx.X * (1 + delta_x), ctx.gamma, ctx.epsilon))
        bound = gemm_case1_bound(ctx, _inf(delta_x))
    else:
        if delta_u is None:
            delta_u = pert.draw(U, rng)
        Up = U * (1 + delta_u)
        bound = gemm_case2_bound(U, _inf(delta_u))
    meta = {}
    if W is not None:
        meta["output_error"] = float(np.linalg.norm(W @ (Up - U)))
    return ErrorReport(Layer.RMSNORM_GEMM.value, pert.mode.value, ctx.d, pert.epsilon_q,
                       float(np.linalg.norm(Up - U)), bound, "dW", trial, meta)


# ---------------------------------------------------------------------------
# single-head attention
# ---------------------------------------------------------------------------

def softmax_rows(S):
    S = np.asarray(S, dtype=np.float64)
    if S.size == 0:
        return S.copy()
    e = np.exp(S - S.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(Q, K, V, return_probs: bool = False):
    """``A = softmax(Q K^T / sqrt(d_k)) V``."""
    Q, K, V = (np.asarray(m, dtype=np.float64) for m in (Q, K, V))
    P = softmax_rows(Q @ K.T / math.sqrt(Q.shape[1]))
    A = P @ V
    return (A, P) if return_probs else A


def attention_grads(Q, K, V, dA, A_cached=None, P=None):
    """``(dQ, dK, dV)`` for upstream ``dA``.

    ``z = rowsum(P * dP)`` by default; when ``A_cached`` is given the identity
    ``rowsum(P * dP) = rowsum(dA * A)`` is used with the stored output instead.
    """
    Q, K, V, dA = (np.asarray(m, dtype=np.float64) for m in (Q, K, V, dA))
    scale = 1.0 / math.sqrt(Q.shape[1])
    if P is None:
        P = softmax_rows(Q @ K.T * scale)
    dV = P.T @ dA
    dP = dA @ V.T
    if A_cached is None:
        z = np.sum(P * dP, axis=1, keepdims=True)
    else:
        z = np.sum(dA * A_cached, axis=1, keepdims=True)
    dS = P * (dP - z)
    return dS @ K * scale, dS.T @ Q * scale, dV


def attention_bounds(Q, K, V, dQ, dK, dV, mode: Case = Case.CASE1_RECOMPUTE, A=None, dA_rel=None):
    """First-order bounds on the three gradient channels.

    ``dQ``/``dK``/``dV`` here are the relative perturbations.  Case 2 also
    needs the cached output ``A`` and its relative perturbation ``dA_rel``.
    """
    Q, K, V = (np.asarray(m, dtype=np.float64) for m in (Q, K, V))
    d = Q.shape[1]
    T = spectral_norm((Q * dQ) @ K.T + Q @ (K * dK).T)
    nQ, nK, nV = spectral_norm(Q), spectral_norm(K), spectral_norm(V)
    if Case.parse(mode) == Case.CASE1_RECOMPUTE:
        return {"dV": T / math.sqrt(d), "dK": nV * nK * T / d, "dQ": nV * nQ * T / d}
    if A is None or dA_rel is None:
        raise ValueError("case 2 bounds need the cached output and its perturbation")
    nA = spectral_norm(A)
    nAd = spectral_norm(A * dA_rel)
    sq = math.sqrt(d)
    bV = (nA / nV) * (T / sq + nAd) if nV > 0 else 0.0
    bK = 2 / sq * nV * T + 2 * nV * _inf(dV) + nAd
    bQ = (2 / sq * nV * nK * T + 2 * nV * nK * _inf(dV) + nK * nAd + nV * _inf(dK)) / sq
    return {"dV": bV, "dK": bK, "dQ": bQ}


def _unit_upstream(L, dv, rng):
    g = rng.standard_normal((L, dv))
    return g / spectral_norm(g)


def attention_error(Q, K, V, pert: PerturbationSpec, rng: Optional[np.random.Generator] = None, *,
                    upstream=None, delta_q=None, delta_k=None, delta_v=None, delta_a=None,
                    trial: int = 0) -> dict:
    """Reports for the ``dQ``, ``dK`` and ``dV`` channels.

    The ``dV`` channel measures ``||P' - P||`` (the operator ``dA/dV = P^T``);
    ``dQ``/``dK`` measure the gradient change for ``upstream`` (default: a
    random matrix of unit spectral norm).
    """
    Q, K, V = (np.asarray(m, dtype=np.float64) for m in (Q, K, V))
    L = Q.shape[0]
    if upstream is None:
        upstream = _unit_upstream(L, V.shape[1], rng if rng is not None else np.random.default_rng(0))
    delta_q = pert.draw(Q, rng) if delta_q is None else np.asarray(delta_q, dtype=np.float64)
    delta_k = pert.draw(K, rng) if delta_k is None else np.asarray(delta_k, dtype=np.float64)
    delta_v = pert.draw(V, rng) if delta_v is None else np.asarray(delta_v, dtype=np.float64)
    Qp, Kp, Vp = Q * (1 + delta_q), K * (1 + delta_k), V * (1 + delta_v)

    A, P = attention_forward(Q, K, V, return_probs=True)
    cached = A if pert.mode == Case.CASE2_CACHE else None
    gQ, gK, _ = attention_grads(Q, K, V, upstream, A_cached=cached, P=P)
    Pp = softmax_rows(Qp @ Kp.T / math.sqrt(Q.shape[1]))
    if pert.mode == Case.CASE1_RECOMPUTE:
        gQp, gKp, _ = attention_grads(Qp, Kp, Vp, upstream, P=Pp)
        bounds = attention_bounds(Q, K, V, delta_q, delta_k, delta_v, pert.mode)
    else:
        if delta_a is None:
            delta_a = pert.draw(A, rng)
        A_cached = A * (1 + delta_a)
        gQp, gKp, _ = attention_grads(Qp, Kp, Vp, upstream, A_cached=A_cached, P=Pp)
        bounds = attention_bounds(Q, K, V, delta_q, delta_k, delta_v, pert.mode, A=A, dA_rel=delta_a)
    empirical = {"dQ": spectral_norm(gQp - gQ), "dK": spectral_norm(gKp - gK),
                 "dV": spectral_norm(Pp - P)}
    return {ch: ErrorReport(Layer.ATTENTION.value, pert.mode.value, L, pert.epsilon_q,
                            empirical[ch], bounds[ch], ch, trial)
            for ch in ("dQ", "dK", "dV")}


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _trial_reports(layer: Layer, cases, epsilons, dim, d_k, seed, trial):
    # one rng per trial: inputs and perturbation directions are shared by every
    # (case, epsilon) cell, so errors scale cleanly with epsilon
    rng = np.random.default_rng([seed, trial])
    out = []
    if layer in (Layer.RMSNORM, Layer.RMSNORM_GEMM):
        ctx = RmsNormContext(rng.standard_normal(dim), rng.uniform(0.5, 1.5, dim))
        ux, ur = rng.uniform(-1, 1, dim), rng.uniform(-1, 1)
        uu = rng.uniform(-1, 1, dim)
        for case in cases:
            for eps in epsilons:
                pert = PerturbationSpec(eps, case)
                if layer == Layer.RMSNORM:
                    out.append(rmsnorm_error(ctx, pert, delta_x=eps * ux, delta_r=eps * ur, trial=trial))
                else:
                    out.append(rmsnorm_gemm_error(ctx, None, pert, delta_x=eps * ux,
                                                  delta_u=eps * uu, trial=trial))
    elif layer == Layer.SILU_MUL:
        x, y = rng.standard_normal(dim), rng.standard_normal(dim)
        ux, uy, us = (rng.uniform(-1, 1, dim) for _ in range(3))
        for case in cases:
            for eps in epsilons:
                pert = PerturbationSpec(eps, case)
                out.extend(silu_mul_error(x, y, pert, delta_x=eps * ux, delta_y=eps * uy,
                                          delta_s=eps * us, trial=trial))
    else:
        Q, K, V = (rng.standard_normal((dim, d_k)) for _ in range(3))
        uq, uk, uv = (rng.uniform(-1, 1, (dim, d_k)) for _ in range(3))
        ua = rng.uniform(-1, 1, (dim, d_k))
        upstream = _unit_upstream(dim, d_k, rng)
        for case in cases:
            for eps in epsilons:
                pert = PerturbationSpec(eps, case)
                reps = attention_error(Q, K, V, pert, upstream=upstream, delta_q=eps * uq,
                                       delta_k=eps * uk, delta_v=eps * uv, delta_a=eps * ua,
                                       trial=trial)
                out.extend(reps[ch] for ch in ("dQ", "dK", "dV"))
    return out


def bound_sweep(layer, cases: Iterable = (Case.CASE1_RECOMPUTE, Case.CASE2_CACHE),
                epsilons: Sequence[float] = (1e-2, 1e-3, 1e-4), trials: int = 100, seed: int = 0,
                dim: int = 64, d_k: int = 16, workers: int = 1) -> list:
    """Empirical error vs bound over random unit-scale instances.

    ``dim`` is the vector length ``d`` (RMSNorm, GEMM, SiLU) or the sequence
    length ``L`` (attention, with head size ``d_k``).  Output order and values
    do not depend on ``workers``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    layer = Layer.parse(layer)
    cases = [Case.parse(c) for c in cases]
    epsilons = [float(e) for e in epsilons]
    if not epsilons or not cases:
        return []

    def run(t):
        return _trial_reports(layer, cases, epsilons, dim, d_k, seed, t)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(run, range(trials)))
    else:
        chunks = [run(t) for t in range(trials)]
    reports = [r for chunk in chunks for r in chunk]
    reports.sort(key=lambda r: (r.case, r.channel, -r.epsilon_q, r.trial))
    return reports


def _group(reports):
    groups = {}
    for r in reports:
        groups.setdefault((r.layer, r.case, r.channel, r.dim), []).append(r)
    return groups


def dominance_rate(reports: Iterable[ErrorReport]) -> dict:
    """Fraction of reports with ``empirical <= bound`` per (layer, case, channel, dim)."""
    return {k: float(np.mean([r.dominated for r in v])) for k, v in _group(reports).items()}


def error_slopes(reports: Iterable[ErrorReport]) -> dict:
    """Least-squares log-log slope of mean empirical error against epsilon."""
    out = {}
    for key, reps in _group(reports).items():
        by_eps = {}
        for r in reps:
            by_eps.setdefault(r.epsilon_q, []).append(r.empirical)
        eps = np.array(sorted(by_eps))
        err = np.array([np.mean(by_eps[e]) for e in eps])
        if eps.size < 2 or np.any(err <= 0) or np.any(eps <= 0):
            out[key] = float("nan")
            continue
        out[key] = float(np.polyfit(np.log(eps), np.log(err), 1)[0])
    return out
