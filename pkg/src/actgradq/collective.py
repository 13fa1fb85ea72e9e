"""In-process simulation of data-parallel FP8 gradient communication.

Three all-reduce variants over ``P`` simulated workers:

``decomposed``
    All-to-All of FP8 chunks, dequantize to FP32, sum in ascending rank order,
    requantize with fresh per-block scales, All-Gather.  No FP8 addition ever
    happens, so large sums rescale instead of saturating.
``naive``
    Ring reduce-scatter that adds in FP8 and re-encodes with the sender's
    original fixed scales (the overflow-prone strawman), then All-Gather.
``oracle``
    Float64 sum of the dequantized inputs.

Messaging is reliable and in-order; every send is recorded in a
:class:`MessageTrace`.  Messages a rank sends to itself are local copies and
are not traced.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import codec
from .codec import CodecKind, QuantizedTensor

__all__ = ["Message", "MessageTrace", "WorkerState", "ProtocolError", "make_workers",
           "chunk_assignment", "local_accumulate", "allreduce_decomposed", "allreduce_naive_fp8",
           "allreduce_oracle", "run_protocol_trace", "PROTOCOLS"]

PROTOCOLS = ("decomposed", "naive", "oracle")
_PHASE_ORDER = {"all_to_all": 0, "reduce_scatter": 1, "all_gather": 2}


class ProtocolError(RuntimeError):
    """Inputs violate the collective's contract (e.g. mismatched shapes)."""


@dataclass(frozen=True)
class Message:
    phase: str
    sender: int
    receiver: int
    chunk_start: int
    chunk_len: int
    payload_bytes: int
    step: int = 0

    def key(self):
        return (_PHASE_ORDER.get(self.phase, 9), self.step, self.sender, self.receiver, self.chunk_start)


class MessageTrace:
    """Thread-safe event log; iteration order is canonical, not arrival order."""

    def __init__(self):
        self._events: List[Message] = []
        self._lock = threading.Lock()

    def record(self, msg: Message) -> None:
        with self._lock:
            self._events.append(msg)

    @property
    def events(self) -> List[Message]:
        return sorted(self._events, key=Message.key)

    def __len__(self):
        return len(self._events)

    def __eq__(self, other):
        return isinstance(other, MessageTrace) and self.events == other.events

    def sent_bytes(self, rank: int, phase: Optional[str] = None) -> int:
        return sum(m.payload_bytes for m in self._events
                   if m.sender == rank and (phase is None or m.phase == phase))

    def to_jsonl(self) -> str:
        keys = ("phase", "sender", "receiver", "chunk_start", "chunk_len", "payload_bytes")
        return "".join(json.dumps({k: getattr(m, k) for k in keys}) + "\n" for m in self.events)


@dataclass
class WorkerState:
    rank: int
    main_gradient: QuantizedTensor
    inbox: Dict[Tuple[str, int], QuantizedTensor] = field(default_factory=dict)
    overflow_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.main_gradient.codec_kind != CodecKind.FP8_E4M3:
            raise ValueError("main gradients are stored as FP8 E4M3")
        if self.overflow_mask is None:
            self.overflow_mask = np.zeros(self.main_gradient.num_elements, dtype=bool)

    @property
    def overflow_count(self) -> int:
        return int(self.overflow_mask.sum())


def make_workers(tensors: Sequence, block_size: int = codec.DEFAULT_BLOCK_SIZE) -> List[WorkerState]:
    return [WorkerState(r, codec.quantize_blockwise(t, 8, block_size, CodecKind.FP8_E4M3))
            for r, t in enumerate(tensors)]


def chunk_assignment(num_elements: int, P: int, block_size: int = codec.DEFAULT_BLOCK_SIZE):
    """Contiguous block-aligned ``[start, end)`` ranges, one per rank (some may be empty)."""
    if P < 1:
        raise ValueError("P must be >= 1")
    n_blocks = -(-num_elements // block_size)
    base, extra = divmod(n_blocks, P)
    ranges, b = [], 0
    for r in range(P):
        nb = base + (1 if r < extra else 0)
        start = min(b * block_size, num_elements)
        ranges.append((start, min((b + nb) * block_size, num_elements)))
        b += nb
    return ranges


def _bf16(x: np.ndarray) -> np.ndarray:
    bits = np.asarray(x, dtype=np.float32).view(np.uint32)
    rounding = ((bits >> 16) & 1) + np.uint32(0x7FFF)
    return ((bits + rounding) & np.uint32(0xFFFF0000)).view(np.float32)


_INTERMEDIATE = {
    "fp32": lambda v: np.asarray(v, dtype=np.float32),
    "fp16": lambda v: np.asarray(v, dtype=np.float16).astype(np.float32),
    "bf16": _bf16,
}


def local_accumulate(main: QuantizedTensor, local_grad, intermediate: str = "fp32") -> QuantizedTensor:
    """``quantize_fp8(dequantize(main) + local_grad)`` with fresh per-block scales.

    ``intermediate`` picks the precision of the dequantized sum (``fp32``,
    ``bf16`` or ``fp16``).
    """
    g = np.asarray(local_grad, dtype=np.float64)
    if g.shape != tuple(main.shape):
        raise ValueError(f"shape mismatch: main {main.shape} vs grad {g.shape}")
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g.reshape(-1)))[0])
        raise codec.NonFiniteError(bad // main.block_size, bad % main.block_size)
    try:
        cast = _INTERMEDIATE[intermediate]
    except KeyError:
        raise ValueError(f"intermediate must be one of {sorted(_INTERMEDIATE)}") from None
    total = cast(cast(main.dequantize()) + cast(g))
    return codec.quantize_blockwise(total, 8, main.block_size, CodecKind.FP8_E4M3)


def _validate(workers: Sequence[WorkerState]):
    if not workers:
        raise ProtocolError("need at least one worker")
    ref = workers[0].main_gradient
    for w in workers:
        g = w.main_gradient
        if tuple(g.shape) != tuple(ref.shape) or g.block_size != ref.block_size:
            raise ProtocolError(f"rank {w.rank}: shape/block mismatch with rank {workers[0].rank}")
    if sorted(w.rank for w in workers) != list(range(len(workers))):
        raise ProtocolError("ranks must be 0..P-1")
    return sorted(workers, key=lambda w: w.rank)


def _send(trace, phase, sender, receiver, start, payload: QuantizedTensor, dest: WorkerState, step=0):
    dest.inbox[(phase, sender) if phase != "reduce_scatter" else (phase, step)] = payload
    if sender != receiver and trace is not None:
        trace.record(Message(phase, sender, receiver, start, payload.num_elements, payload.nbytes, step))


def _concat(chunks: List[QuantizedTensor], like: QuantizedTensor) -> QuantizedTensor:
    codes = np.concatenate([c.codes for c in chunks]) if chunks else like.codes[:0]
    scales = np.concatenate([c.scales for c in chunks]) if chunks else like.scales[:0]
    return QuantizedTensor(codes, scales, like.bit_width, like.block_size, tuple(like.shape), like.codec_kind)


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def allreduce_decomposed(workers: Sequence[WorkerState], trace: Optional[MessageTrace] = None,
                         threads: int = 0) -> List[QuantizedTensor]:
    """All-to-All, FP32 reduce in ascending rank, fresh FP8 requantization, All-Gather.

    ``threads > 1`` runs the per-rank work on a thread pool; outputs and trace
    are identical to the sequential run.
    """
    ws = _validate(workers)
    P = len(ws)
    like = ws[0].main_gradient
    chunks = chunk_assignment(like.num_elements, P, like.block_size)

    def scatter(r):
        src = ws[r]
        for c, (s, e) in enumerate(chunks):
            _send(trace, "all_to_all", r, c, s, src.main_gradient.block_slice(s, e), ws[c])

    _map(scatter, range(P), threads)

    def reduce(c):
        s, e = chunks[c]
        acc = np.zeros(e - s, dtype=np.float32)
        for sender in range(P):
            acc = acc + ws[c].inbox.pop(("all_to_all", sender)).dequantize().reshape(-1).astype(np.float32)
        if not np.all(np.isfinite(acc)):
            ws[c].overflow_mask[s:e] |= ~np.isfinite(acc)
            raise ProtocolError(f"FP32 overflow while reducing chunk {c}")
        return codec.quantize_blockwise(acc, 8, like.block_size, CodecKind.FP8_E4M3)

    reduced = _map(reduce, range(P), threads)

    def gather(c):
        for r in range(P):
            _send(trace, "all_gather", c, r, chunks[c][0], reduced[c], ws[r])

    _map(gather, range(P), threads)

    def assemble(r):
        return _concat([ws[r].inbox.pop(("all_gather", c)) for c in range(P)], like)

    return _map(assemble, range(P), threads)


def allreduce_naive_fp8(workers: Sequence[WorkerState], trace: Optional[MessageTrace] = None
                        ) -> List[QuantizedTensor]:
    """Ring reduce-scatter adding in FP8 with fixed original scales, then All-Gather.

    Each saturation sets the worker's sticky ``overflow_mask`` bit for that element.
    """
    ws = _validate(workers)
    P = len(ws)
    like = ws[0].main_gradient
    chunks = chunk_assignment(like.num_elements, P, like.block_size)
    # each rank's running partial sums, per chunk, on its own original grid
    partial = [[w.main_gradient.block_slice(s, e) for (s, e) in chunks] for w in ws]

    for step in range(P - 1):
        outgoing = []
        for r in range(P):
            c = (r - step) % P
            outgoing.append((r, (r + 1) % P, c, partial[r][c]))
        for r, dst, c, payload in outgoing:
            _send(trace, "reduce_scatter", r, dst, chunks[c][0], payload, ws[dst], step)
        for r, dst, c, payload in outgoing:
            mine = partial[dst][c]
            total = mine.dequantize().reshape(-1) + ws[dst].inbox.pop(("reduce_scatter", step)).dequantize().reshape(-1)
            q, over = codec.encode_with_scales(total, mine)
            s = chunks[c][0]
            ws[dst].overflow_mask[s:s + over.size] |= over
            partial[dst][c] = q

    # after P-1 hops rank r owns the full sum of chunk (r + 1) % P
    owned = {(r + 1) % P: partial[r][(r + 1) % P] for r in range(P)}
    owner = {c: (c - 1) % P for c in range(P)}
    for c in range(P):
        for r in range(P):
            _send(trace, "all_gather", owner[c], r, chunks[c][0], owned[c], ws[r])
    return [_concat([ws[r].inbox.pop(("all_gather", owner[c])) for c in range(P)], like) for r in range(P)]


def allreduce_oracle(workers: Sequence[WorkerState]) -> np.ndarray:
    ws = _validate(workers)
    total = np.zeros(ws[0].main_gradient.shape, dtype=np.float64)
    for w in ws:
        total = total + w.main_gradient.dequantize()
    return total


def run_protocol_trace(workers: Sequence[WorkerState], protocol: str = "decomposed",
                       recorder: Optional[MessageTrace] = None, threads: int = 0):
    """Run one protocol; returns ``(results, trace)``.

    ``results`` is a list of per-rank dequantized tensors (a single tensor for
    the oracle).
    """
    trace = MessageTrace() if recorder is None else recorder
    if protocol == "decomposed":
        out = [q.dequantize() for q in allreduce_decomposed(workers, trace, threads)]
    elif protocol == "naive":
        out = [q.dequantize() for q in allreduce_naive_fp8(workers, trace)]
    elif protocol == "oracle":
        out = [allreduce_oracle(workers)]
    else:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    return out, trace
