"""RNN-T loss, an exhaustive oracle for it, and streaming greedy decoding."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Protocol

import numpy as np

from . import tensor as tt
from .errors import ContractError, NumericError
from .tensor import Tensor

NEG_INF = -np.inf


@dataclass
class Lattice:
    """Log-softmaxed joint outputs over the ``T x (U+1)`` alignment grid.

    ``log_probs`` has shape ``(T, U+1, V)`` or, for a batch of equal-shape
    utterances, ``(B, T, U+1, V)``; ``targets`` is ``(U,)`` or ``(B, U)``.
    """

    log_probs: Tensor
    targets: np.ndarray
    blank_id: int = 0
    check: bool = True

    def __post_init__(self):
        self.log_probs = tt.as_tensor(self.log_probs)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        lp = self.log_probs.data
        if lp.ndim not in (3, 4):
            raise ContractError(f"lattice log_probs must be 3-D or 4-D, got shape {lp.shape}")
        batched = lp.ndim == 4
        if self.targets.ndim != (2 if batched else 1):
            raise ContractError(f"targets shape {self.targets.shape} does not match lattice {lp.shape}")
        T, U1, V = lp.shape[-3:]
        if T < 1:
            raise ContractError("lattice needs T >= 1")
        if self.targets.shape[-1] != U1 - 1:
            raise ContractError(f"lattice has U+1={U1} but targets have length {self.targets.shape[-1]}")
        if not 0 <= self.blank_id < V:
            raise ContractError(f"blank_id {self.blank_id} outside vocabulary of size {V}")
        if self.targets.size and (self.targets.min() < 0 or self.targets.max() >= V):
            raise ContractError("target token outside vocabulary")
        if np.isnan(lp).any():
            raise NumericError("lattice contains NaN")
        if self.check:
            m = lp.max(axis=-1, keepdims=True)
            lse = np.log(np.exp(lp - m).sum(axis=-1)) + m[..., 0]
            if np.max(np.abs(lse)) > 1e-9:
                raise ContractError("lattice slices are not normalized log-distributions")

    @property
    def T(self) -> int:
        return self.log_probs.shape[-3]

    @property
    def U(self) -> int:
        return self.log_probs.shape[-2] - 1


def rnnt_loss(lattice: Lattice, reduction: str = "sum") -> Tensor:
    """Negative log-likelihood of the targets, summed over all alignments.

    The forward variable is swept one anti-diagonal ``t + u = n`` at a time so
    each step is a handful of vectorised tape ops; gradients come from the
    tape.
    """
    lp = lattice.log_probs
    single = lp.ndim == 3
    if single:
        lp = tt.reshape(lp, (1,) + lp.shape)
    y = lattice.targets.reshape(lp.shape[0], -1)
    B, T, U1, _ = lp.shape
    U = U1 - 1
    b_idx = np.arange(B)[:, None, None]

    blank = lp[:, :, :, lattice.blank_id]  # (B, T, U+1)
    if U:
        emit = tt.index(lp, (b_idx, np.arange(T)[None, :, None],
                             np.arange(U)[None, None, :], y[:, None, :]))  # (B, T, U)

    u_all = np.arange(U1)
    alpha = Tensor(np.where(u_all == 0, 0.0, NEG_INF)[None, :].repeat(B, axis=0))
    for n in range(1, T + U):
        # arrive by blank from (t-1, u): t-1 = n-1-u must be a valid frame
        t_prev = n - 1 - u_all
        ok_b = (t_prev >= 0) & (t_prev <= T - 1)
        gb = blank[:, np.clip(t_prev, 0, T - 1), u_all]
        from_blank = tt.masked_fill(alpha, ~ok_b, NEG_INF) + tt.masked_fill(gb, ~ok_b, 0.0)
        if U:
            # arrive by emitting y_u from (t, u-1): t = n-u
            t_cur = n - u_all
            ok_e = (u_all >= 1) & (t_cur >= 0) & (t_cur <= T - 1)
            ge = emit[:, np.clip(t_cur, 0, T - 1), np.clip(u_all - 1, 0, U - 1)]
            shifted = tt.concat([Tensor(np.full((B, 1), NEG_INF)), alpha[:, :U]], axis=1)
            from_emit = tt.masked_fill(shifted, ~ok_e, NEG_INF) + tt.masked_fill(ge, ~ok_e, 0.0)
            alpha = tt.logaddexp(from_blank, from_emit)
        else:
            alpha = from_blank
    nll = -(alpha[:, U] + blank[:, T - 1, U])
    if reduction == "none":
        return nll[0] if single else nll
    if reduction == "mean":
        return tt.mean(nll)
    if reduction != "sum":
        raise ContractError(f"unknown reduction {reduction!r}")
    return tt.sum(nll)


def count_alignments(T: int, U: int) -> int:
    return math.comb(T + U - 1, U)


def rnnt_loss_bruteforce(lattice: Lattice) -> float:
    """Exhaustive sum over every monotone alignment of an unbatched lattice."""
    lp = np.asarray(lattice.log_probs.data, dtype=np.float64)
    if lp.ndim != 3:
        raise ContractError("bruteforce oracle takes an unbatched lattice")
    T, U = lattice.T, lattice.U
    if T > 6 or U > 4:
        raise ContractError(f"instance too large for enumeration (T={T}, U={U})")
    y = lattice.targets
    scores = []
    # the final symbol is always the blank that leaves the last frame
    for label_slots in itertools.combinations(range(T + U - 1), U):
        slots = set(label_slots)
        t = u = 0
        s = 0.0
        for i in range(T + U - 1):
            if i in slots:
                s += lp[t, u, y[u]]
                u += 1
            else:
                s += lp[t, u, lattice.blank_id]
                t += 1
        s += lp[T - 1, U, lattice.blank_id]
        scores.append(s)
    m = max(scores)
    if m == -np.inf:
        return math.inf
    return -(m + math.log(math.fsum(math.exp(s - m) for s in scores)))


# -- greedy decoding ---------------------------------------------------------

class TransducerScorer(Protocol):
    """What the decoder needs from a model."""

    blank_id: int

    def prediction_start(self) -> tuple[np.ndarray, object]: ...

    def prediction_step(self, state: object, token: int) -> tuple[np.ndarray, object]: ...

    def joint_logits(self, z_t: np.ndarray, g_u: np.ndarray) -> np.ndarray: ...


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)
    frames: list[int] = field(default_factory=list)
    score: float = 0.0

    def events(self) -> list[tuple[int, int]]:
        return list(zip(self.tokens, self.frames))


class GreedyDecoder:
    """Frame-synchronous greedy search that never revisits a frame.

    Feed encoder frames one at a time with :meth:`feed`; each call returns the
    ``(token, frame_index)`` events emitted for that frame.
    """

    def __init__(self, scorer: TransducerScorer, max_symbols_per_frame: int = 4):
        if max_symbols_per_frame < 1:
            raise ContractError("max_symbols_per_frame must be >= 1")
        self.scorer = scorer
        self.max_symbols = max_symbols_per_frame
        self.hyp = Hypothesis()
        self._g, self._state = scorer.prediction_start()
        self._t = 0

    def feed(self, z_t) -> list[tuple[int, int]]:
        z_t = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t)
        events = []
        for _ in range(self.max_symbols):
            logits = self.scorer.joint_logits(z_t, self._g)
            k = int(np.argmax(logits))  # first maximum -> lowest token id on ties
            m = logits.max()
            self.hyp.score += float(logits[k] - m - np.log(np.exp(logits - m).sum()))
            if k == self.scorer.blank_id:
                break
            self.hyp.tokens.append(k)
            self.hyp.frames.append(self._t)
            events.append((k, self._t))
            self._g, self._state = self.scorer.prediction_step(self._state, k)
        self._t += 1
        return events

    def result(self) -> Hypothesis:
        return Hypothesis(list(self.hyp.tokens), list(self.hyp.frames), self.hyp.score)


def iter_greedy_events(encoder_frames: Iterable, scorer: TransducerScorer,
                       max_symbols_per_frame: int = 4) -> Iterator[tuple[int, int]]:
    dec = GreedyDecoder(scorer, max_symbols_per_frame)
    for z_t in encoder_frames:
        yield from dec.feed(z_t)


def greedy_decode_stream(encoder_frames: Iterable, scorer: TransducerScorer,
                         max_symbols_per_frame: int = 4) -> Hypothesis:
    """Decode a stream (any iterable, or a ``T x d`` matrix) of encoder frames."""
    dec = GreedyDecoder(scorer, max_symbols_per_frame)
    frames = encoder_frames.data if isinstance(encoder_frames, Tensor) else encoder_frames
    for z_t in frames:
        dec.feed(z_t)
    return dec.result()
