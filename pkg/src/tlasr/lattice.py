"""Log-semiring transducer lattice: full and alignment-restricted loss.

A lattice holds joiner scores of shape ``(T, U + 1, V + 1)``; the last vocab
index is blank.  Cell ``(t, u)`` means "at frame ``t`` with ``u`` labels
already emitted".  From a cell the model either emits blank and moves to
``(t + 1, u)`` or emits label ``labels[u]`` and moves to ``(t, u + 1)``.  Every
alignment ends with the blank emitted at ``(T - 1, U)``.

Alignment bands are stored with 1-based frame indices, frames internally are
0-based.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

NEG_INF = -np.inf
MAX_ENUMERATION = 14


class InfeasibleBandError(ValueError):
    pass


@dataclass
class LogitLattice:
    """Raw joiner scores for one utterance and its label sequence."""

    values: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.values.ndim != 3:
            raise ValueError(f"lattice must be 3-d, got shape {self.values.shape}")
        T, U1, V1 = self.values.shape
        if T < 1 or V1 < 2:
            raise ValueError(f"degenerate lattice shape {self.values.shape}")
        if U1 != len(self.labels) + 1:
            raise ValueError(
                f"lattice has {U1} label rows but {len(self.labels)} labels were given"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= V1 - 1):
            raise ValueError("labels must lie in [0, V) (blank is excluded)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("lattice values must be finite")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def U(self) -> int:
        return self.values.shape[1] - 1

    @property
    def V(self) -> int:
        return self.values.shape[2] - 1

    @property
    def blank(self) -> int:
        return self.V


@dataclass
class AlignmentBand:
    """Per-label-index window of admissible frames (1-based, inclusive)."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.int64).reshape(-1)
        self.right = np.asarray(self.right, dtype=np.int64).reshape(-1)
        if self.left.shape != self.right.shape:
            raise InfeasibleBandError("infeasible alignment band: left/right length differ")

    @classmethod
    def full(cls, T: int, U: int) -> "AlignmentBand":
        return cls(np.ones(U + 1, dtype=np.int64), np.full(U + 1, T, dtype=np.int64))

    def validate(self, T: int, U: int) -> None:
        """Raise ``InfeasibleBandError`` unless at least one alignment survives."""
        left, right = self.left, self.right
        if len(left) != U + 1:
            raise InfeasibleBandError(
                f"infeasible alignment band: expected {U + 1} windows, got {len(left)}"
            )
        if left[0] != 1 or right[U] != T:
            raise InfeasibleBandError(
                "infeasible alignment band: must start at frame 1 and end at frame T"
            )
        if np.any(left < 1) or np.any(right > T) or np.any(left > right):
            raise InfeasibleBandError("infeasible alignment band: window out of range")
        if np.any(np.diff(left) < 0) or np.any(np.diff(right) < 0):
            raise InfeasibleBandError("infeasible alignment band: windows not monotone")
        # label u+1 is emitted from state u at a frame inside both windows
        if np.any(left[1:] > right[:-1]):
            raise InfeasibleBandError("infeasible alignment band: windows disconnected")

    def mask(self, T: int) -> np.ndarray:
        """Boolean ``(T, U + 1)`` array of admissible cells."""
        frames = np.arange(1, T + 1)[:, None]
        return (frames >= self.left[None, :]) & (frames <= self.right[None, :])

    def is_full(self, T: int) -> bool:
        return bool(np.all(self.left == 1) and np.all(self.right == T))


def band_from_alignment(
    emit_frames: Sequence[int], b_left: int, b_right: int, T: int
) -> AlignmentBand:
    """Widen reference emission frames into a band.

    ``emit_frames[i]`` is the 1-based frame at which label ``i + 1`` is emitted.
    Label ``u`` may be emitted ``b_left`` frames early or ``b_right`` frames
    late, so state ``u`` opens at ``emit[u] - b_left`` and must be left by
    ``emit[u + 1] + b_right``.
    """
    emit = np.asarray(emit_frames, dtype=np.int64).reshape(-1)
    if b_left < 0 or b_right < 0:
        raise ValueError("band slack must be non-negative")
    if len(emit) and (np.any(np.diff(emit) < 0) or emit[0] < 1 or emit[-1] > T):
        raise ValueError("emit_frames must be nondecreasing within [1, T]")
    U = len(emit)
    left = np.ones(U + 1, dtype=np.int64)
    right = np.full(U + 1, T, dtype=np.int64)
    left[1:] = np.maximum(1, emit - b_left)
    right[:-1] = np.minimum(T, emit + b_right)
    # minimal widening; a no-op for monotone emit frames but kept as a guard
    right = np.maximum.accumulate(right)
    right[:-1] = np.maximum(right[:-1], left[1:])
    band = AlignmentBand(left, right)
    band.validate(T, U)
    return band


def log_sum_exp(xs: Sequence[float]) -> float:
    """Stable ``log(sum(exp(xs)))``; all ``-inf`` input gives ``-inf``."""
    xs = list(xs)
    if not xs:
        raise ValueError("log_sum_exp of an empty sequence")
    m = max(xs)
    if m == -math.inf:
        return -math.inf
    if m == math.inf:
        return math.inf
    return m + math.log(math.fsum(math.exp(x - m) for x in xs))


def log_softmax(values: np.ndarray) -> np.ndarray:
    m = values.max(axis=-1, keepdims=True)
    shifted = values - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@numba.njit(cache=True)
def _lse2(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@numba.njit(cache=True)
def _alphas(logp, labels, lo, hi):
    T, U1, V1 = logp.shape
    blank = V1 - 1
    alpha = np.full((T, U1), -np.inf)
    for t in range(T):
        for u in range(U1):
            if t < lo[u] or t > hi[u]:
                continue
            if t == 0 and u == 0:
                alpha[0, 0] = 0.0
                continue
            acc = -np.inf
            if t > 0:
                acc = alpha[t - 1, u] + logp[t - 1, u, blank]
            if u > 0:
                acc = _lse2(acc, alpha[t, u - 1] + logp[t, u - 1, labels[u - 1]])
            alpha[t, u] = acc
    return alpha


@numba.njit(cache=True)
def _betas(logp, labels, lo, hi):
    T, U1, V1 = logp.shape
    blank = V1 - 1
    U = U1 - 1
    beta = np.full((T, U1), -np.inf)
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if t < lo[u] or t > hi[u]:
                continue
            if t == T - 1 and u == U:
                beta[t, u] = logp[t, u, blank]
                continue
            acc = -np.inf
            if t < T - 1:
                acc = beta[t + 1, u] + logp[t, u, blank]
            if u < U:
                acc = _lse2(acc, beta[t, u + 1] + logp[t, u, labels[u]])
            beta[t, u] = acc
    return beta


@numba.njit(cache=True)
def _grad(logp, labels, alpha, beta, log_z):
    T, U1, V1 = logp.shape
    blank = V1 - 1
    U = U1 - 1
    grad = np.zeros((T, U1, V1))
    for t in range(T):
        for u in range(U1):
            a = alpha[t, u]
            if a == -np.inf:
                continue
            flow_blank = 0.0
            if t == T - 1 and u == U:
                flow_blank = math.exp(a + logp[t, u, blank] - log_z)
            elif t < T - 1:
                flow_blank = math.exp(a + logp[t, u, blank] + beta[t + 1, u] - log_z)
            flow_label = 0.0
            if u < U:
                flow_label = math.exp(a + logp[t, u, labels[u]] + beta[t, u + 1] - log_z)
            occupancy = flow_blank + flow_label
            if occupancy == 0.0:
                continue
            for k in range(V1):
                grad[t, u, k] = math.exp(logp[t, u, k]) * occupancy
            grad[t, u, blank] -= flow_blank
            if u < U:
                grad[t, u, labels[u]] -= flow_label
    return grad


@numba.njit(cache=True)
def _loss_and_grad(logp, labels, lo, hi):
    alpha = _alphas(logp, labels, lo, hi)
    T, U1, V1 = logp.shape
    log_z = alpha[T - 1, U1 - 1] + logp[T - 1, U1 - 1, V1 - 1]
    beta = _betas(logp, labels, lo, hi)
    return -log_z, _grad(logp, labels, alpha, beta, log_z)


def loss_and_grad_from_logp(logp, labels, lo, hi):
    """Unchecked fast path for training loops.

    ``logp`` is already log-softmaxed, ``lo``/``hi`` are 0-based inclusive
    frame windows per label index.
    """
    return _loss_and_grad(logp, labels, lo, hi)


def _window(lattice: LogitLattice, band: Optional[AlignmentBand]):
    if band is None:
        band = AlignmentBand.full(lattice.T, lattice.U)
    band.validate(lattice.T, lattice.U)
    return band.left - 1, band.right - 1


def rnnt_forward(lattice: LogitLattice, band: Optional[AlignmentBand] = None):
    """Negative log-likelihood summed over all alignments inside ``band``.

    Returns ``(loss, alphas)``; alphas are log forward variables of shape
    ``(T, U + 1)`` with ``-inf`` outside the band.  ``band=None`` is the full
    band, i.e. the unrestricted loss, and runs through the same recursion.
    """
    lo, hi = _window(lattice, band)
    logp = log_softmax(lattice.values)
    alphas = _alphas(logp, lattice.labels, lo, hi)
    log_z = alphas[lattice.T - 1, lattice.U] + logp[lattice.T - 1, lattice.U, lattice.blank]
    return -float(log_z), alphas


def rnnt_grad(
    lattice: LogitLattice, band: Optional[AlignmentBand], alphas: np.ndarray
) -> np.ndarray:
    """Gradient of :func:`rnnt_forward`'s loss with respect to the raw scores."""
    if alphas.shape != (lattice.T, lattice.U + 1):
        raise ValueError(
            f"alphas shape {alphas.shape} does not match lattice {lattice.values.shape}"
        )
    lo, hi = _window(lattice, band)
    logp = log_softmax(lattice.values)
    betas = _betas(logp, lattice.labels, lo, hi)
    log_z = alphas[lattice.T - 1, lattice.U] + logp[lattice.T - 1, lattice.U, lattice.blank]
    return _grad(logp, lattice.labels, alphas, betas, log_z)


def rnnt_loss_and_grad(lattice: LogitLattice, band: Optional[AlignmentBand] = None):
    loss, alphas = rnnt_forward(lattice, band)
    return loss, rnnt_grad(lattice, band, alphas)


def enumerate_alignments(T: int, U: int, band: Optional[AlignmentBand] = None):
    """Yield every alignment as a tuple of emitted symbols (``None`` = blank).

    Each alignment is a list of ``(t, u, is_label)`` steps, 0-based cells.
    """
    if T + U > MAX_ENUMERATION:
        raise ValueError(f"enumeration limited to T + U <= {MAX_ENUMERATION}")
    mask = None if band is None else band.mask(T)
    n = T + U - 1
    for label_slots in itertools.combinations(range(n), U):
        slots = set(label_slots)
        t = u = 0
        steps = []
        ok = True
        for i in range(n):
            if mask is not None and not mask[t, u]:
                ok = False
                break
            if i in slots:
                steps.append((t, u, True))
                u += 1
            else:
                steps.append((t, u, False))
                t += 1
        if not ok or t != T - 1 or u != U:
            continue
        if mask is not None and not mask[t, u]:
            continue
        steps.append((t, u, False))
        yield steps


def brute_force_loss(lattice: LogitLattice, band: Optional[AlignmentBand] = None) -> float:
    """Reference loss by explicit enumeration of alignments (test oracle)."""
    T, U = lattice.T, lattice.U
    if T + U > MAX_ENUMERATION:
        raise ValueError(f"brute force limited to T + U <= {MAX_ENUMERATION}")
    if band is not None:
        band.validate(T, U)
    logp = log_softmax(lattice.values)
    scores = []
    for steps in enumerate_alignments(T, U, band):
        s = 0.0
        for t, u, is_label in steps:
            s += logp[t, u, lattice.labels[u] if is_label else lattice.blank]
        scores.append(s)
    if not scores:
        raise InfeasibleBandError("infeasible alignment band")
    return -log_sum_exp(scores)
