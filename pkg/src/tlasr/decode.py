"""Greedy and beam-search decoding for the transducer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .lattice import LogitLattice, log_softmax, rnnt_forward
from .model import ModelParams, encoder_forward, joiner_forward, predictor_forward

MAX_SYMBOLS_PER_FRAME = 5


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]
    log_prob: float


@dataclass
class NBestList:
    hyps: List[Hypothesis] = field(default_factory=list)

    def __post_init__(self):
        seqs = [h.tokens for h in self.hyps]
        if len(set(seqs)) != len(seqs):
            raise ValueError("N-best list contains duplicate token sequences")
        if any(a.log_prob < b.log_prob for a, b in zip(self.hyps, self.hyps[1:])):
            raise ValueError("N-best list must be sorted by descending log_prob")

    def __len__(self):
        return len(self.hyps)

    def __iter__(self):
        return iter(self.hyps)

    def __getitem__(self, i):
        return self.hyps[i]

    @property
    def log_probs(self) -> np.ndarray:
        return np.array([h.log_prob for h in self.hyps])


def _rank_key(tokens: Tuple[int, ...], score: float):
    return (-score, len(tokens), tokens)


class _StepModel:
    """Single-step access to predictor and joiner for search."""

    def __init__(self, params: ModelParams, h_enc: np.ndarray):
        self.pred = params.predictor
        j = params.joiner
        self.W_out, self.b_out = j["W_out"], j["b_out"]
        self.W_pred, self.b = j["W_pred"], j["b"]
        self.enc_proj = h_enc @ j["W_enc"].T
        self.sos = self.pred["embed"].shape[0] - 1
        self.blank = self.W_out.shape[0] - 1
        self._states: Dict[Tuple[int, ...], Tuple[np.ndarray, np.ndarray]] = {}

    def state(self, tokens: Tuple[int, ...]):
        """Predictor output and its joiner projection after ``tokens``."""
        cached = self._states.get(tokens)
        if cached is not None:
            return cached
        if tokens:
            h_prev = self.state(tokens[:-1])[0]
            token = tokens[-1]
        else:
            h_prev = np.zeros(self.pred["W_h"].shape[0])
            token = self.sos
        h = np.tanh(
            self.pred["W_x"] @ self.pred["embed"][token] + self.pred["W_h"] @ h_prev + self.pred["b"]
        )
        out = (h, self.W_pred @ h + self.b)
        self._states[tokens] = out
        return out

    def logits(self, t: int, tokens: Tuple[int, ...]) -> np.ndarray:
        proj = self.state(tokens)[1]
        return self.W_out @ np.tanh(self.enc_proj[t] + proj) + self.b_out


def greedy_decode(
    params: ModelParams, features: np.ndarray, max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME
) -> np.ndarray:
    """Frame-synchronous argmax decoding.

    Ties between blank and a label go to blank; ties among labels go to the
    lowest index.  This matches the beam search ranking rule.
    """
    h_enc, _ = encoder_forward(features, params)
    step = _StepModel(params, h_enc)
    tokens: Tuple[int, ...] = ()
    for t in range(h_enc.shape[0]):
        for _ in range(max_symbols_per_frame):
            logits = step.logits(t, tokens)
            label = int(np.argmax(logits[: step.blank]))
            if logits[step.blank] >= logits[label]:
                break
            tokens = tokens + (label,)
    return np.array(tokens, dtype=np.int64)


def score_sequences(
    params: ModelParams, features: np.ndarray, sequences: Sequence[Sequence[int]], h_enc=None
) -> np.ndarray:
    """Exact transducer log-probability of each label sequence."""
    if h_enc is None:
        h_enc, _ = encoder_forward(features, params)
    scores = np.empty(len(sequences))
    for i, seq in enumerate(sequences):
        labels = np.asarray(seq, dtype=np.int64)
        h_pre, _ = predictor_forward(labels, params)
        logits, _ = joiner_forward(h_enc, h_pre, params)
        scores[i] = -rnnt_forward(LogitLattice(logits, labels))[0]
    return scores


def _merge(pool: Dict[Tuple[int, ...], float], tokens, score):
    old = pool.get(tokens)
    pool[tokens] = score if old is None else np.logaddexp(old, score)


def beam_search(
    params: ModelParams,
    features: np.ndarray,
    beam: int = 8,
    n_best: int = 4,
    max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME,
) -> NBestList:
    """Frame-synchronous beam search returning exactly rescored N-best.

    Prefixes that end a frame with the same tokens are merged by adding their
    probabilities.  Surviving hypotheses are rescored with the full-band
    transducer loss and sorted by descending log-probability; ties go to the
    shorter sequence, then the lexicographically smaller one.
    """
    if n_best < 1 or beam < n_best:
        raise ValueError(f"need beam >= n_best >= 1, got beam={beam}, n_best={n_best}")
    h_enc, _ = encoder_forward(features, params)
    step = _StepModel(params, h_enc)
    blank = step.blank
    frontier: Dict[Tuple[int, ...], float] = {(): 0.0}
    for t in range(h_enc.shape[0]):
        ended: Dict[Tuple[int, ...], float] = {}
        active = list(frontier.items())
        for _ in range(max_symbols_per_frame):
            extended = []
            for tokens, score in active:
                logp = log_softmax(step.logits(t, tokens))
                _merge(ended, tokens, score + logp[blank])
                extended.extend((tokens + (k,), score + logp[k]) for k in range(blank))
            pool = [(tok, s, True) for tok, s in ended.items()]
            pool += [(tok, s, False) for tok, s in extended]
            pool.sort(key=lambda item: _rank_key(item[0], item[1]))
            pool = pool[:beam]
            ended = {tok: s for tok, s, done in pool if done}
            active = [(tok, s) for tok, s, done in pool if not done]
            if not active:
                break
        for tokens, score in active:
            _merge(ended, tokens, score + log_softmax(step.logits(t, tokens))[blank])
        ranked = sorted(ended.items(), key=lambda item: _rank_key(item[0], item[1]))
        frontier = dict(ranked[:beam])

    sequences = list(frontier)
    exact = score_sequences(params, features, sequences, h_enc=h_enc)
    order = sorted(range(len(sequences)), key=lambda i: _rank_key(sequences[i], exact[i]))
    hyps = [Hypothesis(sequences[i], float(exact[i])) for i in order[:n_best]]
    return NBestList(hyps)
