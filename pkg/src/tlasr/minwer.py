"""Expected word-error loss over an N-best list and its lattice gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .decode import NBestList
from .evaluation import edit_distance
from .lattice import AlignmentBand, LogitLattice, rnnt_grad


@dataclass
class RiskTable:
    risks: np.ndarray
    mean_risk: float
    posteriors: np.ndarray
    expected_risk: float  # sum_i P_i * R_i, no baseline


def posteriors(nbest) -> np.ndarray:
    """Softmax of hypothesis log-probabilities, renormalised over the list."""
    scores = nbest.log_probs if isinstance(nbest, NBestList) else np.asarray(nbest, float)
    if scores.size == 0:
        raise ValueError("posteriors of an empty N-best list")
    shifted = np.exp(scores - scores.max())
    return shifted / shifted.sum()


def minwer_loss(
    nbest: NBestList, ref_words: Sequence[str], detok: Callable[[Sequence[int]], List[str]]
):
    """Baselined expected risk ``sum_i P_i (R_i - mean(R))``.

    ``R_i`` is the word edit distance between the detokenised hypothesis and
    the reference.  Returns ``(loss, RiskTable)``; the table also carries the
    unbaselined expectation.
    """
    if len(nbest) == 0:
        raise ValueError("minwer_loss needs at least one hypothesis")
    risks = np.array([float(edit_distance(list(ref_words), detok(h.tokens))) for h in nbest])
    post = posteriors(nbest)
    mean_risk = float(risks.mean())
    loss = float(np.dot(post, risks - mean_risk))
    return loss, RiskTable(risks, mean_risk, post, float(np.dot(post, risks)))


def score_gradients(table: RiskTable) -> np.ndarray:
    """``d loss / d log_prob_i = P_i (R_i - sum_j P_j R_j)``; sums to zero."""
    return table.posteriors * (table.risks - table.expected_risk)


def minwer_grad(
    nbest: NBestList,
    table: RiskTable,
    lattices: Sequence[LogitLattice],
    alphas: Sequence[np.ndarray],
    bands: Sequence[AlignmentBand] = None,
) -> List[np.ndarray]:
    """Per-hypothesis gradients of the loss with respect to raw lattice scores.

    Each hypothesis score is minus its transducer loss, so the lattice
    gradient is the transducer gradient scaled by ``-d loss / d log_prob_i``.
    The N-best list itself is treated as fixed.
    """
    n = len(nbest)
    if not (len(table.risks) == len(lattices) == len(alphas) == n):
        raise ValueError("risk table, lattices and N-best list are misaligned")
    g = score_gradients(table)
    bands = bands if bands is not None else [None] * n
    return [-g[i] * rnnt_grad(lattices[i], bands[i], alphas[i]) for i in range(n)]
