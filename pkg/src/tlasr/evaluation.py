"""Word error rate: alignment, corpus scoring, rare-word breakdown, reporting."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

MATCH, SUBSTITUTE, DELETE, INSERT = "match", "substitute", "delete", "insert"
UNDEFINED = "n/a"


@dataclass(frozen=True)
class EditOp:
    kind: str
    ref_index: Optional[int]
    hyp_index: Optional[int]


@dataclass
class AlignmentOps:
    ops: List[EditOp] = field(default_factory=list)

    @property
    def cost(self) -> int:
        return sum(op.kind != MATCH for op in self.ops)

    def count(self, kind: str) -> int:
        return sum(op.kind == kind for op in self.ops)

    def replay(self, ref: Sequence[str], hyp: Sequence[str]):
        """Rebuild both sequences from the operations (consistency check)."""
        r = [ref[op.ref_index] for op in self.ops if op.ref_index is not None]
        h = [hyp[op.hyp_index] for op in self.ops if op.hyp_index is not None]
        return r, h


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit costs, two-row DP."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def align_words(ref: Sequence[str], hyp: Sequence[str]) -> AlignmentOps:
    """Minimum-cost alignment.

    The backtrace prefers match, then substitution, deletion, insertion, so
    the result is deterministic among equal-cost alignments.
    """
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dist[i, j] = min(
                dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                dist[i - 1, j] + 1,
                dist[i, j - 1] + 1,
            )
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        d = dist[i, j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and dist[i - 1, j - 1] == d:
            ops.append(EditOp(MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i - 1, j - 1] + 1 == d:
            ops.append(EditOp(SUBSTITUTE, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i - 1, j] + 1 == d:
            ops.append(EditOp(DELETE, i - 1, None))
            i -= 1
        else:
            ops.append(EditOp(INSERT, None, j - 1))
            j -= 1
    ops.reverse()
    return AlignmentOps(ops)


@dataclass
class WerReport:
    wer: float
    substitutions: int
    deletions: int
    insertions: int
    n_ref: int
    rare_wer: Optional[float] = None
    nonrare_wer: Optional[float] = None
    threshold: Optional[int] = None
    rare_errors: int = 0
    nonrare_errors: int = 0
    rare_n_ref: int = 0
    nonrare_n_ref: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def corpus_wer(pairs: Iterable[Tuple[Sequence[str], Sequence[str]]]) -> WerReport:
    """Micro-averaged WER: total errors over total reference words."""
    S = D = I = N = 0
    for ref, hyp in pairs:
        ops = align_words(ref, hyp)
        S += ops.count(SUBSTITUTE)
        D += ops.count(DELETE)
        I += ops.count(INSERT)
        N += len(ref)
    if N == 0:
        raise ValueError("corpus has zero reference words")
    return WerReport(100.0 * (S + D + I) / N, S, D, I, N)


def word_counts(word_lists: Iterable[Sequence[str]]) -> Counter:
    counts: Counter = Counter()
    for words in word_lists:
        counts.update(words)
    return counts


class RareWordSet:
    """Words whose training count is below ``threshold``, unseen words included."""

    def __init__(self, train_word_counts: Mapping[str, int], threshold: int):
        if threshold < 1:
            raise ValueError("threshold must be >= 1")
        self.counts = dict(train_word_counts)
        self.threshold = threshold

    def __contains__(self, word) -> bool:
        return self.counts.get(word, 0) < self.threshold

    def seen(self) -> Set[str]:
        """Rare words that do occur in training."""
        return {w for w, c in self.counts.items() if c < self.threshold}

    def __iter__(self):
        return iter(sorted(self.seen()))

    def __len__(self):
        return len(self.seen())


def classify_rare(train_word_counts: Mapping[str, int], threshold: int) -> RareWordSet:
    return RareWordSet(train_word_counts, threshold)


def wer_breakdown(
    pairs: Iterable[Tuple[Sequence[str], Sequence[str]]],
    rare,
    threshold: int,
) -> WerReport:
    """Corpus WER split into rare and non-rare reference words.

    Substitutions and deletions count against the reference word's class.
    An insertion counts against the class of the closest reference word to
    its left; a leading insertion uses the first reference word instead, and
    insertions into an empty reference count as non-rare.
    """
    pairs = list(pairs)
    total = corpus_wer(pairs)
    errors = {True: 0, False: 0}
    n_ref = {True: 0, False: 0}
    for ref, hyp in pairs:
        cls = [w in rare for w in ref]
        for c in cls:
            n_ref[c] += 1
        last_ref = None
        for op in align_words(ref, hyp).ops:
            if op.ref_index is not None:
                last_ref = op.ref_index
                if op.kind != MATCH:
                    errors[cls[op.ref_index]] += 1
            else:
                if last_ref is not None:
                    errors[cls[last_ref]] += 1
                elif cls:
                    errors[cls[0]] += 1
                else:
                    errors[False] += 1

    def rate(c):
        return 100.0 * errors[c] / n_ref[c] if n_ref[c] else None

    total.rare_wer, total.nonrare_wer = rate(True), rate(False)
    total.threshold = threshold
    total.rare_errors, total.nonrare_errors = errors[True], errors[False]
    total.rare_n_ref, total.nonrare_n_ref = n_ref[True], n_ref[False]
    return total


def werr(baseline_wer: float, treatment_wer: float) -> float:
    """Relative WER reduction in percent; negative means regression."""
    if baseline_wer == 0:
        raise ValueError("WERR undefined for a zero baseline")
    return 100.0 * (baseline_wer - treatment_wer) / baseline_wer


# reporting -------------------------------------------------------------------


def round_half_even(value: float, places: int) -> str:
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_EVEN))


def mean_of(values: Sequence[float]) -> float:
    """Arithmetic mean computed in decimal from the printed cell values."""
    total = sum(Decimal(repr(float(v))) for v in values)
    return float(total / len(values))


@dataclass
class ReportRow:
    label: str
    values: Sequence[Optional[float]]


@dataclass
class TableLayout:
    title: str
    columns: Sequence[str]
    average: bool = True
    werr: bool = True
    baseline_row: int = 0
    werr_per_column: bool = False


def _fmt_wer(v):
    return UNDEFINED if v is None else round_half_even(v, 2)


def _fmt_werr(r):
    marker = "↓" if r >= 0 else "↑"
    return f"{round_half_even(abs(r), 1)}% {marker}"


def report_cells(rows: Sequence[ReportRow], layout: TableLayout) -> List[List[str]]:
    header = ["Model", *layout.columns]
    if layout.average:
        header.append("Avg")
    if layout.werr:
        header.append("WERR")
    table = [header]
    summary = []
    for row in rows:
        defined = [v for v in row.values if v is not None]
        if layout.average:
            summary.append(mean_of(defined) if len(defined) == len(row.values) else None)
        else:
            summary.append(row.values[0] if len(row.values) == 1 else None)
    base = summary[layout.baseline_row] if rows else None
    base_cells = rows[layout.baseline_row].values if rows else ()
    for i, row in enumerate(rows):
        cells = [row.label]
        for v, b in zip(row.values, base_cells):
            cell = _fmt_wer(v)
            if layout.werr_per_column and i != layout.baseline_row and v is not None and b:
                cell += f" ({_fmt_werr(werr(b, v))})"
            cells.append(cell)
        if layout.average:
            cells.append(_fmt_wer(summary[i]))
        if layout.werr:
            if i == layout.baseline_row or base in (None, 0) or summary[i] is None:
                cells.append("")
            else:
                cells.append(_fmt_werr(werr(base, summary[i])))
        table.append(cells)
    return table


def emit_report(rows: Sequence[ReportRow], layout: TableLayout, fmt: str = "text") -> str:
    """Render a comparison table.

    WER cells use two decimals and WERR one decimal, both rounded half-even.
    With ``werr_per_column`` every non-baseline cell also carries its WERR
    against the baseline row's cell in the same column.
    ``fmt="tsv"`` gives tab-separated lines; ``"text"`` pads columns.
    """
    table = report_cells(rows, layout)
    if fmt == "tsv":
        lines = ["\t".join(r) for r in table]
        return "\n".join([f"# {layout.title}", *lines]) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    widths = [max(len(r[c]) for r in table) for c in range(len(table[0]))]
    lines = [
        "  ".join(cell.ljust(w) if c == 0 else cell.rjust(w) for c, (cell, w) in enumerate(zip(r, widths))).rstrip()
        for r in table
    ]
    rule = "-" * len(lines[0])
    return "\n".join([layout.title, rule, lines[0], rule, *lines[1:]]) + "\n"
