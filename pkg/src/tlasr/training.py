"""Staged training: alignment-restricted transducer training and N-best
expected-risk fine-tuning, with a warm-up / hold / decay learning-rate schedule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .corpus import Utterance, Vocabulary
from .decode import Hypothesis, NBestList, _rank_key, beam_search, greedy_decode
from .evaluation import WerReport, corpus_wer, wer_breakdown
from .lattice import (
    LogitLattice,
    band_from_alignment,
    log_softmax,
    loss_and_grad_from_logp,
    rnnt_forward,
    rnnt_grad,
)
from .minwer import minwer_loss, score_gradients
from .model import (
    ForwardCaches,
    GradientTree,
    ModelConfig,
    ModelParams,
    encoder_forward,
    init_params,
    joiner_forward,
    load_checkpoint,
    model_backward,
    model_forward,
    predictor_forward,
    save_checkpoint,
    transplant_encoder,
)

log = logging.getLogger(__name__)

Corpora = Union[Sequence[Utterance], Mapping[str, Sequence[Utterance]]]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class LrSchedule:
    warmup_steps: int = 0
    hold_steps: int = 0
    base_lr: float = 0.1
    init_lr: float = 0.0
    decay_factor: float = 1.0
    decay_interval: int = 1

    def __post_init__(self):
        if self.warmup_steps < 0 or self.hold_steps < 0:
            raise ValueError("warmup_steps and hold_steps must be >= 0")
        if self.base_lr <= 0 or self.init_lr < 0:
            raise ValueError("base_lr must be > 0 and init_lr >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_interval < 1:
            raise ValueError("decay_interval must be >= 1")


def lr_at(step: int, s: LrSchedule) -> float:
    """Linear warm-up from ``init_lr``, constant hold, then stepwise decay."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < s.warmup_steps:
        return s.init_lr + (s.base_lr - s.init_lr) * step / s.warmup_steps
    if step < s.warmup_steps + s.hold_steps:
        return s.base_lr
    k = (step - s.warmup_steps - s.hold_steps) // s.decay_interval
    return s.base_lr * s.decay_factor**k


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "rnnt"
    schedule: LrSchedule = field(default_factory=LrSchedule)
    epochs: int = 10
    batch_size: int = 8
    seed_checkpoint: Optional[str] = None
    transplant: str = "none"
    language_sampling: str = "balanced"
    rng_seed: int = 0
    b_left: int = 1
    b_right: int = 1
    clip_norm: float = 5.0
    beam: int = 8
    n_best: int = 4
    rnnt_weight: float = 0.0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.loss not in ("rnnt", "minwer"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.transplant not in ("encoder_only", "full", "none"):
            raise ValueError(f"unknown transplant mode {self.transplant!r}")
        if self.language_sampling not in ("balanced", "proportional"):
            raise ValueError(f"unknown language sampling {self.language_sampling!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(data.get("schedule"), dict):
            data["schedule"] = LrSchedule(**data["schedule"])
        if isinstance(data.get("model"), dict):
            data["model"] = ModelConfig(**data["model"])
        return cls(**data)


@dataclass
class Checkpoint:
    params: ModelParams
    model_config: ModelConfig
    train_config: dict = field(default_factory=dict)
    stage: str = "init"
    step: int = 0
    trace: List[dict] = field(default_factory=list)

    def save(self, path) -> None:
        meta = {
            "stage": self.stage,
            "step": self.step,
            "trace": self.trace,
            "train_config": self.train_config,
        }
        save_checkpoint(path, self.params, self.model_config, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        params, config, meta = load_checkpoint(path)
        return cls(
            params,
            config,
            meta.get("train_config", {}),
            meta.get("stage", "init"),
            meta.get("step", 0),
            meta.get("trace", []),
        )

    def dev_losses(self) -> List[float]:
        return [r["dev_loss"] for r in self.trace if r.get("dev_loss") is not None]


# batching -------------------------------------------------------------------


def _as_corpora(corpora: Corpora) -> Dict[str, List[Utterance]]:
    if isinstance(corpora, Mapping):
        return {k: list(v) for k, v in corpora.items()}
    return {"_": list(corpora)}


def batch_order(corpora: Corpora, batch_size: int, sampling: str, rng) -> List[List[Utterance]]:
    """One epoch of batches.

    ``proportional`` shuffles the pooled utterances.  ``balanced`` draws the
    language of every slot uniformly and walks through a shuffled copy of
    that language, reshuffling when it runs out; the epoch has as many slots
    as there are utterances.
    """
    pools = {k: v for k, v in _as_corpora(corpora).items() if v}
    total = sum(len(v) for v in pools.values())
    if total == 0:
        return []
    names = sorted(pools)
    if sampling == "proportional" or len(names) == 1:
        pooled = [u for name in names for u in pools[name]]
        order = [pooled[i] for i in rng.permutation(len(pooled))]
    else:
        cursors = {n: (rng.permutation(len(pools[n])), 0) for n in names}
        order = []
        for lang_idx in rng.integers(0, len(names), size=total):
            name = names[lang_idx]
            perm, pos = cursors[name]
            if pos == len(perm):
                perm, pos = rng.permutation(len(pools[name])), 0
            order.append(pools[name][perm[pos]])
            cursors[name] = (perm, pos + 1)
    return _bucketed(order, batch_size, rng)


def _bucketed(order: List[Utterance], batch_size: int, rng, chunk_batches: int = 16):
    """Split into batches of similar length to cut padding.

    Each run of ``chunk_batches`` batches is length-sorted (stable), cut into
    batches and those batches are shuffled, so the order stays random at the
    chunk scale.
    """
    batches = []
    chunk = batch_size * chunk_batches
    for start in range(0, len(order), chunk):
        part = sorted(order[start : start + chunk], key=lambda u: u.T)
        group = [part[i : i + batch_size] for i in range(0, len(part), batch_size)]
        batches.extend(group[i] for i in rng.permutation(len(group)))
    return batches


def pad_batch(utts: Sequence[Utterance]):
    T = max(u.T for u in utts)
    U = max(len(u.tokens) for u in utts)
    F = utts[0].features.shape[1]
    feats = np.zeros((len(utts), T, F))
    labels = np.zeros((len(utts), U), dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, : u.T] = u.features
        labels[i, : len(u.tokens)] = u.tokens
    return feats, labels


def rnnt_batch(params: ModelParams, utts: Sequence[Utterance], b_left: int, b_right: int, grad=True):
    """Per-utterance restricted losses and the gradient of their batch mean."""
    feats, labels = pad_batch(utts)
    logits, caches = model_forward(feats, labels, params)
    logp = log_softmax(logits)
    d_logits = np.zeros_like(logits) if grad else None
    losses = np.empty(len(utts))
    for i, u in enumerate(utts):
        T, U = u.T, len(u.tokens)
        band = u.band(b_left, b_right)
        lp = np.ascontiguousarray(logp[i, :T, : U + 1])
        losses[i], g = loss_and_grad_from_logp(lp, u.tokens, band.left - 1, band.right - 1)
        if grad:
            d_logits[i, :T, : U + 1] = g
    if not grad:
        return losses, None
    grads = model_backward(d_logits / len(utts), caches, params)
    return losses, grads


def dev_loss(params: ModelParams, utts: Sequence[Utterance], b_left=1, b_right=1, batch_size=32):
    if not utts:
        return None
    total = 0.0
    for i in range(0, len(utts), batch_size):
        losses, _ = rnnt_batch(params, utts[i : i + batch_size], b_left, b_right, grad=False)
        total += float(losses.sum())
    return total / len(utts)


def sgd_step(params: ModelParams, grads: GradientTree, lr: float, clip_norm: float) -> ModelParams:
    norm = grads.global_norm()
    scale = lr * (min(1.0, clip_norm / norm) if norm > 0 else 1.0)
    return params.zip_map(grads, lambda p, g: p - scale * g)


def _check_finite(value: float, stage: str, step: int, utts: Sequence[Utterance]):
    if not math.isfinite(value):
        ids = ",".join(u.id for u in utts)
        raise TrainingDivergedError(
            f"non-finite loss in stage {stage!r} at step {step} (utterances: {ids})"
        )


def _initial_params(cfg: TrainConfig, seed: Optional[Checkpoint]) -> ModelParams:
    fresh = init_params(cfg.model)
    if seed is None and cfg.seed_checkpoint:
        seed = Checkpoint.load(cfg.seed_checkpoint)
    if seed is None or cfg.transplant == "none":
        return fresh
    if cfg.transplant == "encoder_only":
        return transplant_encoder(seed.params, fresh)
    if seed.params.shapes() != fresh.shapes():
        raise ValueError("incompatible architecture for full transplant")
    return seed.params.copy()


def train_rnnt(
    corpora: Corpora,
    cfg: TrainConfig,
    dev: Optional[Sequence[Utterance]] = None,
    seed: Optional[Checkpoint] = None,
    stage: str = "rnnt",
) -> Checkpoint:
    """SGD on the alignment-restricted transducer loss.

    ``corpora`` is a list of utterances or a mapping language -> utterances
    (multilingual training).  The trace holds one record per epoch, record 0
    being the state before any update.
    """
    if cfg.transplant != "none" and seed is None and not cfg.seed_checkpoint:
        raise ValueError(f"transplant={cfg.transplant!r} needs a seed checkpoint")
    params = _initial_params(cfg, seed)
    rng = np.random.default_rng([cfg.rng_seed, 1])
    dev = list(dev or [])
    step = 0
    trace = [{"epoch": 0, "step": 0, "lr": None, "train_loss": None,
              "dev_loss": dev_loss(params, dev, cfg.b_left, cfg.b_right)}]
    for epoch in range(1, cfg.epochs + 1):
        batches = batch_order(corpora, cfg.batch_size, cfg.language_sampling, rng)
        total, count = 0.0, 0
        lr = None
        for batch in batches:
            losses, grads = rnnt_batch(params, batch, cfg.b_left, cfg.b_right)
            _check_finite(float(losses.sum()), stage, step, batch)
            lr = lr_at(step, cfg.schedule)
            params = sgd_step(params, grads, lr, cfg.clip_norm)
            total += float(losses.sum())
            count += len(batch)
            step += 1
        record = {
            "epoch": epoch,
            "step": step,
            "lr": lr,
            "train_loss": total / count if count else None,
            "dev_loss": dev_loss(params, dev, cfg.b_left, cfg.b_right),
        }
        log.debug("%s epoch %d: %s", stage, epoch, record)
        trace.append(record)
    return Checkpoint(params, cfg.model, cfg.to_dict(), stage, step, trace)


# N-best expected-risk fine-tuning --------------------------------------------


def nbest_forward(params: ModelParams, features: np.ndarray, label_rows: Sequence[Sequence[int]]):
    """Encode once and score several label sequences against the shared encoder."""
    h_enc, enc_cache = encoder_forward(features[None], params)
    n = len(label_rows)
    U = max((len(r) for r in label_rows), default=0)
    labels = np.zeros((n, U), dtype=np.int64)
    for i, row in enumerate(label_rows):
        labels[i, : len(row)] = row
    h_pre, pred_cache = predictor_forward(labels, params)
    logits, join_cache = joiner_forward(np.broadcast_to(h_enc, (n,) + h_enc.shape[1:]), h_pre, params)
    return logits, ForwardCaches(enc_cache, pred_cache, join_cache)


def minwer_utterance(
    params: ModelParams,
    utt: Utterance,
    hyp_tokens: Sequence[Sequence[int]],
    detok,
    rnnt_weight: float = 0.0,
    b_left: int = 1,
    b_right: int = 1,
    grad: bool = True,
):
    """Objective for one utterance with its N-best held fixed.

    Returns ``(loss, RiskTable, grads)``; the table follows the rescored
    N-best order.  ``loss`` is the baselined
    expected risk plus ``rnnt_weight`` times the restricted transducer loss of
    the reference.
    """
    rows = [tuple(int(t) for t in h) for h in hyp_tokens]
    with_ref = rnnt_weight > 0
    label_rows = rows + ([tuple(utt.tokens)] if with_ref else [])
    logits, caches = nbest_forward(params, utt.features, label_rows)
    T = utt.T
    lattices, alphas, scores = [], [], []
    for i, row in enumerate(rows):
        lat = LogitLattice(logits[i, :, : len(row) + 1], row)
        loss_i, alpha_i = rnnt_forward(lat)
        lattices.append(lat)
        alphas.append(alpha_i)
        scores.append(-loss_i)
    order = sorted(range(len(rows)), key=lambda i: _rank_key(rows[i], scores[i]))
    nbest = NBestList([Hypothesis(rows[i], scores[i]) for i in order])
    loss, table = minwer_loss(nbest, utt.words, detok)
    ref_loss = 0.0
    if with_ref:
        ref_lat = LogitLattice(logits[-1, :, : len(utt.tokens) + 1], utt.tokens)
        band = band_from_alignment(utt.emit_frames, b_left, b_right, T)
        ref_loss, ref_alpha = rnnt_forward(ref_lat, band)
    total = loss + rnnt_weight * ref_loss
    if not grad:
        return total, table, None
    d_logits = np.zeros_like(logits)
    g = score_gradients(table)
    for rank, i in enumerate(order):
        if g[rank] != 0.0:
            d_logits[i, :, : len(rows[i]) + 1] = -g[rank] * rnnt_grad(lattices[i], None, alphas[i])
    if with_ref:
        d_logits[-1, :, : len(utt.tokens) + 1] = rnnt_weight * rnnt_grad(ref_lat, band, ref_alpha)
    return total, table, model_backward(d_logits, caches, params)


def finetune_minwer(
    corpus: Corpora,
    cfg: TrainConfig,
    seed: Optional[Checkpoint] = None,
    dev: Optional[Sequence[Utterance]] = None,
    vocab: Optional[Vocabulary] = None,
    stage: str = "minwer",
) -> Checkpoint:
    """Fine-tune a seeded model on the N-best expected word error."""
    if seed is None and not cfg.seed_checkpoint:
        raise ValueError("MinWER fine-tuning needs a seed checkpoint")
    if seed is None:
        seed = Checkpoint.load(cfg.seed_checkpoint)
    if cfg.transplant == "none":
        cfg = replace(cfg, transplant="full")
    params = _initial_params(cfg, seed)
    vocab = vocab or Vocabulary(cfg.model.vocab_size - 1)
    detok = vocab.detokenize
    rng = np.random.default_rng([cfg.rng_seed, 2])
    dev = list(dev or [])
    step = 0
    trace = [{"epoch": 0, "step": 0, "lr": None, "train_loss": None, "expected_risk": None,
              "dev_loss": dev_loss(params, dev, cfg.b_left, cfg.b_right)}]
    for epoch in range(1, cfg.epochs + 1):
        total = risk = 0.0
        count = 0
        lr = None
        for batch in batch_order(corpus, cfg.batch_size, cfg.language_sampling, rng):
            acc = None
            for utt in batch:
                nbest = beam_search(params, utt.features, cfg.beam, cfg.n_best)
                loss, table, grads = minwer_utterance(
                    params, utt, [h.tokens for h in nbest], detok,
                    cfg.rnnt_weight, cfg.b_left, cfg.b_right,
                )
                _check_finite(loss, stage, step, [utt])
                acc = grads if acc is None else acc.zip_map(grads, np.add)
                total += loss
                risk += table.expected_risk
                count += 1
            lr = lr_at(step, cfg.schedule)
            params = sgd_step(params, acc.map(lambda g: g / len(batch)), lr, cfg.clip_norm)
            step += 1
        trace.append({
            "epoch": epoch,
            "step": step,
            "lr": lr,
            "train_loss": total / count if count else None,
            "expected_risk": risk / count if count else None,
            "dev_loss": dev_loss(params, dev, cfg.b_left, cfg.b_right),
        })
    return Checkpoint(params, cfg.model, cfg.to_dict(), stage, step, trace)


# evaluation -----------------------------------------------------------------


def decode_corpus(params: ModelParams, utts: Sequence[Utterance], vocab: Vocabulary):
    return [vocab.detokenize(greedy_decode(params, u.features)) for u in utts]


def evaluate(
    params: ModelParams,
    utts: Sequence[Utterance],
    vocab: Vocabulary,
    rare=None,
    threshold: Optional[int] = None,
) -> WerReport:
    hyps = decode_corpus(params, utts, vocab)
    pairs = [(u.words, h) for u, h in zip(utts, hyps)]
    if rare is None:
        return corpus_wer(pairs)
    return wer_breakdown(pairs, rare, threshold)


def epochs_to_reach(trace: Sequence[dict], target: float) -> Optional[int]:
    """First epoch whose dev loss is at or below ``target``."""
    for rec in trace:
        if rec.get("dev_loss") is not None and rec["dev_loss"] <= target:
            return rec["epoch"]
    return None
