"""scikit-learn style wrapper around the training and decoding pipeline."""

from __future__ import annotations

from typing import List, Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .corpus import Utterance, Vocabulary
from .decode import beam_search, greedy_decode
from .evaluation import corpus_wer
from .lattice import AlignmentBand
from .model import ModelConfig
from .training import Checkpoint, LrSchedule, TrainConfig, finetune_minwer, train_rnnt


class TransducerASR(BaseEstimator):
    """RNN transducer over variable-length feature sequences.

    ``X`` is a sequence of ``(frames, features)`` arrays and ``y`` a sequence
    of word lists spelled with the first ``n_chars`` lowercase letters.
    ``fit`` trains on the alignment-restricted loss when ``emit_frames``
    (1-based emission frame per token) is given, and on the unrestricted
    loss otherwise; ``minwer_epochs > 0`` adds a MinWER fine-tuning stage.
    ``init_checkpoint`` (a path or :class:`Checkpoint`) seeds the model
    according to ``transplant``.
    """

    def __init__(
        self,
        n_chars: int = 10,
        encoder_hidden: int = 32,
        predictor_hidden: int = 16,
        joiner_hidden: int = 32,
        epochs: int = 10,
        batch_size: int = 8,
        lr: float = 0.1,
        warmup_steps: int = 0,
        hold_steps: int = 0,
        decay_factor: float = 1.0,
        decay_interval: int = 1,
        b_left: int = 1,
        b_right: int = 1,
        minwer_epochs: int = 0,
        minwer_lr: float = 0.02,
        beam: int = 1,
        n_best: int = 4,
        init_checkpoint: Union[None, str, Checkpoint] = None,
        transplant: str = "encoder_only",
        language_sampling: str = "balanced",
        random_state: int = 0,
    ):
        self.n_chars = n_chars
        self.encoder_hidden = encoder_hidden
        self.predictor_hidden = predictor_hidden
        self.joiner_hidden = joiner_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.hold_steps = hold_steps
        self.decay_factor = decay_factor
        self.decay_interval = decay_interval
        self.b_left = b_left
        self.b_right = b_right
        self.minwer_epochs = minwer_epochs
        self.minwer_lr = minwer_lr
        self.beam = beam
        self.n_best = n_best
        self.init_checkpoint = init_checkpoint
        self.transplant = transplant
        self.language_sampling = language_sampling
        self.random_state = random_state

    # validation -------------------------------------------------------------

    def _check_X(self, X, reset: bool) -> List[np.ndarray]:
        if isinstance(X, np.ndarray) and X.ndim == 3:
            X = list(X)
        if not isinstance(X, (list, tuple)) or not X:
            raise ValueError("X must be a non-empty sequence of (frames, features) arrays")
        arrays = [check_array(x, dtype=np.float64, ensure_min_samples=1) for x in X]
        dims = {a.shape[1] for a in arrays}
        if len(dims) != 1:
            raise ValueError(f"utterances disagree on feature dimension: {sorted(dims)}")
        F = dims.pop()
        if reset:
            self.n_features_in_ = F
        elif F != self.n_features_in_:
            raise ValueError(f"X has {F} features, but {type(self).__name__} was fitted with {self.n_features_in_}")
        return arrays

    def _utterances(self, X, y, emit_frames) -> List[Utterance]:
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} utterances but y has {len(y)}")
        if emit_frames is not None and len(emit_frames) != len(X):
            raise ValueError("emit_frames needs one entry per utterance")
        vocab = Vocabulary(self.n_chars)
        allowed = set(vocab.chars())
        utts = []
        for i, (feats, words) in enumerate(zip(X, y)):
            words = [words] if isinstance(words, str) else list(words)
            bad = sorted({c for w in words for c in w} - allowed)
            if bad:
                raise ValueError(f"utterance {i}: characters {bad} are outside the {self.n_chars}-letter alphabet")
            tokens = np.array(vocab.tokenize(words), dtype=np.int64)
            if emit_frames is None:
                emit = np.zeros(len(tokens), dtype=np.int64)
            else:
                emit = np.asarray(emit_frames[i], dtype=np.int64)
                if emit.shape != tokens.shape:
                    raise ValueError(f"utterance {i}: {len(emit)} emit frames for {len(tokens)} tokens")
            utt = Utterance(feats, words, tokens, emit, id=str(i))
            if emit_frames is None:
                utt._bands[(self.b_left, self.b_right)] = AlignmentBand.full(feats.shape[0], len(tokens))
            utts.append(utt)
        return utts

    # fitting ----------------------------------------------------------------

    def _train_config(self, loss: str, epochs: int, schedule: LrSchedule, transplant: str) -> TrainConfig:
        model = ModelConfig(
            feature_dim=self.n_features_in_,
            encoder_hidden=self.encoder_hidden,
            predictor_hidden=self.predictor_hidden,
            joiner_hidden=self.joiner_hidden,
            vocab_size=Vocabulary(self.n_chars).size,
            rng_seed=self.random_state,
        )
        return TrainConfig(
            loss=loss,
            schedule=schedule,
            epochs=epochs,
            batch_size=self.batch_size,
            transplant=transplant,
            language_sampling=self.language_sampling,
            rng_seed=self.random_state,
            b_left=self.b_left,
            b_right=self.b_right,
            beam=max(self.beam, self.n_best),
            n_best=self.n_best,
            model=model,
        )

    def fit(self, X, y, emit_frames: Optional[Sequence[Sequence[int]]] = None, groups=None):
        X = self._check_X(X, reset=True)
        utts = self._utterances(X, y, emit_frames)
        if groups is not None:
            if len(groups) != len(utts):
                raise ValueError("groups needs one language label per utterance")
            data = {}
            for g, u in zip(groups, utts):
                data.setdefault(str(g), []).append(u)
        else:
            data = utts
        seed = self.init_checkpoint
        if isinstance(seed, str):
            seed = Checkpoint.load(seed)
        schedule = LrSchedule(
            warmup_steps=self.warmup_steps,
            hold_steps=self.hold_steps,
            base_lr=self.lr,
            decay_factor=self.decay_factor,
            decay_interval=self.decay_interval,
        )
        transplant = self.transplant if seed is not None else "none"
        ckpt = train_rnnt(data, self._train_config("rnnt", self.epochs, schedule, transplant), seed=seed)
        if self.minwer_epochs > 0:
            cfg = self._train_config("minwer", self.minwer_epochs, LrSchedule(base_lr=self.minwer_lr), "full")
            ckpt = finetune_minwer(utts, cfg, seed=ckpt, vocab=Vocabulary(self.n_chars))
        self.checkpoint_ = ckpt
        self.trace_ = ckpt.trace
        self.vocabulary_ = Vocabulary(self.n_chars)
        return self

    # inference --------------------------------------------------------------

    def predict(self, X) -> List[List[str]]:
        check_is_fitted(self, "checkpoint_")
        X = self._check_X(X, reset=False)
        params = self.checkpoint_.params
        if self.beam <= 1:
            return [self.vocabulary_.detokenize(greedy_decode(params, x)) for x in X]
        n = min(self.n_best, self.beam)
        return [self.vocabulary_.detokenize(beam_search(params, x, self.beam, n)[0].tokens) for x in X]

    def predict_nbest(self, X):
        """Per utterance, ``(words, log_prob)`` pairs best first."""
        check_is_fitted(self, "checkpoint_")
        X = self._check_X(X, reset=False)
        beam = max(self.beam, self.n_best)
        out = []
        for x in X:
            nbest = beam_search(self.checkpoint_.params, x, beam, self.n_best)
            out.append([(self.vocabulary_.detokenize(h.tokens), h.log_prob) for h in nbest])
        return out

    def score(self, X, y) -> float:
        """Word accuracy ``1 - WER/100`` so that larger is better."""
        hyps = self.predict(X)
        refs = [[w] if isinstance(w, str) else list(w) for w in y]
        return 1.0 - corpus_wer(zip(refs, hyps)).wer / 100.0

    def save(self, path) -> None:
        check_is_fitted(self, "checkpoint_")
        self.checkpoint_.save(path)
