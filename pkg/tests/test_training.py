import numpy as np
import pytest

from conftest import tiny_config
from tlasr.corpus import DomainSpec, Utterance, Vocabulary, domain_shift, make_language_family, synthesize
from tlasr.model import ModelConfig
from tlasr.training import (
    Checkpoint,
    LrSchedule,
    TrainConfig,
    TrainingDivergedError,
    batch_order,
    decode_corpus,
    epochs_to_reach,
    evaluate,
    finetune_minwer,
    lr_at,
    train_rnnt,
)


# schedule --------------------------------------------------------------------


def test_lr_examples():
    assert lr_at(0, LrSchedule(base_lr=0.3)) == 0.3
    assert lr_at(5, LrSchedule(warmup_steps=10, base_lr=0.4)) == pytest.approx(0.2)
    s = LrSchedule(warmup_steps=2, hold_steps=3, base_lr=1.0, decay_factor=0.5, decay_interval=1)
    assert lr_at(6, s) == 0.5
    assert [lr_at(k, s) for k in range(5)] == [0.0, 0.5, 1.0, 1.0, 1.0]


def test_lr_shape():
    s = LrSchedule(warmup_steps=7, hold_steps=5, base_lr=0.8, init_lr=0.1, decay_factor=0.7, decay_interval=3)
    lrs = [lr_at(k, s) for k in range(60)]
    assert all(a <= b for a, b in zip(lrs[:8], lrs[1:8]))
    assert set(lrs[7:12]) == {0.8}
    assert all(a >= b for a, b in zip(lrs[12:], lrs[13:]))
    with pytest.raises(ValueError):
        lr_at(-1, s)


@pytest.mark.parametrize("kw", [dict(warmup_steps=-1), dict(base_lr=0.0), dict(decay_factor=1.5),
                                dict(decay_interval=0), dict(init_lr=-0.1)])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        LrSchedule(**kw)


def test_config_validation_and_round_trip():
    cfg = TrainConfig(loss="minwer", schedule=LrSchedule(warmup_steps=3), model=tiny_config())
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(loss="ctc")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})


# fixtures --------------------------------------------------------------------


def toy_data(n, noise=0.3, seed=0, lexicon_size=5, feature_dim=3, n_chars=2):
    lang = make_language_family(seed, 1, 0.0, n_chars=n_chars, feature_dim=feature_dim,
                                lexicon_size=lexicon_size, word_len_range=(1, 2))[0]
    return synthesize(lang, DomainSpec(noise, (1, 2)), n, seed, (1, 2))


def tiny_train_config(**kw):
    base = dict(epochs=1, batch_size=4, model=tiny_config(), schedule=LrSchedule(base_lr=0.1))
    base.update(kw)
    return TrainConfig(**base)


# training --------------------------------------------------------------------


def test_no_utterances_leaves_params_unchanged():
    cfg = tiny_train_config()
    ckpt = train_rnnt([], cfg)
    fresh = train_rnnt([], tiny_train_config(epochs=0))
    assert ckpt.params.equals(fresh.params) and ckpt.step == 0


def test_zero_lr_leaves_params_unchanged():
    data = toy_data(4)
    # a single step at the start of a warm-up from zero
    cfg = tiny_train_config(schedule=LrSchedule(warmup_steps=100, base_lr=0.1), batch_size=4)
    before = train_rnnt([], tiny_train_config(epochs=0)).params
    ckpt = train_rnnt(data, cfg)
    assert ckpt.step == 1 and ckpt.params.equals(before)
    tuned = finetune_minwer(data, cfg, seed=ckpt)
    assert tuned.params.equals(before)


def test_training_is_deterministic(tmp_path):
    data = {"x": toy_data(12, seed=1), "y": toy_data(6, seed=2)}
    cfg = tiny_train_config(epochs=2)
    a, b = train_rnnt(data, cfg, dev=data["x"][:3]), train_rnnt(data, cfg, dev=data["x"][:3])
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert a.trace == b.trace
    c = train_rnnt(data, tiny_train_config(epochs=2, rng_seed=1))
    assert not a.params.equals(c.params)


def test_checkpoint_round_trip(tmp_path):
    ckpt = train_rnnt(toy_data(8), tiny_train_config(), dev=toy_data(2, seed=3))
    ckpt.save(tmp_path / "m.ckpt")
    loaded = Checkpoint.load(tmp_path / "m.ckpt")
    assert loaded.params.equals(ckpt.params)
    assert loaded.trace == ckpt.trace and loaded.stage == "rnnt" and loaded.step == ckpt.step
    assert TrainConfig.from_dict(loaded.train_config) == TrainConfig.from_dict(ckpt.train_config)


def test_trace_records_every_epoch():
    ckpt = train_rnnt(toy_data(8), tiny_train_config(epochs=3), dev=toy_data(3, seed=4))
    assert [r["epoch"] for r in ckpt.trace] == [0, 1, 2, 3]
    assert len(ckpt.dev_losses()) == 4
    assert epochs_to_reach(ckpt.trace, float("inf")) == 0
    assert epochs_to_reach(ckpt.trace, -1.0) is None


def test_divergence_guard_names_stage_and_utterance():
    data = toy_data(4)
    bad = data[2]
    data[2] = Utterance(np.full_like(bad.features, np.nan), bad.words, bad.tokens, bad.emit_frames, id="broken-7")
    with pytest.raises(TrainingDivergedError, match="broken-7") as info:
        train_rnnt(data, tiny_train_config())
    assert "rnnt" in str(info.value)


def test_minwer_requires_seed():
    with pytest.raises(ValueError):
        finetune_minwer(toy_data(2), tiny_train_config(loss="minwer"))


def test_transplant_requires_seed_and_compatible_shapes():
    data = toy_data(4)
    with pytest.raises(ValueError):
        train_rnnt(data, tiny_train_config(transplant="encoder_only"))
    seed = train_rnnt(data, tiny_train_config(model=tiny_config(encoder_hidden=6)))
    with pytest.raises(ValueError, match="incompatible"):
        train_rnnt(data, tiny_train_config(transplant="encoder_only"), seed=seed)


def test_encoder_transplant_then_training_moves_encoder():
    data = toy_data(8)
    seed = train_rnnt(data, tiny_train_config(model=tiny_config(rng_seed=3)))
    ckpt = train_rnnt(data, tiny_train_config(transplant="encoder_only", epochs=0), seed=seed)
    for k, v in seed.params.encoder.items():
        assert np.array_equal(ckpt.params.encoder[k], v)
    stepped = train_rnnt(data, tiny_train_config(transplant="encoder_only"), seed=seed)
    assert any(not np.array_equal(stepped.params.encoder[k], v) for k, v in seed.params.encoder.items())


def test_balanced_sampling_interleaves_languages():
    data = {"big": toy_data(90, seed=1), "small": toy_data(10, seed=2)}
    rng = np.random.default_rng(0)
    batches = batch_order(data, 5, "balanced", rng)
    ids = [u.id for b in batches for u in b]
    assert len(ids) == 100
    small_ids = {u.id for u in data["small"]}
    assert 35 <= sum(i in small_ids for i in ids) <= 65
    prop = batch_order(data, 5, "proportional", np.random.default_rng(0))
    assert sorted(u.id for b in prop for u in b) == sorted(u.id for v in data.values() for u in v)


# convergence ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def converged():
    lang = make_language_family(0, 1, 0.0, lexicon_size=30)[0]
    domain = DomainSpec(0.0, (2, 3))
    train = synthesize(lang, domain, 2000, 1)
    cfg = TrainConfig(
        epochs=2,
        schedule=LrSchedule(base_lr=0.1),
        model=ModelConfig(feature_dim=8, encoder_hidden=32, predictor_hidden=16, joiner_hidden=32, vocab_size=11),
    )
    return lang, domain, train, train_rnnt(train, cfg)


def test_noiseless_toy_run_converges(converged):
    lang, domain, train, ckpt = converged
    vocab = Vocabulary(10)
    assert evaluate(ckpt.params, synthesize(lang, domain, 200, 2), vocab).wer < 10.0
    hyps = decode_corpus(ckpt.params, train[:300], vocab)
    assert np.mean([h == u.words for h, u in zip(hyps, train)]) >= 0.9


def test_out_of_domain_data_raises_wer(converged):
    lang, domain, _, ckpt = converged
    vocab = Vocabulary(10)
    worse = 0
    for seed in range(3):
        shifted = domain_shift(domain, 2.0, 8, seed=seed)
        in_dom = evaluate(ckpt.params, synthesize(lang, domain, 100, 10 + seed), vocab).wer
        out_dom = evaluate(ckpt.params, synthesize(lang, shifted, 100, 10 + seed), vocab).wer
        worse += out_dom > in_dom
    assert worse == 3
