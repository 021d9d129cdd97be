import numpy as np
import pytest

from conftest import assert_grad_close, five_point, tiny_config
from tlasr.lattice import LogitLattice, band_from_alignment, rnnt_forward, rnnt_grad
from tlasr.model import (
    ModelConfig,
    ModelParams,
    encoder_forward,
    init_params,
    joiner_forward,
    lattice_for,
    load_checkpoint,
    model_backward,
    model_forward,
    predictor_forward,
    save_checkpoint,
    transplant_encoder,
)


def zero_params(cfg):
    return init_params(cfg).map(np.zeros_like)


# init ------------------------------------------------------------------------


def test_init_deterministic_and_seeded():
    cfg = tiny_config()
    assert init_params(cfg).equals(init_params(cfg))
    assert not init_params(cfg).equals(init_params(tiny_config(rng_seed=8)))


def test_init_shapes_match_independent_table():
    cfg = ModelConfig(feature_dim=5, encoder_hidden=6, encoder_layers=2, predictor_hidden=4,
                      joiner_hidden=7, vocab_size=9)
    expected = {
        "encoder/l0.W_x": (6, 5), "encoder/l0.W_h": (6, 6), "encoder/l0.b": (6,),
        "encoder/l1.W_x": (6, 6), "encoder/l1.W_h": (6, 6), "encoder/l1.b": (6,),
        "predictor/embed": (10, 4), "predictor/W_x": (4, 4), "predictor/W_h": (4, 4), "predictor/b": (4,),
        "joiner/W_enc": (7, 6), "joiner/W_pred": (7, 4), "joiner/b": (7,),
        "joiner/W_out": (10, 7), "joiner/b_out": (10,),
    }
    params = init_params(cfg)
    assert {k: v.shape for k, v in params.items()} == expected
    for name, value in params.items():
        if value.ndim == 1:
            assert np.all(value == 0)
        else:
            fan_in = 1 if name.endswith("embed") else value.shape[1]
            assert np.abs(value).max() <= 1 / np.sqrt(fan_in)


def test_config_rejects_bad_dims():
    with pytest.raises(ValueError):
        ModelConfig(encoder_hidden=0)


# forward ---------------------------------------------------------------------


def test_encoder_zero_weights_and_shape(rng):
    cfg = tiny_config()
    h, _ = encoder_forward(rng.normal(size=(6, 3)), zero_params(cfg))
    assert h.shape == (6, 4)
    assert np.all(h == 0)
    h, _ = encoder_forward(rng.normal(size=(6, 3)), init_params(cfg))
    assert h.shape == (6, 4)


def test_encoder_single_step_by_hand():
    cfg = ModelConfig(feature_dim=2, encoder_hidden=2, predictor_hidden=2, joiner_hidden=2, vocab_size=2)
    params = init_params(cfg)
    params.encoder["l0.W_x"] = np.array([[0.5, -1.0], [2.0, 0.25]])
    params.encoder["l0.b"] = np.array([0.1, -0.2])
    x = np.array([[1.0, 2.0]])
    h, _ = encoder_forward(x, params)
    assert h[0] == pytest.approx([np.tanh(0.5 - 2.0 + 0.1), np.tanh(2.0 + 0.5 - 0.2)], abs=1e-15)


def test_encoder_rejects_wrong_feature_dim(rng):
    with pytest.raises(ValueError):
        encoder_forward(rng.normal(size=(4, 5)), init_params(tiny_config()))


def test_predictor_rows():
    cfg = ModelConfig(feature_dim=2, encoder_hidden=2, predictor_hidden=2, joiner_hidden=2, vocab_size=2)
    params = init_params(cfg)
    h, _ = predictor_forward(np.array([], dtype=np.int64), params)
    assert h.shape == (1, 2)
    h, _ = predictor_forward(np.array([0, 1, 1]), zero_params(cfg))
    assert np.all(h == h[0])
    # two-step recurrence by hand
    p = params.predictor
    p["embed"] = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    p["W_x"] = np.array([[1.0, -1.0], [0.5, 0.5]])
    p["W_h"] = np.array([[0.2, 0.0], [0.0, -0.3]])
    p["b"] = np.array([0.0, 0.1])
    h, _ = predictor_forward(np.array([1]), params)
    h0 = np.tanh(p["W_x"] @ p["embed"][2] + p["b"])
    h1 = np.tanh(p["W_x"] @ p["embed"][1] + p["W_h"] @ h0 + p["b"])
    assert h[0] == pytest.approx(h0, abs=1e-15)
    assert h[1] == pytest.approx(h1, abs=1e-15)


def test_predictor_rejects_out_of_range():
    with pytest.raises(ValueError):
        predictor_forward(np.array([3]), init_params(tiny_config()))


def test_joiner_zero_weights_and_locality(rng):
    cfg = tiny_config()
    h_enc, h_pre = rng.normal(size=(4, 4)), rng.normal(size=(3, 3))
    logits, _ = joiner_forward(h_enc, h_pre, zero_params(cfg))
    assert logits.shape == (4, 3, 4)
    assert np.all(logits == 0)
    params = init_params(cfg)
    base, _ = joiner_forward(h_enc, h_pre, params)
    bumped = h_enc.copy()
    bumped[2] += 1.0
    moved, _ = joiner_forward(bumped, h_pre, params)
    changed = np.any(moved != base, axis=-1)
    assert changed[2].all() and not np.delete(changed, 2, axis=0).any()


def test_batched_forward_matches_single(rng):
    cfg = tiny_config()
    params = init_params(cfg)
    feats = [rng.normal(size=(T, 3)) for T in (5, 3)]
    labels = [np.array([0, 2]), np.array([1])]
    batch_f = np.zeros((2, 5, 3))
    batch_l = np.zeros((2, 2), dtype=np.int64)
    for i, (f, y) in enumerate(zip(feats, labels)):
        batch_f[i, : len(f)] = f
        batch_l[i, : len(y)] = y
    logits, _ = model_forward(batch_f, batch_l, params)
    for i, (f, y) in enumerate(zip(feats, labels)):
        single, _ = model_forward(f, y, params)
        assert np.allclose(logits[i, : len(f), : len(y) + 1], single, atol=1e-14)


# backward --------------------------------------------------------------------


def full_model_loss(params, feats, labels, band):
    return rnnt_forward(lattice_for(feats, labels, params), band)[0]


def check_model_gradient(params, feats, labels, band):
    logits, caches = model_forward(feats, labels, params)
    lat = LogitLattice(logits, labels)
    _, alphas = rnnt_forward(lat, band)
    grads = model_backward(rnnt_grad(lat, band, alphas), caches, params)
    checked = 0
    for (name, value), (_, g) in zip(params.items(), grads.items()):
        assert g.shape == value.shape
        for idx in np.ndindex(*value.shape):
            num = five_point(lambda: full_model_loss(params, feats, labels, band), value, idx)
            assert_grad_close(g[idx], num, name)
            checked += abs(g[idx]) > 1e-8
    return checked


def test_full_model_gradient_two_frames_one_label(tiny_params, rng):
    _, params = tiny_params
    assert check_model_gradient(params, rng.normal(size=(2, 3)), np.array([1]), None) > 50


def test_full_model_gradient_restricted_band(tiny_params, rng):
    _, params = tiny_params
    band = band_from_alignment([1, 3], 0, 1, 4)
    assert check_model_gradient(params, rng.normal(size=(4, 3)), np.array([2, 0]), band) > 50


def test_zero_lattice_gradient_gives_zero_tree(rng):
    params = init_params(tiny_config())
    logits, caches = model_forward(rng.normal(size=(3, 3)), np.array([0]), params)
    grads = model_backward(np.zeros_like(logits), caches, params)
    assert all(np.all(g == 0) for _, g in grads.items())
    assert grads.shapes() == params.shapes()


def test_backward_rejects_mismatched_cache(rng):
    params = init_params(tiny_config())
    logits, caches = model_forward(rng.normal(size=(3, 3)), np.array([0]), params)
    with pytest.raises(ValueError):
        model_backward(np.zeros((2, 2, 4)), caches, params)


# transplant ------------------------------------------------------------------


def test_transplant_exchange():
    seed = init_params(tiny_config(rng_seed=1))
    target = init_params(tiny_config(rng_seed=2))
    out = transplant_encoder(seed, target)
    for k in seed.encoder:
        assert np.array_equal(out.encoder[k], seed.encoder[k])
    for sub in ("predictor", "joiner"):
        for k, v in getattr(target, sub).items():
            assert np.array_equal(getattr(out, sub)[k], v)
    assert transplant_encoder(seed, seed).equals(seed)


def test_transplant_rejects_incompatible_encoder():
    seed = init_params(tiny_config(encoder_hidden=6))
    with pytest.raises(ValueError, match="incompatible encoder architecture"):
        transplant_encoder(seed, init_params(tiny_config()))


# checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_params):
    cfg, params = tiny_params
    meta = {"stage": "rnnt", "step": 3, "trace": [{"dev_loss": 1.5}]}
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, params, cfg, meta)
    loaded, cfg2, meta2 = load_checkpoint(a)
    assert loaded.equals(params) and cfg2 == cfg and meta2 == meta
    save_checkpoint(b, loaded, cfg2, meta2)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:8] == b"TLASRCK\x00"


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_params_equals_detects_single_bit():
    params = init_params(tiny_config())
    other = params.copy()
    w = other.joiner["W_out"]
    w[0, 0] = np.nextafter(w[0, 0], np.inf)
    assert not params.equals(other)
    assert isinstance(other, ModelParams)
