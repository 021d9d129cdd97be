from contextlib import contextmanager

import numpy as np
import pytest

from tlasr.lattice import AlignmentBand, InfeasibleBandError, LogitLattice, band_from_alignment
from tlasr.model import ModelConfig, init_params


def random_lattice(rng, T, U, V, scale=2.0):
    values = rng.normal(scale=scale, size=(T, U + 1, V + 1))
    labels = rng.integers(0, V, size=U)
    return LogitLattice(values, labels)


def random_band(rng, T, U):
    """A valid band: from a random alignment half the time, raw windows otherwise."""
    if U <= T and rng.random() < 0.5:
        emit = np.sort(rng.integers(1, T + 1, size=U))
        return band_from_alignment(emit, int(rng.integers(0, 3)), int(rng.integers(0, 3)), T)
    while True:
        left = np.sort(rng.integers(1, T + 1, size=U + 1))
        right = np.sort(rng.integers(1, T + 1, size=U + 1))
        left[0], right[-1] = 1, T
        band = AlignmentBand(left, right)
        try:
            band.validate(T, U)
            return band
        except InfeasibleBandError:
            continue


def tiny_config(**kw):
    base = dict(feature_dim=3, encoder_hidden=4, predictor_hidden=3, joiner_hidden=5, vocab_size=3, rng_seed=7)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_params():
    cfg = tiny_config()
    params = init_params(cfg)
    # larger weights than the default init so gradients are well away from zero
    return cfg, params.map(lambda p: p * 2.0 + 0.1 * np.sign(p))


def five_point(f, array, idx, h=1e-3):
    """Fourth-order central difference of ``f()`` along ``array[idx]``, edited in place."""
    orig = array[idx]
    vals = []
    for step in (2, 1, -1, -2):
        array[idx] = orig + step * h
        vals.append(f())
    array[idx] = orig
    return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)


def assert_grad_close(g, num, what=""):
    if abs(g) > 1e-8:
        assert abs(g - num) / max(abs(g), abs(num)) < 1e-4, what
    else:
        assert abs(num) < 1e-7, what


# acceptance summary -------------------------------------------------------------

ACCEPTANCE = {}  # criterion number -> {"title": str, "parts": [(ok, detail)]}


def record_criterion(number, title, ok, detail=""):
    entry = ACCEPTANCE.setdefault(number, {"title": title, "parts": []})
    entry["parts"].append((ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[number]
        ok = all(p for p, _ in entry["parts"])
        details = "; ".join(d for _, d in entry["parts"] if d)
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {entry['title']}"
        terminalreporter.write_line(line + (f"  [{details}]" if details else ""))


@contextmanager
def fresh_cache():
    """Run with an empty experiment cache, then put the old entries back."""
    from tlasr import experiments

    saved = dict(experiments._CACHE)
    experiments.clear_cache()
    try:
        yield
    finally:
        experiments.clear_cache()
        experiments._CACHE.update(saved)
