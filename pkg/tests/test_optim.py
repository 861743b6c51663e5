import numpy as np
import pytest

from khgrec import autodiff as ad
from khgrec.optim import Adam, PlateauScheduler, plateau_lr


def test_zero_gradient_leaves_parameters():
    p = ad.parameter(np.array([1.0, -2.0]))
    opt = Adam({"p": p}, lr=0.1)
    opt.step({"p": np.zeros(2)})
    assert np.array_equal(p.value, [1.0, -2.0])


def test_first_step_moves_by_lr():
    # bias-corrected first step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    p = ad.parameter(np.array(1.0))
    Adam({"p": p}, lr=0.01).step({"p": np.array(1.0)})
    assert p.value == pytest.approx(1.0 - 0.01 / (1.0 + 1e-8), abs=1e-15)
    assert p.value == pytest.approx(0.99, abs=1e-9)


def test_identical_parameters_stay_identical():
    rng = np.random.default_rng(0)
    a = ad.parameter(np.ones(3))
    b = ad.parameter(np.ones(3))
    opt = Adam({"a": a, "b": b}, lr=0.05, weight_decay=0.01)
    for _ in range(25):
        g = rng.normal(size=3)
        opt.step({"a": g, "b": g.copy()})
    assert np.array_equal(a.value, b.value)


def test_weight_decay_matches_explicit_penalty():
    rng = np.random.default_rng(1)
    init = rng.normal(size=4)
    g = rng.normal(size=4)
    a = ad.parameter(init.copy())
    b = ad.parameter(init.copy())
    Adam({"a": a}, lr=0.01, weight_decay=0.1).step({"a": g})
    Adam({"b": b}, lr=0.01).step({"b": g + 2 * 0.1 * init})
    assert np.array_equal(a.value, b.value)


def test_subset_step_keeps_other_moments():
    a = ad.parameter(np.ones(2))
    b = ad.parameter(np.ones(2))
    opt = Adam({"a": a, "b": b})
    opt.step({"a": np.ones(2)})
    assert opt.t == {"a": 1, "b": 0}
    assert np.array_equal(b.value, np.ones(2))


def test_non_finite_gradient_is_named():
    opt = Adam({"w": ad.parameter(np.ones(2))})
    with pytest.raises(FloatingPointError, match="'w'"):
        opt.step({"w": np.array([1.0, np.nan])})


def test_state_round_trip():
    p = ad.parameter(np.ones(3))
    opt = Adam({"p": p})
    opt.step({"p": np.arange(3.0)})
    q = ad.parameter(p.value.copy())
    other = Adam({"q": q})
    state = {k.replace(".p", ".q"): v for k, v in opt.state_arrays().items()}
    other.load_state_arrays(state, opt.step_count)
    opt.step({"p": np.ones(3)})
    other.step({"q": np.ones(3)})
    assert np.array_equal(p.value, q.value)


def test_improving_history_keeps_lr():
    assert plateau_lr(np.linspace(1.0, 0.0, 200), 0.01) == 0.01
    assert plateau_lr(np.arange(100.0), 0.01, mode="max") == 0.01


def test_twenty_flat_epochs_halve_lr():
    # first value sets the best; the next 20 do not improve on it
    assert plateau_lr([1.0] * 21, 0.01) == pytest.approx(0.005)
    assert plateau_lr([1.0] * 20, 0.01) == 0.01


def test_lr_floor():
    s = PlateauScheduler(1e-5, patience=1)
    for _ in range(10):
        s.step(0.0)
    assert s.lr == 1e-5
    assert plateau_lr([1.0] * 500, 0.01) == pytest.approx(1e-5)


def test_bad_mode():
    with pytest.raises(ValueError):
        PlateauScheduler(0.1, mode="sideways")
