import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajguard.aggregation import LocalUpdate
from trajguard.attacks import (AttackConfig, apply_attack, attack_rng, attacked_count,
                               gaussian_attack, history_attack, history_trend, mpaf_attack,
                               random_attack, select_attacked_indices)
from trajguard.errors import ConfigError, InsufficientHistory, LengthMismatch
from trajguard.numeric import FlatWeights, make_rng

KINDS = ("random", "gaussian", "history", "mpaf")


def upd(values, cid="MOTO", rnd=3):
    return LocalUpdate(cid, rnd, FlatWeights(np.asarray(values, dtype=np.float64)))


def context(d, seed=0):
    rng = np.random.default_rng(seed)
    hist = [rng.standard_normal(d) for _ in range(6)]
    return {"gm_current": hist[-1], "gm_history": hist, "base_model": rng.standard_normal(d)}


def test_select_indices_examples():
    rng = make_rng(0, "t")
    assert select_attacked_indices(10, 0.0, rng).size == 0
    np.testing.assert_array_equal(select_attacked_indices(10, 1.0, make_rng(0, "t")), np.arange(10))
    a = select_attacked_indices(10, 0.5, make_rng(4, "t"))
    b = select_attacked_indices(10, 0.5, make_rng(4, "t"))
    assert a.size == 5 and np.array_equal(a, b) and len(set(a.tolist())) == 5
    with pytest.raises(ValueError):
        select_attacked_indices(0, 0.5, rng)


def test_attacked_count_rounds_half_up():
    assert attacked_count(10, 0.25) == 3
    assert attacked_count(3, 0.5) == 2
    assert attacked_count(7, 1.0) == 7


@given(st.integers(1, 200), st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
def test_index_sets_nested(d, a1, a2, seed):
    lo, hi = sorted((a1, a2))
    s_lo = set(select_attacked_indices(d, lo, make_rng(seed, "n")).tolist())
    s_hi = set(select_attacked_indices(d, hi, make_rng(seed, "n")).tolist())
    assert s_lo <= s_hi


def test_random_attack_examples():
    u = upd([0.1, -0.2, 0.3, 0.4])
    cfg = AttackConfig("random", att=0.0)
    assert random_attack(u, cfg, make_rng(0)).delta.values.tobytes() == u.delta.values.tobytes()
    cfg = AttackConfig("random", att=1.0, uniform_radius=0.0)
    np.testing.assert_array_equal(random_attack(u, cfg, make_rng(0)).delta.values, u.delta.values)
    # replay of the seeded draw sequence: one permutation, then D uniforms
    cfg = AttackConfig("random", att=1.0, uniform_radius=0.5, seed=9)
    replay = attack_rng(cfg, u.round, u.client_id)
    replay.permutation(4)
    expected = u.delta.values + replay.uniform(-0.5, 0.5, 4)
    np.testing.assert_array_equal(apply_attack(u, cfg).delta.values, expected)


def test_gaussian_attack_examples():
    u = upd(np.linspace(-1, 1, 6))
    cfg = AttackConfig("gaussian", att=1.0, gaussian_mu=0.0, gaussian_sigma=0.0)
    np.testing.assert_array_equal(gaussian_attack(u, cfg, make_rng(1)).delta.values, u.delta.values)
    cfg = AttackConfig("gaussian", att=1.0, gaussian_mu=0.25, gaussian_sigma=0.0)
    np.testing.assert_allclose(gaussian_attack(u, cfg, make_rng(1)).delta.values,
                               u.delta.values + 0.25, atol=1e-15)


def test_gaussian_attack_statistics():
    d, sigma = 10_000, 0.1
    u = upd(np.zeros(d))
    cfg = AttackConfig("gaussian", att=1.0, gaussian_mu=0.0, gaussian_sigma=sigma, seed=123)
    noise = apply_attack(u, cfg).delta.values
    assert abs(noise.mean()) <= 4 * sigma / np.sqrt(d)
    assert abs(noise.std() - sigma) <= 0.05 * sigma


def test_history_attack_examples():
    u = upd([0.5, -0.5, 1.0])
    cfg = AttackConfig("history", att=1.0, beta=2.0, history_depth=3)
    const = [np.ones(3)] * 4
    np.testing.assert_array_equal(history_attack(u, const, cfg, make_rng(0)).delta.values,
                                  u.delta.values)
    zero_beta = AttackConfig("history", att=1.0, beta=0.0, history_depth=3)
    ramp = [np.full(3, float(t)) for t in range(3)]
    np.testing.assert_array_equal(history_attack(u, ramp, zero_beta, make_rng(0)).delta.values,
                                  u.delta.values)
    np.testing.assert_array_equal(history_trend(ramp, 3), np.ones(3))
    np.testing.assert_array_equal(history_attack(u, ramp, cfg, make_rng(0)).delta.values,
                                  u.delta.values + 2.0)
    with pytest.raises(InsufficientHistory):
        history_attack(u, ramp[:2], cfg, make_rng(0))


def test_mpaf_attack_examples():
    u = upd([0.0, 0.0])
    cfg = AttackConfig("mpaf", att=1.0, beta=0.5)
    np.testing.assert_array_equal(mpaf_attack(u, [1.0, 1.0], [3.0, 5.0], cfg, make_rng(0)).delta.values,
                                  [1.0, 2.0])
    np.testing.assert_array_equal(mpaf_attack(u, [1.0, 1.0], [1.0, 1.0], cfg, make_rng(0)).delta.values,
                                  [0.0, 0.0])
    cfg0 = AttackConfig("mpaf", att=1.0, beta=0.0)
    np.testing.assert_array_equal(mpaf_attack(u, [1.0, 1.0], [3.0, 5.0], cfg0, make_rng(0)).delta.values,
                                  [0.0, 0.0])
    with pytest.raises(LengthMismatch):
        mpaf_attack(u, [1.0, 1.0], [3.0], cfg, make_rng(0))


def test_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig("laser").validate()
    with pytest.raises(ConfigError):
        AttackConfig("random", att=1.5).validate()
    with pytest.raises(ConfigError):
        AttackConfig("gaussian", gaussian_sigma=-1).validate()


@pytest.mark.parametrize("kind", KINDS)
def test_att_zero_is_bitwise_identity(kind):
    u = upd(np.random.default_rng(0).standard_normal(12))
    out = apply_attack(u, AttackConfig(kind, att=0.0), **context(12))
    assert out.delta.values.tobytes() == u.delta.values.tobytes()


@pytest.mark.parametrize("kind", KINDS)
@given(att=st.floats(0, 0.99), seed=st.integers(0, 1000))
def test_untouched_entries_unchanged(kind, att, seed):
    d = 15
    u = upd(np.random.default_rng(seed).standard_normal(d))
    cfg = AttackConfig(kind, att=att, seed=seed)
    out = apply_attack(u, cfg, **context(d, seed)).delta.values
    rng = attack_rng(cfg, u.round, u.client_id)
    idx = select_attacked_indices(d, att, rng)
    mask = np.ones(d, bool)
    mask[idx] = False
    assert out[mask].tobytes() == u.delta.values[mask].tobytes()


@pytest.mark.parametrize("kind", KINDS)
def test_deterministic_per_seed_round_client(kind):
    u = upd(np.zeros(20))
    cfg = AttackConfig(kind, att=0.6, seed=5)
    a = apply_attack(u, cfg, **context(20)).delta.values
    b = apply_attack(u, cfg, **context(20)).delta.values
    assert a.tobytes() == b.tobytes()
    if kind in ("random", "gaussian"):
        other = apply_attack(upd(np.zeros(20), rnd=4), cfg, **context(20)).delta.values
        assert not np.array_equal(a, other)


@pytest.mark.parametrize("kind", KINDS)
@given(seed=st.integers(0, 1000))
def test_perturbation_monotone_in_att(kind, seed):
    d = 30
    u = upd(np.random.default_rng(seed).standard_normal(d))
    ctx = context(d, seed)
    norms = [np.linalg.norm(apply_attack(u, AttackConfig(kind, att=a, seed=seed), **ctx).delta.values
                            - u.delta.values) for a in np.linspace(0, 1, 6)]
    assert all(x <= y + 1e-12 for x, y in zip(norms, norms[1:]))
