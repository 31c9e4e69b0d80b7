import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffsid import decay
from diffsid.autodiff import softmax_np
from diffsid.decay import FrqState, LevelNoise, SdudState


def test_sdud_loss_examples():
    assert decay.sdud_loss(0.0, 0.0, 1.0) == 0.0
    assert decay.sdud_loss(2.0, 0.0, 1.0) == 1.0


def test_sdud_loss_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        decay.sdud_loss(1.0, 0.0, -0.5)


@pytest.mark.parametrize("gen_loss,lam,want", [(4.0, 1.0, 1.0), (1.0, 1.0, 0.0), (0.25, 1.4, 0.0)])
def test_sdud_sigma_examples(gen_loss, lam, want):
    assert decay.sdud_sigma(gen_loss, lam) == want


def _central_diff(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


def test_sdud_sigma_is_stationary():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(50):
        gen_loss, lam = rng.uniform(0, 10), rng.uniform(0.1, 2.0)
        s = decay.sdud_sigma(gen_loss, lam)
        assert s == max(0.0, math.sqrt(gen_loss) - lam)
        if s > 0:
            d = _central_diff(lambda v: decay.sdud_loss(gen_loss, v, lam), s)
            assert abs(d) < 1e-6
            # the derivative changes sign across the stationary point
            h = 1e-3 * max(s, 1.0)
            assert _central_diff(lambda v: decay.sdud_loss(gen_loss, v, lam), s - min(h, s / 2)) < 0
            assert _central_diff(lambda v: decay.sdud_loss(gen_loss, v, lam), s + h) > 0
            checked += 1
    assert checked > 10


def test_sdud_step_follows_ema_trace():
    state = SdudState(lam=1.0, ema_decay=0.0)
    sigmas = []
    for loss in (9.0, 4.0, 1.0):
        state = decay.sdud_step(state, loss)
        sigmas.append(state.sigma)
    assert sigmas == [2.0, 1.0, 0.0]


def test_sdud_step_constant_loss_keeps_sigma():
    state = SdudState(lam=0.5)
    values = set()
    for _ in range(5):
        state = decay.sdud_step(state, 3.0)
        values.add(state.sigma)
    assert len(values) == 1


def test_sdud_sigma_hits_zero_and_stays():
    trace = [6.0, 5.0, 3.5, 2.5, 1.9, 1.5, 1.2, 1.0, 0.8, 0.7, 0.6, 0.5]
    state = SdudState(lam=1.4, ema_decay=0.5)
    sigmas = []
    for loss in trace:
        state = decay.sdud_step(state, loss)
        sigmas.append(state.sigma)
    first = next(i for i, s in enumerate(sigmas) if s == 0)
    assert math.sqrt(state.loss_ema) <= 1.4
    assert all(s == 0 for s in sigmas[first:])
    assert all(s > 0 for s in sigmas[:first])


def test_sdud_step_rejects_bad_loss():
    with pytest.raises(ValueError):
        decay.sdud_step(SdudState(), -1.0)
    with pytest.raises(ValueError):
        decay.sdud_step(SdudState(), float("nan"))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=20), st.floats(0.05, 3.0), st.floats(0, 0.99))
def test_sigma_non_increasing_under_falling_loss(losses, lam, ema_decay):
    losses = sorted(losses, reverse=True)
    state = SdudState(lam=lam, ema_decay=ema_decay)
    prev, prev_ema = math.inf, math.inf
    for loss in losses:
        state = decay.sdud_step(state, loss)
        assert state.sigma >= 0
        if state.loss_ema <= prev_ema:
            assert state.sigma <= prev
        prev_ema = state.loss_ema
        if math.sqrt(state.loss_ema) <= lam:
            assert state.sigma == 0
        prev = state.sigma


# -- FrqUD ----------------------------------------------------------------------


def test_frq_uniform_is_fixed_point():
    s = FrqState.uniform(3, 8)
    out = decay.frq_update(s, np.full((3, 8), 1 / 8))
    np.testing.assert_allclose(out.freqs, 1 / 8, atol=1e-15)


def test_frq_update_scalar_slot():
    s = FrqState(np.array([[0.0, 1.0]]), beta=0.25)
    out = decay.frq_update(s, np.array([[0.1, 0.9]]))
    assert out.freqs[0, 0] == pytest.approx(0.075, abs=1e-15)


def test_frq_update_rejects_negative():
    with pytest.raises(ValueError):
        decay.frq_update(FrqState.uniform(1, 2), np.array([[1.5, -0.5]]))


def test_frq_partition_example():
    s = FrqState(np.array([[0.5, 0.3, 0.1, 0.1]]), ratio=1.5)
    assert s.gamma == 0.375
    (hot, cold), = decay.frq_partition(s)
    assert hot.tolist() == [0]
    assert cold.tolist() == [1, 2, 3]


def test_frq_uniform_has_no_hot_codes():
    (hot, cold), = decay.frq_partition(FrqState.uniform(1, 16, ratio=1.2))
    assert hot.size == 0 and cold.size == 16


def test_frq_tiny_ratio_makes_every_used_code_hot():
    s = FrqState(np.array([[0.6, 0.4, 0.0]]), ratio=1e-12)
    (hot, _), = decay.frq_partition(s)
    assert hot.tolist() == [0, 1]


def _frq_oracle(f_prev, raw, beta, ratio):
    K = f_prev.shape[1]
    f = [[beta * a + (1 - beta) * b for a, b in zip(rp, rr)] for rp, rr in zip(f_prev.tolist(), raw.tolist())]
    gamma = ratio / K
    parts = [([i for i in range(K) if row[i] > gamma], [i for i in range(K) if not row[i] > gamma]) for row in f]
    return np.array(f), gamma, parts


def test_frq_algebra_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        levels, K = int(rng.integers(1, 4)), int(rng.integers(2, 40))
        f_prev = rng.dirichlet(np.full(K, 0.5), size=levels)
        raw = rng.dirichlet(np.full(K, 0.3), size=levels)
        beta, ratio = float(rng.uniform(0, 0.99)), float(rng.uniform(0.1, 3))
        out = decay.frq_update(FrqState(f_prev, beta, ratio), raw)
        f, gamma, parts = _frq_oracle(f_prev, raw, beta, ratio)
        assert out.freqs.tobytes() == f.tobytes()
        assert out.gamma == gamma
        for (hot, cold), (h2, c2) in zip(decay.frq_partition(out), parts):
            assert hot.tolist() == h2 and cold.tolist() == c2


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 30), st.floats(0, 0.99), st.floats(0.01, 4), st.integers(0, 2**31))
def test_frq_partition_properties(K, beta, ratio, seed):
    rng = np.random.default_rng(seed)
    s = FrqState(rng.dirichlet(np.ones(K), size=2), beta, ratio)
    s = decay.frq_update(s, rng.dirichlet(np.ones(K), size=2))
    np.testing.assert_allclose(s.freqs.sum(axis=1), 1.0, atol=1e-9)
    for hot, cold in decay.frq_partition(s):
        assert not set(hot) & set(cold)
        assert sorted([*hot, *cold]) == list(range(K))


def test_frq_probs_all_cold_is_plain_softmax():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 6))
    probs, code = decay.frq_probs(logits, np.zeros(6, bool), 2.0, rng.gumbel(size=(5, 6)))
    assert probs.tobytes() == softmax_np(logits / 2.0).tobytes()
    np.testing.assert_array_equal(code, logits.argmax(axis=1))


def test_frq_probs_all_hot_matches_gumbel_softmax():
    rng = np.random.default_rng(1)
    logits, g = rng.normal(size=(5, 6)), rng.gumbel(size=(5, 6))
    probs, _ = decay.frq_probs(logits, np.ones(6, bool), 2.0, g)
    np.testing.assert_array_equal(probs, decay.gumbel_softmax_probs(logits, None, 2.0, g))


def test_frq_probs_cold_dominant_code_wins():
    rng = np.random.default_rng(2)
    logits = np.tile([10.0, 0.0, 0.0], (10_000, 1))
    _, codes = decay.frq_probs(logits, np.array([False, True, True]), 2.0, rng.gumbel(size=logits.shape))
    assert np.mean(codes == 0) > 0.99


# -- Gumbel-softmax and hard assignment -----------------------------------------


def test_gumbel_softmax_zero_noise_examples():
    np.testing.assert_array_equal(decay.gumbel_softmax_probs(np.zeros(4), 0.0, 2.0, np.ones(4)), np.full(4, 0.25))
    np.testing.assert_allclose(decay.gumbel_softmax_probs([math.log(3), 0.0], 0.0, 1.0, [5.0, -1.0]), [0.75, 0.25])


def test_gumbel_softmax_rejects_temperature():
    with pytest.raises(ValueError):
        decay.gumbel_softmax_probs(np.zeros(3), None, 0.0, np.zeros(3))


def test_gumbel_max_frequencies_match_softmax():
    logits = np.array([1.0, 0.0, -0.5, 2.0])
    n = 100_000
    g = decay.standard_gumbel(decay.noise_stream(0, 1, 2), (n, 4))
    freq = np.bincount(decay.assign_hard(logits, g), minlength=4) / n
    p = softmax_np(logits)
    se = np.sqrt(p * (1 - p) / n)
    assert (np.abs(freq - p) < 3 * se).all()


def test_assign_hard_examples():
    assert decay.assign_hard([3.0, 1.0, 0.0], np.zeros(3)) == 0
    assert decay.assign_hard([2.0, 2.0, 0.0], np.zeros(3)) == 0


def test_assign_hard_matches_exhaustive_on_grid():
    grid = np.linspace(-2, 2, 9)
    for a in grid:
        for b in grid:
            want = 0 if a >= b else 1
            assert decay.assign_hard([a, b], [0.0, 0.0]) == want


def test_scaled_noise_has_requested_std():
    g = decay.standard_gumbel(decay.noise_stream(3), 200_000)
    s = decay.scale_gumbel(g, 0.7)
    assert abs(s.mean()) < 0.01
    assert abs(s.std() - 0.7) < 0.01
    assert not decay.scale_gumbel(g, 0.0).any()


def test_noise_stream_is_keyed():
    a = decay.standard_gumbel(decay.noise_stream(1, 2, 3), 5)
    b = decay.standard_gumbel(decay.noise_stream(1, 2, 3), 5)
    c = decay.standard_gumbel(decay.noise_stream(1, 2, 4), 5)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


# -- policy ------------------------------------------------------------------------


def test_policy_none_is_standard():
    d = decay.decay_policy("none", 3)
    assert d == decay.NoiseDirective.standard(3)
    assert not d.deterministic


def test_policy_sdud_zero_sigma_is_deterministic():
    assert decay.decay_policy("sdud", 3, sdud=SdudState(sigma=0.0)).deterministic


def test_policy_both_zero_sigma_with_hot_codes_is_deterministic():
    frq = FrqState(np.array([[0.9, 0.1], [0.9, 0.1]]))
    d = decay.decay_policy("both", 2, sdud=SdudState(sigma=0.0), frq=frq)
    assert decay.hot_masks(frq).any()
    assert d.deterministic


def test_policy_frqud_noise_only_on_hot_codes():
    frq = FrqState(np.array([[0.7, 0.1, 0.1, 0.1]]))
    d = decay.decay_policy("frqud", 1, frq=frq)
    g = d.levels[0].sample(np.ones((3, 4)))
    assert (g[:, 0] == 1.0).all()
    assert not g[:, 1:].any()


def test_policy_rejects_unknown_and_missing_state():
    with pytest.raises(ValueError):
        decay.decay_policy("warm", 2)
    with pytest.raises(ValueError):
        decay.decay_policy("sdud", 2)
    with pytest.raises(ValueError):
        decay.decay_policy("frqud", 2)


def test_inactive_level_noise_is_zero():
    assert not LevelNoise(active=False).sample(np.ones(4)).any()
