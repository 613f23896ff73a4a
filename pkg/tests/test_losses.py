import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twa.losses import (
    cross_entropy_loss,
    dpo_loss,
    log1mexp,
    nl_span_loss,
    twa_error_span_loss,
    twa_non_error_span_loss,
    twa_seq_baseline_loss,
    twa_sequence_loss,
)
from twa.tokenize_align import TokenWeightVector, group_spans

# reference values below were evaluated with mpmath at 50 digits
LOG1MEXP_1E9 = -20.723265837446411156
LOG1MEXP_50 = -1.9287498479639177830e-22


def weights(ws):
    ws = np.asarray(ws, dtype=np.float64)
    return TokenWeightVector(ws, group_spans(ws))


def central_diff(f, x, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        up, dn = x.copy(), x.copy()
        up.flat[i] += eps
        dn.flat[i] -= eps
        g.flat[i] = (f(up) - f(dn)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)


class TestLog1mexp:
    def test_symmetry_point(self):
        assert log1mexp(-math.log(2)) == pytest.approx(-math.log(2), rel=1e-15)

    def test_near_zero(self):
        assert log1mexp(-1e-9) == pytest.approx(LOG1MEXP_1E9, rel=1e-12)

    def test_far_tail(self):
        assert log1mexp(-50.0) == pytest.approx(LOG1MEXP_50, rel=1e-12)

    @pytest.mark.parametrize("s", [0.0, 1.0])
    def test_domain(self, s):
        with pytest.raises(ValueError):
            log1mexp(s)


class TestErrorSpanLoss:
    def test_half_probability(self):
        rep = twa_error_span_loss([math.log(0.5)], -1.0)
        assert rep.value == pytest.approx(math.log(2), rel=1e-14)

    def test_vanishing_probability(self):
        assert twa_error_span_loss([-200.0], -1.0).value == pytest.approx(0.0, abs=1e-80)

    def test_linear_in_weight(self):
        lp = [-0.3, -1.2]
        assert twa_error_span_loss(lp, -5.0).value == pytest.approx(
            5 * twa_error_span_loss(lp, -1.0).value, rel=1e-14)

    def test_clamp_keeps_finite(self):
        rep = twa_error_span_loss([0.0, 0.0], -1.0)
        assert np.isfinite(rep.value) and np.all(np.isfinite(rep.grad_logp))
        assert rep.value == pytest.approx(-math.log(-math.expm1(-1e-7)))

    def test_gradient_broadcast_equal(self):
        rep = twa_error_span_loss([-0.1, -0.7, -0.2], -1.0)
        assert np.all(rep.grad_logp == rep.grad_logp[0])

    @given(st.floats(-20, -1e-3), st.floats(-20, -1e-3), st.floats(0.05, 5))
    def test_monotone(self, s1, s2, w):
        lo, hi = sorted([s1, s2])
        if hi - lo > 1e-6:
            assert twa_error_span_loss([lo], -w).value < twa_error_span_loss([hi], -w).value
        assert twa_error_span_loss([hi], -w * 1.5).value > twa_error_span_loss([hi], -w).value


class TestNonErrorAndSequence:
    def test_off_trajectory_zero(self):
        rep = twa_non_error_span_loss([-1.0, -2.0], off_trajectory=True)
        assert rep.value == 0.0 and not rep.grad_logp.any()

    def test_on_trajectory_sum(self):
        rep = twa_non_error_span_loss(np.log([0.5, 0.25]), off_trajectory=False)
        assert rep.value == pytest.approx(2.0794415416798359, rel=1e-14)

    def test_perfect_tokens(self):
        assert twa_non_error_span_loss([0.0, 0.0], False).value == 0.0

    def test_all_ones_is_cross_entropy(self):
        lp = np.log([0.3, 0.9, 0.6, 0.2])
        rep = twa_sequence_loss(weights([1, 1, 1, 1]), lp)
        ce = cross_entropy_loss(lp)
        assert rep.value == ce.value
        assert np.array_equal(rep.grad_logp, ce.grad_logp)

    def test_hand_example(self):
        rep = twa_sequence_loss(weights([1, -1, 0]), np.log([0.9, 0.2, 0.7]))
        assert rep.value == pytest.approx(0.32850406697203598, rel=1e-13)
        assert rep.grad_logp[2] == 0.0

    def test_error_only_major(self):
        rep = twa_sequence_loss(weights([-5, -5]), np.log([0.5, 0.4]))
        assert rep.value == pytest.approx(1.1157177565710485, rel=1e-13)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            twa_sequence_loss(weights([1, 1]), [-0.1])

    def test_ignore_drops_error_spans(self):
        lp = np.log([0.9, 0.2, 0.7])
        rep = twa_sequence_loss(weights([1, -1, 1]), lp, error_loss="ignore")
        assert rep.value == pytest.approx(-math.log(0.9) - math.log(0.7))
        assert rep.grad_logp[1] == 0.0


class TestNL:
    def test_zero_span(self):
        rep = nl_span_loss([0.0], -1.0)
        assert rep.value == 0.0 and rep.grad_logp[0] == 1.0

    def test_product(self):
        assert nl_span_loss([-2.0], -5.0).value == -10.0

    def test_unscaled(self):
        assert nl_span_loss([-2.0], -5.0, scaled=False).value == -2.0

    def test_ul_self_limits_where_nl_does_not(self):
        for s in (-5.0, -20.0, -60.0):
            ul = twa_error_span_loss([s], -5.0).grad_logp[0]
            nl = nl_span_loss([s], -5.0).grad_logp[0]
            assert nl == 5.0
            assert ul < 5.0 * math.exp(s) * 1.01
        assert twa_error_span_loss([-60.0], -5.0).grad_logp[0] < 1e-25


class TestSeqBaselineAndDPO:
    def test_error_free_is_ce(self):
        lp = np.log([0.5, 0.5])
        assert twa_seq_baseline_loss(False, lp).value == cross_entropy_loss(lp).value

    def test_errored_single_token(self):
        assert twa_seq_baseline_loss(True, [math.log(0.5)]).value == pytest.approx(math.log(2))

    def test_errored_vanishing(self):
        assert twa_seq_baseline_loss(True, [-300.0]).value == pytest.approx(0.0, abs=1e-100)

    def test_dpo_symmetry(self):
        assert dpo_loss(-3.0, -3.0, -1.0, -1.0).value == pytest.approx(math.log(2), rel=1e-15)

    @given(st.floats(-50, 0), st.floats(-50, 0))
    def test_dpo_antisymmetry_point(self, a, b):
        assert dpo_loss(a, a, b, b).value == pytest.approx(math.log(2), rel=1e-12)

    def test_dpo_saturation(self):
        assert dpo_loss(0.0, -1e4, 0.0, 0.0, beta=0.1).value < 1e-100

    def test_dpo_beta_point_one(self):
        assert dpo_loss(-1.0, -2.0, -1.0, -1.0, beta=0.1).value == pytest.approx(
            0.64439666007357089, rel=1e-14)


# --- gradient oracle: central differences on the log-probabilities -----------

def _random_instance(rng):
    n = int(rng.integers(1, 8))
    lp = np.log(rng.uniform(0.02, 0.98, size=n))
    ws = rng.choice([1.0, 0.0, -0.1, -1.0, -5.0], size=n)
    return lp, ws


@pytest.mark.parametrize("name", [
    "error_span", "non_error", "sequence_ul", "sequence_nl", "nl", "seq_baseline", "dpo"])
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(123)
    for _ in range(100):
        lp, ws = _random_instance(rng)
        w = -float(rng.choice([0.1, 1.0, 5.0]))
        has_error = bool(rng.integers(0, 2))
        if name == "error_span":
            f = lambda x: twa_error_span_loss(x, w)  # noqa: E731
        elif name == "non_error":
            f = lambda x: twa_non_error_span_loss(x, False)  # noqa: E731
        elif name == "sequence_ul":
            f = lambda x: twa_sequence_loss(weights(ws), x)  # noqa: E731
        elif name == "sequence_nl":
            f = lambda x: twa_sequence_loss(weights(ws), x, error_loss="nl")  # noqa: E731
        elif name == "nl":
            f = lambda x: nl_span_loss(x, w)  # noqa: E731
        elif name == "seq_baseline":
            f = lambda x: twa_seq_baseline_loss(has_error, x)  # noqa: E731
        else:
            ref = np.log(rng.uniform(0.01, 1, size=2))
            beta = float(rng.uniform(0.05, 2))
            lp = np.log(rng.uniform(0.01, 1, size=2))
            f = lambda x: dpo_loss(x[0], x[1], ref[0], ref[1], beta)  # noqa: E731
        num = central_diff(lambda x: f(x).value, lp)
        assert rel_err(f(lp).grad_logp, num) < 1e-5


def test_zero_weight_tokens_get_zero_gradient():
    rng = np.random.default_rng(5)
    for _ in range(200):
        lp, ws = _random_instance(rng)
        for mode in ("ul", "nl", "ignore"):
            g = twa_sequence_loss(weights(ws), lp, error_loss=mode).grad_logp
            assert not g[ws == 0].any()


@settings(max_examples=50)
@given(st.lists(st.floats(-10, -1e-3), min_size=1, max_size=6))
def test_sequence_without_errors_is_ce(lp):
    lp = np.asarray(lp)
    assert twa_sequence_loss(weights(np.ones(len(lp))), lp).value == cross_entropy_loss(lp).value
