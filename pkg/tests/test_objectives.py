import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mclext.errors import ConfigError, DataError
from mclext.numerics import Tensor, grad_check
from mclext.objectives import (
    LossConfig,
    energy_suppression_ratio,
    improvement,
    log_mse,
    log_mse_db,
    score_utterance,
    si_sdr,
    si_sdr_db,
    snr,
    summarize,
)


def oracle_si_sdr(est, ref):
    """Independent route: project with a least-squares solve, no eps."""
    alpha = np.linalg.lstsq(ref[:, None], est, rcond=None)[0][0]
    target = alpha * ref
    return 10 * np.log10(np.dot(target, target) / np.dot(est - target, est - target))


def test_hand_values():
    # alpha = 1, projection [1,0,0,0], residual [0,1,0,0]: ratio 1 (the eps term shifts it by ~4e-8 dB)
    assert si_sdr([1.0, 1, 0, 0], [1.0, 0, 0, 0]) == pytest.approx(0.0, abs=1e-7)
    assert snr([2.0, 0], [1.0, 0]) == pytest.approx(0.0, abs=1e-7)
    assert snr([1.0, 0], [1.0, 0]) == pytest.approx(80.0)


def test_matches_oracle(rng):
    for _ in range(20):
        s = rng.standard_normal(300)
        est = s + 0.3 * rng.standard_normal(300)
        assert si_sdr(est, s) == pytest.approx(oracle_si_sdr(est, s), abs=1e-6)


def test_perfect_estimate_is_eps_capped(rng):
    s = rng.standard_normal(100)
    assert si_sdr(s, s) == pytest.approx(80.0, abs=1e-9)
    assert si_sdr(3 * s, s, eps=1e-6) == pytest.approx(60.0, abs=1e-9)


@given(st.integers(0, 1000), st.floats(-3, 3))
def test_scale_invariance(seed, log_scale):
    r = np.random.default_rng(seed)
    s = r.standard_normal(256)
    est = s + r.standard_normal(256)
    k = 10.0 ** log_scale
    a, b = si_sdr(est, s), si_sdr(k * est, s)
    assert abs(a - b) <= 1e-6 * max(1.0, abs(a))


def test_zero_target_errors():
    with pytest.raises(DataError):
        si_sdr(np.ones(4), np.zeros(4))
    with pytest.raises(DataError):
        snr(np.ones(4), np.zeros(4))
    with pytest.raises(DataError):
        si_sdr(np.ones(4), np.ones(5))


def test_log_mse_silent_branch(rng):
    y = rng.standard_normal(400)
    tau = LossConfig(snr_max_db=30).tau
    assert tau == pytest.approx(1e-3)
    val = log_mse(np.zeros(400), np.zeros(400), y, tau)
    assert abs(val - (-30.0 + 10 * np.log10(np.sum(y ** 2)))) < 1e-9


def test_log_mse_positive_branch(rng):
    s = rng.standard_normal(400)
    est = s + 0.1 * rng.standard_normal(400)
    y = rng.standard_normal(400)
    expected = 10 * np.log10(np.sum((s - est) ** 2) + 1e-3 * np.sum(s ** 2))
    assert log_mse(s, est, y, 1e-3) == pytest.approx(expected, abs=1e-12)
    # a perfect estimate bottoms out at the soft threshold
    assert log_mse(s, s, y, 1e-3) == pytest.approx(-30 + 10 * np.log10(np.sum(s ** 2)), abs=1e-9)


def test_log_mse_degenerate_pair():
    with pytest.raises(DataError):
        log_mse(np.zeros(4), np.ones(4), np.zeros(4), 1e-3)


def test_improvement_identity(rng):
    s = rng.standard_normal(200)
    y = s + rng.standard_normal(200)
    assert improvement(si_sdr, y, s, y) == 0.0
    assert improvement(snr, y, s, y) == 0.0


def test_esr(rng):
    y = rng.standard_normal(100)
    assert energy_suppression_ratio(y, 0.1 * y) == pytest.approx(20.0, abs=1e-6)
    with pytest.raises(DataError):
        energy_suppression_ratio(np.zeros(5), np.ones(5))


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(kind="l1")


def test_differentiable_losses_match_and_grad(rng):
    s = rng.standard_normal((3, 50))
    s[1] = 0.0
    x = s + 0.5 * rng.standard_normal((3, 50))
    y = rng.standard_normal((3, 50))
    np.testing.assert_allclose(log_mse_db(x, s, y, 1e-3).value, log_mse(s, x, y, 1e-3), rtol=1e-12)
    np.testing.assert_allclose(si_sdr_db(x[[0, 2]], s[[0, 2]]).value, si_sdr(x[[0, 2]], s[[0, 2]]), rtol=1e-12)
    assert grad_check(lambda e: log_mse_db(e, s, y, 1e-3), [x]).passed
    rep = grad_check(lambda e: si_sdr_db(e, s[[0, 2]]), [Tensor(x[[0, 2]])])
    assert rep.passed, rep


def test_score_and_summary(rng):
    s = rng.standard_normal(100)
    y = s + rng.standard_normal(100)
    pos = score_utterance("a", "positive", s, s, y)
    neg = score_utterance("b", "negative", 0.01 * y, np.zeros(100), y)
    assert pos.si_sdr == pytest.approx(80.0, abs=1e-9)
    assert neg.si_sdri is None and neg.esr == pytest.approx(40.0, abs=1e-4)
    summary = summarize([pos, neg])
    assert summary["n_positive"] == 1 and summary["n_negative"] == 1
    assert summary["esr_mean"] == pytest.approx(neg.esr)
    only_neg = summarize([neg])
    assert only_neg["si_sdri_mean"] is None and only_neg["esr_mean"] is not None
    assert json.loads(pos.to_json())["id"] == "a"
