import numpy as np
import pytest

from lesionlab.schedules import ScheduleError, build_schedule


def test_linear_single_step():
    s = build_schedule("linear", 1)
    assert s.T == 1
    assert s.alpha_bar(1) == pytest.approx(1.0 - s.beta(1))


def test_cosine_long_schedule_shape():
    s = build_schedule("cosine", 1000)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bar(1000) < 0.01
    assert abs(s.alpha_bar(0) - 1.0) < 1e-4


def test_coefficients_in_unit_interval():
    for kind in ("linear", "cosine"):
        s = build_schedule(kind, 50)
        assert np.all(s.betas > 0) and np.all(s.betas < 1)
        assert np.all(s.alphas > 0) and np.all(s.alphas <= 1)
        assert np.all(s.alpha_bars > 0) and np.all(s.alpha_bars <= 1)


def test_invalid_T_and_kind():
    with pytest.raises(ScheduleError):
        build_schedule("linear", 0)
    with pytest.raises(ScheduleError):
        build_schedule("sigmoid", 10)


def test_posterior_variance_zero_at_first_step():
    s = build_schedule("cosine", 10)
    assert s.posterior_variance(1) == 0.0
    assert s.posterior_variance(5) > 0.0


def test_t_range_checked():
    s = build_schedule("linear", 10)
    with pytest.raises(ScheduleError):
        s.beta(11)
    with pytest.raises(ScheduleError):
        s.alpha_bar(-1)
