import io

import numpy as np
import pytest

from noiselab.errors import ConfigError
from noiselab.schedules import (
    SCHEDULE_NAMES,
    Schedule,
    build_schedule,
    ddpm_coefficients,
    dump_csv,
)

NAMED = ("cosine", "sigmoid1", "sigmoid2", "sigmoid3")


@pytest.mark.parametrize("name", NAMED)
def test_schedule_invariants(name):
    s = build_schedule(name, 1000)
    assert np.all(s.beta > 0) and np.all(s.beta < 1)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0), "alpha_bar must strictly decrease"
    assert s.alpha_bar[-1] < 1e-3
    np.testing.assert_allclose(
        s.alpha_bar[1:], np.cumprod(1.0 - s.beta), rtol=0, atol=1e-12
    )


@pytest.mark.parametrize("name", NAMED)
def test_noise_coefficient_starts_at_zero_and_increases(name):
    s = build_schedule(name, 500)
    c = s.noise_coefficient()
    assert c[0] == 0.0
    assert np.all(np.diff(c) > 0)


def test_cosine_standard_offset_mixes_fully():
    s = build_schedule("cosine", 1000)
    assert s.alpha_bar[-1] < 1e-3


def test_sigmoid_family_flatter_near_zero_than_cosine():
    T = 1000
    cos = build_schedule("cosine", T).noise_coefficient()
    s2 = build_schedule("sigmoid2", T).noise_coefficient()
    s3 = build_schedule("sigmoid3", T).noise_coefficient()
    early = slice(1, T // 10 + 1)  # t/T in (0, 0.1]
    assert np.all(s2[early] < cos[early])
    assert np.all(s3[early] <= s2[early])


def test_flat_tail_integral_ordering():
    T = 1000
    k = T // 20  # first 5% of steps
    tails = {
        name: build_schedule(name, T).noise_coefficient()[: k + 1].sum()
        for name in ("cosine", "sigmoid2", "sigmoid3")
    }
    assert tails["sigmoid2"] < tails["cosine"]
    assert tails["sigmoid3"] < tails["cosine"]


def test_unknown_name_rejected():
    with pytest.raises(ConfigError):
        build_schedule("mystery", 100)
    with pytest.raises(ConfigError):
        build_schedule("cosine", 1)


class TestDdpmCoefficients:
    def test_final_step_deterministic(self):
        s = build_schedule("cosine", 100)
        assert ddpm_coefficients(s, 1).posterior_variance == 0.0

    @pytest.mark.parametrize("name", NAMED)
    def test_pythagorean_identity(self, name):
        s = build_schedule(name, 200)
        for t in range(1, 201, 17):
            co = ddpm_coefficients(s, t)
            assert (
                abs(co.sqrt_alpha_bar**2 + co.sqrt_one_minus_alpha_bar**2 - 1.0)
                < 1e-12
            )

    def test_hand_built_three_step(self):
        s = Schedule(name="linear", T=3, beta=np.array([0.1, 0.2, 0.3]))
        np.testing.assert_allclose(s.alpha_bar, [1.0, 0.9, 0.72, 0.504], atol=1e-15)
        co = ddpm_coefficients(s, 2)
        np.testing.assert_allclose(
            co.posterior_variance, (1 - 0.9) / (1 - 0.72) * 0.2, atol=1e-15
        )
        np.testing.assert_allclose(co.mean_coef_x, 1 / np.sqrt(0.8), atol=1e-15)
        np.testing.assert_allclose(
            co.mean_coef_eps, 0.2 / (np.sqrt(1 - 0.72) * np.sqrt(0.8)), atol=1e-15
        )

    def test_out_of_range_t(self):
        s = build_schedule("cosine", 10)
        for t in (0, 11):
            with pytest.raises(ConfigError):
                ddpm_coefficients(s, t)


def test_dump_csv_columns():
    s = build_schedule("sigmoid2", 10)
    buf = io.StringIO()
    dump_csv(s, buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "t,beta,alpha_bar,c_t"
    assert len(lines) == 12  # header + t=0 row + 10 steps
    assert lines[1].startswith("0,")


def test_all_names_buildable():
    for name in SCHEDULE_NAMES:
        build_schedule(name, 50)
