import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdmpstop.exceptions import DomainError
from pdmpstop.model import (
    ModelConstants,
    cumulative_hazard,
    hazard_quadrature,
    make_example_model,
    sample_interjump,
)

MODEL = make_example_model()
NO_INVERSE = MODEL.__class__(**{**{k: getattr(MODEL, k) for k in MODEL.__dataclass_fields__}, "hazard": None, "inverse_hazard": None})


@settings(max_examples=60, deadline=None)
@given(x=st.floats(0.0, 0.999), frac=st.floats(0.0, 1.0))
def test_analytic_hazard_matches_quadrature(x, frac):
    t = frac * (1.0 - x)
    exact = cumulative_hazard(MODEL, x, t)
    assert exact == pytest.approx(1.5 * ((x + t) ** 2 - x**2), abs=1e-12)
    assert hazard_quadrature(MODEL, np.array([[x]]), np.array([t]))[0] == pytest.approx(exact, abs=1e-8)


def test_hazard_rejects_times_outside_flow_window():
    with pytest.raises(DomainError):
        cumulative_hazard(MODEL, 0.5, 0.6)
    with pytest.raises(DomainError):
        cumulative_hazard(MODEL, 0.5, -0.1)


def test_hazard_batch_shape():
    out = cumulative_hazard(MODEL, np.array([[0.0], [0.5]]), np.array([0.5, 0.5]))
    np.testing.assert_allclose(out, [0.375, 1.5 * (1.0 - 0.25)])


@settings(max_examples=60, deadline=None)
@given(x=st.floats(0.0, 0.99), e=st.floats(1e-6, 5.0))
def test_interjump_inverts_hazard(x, e):
    s, forced = sample_interjump(MODEL, x, e)
    tstar = 1.0 - x
    total = cumulative_hazard(MODEL, x, tstar)
    assert forced == (e >= total - 1e-12) or abs(e - total) < 1e-9
    if forced:
        assert s == tstar
    else:
        assert cumulative_hazard(MODEL, x, s) == pytest.approx(e, rel=1e-9, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(x=st.floats(0.0, 0.99), e=st.floats(1e-4, 3.0))
def test_generic_inversion_agrees_with_analytic(x, e):
    s1, f1 = sample_interjump(MODEL, x, e)
    s2, f2 = sample_interjump(NO_INVERSE, x, e)
    if abs(e - 1.5 * (1 - x * x)) > 1e-6:
        assert f1 == f2
        assert s2 == pytest.approx(s1, abs=1e-8)


def test_interjump_rejects_nonpositive_draw():
    with pytest.raises(ValueError):
        sample_interjump(MODEL, 0.2, 0.0)


def test_kernel_expectation():
    assert MODEL.kernel_expectation(lambda y: np.full(len(y), 0.3)) == pytest.approx(0.3)
    assert MODEL.kernel_expectation(lambda y: y[:, 0]) == pytest.approx(0.25)


def test_example_constants():
    c = MODEL.constants
    assert (c.C_lambda, c.lip_lambda, c.C_tstar, c.lip_tstar, c.lip_Q) == (3.0, 3.0, 1.0, 1.0, 0.0)
    assert (c.C_g, c.lip_g_1, c.lip_g_2, c.reward_lipschitz) == (1.0, 1.0, 1.0, 1.0)


@pytest.mark.parametrize("kwargs", [{"v": 0.0}, {"alpha": 0.5}, {"rate_beta": -1.0}])
def test_example_parameter_validation(kwargs):
    with pytest.raises(ValueError):
        make_example_model(**kwargs)


def test_constants_validation():
    base = MODEL.constants.as_dict()
    with pytest.raises(ValueError):
        ModelConstants(**{**base, "C_g": -1.0})
    with pytest.raises(ValueError):
        ModelConstants(**{**base, "C_lambda": 0.0})
    assert ModelConstants(**{**base, "lip_g": None}).reward_lipschitz == base["lip_g_1"]
