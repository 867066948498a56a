"""Parameter-chart round trips and the natural-gradient identity check."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mogvi.distributions import DiagGaussian, RngStream
from mogvi.models import make_conjugate_target
from mogvi.natparams import (
    ExpectationParams,
    NaturalParams,
    from_expectation,
    from_natural,
    natgrad_check,
    to_expectation,
    to_natural,
)

mean_st = st.floats(-5, 5)
var_st = st.floats(0.05, 10.0)


def test_natural_param_values():
    g = DiagGaussian([2.0], [0.5])
    p = to_natural(g)
    np.testing.assert_allclose(p.eta1, [4.0])
    np.testing.assert_allclose(p.eta2, [-1.0])


def test_expectation_param_values():
    g = DiagGaussian([2.0], [0.5])
    p = to_expectation(g)
    np.testing.assert_allclose(p.m1, [2.0])
    np.testing.assert_allclose(p.m2, [4.5])


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        NaturalParams([1.0], [0.0])
    with pytest.raises(ValueError):
        ExpectationParams([2.0], [4.0])  # m2 - m1^2 = 0


@settings(deadline=None, max_examples=50)
@given(mean=mean_st, var=var_st)
def test_natural_round_trip(mean, var):
    g = DiagGaussian([mean], [var])
    back = from_natural(to_natural(g))
    np.testing.assert_allclose(back.mean, g.mean, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(back.variance, g.variance, rtol=1e-12)


@settings(deadline=None, max_examples=50)
@given(mean=mean_st, var=var_st)
def test_expectation_round_trip(mean, var):
    g = DiagGaussian([mean], [var])
    back = from_expectation(to_expectation(g))
    np.testing.assert_allclose(back.mean, g.mean, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(back.variance, g.variance, rtol=1e-9)


@settings(deadline=None, max_examples=30)
@given(mean=mean_st, var=var_st)
def test_chart_composition(mean, var):
    g = DiagGaussian([mean], [var])
    back = from_expectation(to_expectation(from_natural(to_natural(g))))
    np.testing.assert_allclose(back.mean, g.mean, atol=1e-10)
    np.testing.assert_allclose(back.variance, g.variance, rtol=1e-9)


def test_natgrad_check_agrees_on_conjugate_target():
    model = make_conjugate_target([0.7], [0.6])
    rep = natgrad_check(model, DiagGaussian([0.3], [0.8]), 200, RngStream(0, (1,)))
    assert rep.max_rel_discrepancy < 1e-6
    assert rep.fim_identity_residual < 1e-10
    # Quadrature and MC ELBO should be in the same ballpark.
    assert abs(rep.quad_elbo - rep.mc_elbo) < 0.5


def test_natgrad_check_refuses_high_dimensions():
    model = make_conjugate_target([0.0, 0.0, 0.0], [0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        natgrad_check(model, DiagGaussian(np.zeros(3), np.ones(3)), 10,
                      RngStream(0, (2,)))
