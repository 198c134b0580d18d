import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.interpolate import BSpline

from hetrl.basis import BasisSpec, FeatureContext, bspline_design_1d, parse_basis, phi, u_feature, z_feature
from hetrl.data import SoftmaxPolicy, TabularPolicy
from hetrl.errors import ConfigError, DomainError


class StubPolicy:
    def __init__(self, p):
        self.p = np.asarray(p, dtype=float)

    def probs(self, X):
        return np.tile(self.p, (np.atleast_2d(X).shape[0], 1))


def test_identity_without_intercept():
    np.testing.assert_array_equal(phi(BasisSpec(intercept=False), [1.25, 0.77]), [1.25, 0.77])


def test_identity_with_intercept():
    np.testing.assert_array_equal(phi(BasisSpec(), [1.25, 0.77]), [1.0, 1.25, 0.77])
    assert BasisSpec().n_basis(2) == 3


def test_hat_functions_by_hand():
    spec = BasisSpec("tensor_bspline", degree=1, knots=2, lo=(0.0,), hi=(1.0,))
    np.testing.assert_allclose(phi(spec, [0.25]), [0.5, 0.5, 0.0], atol=1e-15)


@pytest.mark.parametrize("degree,segments", [(1, 3), (2, 4), (3, 5), (3, 1)])
def test_cox_de_boor_matches_scipy(degree, segments):
    lo, hi = -1.3, 2.1
    x = np.linspace(lo, hi, 57)[:-1]
    t = np.r_[np.full(degree, lo), np.linspace(lo, hi, segments + 1), np.full(degree, hi)]
    ref = BSpline.design_matrix(x, t, degree).toarray()
    np.testing.assert_allclose(bspline_design_1d(x, lo, hi, segments, degree), ref, atol=1e-13)


def test_right_endpoint_is_included():
    B = bspline_design_1d(np.array([1.0]), 0.0, 1.0, 3, 2)
    np.testing.assert_allclose(B, [[0, 0, 0, 0, 1.0]], atol=1e-15)


def test_tensor_dimension_and_partition(rng):
    spec = BasisSpec("tensor_bspline", degree=3, knots=4, lo=(-2.0, -1.0), hi=(2.0, 3.0))
    assert spec.n_basis(2) == 49
    ctx = FeatureContext(spec, 2, 2)
    X = np.column_stack([rng.uniform(-2, 2, 100), rng.uniform(-1, 3, 100)])
    P = ctx.phi(X)
    assert P.shape == (100, 49)
    assert np.all(P >= 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)


def test_out_of_box_clamp_and_error():
    spec = BasisSpec("tensor_bspline", degree=2, knots=3, lo=(0.0,), hi=(1.0,))
    np.testing.assert_allclose(phi(spec, [5.0]), phi(spec, [1.0]))
    with pytest.raises(DomainError):
        phi(BasisSpec("tensor_bspline", degree=2, knots=3, lo=(0.0,), hi=(1.0,), clamp=False), [5.0])


def test_fit_box_from_data(rng):
    X = rng.standard_normal((50, 2))
    spec = BasisSpec("tensor_bspline").fit_box(X)
    assert np.all(np.array(spec.lo) < X.min(axis=0)) and np.all(np.array(spec.hi) > X.max(axis=0))


def test_parse_basis():
    assert parse_basis("identity") == BasisSpec()
    assert parse_basis("identity:intercept=false").intercept is False
    s = parse_basis("bspline:degree=2:knots=5")
    assert (s.kind, s.degree, s.knots) == ("tensor_bspline", 2, 5)
    for bad in ("wavelet", "bspline:order=3", "bspline:degree=x", "identity:foo=1", "bspline:degree"):
        with pytest.raises(ConfigError):
            parse_basis(bad)


def test_spec_json_round_trip():
    s = BasisSpec("tensor_bspline", degree=2, knots=3, lo=(0.0, 1.0), hi=(1.0, 2.0))
    assert BasisSpec.from_dict(s.to_dict()) == s


def test_z_layout():
    ctx = FeatureContext(BasisSpec(intercept=False), 2, 2)
    np.testing.assert_array_equal(z_feature(ctx, [1, 2], 1), [1, 2, 0, 0])
    np.testing.assert_array_equal(z_feature(ctx, [1, 2], 2), [0, 0, 1, 2])
    with pytest.raises(DomainError):
        z_feature(ctx, [1, 2], 3)


def test_u_uniform_and_deterministic():
    ctx = FeatureContext(BasisSpec(intercept=False), 2, 2)
    np.testing.assert_allclose(u_feature(ctx, TabularPolicy("uniform"), [1, 2]), [0.5, 1.0, 0.5, 1.0])
    np.testing.assert_allclose(u_feature(ctx, StubPolicy([1.0, 0.0]), [1, 2]), z_feature(ctx, [1, 2], 1))


@given(x=arrays(np.float64, 2, elements=st.floats(-5, 5)),
       alpha=arrays(np.float64, (2, 3), elements=st.floats(-3, 3)),
       a=st.integers(1, 3))
def test_u_is_policy_expectation_of_z(x, alpha, a):
    ctx = FeatureContext(BasisSpec("tensor_bspline", degree=2, knots=2, lo=(-5, -5), hi=(5, 5)), 2, 3)
    pol = SoftmaxPolicy(alpha)
    probs = pol.probs(x[None])[0]
    expect = sum(probs[k] * z_feature(ctx, x, k + 1) for k in range(3))
    np.testing.assert_allclose(u_feature(ctx, pol, x), expect, atol=1e-12)
    assert np.isclose(np.linalg.norm(z_feature(ctx, x, a)), np.linalg.norm(ctx.phi(x[None])[0]))


@given(x=arrays(np.float64, 3, elements=st.floats(-1, 1)), degree=st.integers(1, 3),
       knots=st.integers(1, 4))
def test_partition_of_unity_property(x, degree, knots):
    spec = BasisSpec("tensor_bspline", degree=degree, knots=knots, lo=(-1,) * 3, hi=(1,) * 3)
    v = phi(spec, x)
    assert v.shape == ((knots + degree) ** 3,)
    assert np.all(v >= -1e-15) and abs(v.sum() - 1) < 1e-10
    assert np.linalg.norm(v) <= 1.0 + 1e-12
