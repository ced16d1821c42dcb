import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dampwave.metric import (MetricField, MetricSpec, RejectedSpecError, check_decay,
                             default_decay_samples, hamiltonian, inverse_metric_at, random_rays,
                             trace_geodesics, trace_ray)

SHIPPED = [
    MetricSpec(),
    MetricSpec(delta1=0.1, rho1=1.0),
    MetricSpec(delta1=0.3, rho1=0.5, rho2=2.0),
    MetricSpec(delta1=-0.3, rho1=1.0),
    MetricSpec(delta1=0.2, delta2=0.1, center2=(1.0, 0.0, 0.0)),
]


def test_flat_metric_is_identity():
    ginv, sqrtg = inverse_metric_at(MetricSpec(), np.array([0.3, -2.0, 5.0]))
    np.testing.assert_array_equal(ginv, np.eye(3))
    assert sqrtg == 1.0


@pytest.mark.parametrize("n", [2, 3, 4])
def test_hand_inverse_at_origin(n):
    spec = MetricSpec(delta1=0.1, rho1=1.0, n=n)
    ginv, sqrtg = inverse_metric_at(spec, np.zeros(n))
    np.testing.assert_allclose(ginv, np.eye(n) / 1.1, rtol=1e-14)
    assert sqrtg == pytest.approx(1.1 ** (n / 2), rel=1e-14)
    np.testing.assert_allclose(MetricField(spec).metric(np.zeros(n)), 1.1 * np.eye(n), rtol=1e-14)


def test_perturbation_decays_far_out():
    f = MetricField(MetricSpec(delta1=0.1, rho1=1.0))
    far = np.array([1e9, 0.0, 0.0])
    assert np.max(np.abs(f.metric(far) - np.eye(3))) < 1e-9


@pytest.mark.parametrize("kwargs, message", [
    ({"rho2": 0.5}, "rho2 must exceed 1"),
    ({"rho1": -1.0}, "rho1 must be positive"),
    ({"rho1": 3.0, "rho2": 2.0}, "rho1 must be smaller than rho2"),
    ({"delta1": 0.7, "delta2": 0.4}, "positive definiteness"),
    ({"n": 5}, "n must be 2, 3 or 4"),
])
def test_rejected_specs(kwargs, message):
    with pytest.raises(RejectedSpecError, match=message):
        MetricSpec(**kwargs)


def test_rejection_lists_every_violation():
    with pytest.raises(RejectedSpecError) as err:
        MetricSpec(rho1=-1.0, rho2=0.5, delta1=2.0)
    text = str(err.value)
    assert "rho1 must be positive" in text
    assert "rho2 must exceed 1" in text
    assert "delta" in text


@pytest.mark.parametrize("spec", SHIPPED)
def test_symmetric_positive_definite_and_inverse(spec):
    rng = np.random.default_rng(1)
    x = rng.normal(scale=10.0, size=(10_000, spec.n))
    field = MetricField(spec)
    g = field.metric(x)
    gi = field.inverse(x)
    np.testing.assert_array_equal(g, np.swapaxes(g, -1, -2))
    assert np.all(np.linalg.eigvalsh(g) > 0)
    prod = np.einsum("...ij,...jk->...ik", gi, g)
    assert np.max(np.abs(prod - np.eye(spec.n))) <= 1e-12
    assert np.all(field.volume(x) > 0)


@settings(max_examples=50, deadline=None)
@given(d1=st.floats(-0.45, 0.45), d2=st.floats(-0.45, 0.45),
       x=st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_inverse_identity_random(d1, d2, x):
    spec = MetricSpec(delta1=d1, delta2=d2, center2=(0.5, -0.5, 0.0))
    ginv, sqrtg = inverse_metric_at(spec, np.array(x))
    g = MetricField(spec).metric(np.array(x))
    assert np.max(np.abs(ginv @ g - np.eye(3))) <= 1e-12
    assert sqrtg > 0


def test_decay_flat_is_zero():
    rep = check_decay(MetricSpec())
    assert all(v == 0.0 for v in rep.sups.values())
    assert rep.passed


def test_decay_order_zero_sup_is_delta1():
    radii = [2.0 ** k for k in range(7)]
    spec = MetricSpec(delta1=0.1, rho1=1.0)
    rep = check_decay(spec, 0, default_decay_samples(3, radii))
    assert rep.order_sup(1, 0) == pytest.approx(0.1, abs=1e-3)
    assert rep.passed


def test_decay_matches_closed_form_first_derivatives():
    # g1 = d1 <x>^-rho1, d_i g1 = -d1 rho1 x_i <x>^(-rho1-2); weighted by <x>^(1+rho1)
    # the sup of |x_i| / <x> over the axis samples approaches 64 / sqrt(1 + 64^2)
    spec = MetricSpec(delta1=0.1, rho1=1.0)
    rep = check_decay(spec, 1)
    expected = 0.1 * 64.0 / math.sqrt(1.0 + 64.0 ** 2)
    assert rep.order_sup(1, 1) == pytest.approx(expected, abs=1e-3)


def test_decay_gaussian_bump_is_stable_and_central():
    spec = MetricSpec(delta2=0.1, rho2=2.0, center2=(1.0, 0.0, 0.0))
    rep = check_decay(spec, 2)
    key = (2, ())
    assert math.isfinite(rep.sups[key])
    assert np.linalg.norm(rep.argmax[key] - np.array(spec.center2)) < 2.0
    assert rep.stable(key)
    assert rep.passed


def test_flat_geodesic_is_straight_line():
    x0, xi0 = np.array([1.0, 2.0, -1.0]), np.array([0.3, -0.4, 0.5])
    _, xs, xis = trace_ray(MetricSpec(), x0, xi0, 3.0, 0.01)
    np.testing.assert_allclose(xs[-1], x0 + 3.0 * xi0, atol=1e-12)
    np.testing.assert_allclose(xis[-1], xi0, atol=1e-14)


def test_geodesic_scaling_symmetry():
    spec = MetricSpec(delta1=0.3, rho1=1.0, delta2=0.2, center2=(0.5, 0.0, 0.0))
    x0, xi0 = np.array([1.0, 0.5, 0.0]), np.array([-1.0, 0.2, 0.1])
    _, xa, _ = trace_ray(spec, x0, xi0, 4.0, 0.002)
    _, xb, _ = trace_ray(spec, x0, 2.0 * xi0, 2.0, 0.001)
    np.testing.assert_allclose(xb[-1], xa[-1], atol=1e-9)


def test_hamiltonian_conserved_on_perturbed_ray():
    spec = MetricSpec(delta1=0.2, rho1=1.0)
    x0, xi0 = np.array([0.5, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    _, xs, xis = trace_ray(spec, x0, xi0, 20.0, 0.01)
    h = hamiltonian(spec, xs, xis)
    assert np.max(np.abs(h - h[0])) / h[0] < 1e-6


def test_nontrapping_probe_small_ensemble():
    spec = MetricSpec(delta1=0.2, rho1=1.0)
    rep = trace_geodesics(spec, random_rays(3, 64, seed=3))
    assert rep.escape_fraction == 1.0
    assert 0.0 <= rep.escape_fraction <= 1.0
    assert rep.max_h_drift <= 1e-6


def test_zero_covector_rejected():
    with pytest.raises(ValueError):
        trace_geodesics(MetricSpec(), [(np.zeros(3), np.zeros(3))])


def test_nonfinite_ray_is_inconclusive():
    spec = MetricSpec(delta1=0.2)
    rep = trace_geodesics(spec, [(np.array([0.0, 0.0, 0.0]), np.array([np.nan, 1.0, 0.0]))], t_max=1.0)
    assert rep.inconclusive[0]
    assert not rep.escaped[0]


def test_nontrapping_csv(tmp_path):
    rep = trace_geodesics(MetricSpec(), random_rays(3, 4, seed=0), t_max=100.0)
    path = tmp_path / "rays.csv"
    rep.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "index,escaped,escape_time,final_radius"
    assert len(lines) == 5
