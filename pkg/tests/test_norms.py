import math

import numpy as np
import pytest

from dampwave.data import InitialDataSpec, make_initial_data
from dampwave.grid import ContractViolation, GridSpec, GridState
from dampwave.metric import MetricSpec
from dampwave.norms import (DyadicPartition, NormEvaluator, VectorFieldIndex, energy,
                            energy_order_m, energy_report, field_names, indices_up_to, le_norm,
                            vector_field_apply)
from dampwave.solver import SolverConfig, WaveOperator, run

FLAT = MetricSpec()


def small_run(grid=None, horizon=4.0, metric=FLAT):
    grid = grid or GridSpec("radial", 30.0, 301, 3)
    data, _ = make_initial_data(InitialDataSpec(eps=0.1), grid, 2.5)
    cfg = SolverConfig(p=2.5, mu=1.0, beta=2.0, horizon=horizon, nonlinearity_on=False)
    return grid, run(cfg, metric, grid, data)


# --- indices -------------------------------------------------------------------


def test_index_counts():
    assert field_names(3) == ["d1", "d2", "d3", "O12", "O13", "O23"]
    assert len(indices_up_to(3, 2)) == 28
    assert len(indices_up_to(2, 2)) == 10


def test_index_order_capped():
    with pytest.raises(ValueError):
        VectorFieldIndex((0, 1, 2))


# --- energy ----------------------------------------------------------------------


def test_zero_state_energy():
    grid = GridSpec("radial", 10.0, 101, 3)
    assert energy(GridState.zeros(grid), FLAT, grid) == 0.0


def test_unit_box_energy():
    grid = GridSpec("cartesian3d", 0.5, 16, 3, periodic=True)
    state = GridState(0.0, np.zeros(grid.shape), np.ones(grid.shape))
    assert energy(state, FLAT, grid) == pytest.approx(math.sqrt(0.5), rel=1e-14)


def test_blown_up_state_rejected():
    grid = GridSpec("radial", 10.0, 101, 3)
    bad = GridState(1.0, np.zeros(grid.shape), np.full(grid.shape, np.inf), blown_up=True)
    with pytest.raises(ValueError):
        energy(bad, FLAT, grid)
    with pytest.raises(ValueError):
        NormEvaluator(grid, 0).gradient_norms(bad)


def test_energy_quadrature_second_order():
    # u = exp(-r^2), v = 0 in R^3: E^2 = 1/2 int |grad u|^2 = 3 pi^(3/2) / 2^(5/2)
    exact = math.sqrt(3.0 * math.pi ** 1.5 / 2.0 ** 2.5)
    errs = []
    for pts in (51, 101, 201):
        grid = GridSpec("radial", 8.0, pts, 3)
        r = grid.axis()
        e = energy(GridState(0.0, np.exp(-r * r), np.zeros_like(r)), FLAT, grid)
        errs.append(abs(e - exact))
    for a, b in zip(errs, errs[1:]):
        assert 3.5 <= a / b <= 4.5


def test_energy_order_m_reductions():
    grid, out = small_run()
    ev = NormEvaluator(grid, 2)
    e0 = energy_order_m(out.trajectory, grid, 0)
    flat = max(float(ev.gradient_norms(s)[0]) for s in out.trajectory)
    assert e0 == pytest.approx(flat, rel=1e-14)
    e1 = energy_order_m(out.trajectory, grid, 1)
    e2 = energy_order_m(out.trajectory, grid, 2)
    assert e0 <= e1 <= e2
    zero = [GridState.zeros(grid, t) for t in (0.0, 1.0)]
    assert all(energy_order_m(zero, grid, m) == 0.0 for m in (0, 1, 2))


def test_norms_of_flat_field_equal_discrete_energy_scale():
    # flat metric: E = ||d u||_2 / sqrt 2 up to the staggered gradient
    grid, out = small_run()
    op = WaveOperator(grid, FLAT)
    ev = NormEvaluator(grid, 0)
    for s in out.trajectory[::10]:
        e = energy(s, op)
        assert math.sqrt(2.0) * e == pytest.approx(float(ev.gradient_norms(s)[0]), rel=2e-2)


# --- vector fields (Cartesian) ----------------------------------------------------


def cart(points=33, extent=2.0):
    return GridSpec("cartesian3d", extent, points, 3)


def test_d1_of_x1_is_one():
    g = cart()
    x1 = g.coords()[0] + 0.0 * g.radius()
    out = vector_field_apply(g, x1, VectorFieldIndex((0,)))
    np.testing.assert_allclose(out, 1.0, atol=1e-12)


def test_omega12_of_x1_is_minus_x2():
    g = cart()
    x1, x2, _ = (c + 0.0 * g.radius() for c in g.coords())
    out = vector_field_apply(g, x1, VectorFieldIndex((3,)))
    np.testing.assert_allclose(out, -x2, atol=1e-12)


def test_rotations_annihilate_radial_functions_second_order():
    sups = []
    for pts in (33, 65, 129):
        g = cart(pts, 3.0)
        u = np.exp(-g.radius() ** 2)
        sups.append(max(float(np.max(np.abs(vector_field_apply(g, u, VectorFieldIndex((f,))))))
                        for f in (3, 4, 5)))
    for a, b in zip(sups, sups[1:]):
        assert 3.5 <= a / b <= 4.5


def test_vector_fields_reject_radial_grid():
    g = GridSpec("radial", 5.0, 51, 3)
    with pytest.raises(ContractViolation):
        vector_field_apply(g, np.zeros(g.shape), VectorFieldIndex((3,)))


def test_radial_jets_agree_with_cartesian_differences():
    def norms(grid):
        r = grid.radius()
        s = GridState(0.0, np.exp(-r * r), 0.5 * np.exp(-r * r))
        return NormEvaluator(grid, 2).gradient_norms(s)

    ref = norms(GridSpec("radial", 4.0, 801, 3))
    diffs = []
    for pts in (33, 65):
        c = norms(GridSpec("cartesian3d", 4.0, pts, 3))
        diffs.append(np.max(np.abs(c - ref)) / np.max(ref))
    # the Cartesian side carries O(h^2) from composed centered differences
    assert diffs[1] < 0.05
    assert 3.5 <= diffs[0] / diffs[1] <= 4.5


# --- partition ---------------------------------------------------------------------


@pytest.mark.parametrize("grid", [GridSpec("radial", 120.0, 1201, 3),
                                  GridSpec("cartesian3d", 10.0, 41, 3)])
def test_partition_closure(grid):
    part = DyadicPartition.for_grid(grid)
    assert part.closure_error(grid.radius()) <= 1e-10
    assert 2 ** part.J >= grid.extent


def test_partition_supports():
    part = DyadicPartition(6)
    r = np.linspace(0.0, 200.0, 20001)
    jb = np.sqrt(1.0 + r * r)
    for j in range(1, 6):
        phi = part.phi(j, r)
        assert np.all(phi[(jb < 2.0 ** (j - 1)) | (jb > 2.0 ** (j + 1))] == 0.0)
    assert np.all(part.phi(0, r)[jb > 2.0] == 0.0)
    assert np.all(part.phi(6, r)[jb >= 64.0] == 1.0)


# --- local energy ------------------------------------------------------------------


def test_le_of_zero_trajectory():
    g = GridSpec("radial", 10.0, 101, 3)
    res = le_norm([GridState.zeros(g, t) for t in (0.0, 0.5, 1.0)], g)
    assert res.total == 0.0


def test_le_dominates_energy_and_is_monotone_in_m():
    grid, out = small_run()
    vals = []
    for m in (0, 1, 2):
        res = le_norm(out.trajectory, grid, m=m)
        assert res.total >= res.energy >= 0
        assert res.grad >= 0 and res.ru >= 0
        assert res.total >= energy_order_m(out.trajectory, grid, m)
        vals.append(res.total)
    assert vals[0] <= vals[1] <= vals[2]


def test_energy_report_columns_and_ordering(tmp_path):
    grid, out = small_run(metric=MetricSpec(delta1=0.2))
    rep = energy_report(out.trajectory, WaveOperator(grid, MetricSpec(delta1=0.2)))
    for e0, e1, e2 in zip(rep.E0, rep.E1, rep.E2):
        assert 0 <= e0 <= e1 <= e2
    assert all(b >= a for a, b in zip(rep.LE_total, rep.LE_total[1:]))
    path = tmp_path / "rep.csv"
    rep.write_csv(path)
    head = path.read_text().splitlines()[0]
    assert head == "t,E,E1,E2,LE_energy,LE_grad,LE_ru,LE_total"
