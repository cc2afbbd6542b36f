import math

import pytest
from hypothesis import given, settings, strategies as st

from physics_core import (ORIGIN, FieldState, ModelValidityError, PhysicalParams, Vec3,
                          coupling_at, coupling_gradient, critical_numbers, dipole_diffusion,
                          dressed_mode_frequencies, effective_atom_detuning, max_steady_excitation,
                          normal_mode_detunings, probe_dipole_force, signed_coupling, stark_shift_at,
                          trap_force, trap_potential, trap_power_nw, weak_drive_steady_state)
from utils import mhz_to_angular, mk_to_joule


def test_coupling_is_maximal_at_origin(params):
    """腔中心的耦合等于 g0"""
    assert coupling_at(ORIGIN, params) == pytest.approx(params.g0, rel=1e-15)
    node = Vec3(params.lambda_probe / 4.0, 0.0, 0.0)
    assert coupling_at(node, params) < 1e-9 * params.g0


def test_stark_shift_reference_depth(params):
    """1.6 mK 阱深在波腹处给出 2π×35 MHz 的 Stark 频移"""
    shift = stark_shift_at(ORIGIN, mk_to_joule(1.6), params)
    assert shift == pytest.approx(mhz_to_angular(35.0), rel=1e-12)
    assert effective_atom_detuning(0.0, shift, params) == pytest.approx(0.0, abs=1e-3)


def test_negative_depth_rejected(params):
    with pytest.raises(ValueError):
        stark_shift_at(ORIGIN, -1.0, params)
    with pytest.raises(ValueError):
        trap_force(ORIGIN, -1.0, params)


def test_trap_power_display_reference():
    assert trap_power_nw(mk_to_joule(1.6)) == pytest.approx(280.0, rel=1e-12)


def test_empty_cavity_transmission(params):
    """g=0 时同失谐归一透射为 1，共振归一透射为洛伦兹线型"""
    delta_c = mhz_to_angular(2.0)
    response = weak_drive_steady_state(0.0, delta_c, mhz_to_angular(10.0), 0.01 * params.kappa, params)
    assert response.transmission_rel == pytest.approx(1.0, rel=1e-12)
    expected = params.kappa ** 2 / (params.kappa ** 2 + delta_c ** 2)
    assert response.transmission == pytest.approx(expected, rel=1e-12)
    assert response.excitation == 0.0


def test_pinned_atom_on_resonance_suppresses_transmission(params):
    """Δc = Δa = 0、g = g0 时透射为 (κγ/(κγ+g0²))²"""
    response = weak_drive_steady_state(params.g0, 0.0, 0.0, 0.01 * params.kappa, params)
    ratio = params.kappa * params.gamma / (params.kappa * params.gamma + params.g0 ** 2)
    assert response.transmission == pytest.approx(ratio ** 2, rel=1e-12)
    assert response.transmission == pytest.approx(2.6e-4, rel=0.02)


@given(st.floats(min_value=1e3, max_value=4e6), st.floats(min_value=-2e8, max_value=2e8))
@settings(max_examples=50, deadline=None)
def test_transmission_independent_of_drive(eta, delta_c):
    """透射与驱动幅度无关，光子数按 η² 缩放"""
    params = PhysicalParams()
    g = 0.6 * params.g0
    delta_a = delta_c + mhz_to_angular(3.0)
    low = weak_drive_steady_state(g, delta_c, delta_a, eta, params)
    high = weak_drive_steady_state(g, delta_c, delta_a, 2.0 * eta, params)
    assert high.transmission == pytest.approx(low.transmission, rel=1e-10)
    assert high.transmission_rel == pytest.approx(low.transmission_rel, rel=1e-10)
    assert 0.0 <= low.transmission <= 1.0
    assert high.photon_number == pytest.approx(4.0 * low.photon_number, rel=1e-10)


def test_steady_state_argument_validation(params):
    with pytest.raises(ValueError):
        weak_drive_steady_state(-1.0, 0.0, 0.0, 1.0, params)
    with pytest.raises(ValueError):
        weak_drive_steady_state(params.g0, 0.0, 0.0, -1.0, params)


def test_strong_drive_leaves_model_validity(params):
    with pytest.raises(ModelValidityError):
        weak_drive_steady_state(params.g0, 0.0, 0.0, mhz_to_angular(50.0), params)
    with pytest.raises(ModelValidityError):
        FieldState(0j, 0.8 + 0j)


def test_dressed_modes_split_by_coupling(params):
    lower, upper = dressed_mode_frequencies(params.g0, 0.0)
    assert (lower, upper) == (-params.g0, params.g0)
    lo, hi = normal_mode_detunings(params.g0, params.delta_a0, params)
    assert lo == pytest.approx(-params.g0, rel=1e-12)
    assert hi == pytest.approx(params.g0, rel=1e-12)


def test_normal_modes_follow_avoided_crossing(params):
    """原子-腔失谐 δ 偏离零时一个模靠近腔频，另一个跟随原子"""
    delta = mhz_to_angular(8.0)
    lo, hi = normal_mode_detunings(params.g0, params.delta_a0 + delta, params)
    assert hi - lo == pytest.approx(2.0 * math.hypot(params.g0, delta / 2.0), rel=1e-12)
    assert lo + hi == pytest.approx(delta, rel=1e-12)


def test_critical_numbers(params):
    n0, big_n0 = critical_numbers(params)
    assert n0 == pytest.approx(1.0 / 57.0, rel=0.01)
    assert big_n0 == pytest.approx(1.0 / 30.0, rel=0.02)


def test_default_drive_stays_weak(params):
    """默认驱动幅度在整个探测失谐与耦合网格上满足激发上限"""
    delta_cs = [mhz_to_angular(f) for f in range(-28, 29, 4)]
    worst = max_steady_excitation(params, mhz_to_angular(0.44), delta_cs, params.delta_a0)
    assert 0.0 < worst < 0.014


def _central_difference(func, point, axis, h):
    plus = list(point)
    minus = list(point)
    plus[axis] += h
    minus[axis] -= h
    return (func(Vec3(*plus)) - func(Vec3(*minus))) / (2.0 * h)


_positions = st.tuples(st.floats(min_value=-3e-6, max_value=3e-6),
                       st.floats(min_value=-5e-5, max_value=5e-5),
                       st.floats(min_value=-5e-5, max_value=5e-5))


@given(_positions)
@settings(max_examples=100, deadline=None)
def test_coupling_gradient_matches_finite_difference(point):
    """任意位置的解析 ∇g 与中心差分一致"""
    params = PhysicalParams()
    grad = coupling_gradient(Vec3(*point), params)
    tolerance = 1e-6 * params.g0 * params.k_probe
    for axis in range(3):
        numeric = _central_difference(lambda r: signed_coupling(r, params), point, axis, 1e-11)
        assert abs(grad[axis] - numeric) < tolerance


@given(_positions)
@settings(max_examples=100, deadline=None)
def test_trap_force_is_negative_potential_gradient(point):
    """任意位置的光阱力等于势能的负梯度"""
    params = PhysicalParams()
    depth = mk_to_joule(1.6)
    force = trap_force(Vec3(*point), depth, params)
    tolerance = 1e-6 * depth * params.k_trap
    for axis in range(3):
        numeric = -_central_difference(lambda r: trap_potential(r, depth, params), point, axis, 1e-11)
        assert abs(force[axis] - numeric) < tolerance


def test_probe_force_and_diffusion_vanish_at_antinode(params):
    field = FieldState(0.3 + 0.1j, 0.05j)
    assert probe_dipole_force(ORIGIN, field, params) == Vec3(0.0, 0.0, 0.0)
    assert dipole_diffusion(ORIGIN, field, 0.0, params) == 0.0
    off = Vec3(params.lambda_probe / 8.0, 0.0, 0.0)
    assert dipole_diffusion(off, field, 0.0, params) > 0.0


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        PhysicalParams(g0=mhz_to_angular(1.0))
    with pytest.raises(ValueError):
        PhysicalParams(lambda_trap=770e-9)
    with pytest.raises(ValueError):
        PhysicalParams(kappa=-1.0)
