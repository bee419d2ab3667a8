"""Deterministic flow: conservation, convergence orders, the Picard oracle and growth delays."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdnls.dissipation import g_tilde_inv
from fdnls.flows import (
    FlowConfig,
    IntegrationError,
    PicardDivergence,
    Trajectory,
    calibrate_local_time,
    energy,
    evolve,
    growth_delay,
    local_existence_time,
    mass,
    mass_drift,
    picard_solve,
    trajectory_csv,
)
from fdnls.spectral import TorusSpec, basis, random_field, resize, sobolev_norm, zeros

SPEC = TorusSpec(8)


def smooth_datum(seed=5, amp=0.3, cutoff=2, spec=SPEC):
    return random_field(spec, np.random.default_rng(seed), decay=4, amplitude=amp, cutoff=cutoff)


def test_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(dt=0)
    with pytest.raises(ValueError):
        FlowConfig(scheme="rk4")
    with pytest.raises(ValueError):
        FlowConfig(picard_tol=0)
    assert FlowConfig(alpha=1.0).critical_regime(2)
    assert not FlowConfig(alpha=1.5).critical_regime(2)


def test_local_existence_time_formula():
    assert local_existence_time(2, 1, 1, 1, 1) == pytest.approx(math.exp(-1))
    assert local_existence_time(2, 2, 0.5) < local_existence_time(2, 1, 0.5)
    assert local_existence_time(2, 1, 1.0) < local_existence_time(2, 1, 0.5)
    with pytest.raises(ValueError):
        local_existence_time(2, 0, 0.5)
    with pytest.raises(ValueError):
        local_existence_time(2, 1, -1)


def test_energy_of_zero_and_single_mode():
    assert energy(zeros(SPEC), 1.0, 0.5) == pytest.approx((2 * np.pi) ** 2, rel=1e-14)
    k = (2, 1)
    u = basis(SPEC, k)
    lam = 5.0
    expect = 0.5 * lam**0.7 + (2 * np.pi) ** 2 * math.exp(0.5 * (2 * np.pi) ** -2)
    assert energy(u, 0.7, 0.5) == pytest.approx(expect, rel=1e-13)
    assert mass(u) == 0.5


def test_zero_is_a_fixed_point():
    cfg = FlowConfig(dt=0.01)
    tr = evolve(zeros(SPEC), 0.5, cfg)
    assert np.all(tr.states == 0)
    pr = picard_solve(zeros(SPEC), 0.1, cfg)
    assert np.all(pr.states == 0)


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory(SPEC, np.array([0.0, 0.0]), np.zeros((2,) + SPEC.shape))
    with pytest.raises(ValueError):
        Trajectory(SPEC, np.array([0.0]), np.zeros((2,) + SPEC.shape))


def test_mass_conservation_calibrated():
    u = smooth_datum()
    tr = evolve(u, 1.0, FlowConfig(dt=1e-3), record_every=50)
    assert mass_drift(tr) <= 1e-8
    # every bit of mass lost is accounted for by the projection
    m0, m1 = mass(tr.field(0)), mass(tr.final)
    assert m0 - m1 == pytest.approx(tr.diagnostics["projected_mass_loss"], abs=1e-14)


def test_strang_self_convergence_order_two():
    u = smooth_datum()
    T = 0.2
    ref = evolve(u, T, FlowConfig(dt=T / 160)).final
    errs = [sobolev_norm(evolve(u, T, FlowConfig(dt=T / n)).final - ref, 2.0) for n in (10, 20)]
    assert 4 * 0.8 <= errs[0] / errs[1] <= 4 * 1.2


def test_lie_is_first_order():
    u = smooth_datum(amp=0.6)
    T = 0.2
    ref = evolve(u, T, FlowConfig(dt=T / 320)).final
    errs = [sobolev_norm(evolve(u, T, FlowConfig(dt=T / n, scheme="lie")).final - ref, 2.0) for n in (20, 40)]
    assert 1.6 <= errs[0] / errs[1] <= 2.4


def test_energy_conservation_second_order():
    u = smooth_datum(amp=0.6)
    e0 = energy(u, 1.0, 0.5)
    drift = []
    for dt in (0.02, 0.01):
        tr = evolve(u, 1.0, FlowConfig(dt=dt))
        drift.append(abs(energy(tr.final, 1.0, 0.5) - e0))
    assert drift[1] < drift[0]
    assert drift[0] / drift[1] == pytest.approx(4.0, rel=0.25)


def test_time_reversibility():
    u = smooth_datum(amp=0.6, cutoff=8)
    cfg = FlowConfig(dt=1e-3)
    fwd = evolve(u, 0.3, cfg).final
    back = evolve(fwd, -0.3, cfg).final
    assert sobolev_norm(back - u, 2.0) < 1e-9 * sobolev_norm(u, 2.0)


def test_gauge_covariance():
    u = smooth_datum(amp=0.6, cutoff=8)
    cfg = FlowConfig(dt=5e-3)
    phase = np.exp(0.77j)
    a = evolve(phase * u, 0.2, cfg).final
    b = phase * evolve(u, 0.2, cfg).final
    assert np.max(np.abs(a.coeffs - b.coeffs)) < 1e-10


def test_nan_guard_reports_time():
    u = basis(SPEC, (0, 0), 250.0)  # beta |u|^2 far above the exp range
    with pytest.raises(IntegrationError) as info:
        evolve(u, 0.1, FlowConfig(dt=0.01))
    assert info.value.time == pytest.approx(0.01)


def test_picard_contracts_geometrically():
    u = smooth_datum(amp=0.6)
    cfg = FlowConfig(C0=0.5)
    T = local_existence_time(2.0, sobolev_norm(u, 2.0), cfg.beta, cfg.c0, cfg.C0)
    pr = picard_solve(u, T, cfg, n_steps=80, enforce_window=True)
    ratios = pr.diagnostics["ratios"]
    assert pr.diagnostics["distances"][-1] < cfg.picard_tol
    # the last few ratios sit at the rounding floor
    assert max(ratios[:5]) <= 0.5


def test_picard_window_enforced():
    u = smooth_datum(amp=0.6)
    with pytest.raises(ValueError):
        picard_solve(u, 10.0, FlowConfig(), enforce_window=True)


def test_picard_divergence_reports_ratio():
    u = random_field(TorusSpec(4), np.random.default_rng(0), decay=2, amplitude=7.0)
    with pytest.raises(PicardDivergence) as info:
        picard_solve(u, 2.0, FlowConfig(beta=0.5, picard_max_iters=30), n_steps=20)
    assert info.value.ratio > 0.5 or not math.isfinite(info.value.ratio)


def test_picard_agrees_with_strang_at_order_two():
    u = smooth_datum()
    cfg = FlowConfig()
    T = local_existence_time(2.0, sobolev_norm(u, 2.0), cfg.beta, cfg.c0, cfg.C0)
    ref = picard_solve(u, T, cfg, n_steps=200).final
    errs = [sobolev_norm(evolve(u, T, FlowConfig(dt=T / n)).final - ref, 2.0) for n in (10, 20, 40)]
    for a, b in zip(errs, errs[1:]):
        assert 3.2 <= a / b <= 4.8


def test_calibration_gives_contraction():
    cal = calibrate_local_time(SPEC, FlowConfig(), np.random.default_rng(11), n_probes=50)
    assert cal.C0 > 0
    assert cal.worst_factor <= 0.5
    assert len(cal.probes) == 50
    assert all(p.factor <= 0.5 for p in cal.probes)


def test_flow_lipschitz_constant_stable_under_dt():
    rng = np.random.default_rng(3)
    u = smooth_datum(amp=0.5, cutoff=8)
    v = u + random_field(SPEC, rng, decay=4, amplitude=1e-3)
    consts = []
    for dt in (0.01, 0.005):
        cfg = FlowConfig(dt=dt)
        a, b = evolve(u, 0.5, cfg).final, evolve(v, 0.5, cfg).final
        consts.append(sobolev_norm(a - b, 1.5) / sobolev_norm(u - v, 1.5))
    assert all(math.isfinite(c) for c in consts)
    assert consts[0] == pytest.approx(consts[1], rel=0.05)


def test_galerkin_convergence_in_n():
    base = TorusSpec(4)
    u = random_field(base, np.random.default_rng(8), decay=6, amplitude=1.5)
    cfg = FlowConfig(dt=2e-3)
    finals = {N: resize(evolve(resize(u, N), 0.3, cfg).final, 32) for N in (4, 8, 16, 32)}
    diffs = [sobolev_norm(finals[N] - finals[2 * N], 1.0) for N in (4, 8, 16)]
    assert diffs[0] > diffs[1] > diffs[2]


def test_growth_delay_basic():
    ginv = lambda z: g_tilde_inv(z)  # noqa: E731
    zero = evolve(zeros(SPEC), 0.1, FlowConfig(dt=0.05))
    assert growth_delay(zero, 1.5, ginv) == 0
    big = evolve(basis(SPEC, (1, 0), 4.0), 0.1, FlowConfig(dt=0.01))
    i1 = growth_delay(big, 1.5, ginv)
    i2 = growth_delay(big, 1.5, ginv, scale=1.5)
    assert i1 is not None and i1 > 0
    assert i2 <= i1
    assert growth_delay(big, 1.5, ginv, i_max=0) is None
    with pytest.raises(ValueError):
        growth_delay(big, 2.5, ginv, s=2.0)


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(0.5, 4.0), seed=st.integers(0, 1000))
def test_growth_delay_monotone_in_bound(scale, seed):
    ginv = lambda z: g_tilde_inv(z)  # noqa: E731
    u = random_field(SPEC, np.random.default_rng(seed), decay=3, amplitude=3.0)
    tr = Trajectory(SPEC, np.array([0.0, 1.0]), np.stack([u.coeffs, u.coeffs]))
    a = growth_delay(tr, 1.0, ginv, scale=scale)
    b = growth_delay(tr, 1.0, ginv, scale=scale * 1.3)
    if a is None:
        return
    assert b is not None and b <= a


def test_trajectory_csv_columns():
    tr = evolve(smooth_datum(), 0.02, FlowConfig(dt=0.01))
    text = trajectory_csv(tr, 1.0, 0.5, (1.0, 1.5))
    lines = text.strip().split("\n")
    assert lines[0] == "t,mass,energy,h_r_1,h_r_1.5"
    assert len(lines) == 4
    assert float(lines[1].split(",")[1]) == mass(tr.field(0))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), theta=st.floats(0, 2 * np.pi))
def test_gauge_property(seed, theta):
    u = random_field(TorusSpec(4), np.random.default_rng(seed), decay=4, amplitude=0.5)
    cfg = FlowConfig(dt=0.02)
    a = evolve(np.exp(1j * theta) * u, 0.1, cfg).final
    b = np.exp(1j * theta) * evolve(u, 0.1, cfg).final
    assert np.max(np.abs(a.coeffs - b.coeffs)) < 1e-10
