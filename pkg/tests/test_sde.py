"""Noise bookkeeping, the stochastic step, Ito balance checks and reproducibility."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdnls.dissipation import DissipatorSpec
from fdnls.flows import FlowConfig, energy, evolve
from fdnls.sde import (
    A_s,
    NoiseSpec,
    SdeConfig,
    a_default,
    brownian_increments,
    coarsen,
    decay_threshold,
    energy_bound_single_mode,
    ensemble_manifest,
    ensemble_terminals,
    ito_energy_check,
    ito_mass_check,
    noise_increment,
    path_rng,
    reference_config,
    run_paths,
    sde_step,
    simulate,
    terminal_checkpoints,
    terminal_csv,
    z_exact_sample,
    z_path,
)
from fdnls.spectral import TorusSpec, basis, eigenvalues, random_field, sobolev_norm, zeros


def small_config(sigma=0.1, kind="strong", N=4, dt=1e-2, **kw):
    return reference_config(N=N, sigma=sigma, kind=kind, dt=dt, **kw)


# -- noise bookkeeping --------------------------------------------------------

def test_single_mode_A():
    spec = TorusSpec(4)
    noise = NoiseSpec.single_mode(spec, (1, 1), a=1.0)
    assert A_s(noise, 1.0) == 4.0
    assert noise.A(0.0) == 2.0


def test_zero_mode_power_convention():
    noise = NoiseSpec.single_mode(TorusSpec(3), (0, 0), a=1.0)
    assert noise.A(0.0) == 2.0  # 0^0 = 1
    assert noise.A(0.5) == 0.0
    assert noise.A(0.5, floor_zero=True) == 2.0


def test_default_matches_direct_sum():
    spec = TorusSpec(8)
    noise = NoiseSpec.default(spec)
    for s in (0.0, 0.5, 1.0, 2.0):
        direct = 0.0
        for k1 in range(-8, 9):
            for k2 in range(-8, 9):
                lam = k1 * k1 + k2 * k2
                direct += 2 * (lam**s if lam else (1.0 if s == 0 else 0.0)) * (1 + lam) ** -4.0
        assert A_s(noise, s) == pytest.approx(direct, rel=1e-14)


@settings(max_examples=20, deadline=None)
@given(n=st.floats(0.1, 10.0), s=st.floats(0.0, 2.0))
def test_scaling_multiplies_every_A(n, s):
    noise = NoiseSpec.default(TorusSpec(5))
    assert noise.scaled(n).A(s) == pytest.approx(n * noise.A(s), rel=1e-13)


def test_A_restricted_box():
    noise = NoiseSpec.default(TorusSpec(6))
    assert A_s(noise, 1.0, 6) == noise.A(1.0)
    assert A_s(noise, 1.0, 3) == pytest.approx(NoiseSpec.default(TorusSpec(3)).A(1.0), rel=1e-14)


def test_slow_decay_warns():
    assert decay_threshold(2, 1.0) == 1.0
    assert decay_threshold(2) == 0.75
    with pytest.warns(UserWarning):
        NoiseSpec.default(TorusSpec(4), p=0.7)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        NoiseSpec.default(TorusSpec(4), p=2.0)
    assert a_default(np.array([0.0, 1.0]), 1.0).tolist() == [1.0, 0.5]


def test_noise_validation():
    spec = TorusSpec(2)
    with pytest.raises(ValueError):
        NoiseSpec(spec, -np.ones(spec.shape))
    with pytest.raises(ValueError):
        NoiseSpec(spec, np.ones((3, 3)))
    with pytest.raises(ValueError):
        NoiseSpec(spec, np.ones(spec.shape), sigma=-1)
    with pytest.raises(ValueError):
        noise_increment(NoiseSpec.default(spec), 0.0, np.random.default_rng(0))


def test_zero_noise_is_zero():
    spec = TorusSpec(3)
    noise = NoiseSpec(spec, np.zeros(spec.shape))
    assert np.all(noise_increment(noise, 0.1, np.random.default_rng(0)).coeffs == 0)


def test_noise_increment_moments():
    spec = TorusSpec(2)
    noise = NoiseSpec.default(spec, p=1.5)
    rng = np.random.default_rng(1)
    dt = 0.01
    n = 100_000
    draws = np.array([noise_increment(noise, dt, rng).coeffs for _ in range(n)])
    mean = draws.mean(axis=0)
    se = draws.real.std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(mean.real) <= 4 * se)
    assert np.all(np.abs(mean.imag) <= 4 * se)
    sq = np.sum(np.abs(draws) ** 2, axis=(1, 2)) / dt
    assert abs(sq.mean() - noise.A(0.0)) <= 3 * sq.std() / math.sqrt(n)


def test_noise_increment_draws_match_bulk_layout():
    spec = TorusSpec(2)
    noise = NoiseSpec.default(spec)
    a = noise_increment(noise, 0.5, np.random.default_rng(3)).coeffs
    rng = np.random.default_rng(3)
    b = noise.amp * (rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)) * math.sqrt(0.5)
    assert np.array_equal(a, b)


def test_increments_uncorrelated_across_steps():
    rng = np.random.default_rng(4)
    dW = brownian_increments(rng, (3, 3), 1.0, 20_000)
    x, y = dW[:-1, 1, 1].real, dW[1:, 1, 1].real
    prod = x * y
    assert abs(prod.mean()) <= 4 * prod.std() / math.sqrt(len(prod))


def test_coarsen_sums_groups():
    dW = np.arange(12.0).reshape(6, 2)
    assert coarsen(dW, 2).tolist() == [[2.0, 4.0], [10.0, 12.0], [18.0, 20.0]]
    with pytest.raises(ValueError):
        coarsen(dW, 4)


def test_z_sample_at_zero_and_second_moment():
    spec = TorusSpec(3)
    noise = NoiseSpec.default(spec, sigma=0.3)
    assert np.all(z_exact_sample(noise, 1.0, 0.0, np.random.default_rng(0)).coeffs == 0)
    rng = np.random.default_rng(5)
    T = 0.7
    sq = np.array([np.sum(np.abs(z_exact_sample(noise, 1.0, T, rng).coeffs) ** 2) for _ in range(4000)])
    assert abs(sq.mean() - noise.sigma**2 * noise.A(0.0) * T) <= 3 * sq.std() / math.sqrt(len(sq))


def test_z_sample_is_gaussian():
    spec = TorusSpec(1)
    noise = NoiseSpec.default(spec)
    rng = np.random.default_rng(6)
    x = np.array([z_exact_sample(noise, 1.0, 1.0, rng).coeffs[1, 2].real for _ in range(10_000)])
    z = (x - x.mean()) / x.std()
    assert abs(np.mean(z**3)) <= 0.1
    assert abs(np.mean(z**4) - 3.0) <= 0.2


def test_z_path_variance_and_validation():
    spec = TorusSpec(2)
    noise = NoiseSpec.default(spec, sigma=0.5)
    times = np.linspace(0, 1, 11)
    rng = np.random.default_rng(7)
    paths = np.array([z_path(noise, 1.0, times, rng) for _ in range(2000)])
    v = np.sum(np.abs(paths[:, -1]) ** 2, axis=(1, 2))
    assert abs(v.mean() - noise.sigma**2 * noise.A(0.0)) <= 3 * v.std() / math.sqrt(len(v))
    assert np.all(paths[:, 0] == 0)
    with pytest.raises(ValueError):
        z_path(noise, 1.0, np.array([0.5, 0.2]), rng)


# -- configuration -----------------------------------------------------------

def test_config_requires_matching_exponents():
    spec = TorusSpec(2)
    with pytest.raises(ValueError):
        SdeConfig(FlowConfig(alpha=1.0, s=2.0), NoiseSpec.default(spec), DissipatorSpec(alpha=1.0, s=3.0))
    with pytest.raises(ValueError):
        SdeConfig(FlowConfig(), NoiseSpec.default(spec), DissipatorSpec(), seed=-1)


def test_digest_depends_on_config():
    a, b = small_config(), small_config(sigma=0.2)
    assert a.digest() != b.digest()
    assert a.digest() == small_config().digest()
    assert a.max_dissipation_multiplier() == pytest.approx(0.01 * 0.01 * 32.0)


# -- stepping ----------------------------------------------------------------

def test_linear_step_is_diagonal_and_exact():
    cfg = small_config(sigma=0.2, beta=0.0, g_c=0.0)
    u = random_field(cfg.spec, np.random.default_rng(0))
    lam = eigenvalues(cfg.spec)
    dt = cfg.flow.dt
    expect = np.exp(-1j * dt * lam - cfg.sigma**2 * dt * lam) * u.coeffs
    assert np.allclose(sde_step(u, cfg).coeffs, expect, rtol=0, atol=1e-15)


def test_zero_sigma_is_consistent_deterministic_step():
    cfg = small_config(sigma=0.0, dt=1e-3)
    u = random_field(cfg.spec, np.random.default_rng(2), decay=4, amplitude=0.5)
    a = simulate(cfg, 0.1, u, keep_states=True).final
    b = evolve(u, 0.1, FlowConfig(dt=1e-3, scheme="lie")).final
    c = evolve(u, 0.1, FlowConfig(dt=1e-3)).final
    assert np.max(np.abs(a - b.coeffs)) < 1e-12
    assert np.max(np.abs(a - c.coeffs)) < 1e-4


@pytest.mark.parametrize("r", [0.0, 1.0, 3.0])
def test_linear_damping_contracts_every_norm(r):
    cfg = small_config(sigma=0.5, beta=0.0, g_c=0.0)
    u = random_field(cfg.spec, np.random.default_rng(3))
    assert sobolev_norm(sde_step(u, cfg), r) <= sobolev_norm(u, r)


def test_weak_kind_step_damps_mass():
    cfg = small_config(sigma=0.5, kind="weak")
    u = random_field(cfg.spec, np.random.default_rng(4), amplitude=0.8)
    v = u
    for _ in range(20):
        v = sde_step(v, cfg)
    assert sobolev_norm(v, 0) < sobolev_norm(u, 0)


def test_strong_self_convergence_half_order():
    cfg = small_config(sigma=0.3, dt=4e-3)
    T = 0.4
    u0 = random_field(cfg.spec, np.random.default_rng(8), decay=4, amplitude=0.3)
    errs = [[], []]
    for pid in range(6):
        rng = path_rng(99, pid)
        n_ref = int(round(T / (cfg.flow.dt / 4)))
        dW = brownian_increments(rng, cfg.spec.shape, cfg.flow.dt / 4, n_ref)
        ref = simulate(cfg.with_dt(cfg.flow.dt / 4), T, u0, increments=dW).final
        for j, f in enumerate((4, 2)):
            c = cfg.with_dt(cfg.flow.dt / 4 * f)
            out = simulate(c, T, u0, increments=coarsen(dW, f)).final
            errs[j].append(np.sqrt(np.sum(np.abs(out - ref) ** 2)))
    e_dt, e_half = np.sqrt(np.mean(np.square(errs[0]))), np.sqrt(np.mean(np.square(errs[1])))
    assert e_dt / e_half >= math.sqrt(2)


# -- simulation ---------------------------------------------------------------

def test_simulate_validation():
    cfg = small_config()
    with pytest.raises(ValueError):
        simulate(cfg, 0.015)
    with pytest.raises(ValueError):
        simulate(cfg, 0.0)
    with pytest.raises(ValueError):
        simulate(cfg, 0.1, observables=("nope",))
    with pytest.raises(ValueError):
        simulate(cfg, 0.1, increments=np.zeros((3,) + cfg.spec.shape))


def test_simulate_stride_records_end():
    rec = simulate(small_config(), 0.1, stride=3)
    assert rec.times[0] == 0.0
    assert rec.times[-1] == pytest.approx(0.1)
    assert len(rec.times) == len(rec.observables["mass"])


def test_path_is_reproducible_and_thread_independent():
    cfg = small_config()
    fn = lambda i: simulate(cfg.with_id(i), 0.2).final  # noqa: E731
    one = run_paths(fn, range(6), threads=1)
    many = run_paths(fn, range(6), threads=3)
    for a, b in zip(one, many):
        assert np.array_equal(a, b)
    assert not np.array_equal(one[0], one[1])
    again = simulate(cfg.with_id(4), 0.2).final
    assert np.array_equal(again, one[4])


def test_path_rng_streams_differ():
    a = path_rng(7, 0).standard_normal(4)
    b = path_rng(7, 1).standard_normal(4)
    c = path_rng(7, 0).standard_normal(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, c)


# -- Ito checks ---------------------------------------------------------------

def test_ito_mass_deterministic_limit():
    cfg = small_config(sigma=0.0, dt=1e-3)
    u0 = random_field(cfg.spec, np.random.default_rng(0), decay=4, amplitude=0.3)
    rep = ito_mass_check(cfg, 2, 0.2, u0=u0)
    assert rep.passed
    assert abs(rep.estimate) < 1e-10


def test_ito_mass_balance_small_ensemble():
    cfg = small_config(sigma=0.3)
    rep = ito_mass_check(cfg, 40, 0.5, n_pilot=10)
    assert rep.passed, rep.as_dict()
    assert rep.details["max_checkpoint_z"] <= 4.5
    assert rep.details["forcing"] == pytest.approx(0.5 * 0.09 * cfg.noise.A(0.0) * 0.5)


def test_ito_mass_balance_under_doubled_sigma():
    cfg = small_config(sigma=0.6)
    rep = ito_mass_check(cfg, 40, 0.5, n_pilot=10)
    assert rep.passed, rep.as_dict()


def test_ito_mass_requires_ensemble():
    with pytest.raises(ValueError):
        ito_mass_check(small_config(), 1, 0.1)


def test_ito_energy_deterministic_limit():
    cfg = small_config(sigma=0.0, dt=1e-3)
    u0 = random_field(cfg.spec, np.random.default_rng(0), decay=4, amplitude=0.3)
    rep = ito_energy_check(cfg, 2, 0.1, u0=u0)
    assert rep.passed
    e0 = energy(u0, 1.0, 0.5)
    assert abs(rep.details["mean_lhs"]) < 1e-6 * e0


def test_ito_energy_bound_small_ensemble():
    rep = ito_energy_check(small_config(sigma=0.3), 20, 0.5)
    assert rep.passed, rep.as_dict()
    assert abs(rep.details["identity_residual"]) <= 4 * rep.details["identity_se"] + 1e-3


def test_energy_bound_single_mode_oracle():
    spec = TorusSpec(4)
    k = (2, 1)
    noise = NoiseSpec.single_mode(spec, k, a=0.8, sigma=0.2)
    alpha, beta, t, W = 1.0, 0.5, 1.0, 3.7
    lam = 5.0
    by_hand = 0.5 * 0.04 * (2 * lam * 0.64 * t + 2 * lam**0.5 * 0.64 * (2 * math.pi) ** -2 * (4 * 0.25 + 1.0) * W)
    assert energy_bound_single_mode(noise, k, alpha, beta, t, W) == pytest.approx(by_hand, rel=1e-14)
    assembled = 0.5 * noise.sigma**2 * (noise.A(alpha) * t + noise.A(0.5) * (2 * math.pi) ** -2 * 2.0 * W)
    assert assembled == pytest.approx(by_hand, rel=1e-14)


def test_literal_bound_fails_when_only_constant_mode_is_forced():
    # lambda_0^{(d-1)/2} = 0 removes the exponential term from the literal bound,
    # while the Ito correction of int e^{beta|u|^2} is strictly positive.
    spec = TorusSpec(2)
    cfg = SdeConfig(FlowConfig(dt=1e-2), NoiseSpec.single_mode(spec, (0, 0), a=1.0, sigma=0.5), DissipatorSpec())
    literal = ito_energy_check(cfg, 60, 0.5, zero_mode_floor=False)
    floored = ito_energy_check(cfg, 60, 0.5, zero_mode_floor=True)
    assert not literal.passed
    assert floored.passed


# -- ensemble outputs ---------------------------------------------------------

def test_terminal_outputs(tmp_path):
    cfg = small_config()
    recs = ensemble_terminals(cfg, 3, 0.05)
    text = terminal_csv(recs)
    assert text.splitlines()[0] == "trajectory_id,energy,hs_sq,mass,mcal"
    assert len(text.splitlines()) == 4
    cps = terminal_checkpoints(cfg, recs)
    man = ensemble_manifest(cfg, 3, 0.05, cps)
    assert man["trajectory_ids"] == [0, 1, 2]
    assert len(man["checkpoints"]["0"]) == 40
    again = terminal_checkpoints(cfg, ensemble_terminals(cfg, 3, 0.05, threads=2))
    assert ensemble_manifest(cfg, 3, 0.05, again) == man


def test_zero_datum_zero_sigma_stays_zero():
    cfg = small_config(sigma=0.0)
    assert np.all(simulate(cfg, 0.1).final == 0)
    assert np.all(sde_step(zeros(cfg.spec), cfg).coeffs == 0)
    assert np.all(sde_step(basis(cfg.spec, (0, 0), 0.0), cfg).coeffs == 0)
