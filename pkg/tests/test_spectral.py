"""Tests for the Fourier core: operators, transforms, norms and checkpoints."""

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdnls.spectral import (
    FieldRangeError,
    GridField,
    SpectralField,
    TorusSpec,
    basis,
    eigenvalue,
    exp_weight,
    field_from_bytes,
    field_to_bytes,
    frac_laplacian,
    grid_size,
    hs_seminorm,
    l2_inner,
    l2_norm,
    nonlinearity,
    project,
    propagator,
    random_field,
    read_checkpoint,
    resize,
    sobolev_norm,
    to_coeffs,
    to_grid,
    wavevectors,
    write_checkpoint,
    zeros,
)


def naive_synthesis(u: SpectralField, n: int) -> np.ndarray:
    """Direct sum over modes of u_k (2 pi)^(-d/2) exp(i k.x) on the n-point grid (d = 2)."""
    x = 2 * np.pi * np.arange(n) / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    k = wavevectors(u.spec)
    out = np.zeros((n, n), dtype=complex)
    for a in range(u.spec.width):
        for b in range(u.spec.width):
            out += u.coeffs[a, b] * np.exp(1j * (k[0, a, b] * X + k[1, a, b] * Y))
    return out / (2 * np.pi)


def test_spec_validation():
    with pytest.raises(ValueError):
        TorusSpec(0)
    with pytest.raises(ValueError):
        TorusSpec(4, d=0)
    with pytest.raises(ValueError):
        TorusSpec(4, q=1)
    sp = TorusSpec(8)
    assert sp.shape == (17, 17)
    assert sp.n_grid >= 4 * 17
    assert sp.volume == pytest.approx((2 * np.pi) ** 2)


def test_grid_size_is_five_smooth():
    for n in range(1, 300):
        m = grid_size(n)
        assert m >= n
        r = m
        for p in (2, 3, 5):
            while r % p == 0:
                r //= p
        assert r == 1
    assert grid_size(68) == 72


def test_eigenvalue_lookup():
    sp = TorusSpec(4)
    assert eigenvalue(sp, (1, 1)) == 2.0
    assert eigenvalue(sp, (0, 0)) == 0.0
    with pytest.raises(IndexError):
        eigenvalue(sp, (5, 0))
    with pytest.raises(ValueError):
        eigenvalue(sp, (1,))


def test_field_rejects_nan_and_shape():
    sp = TorusSpec(2)
    c = np.zeros(sp.shape, complex)
    c[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        SpectralField(sp, c)
    with pytest.raises(ValueError):
        SpectralField(sp, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        zeros(sp) + zeros(TorusSpec(3))


def test_fields_are_immutable():
    u = zeros(TorusSpec(2))
    with pytest.raises(ValueError):
        u.coeffs[0, 0] = 1.0


def test_transform_matches_naive_dft():
    sp = TorusSpec(5)
    u = random_field(sp, np.random.default_rng(0), decay=1.0)
    g = to_grid(u)
    assert np.max(np.abs(g.values - naive_synthesis(u, g.n))) < 1e-10
    assert to_coeffs(g).allclose(u, 1e-12)


def test_single_mode_has_constant_modulus():
    sp = TorusSpec(4)
    g = to_grid(basis(sp, (2, -1)))
    assert np.allclose(np.abs(g.values), (2 * np.pi) ** -1, atol=1e-14)


def test_parseval_on_grid():
    sp = TorusSpec(6)
    u = random_field(sp, np.random.default_rng(1))
    g = to_grid(u)
    assert g.integrate(np.abs(g.values) ** 2).real == pytest.approx(l2_norm(u) ** 2, rel=1e-12)


def test_projection_and_resize():
    sp = TorusSpec(6)
    u = random_field(sp, np.random.default_rng(2))
    p = project(u, 3)
    assert project(p, 3).allclose(p)
    assert resize(resize(p, 3), 6).allclose(p)
    assert resize(u, 9).spec.N == 9
    with pytest.raises(ValueError):
        project(u, -1)


def test_propagator_unitary_and_group():
    sp = TorusSpec(16)
    u = random_field(sp, np.random.default_rng(3))
    for alpha in (0.5, 1.0, 1.7):
        v = propagator(u, 0.37, alpha)
        assert abs(l2_norm(v) - l2_norm(u)) < 1e-12 * l2_norm(u)
        assert abs(sobolev_norm(v, 2.0) - sobolev_norm(u, 2.0)) < 1e-12 * sobolev_norm(u, 2.0)
        w = propagator(propagator(u, 0.2, alpha), 0.5, alpha)
        assert w.allclose(propagator(u, 0.7, alpha), 1e-12)
        assert propagator(v, -0.37, alpha).allclose(u, 1e-12)


def test_fractional_laplacian_semigroup():
    sp = TorusSpec(16)
    u = random_field(sp, np.random.default_rng(4))
    a = frac_laplacian(frac_laplacian(u, 0.3), 0.45)
    b = frac_laplacian(u, 0.75)
    assert np.max(np.abs(a.coeffs - b.coeffs)) <= 1e-12 * np.max(np.abs(b.coeffs))
    assert frac_laplacian(u, 0.0).coefficient((0, 0)) == u.coefficient((0, 0))
    assert frac_laplacian(u, 1.0).coefficient((0, 0)) == 0


def test_seminorm_identity():
    sp = TorusSpec(8)
    u = random_field(sp, np.random.default_rng(5))
    assert hs_seminorm(u, 1.0) ** 2 == pytest.approx(l2_inner(u, frac_laplacian(u, 1.0)), rel=1e-12)
    assert sobolev_norm(u, 1.0) ** 2 == pytest.approx(l2_norm(u) ** 2 + hs_seminorm(u, 1.0) ** 2, rel=1e-12)


def test_nonlinearity_of_single_mode():
    # constant modulus: P_N(2 beta u e^{beta|u|^2}) = 2 beta e^{beta (2pi)^-d} u
    sp = TorusSpec(4)
    u = basis(sp, (1, 2), 0.8)
    beta = 0.5
    expect = 2 * beta * math.exp(beta * 0.64 / (2 * np.pi) ** 2) * u
    assert nonlinearity(u, beta).allclose(expect, 1e-13)


def test_exp_weight_guards_overflow():
    with pytest.raises(FieldRangeError):
        exp_weight(np.array([40.0 + 0j]), 1.0)
    assert exp_weight(np.zeros(3, complex), 1.0).tolist() == [1.0, 1.0, 1.0]


def test_grid_field_checks():
    sp = TorusSpec(4)
    with pytest.raises(ValueError):
        GridField(sp, np.zeros((5, 5)))


def test_checkpoint_roundtrip(tmp_path):
    sp = TorusSpec(3)
    u = random_field(sp, np.random.default_rng(6))
    data = field_to_bytes(u)
    assert data[:4] == b"FDNL"
    assert len(data) == 16 + 16 * sp.n_modes
    assert field_from_bytes(data).allclose(u, 0.0)
    path = tmp_path / "u.fdnl"
    write_checkpoint(path, u)
    assert read_checkpoint(path).allclose(u, 0.0)
    buf = io.BytesIO()
    write_checkpoint(buf, u)
    assert read_checkpoint(io.BytesIO(buf.getvalue())).allclose(u, 0.0)


def test_checkpoint_rejects_corruption():
    u = random_field(TorusSpec(2), np.random.default_rng(7))
    data = field_to_bytes(u)
    with pytest.raises(ValueError):
        field_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        field_from_bytes(data[:-8])
    with pytest.raises(ValueError):
        field_from_bytes(data[:10])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.floats(-5, 5), alpha=st.floats(0.1, 2.0))
def test_propagator_preserves_every_sobolev_norm(seed, t, alpha):
    u = random_field(TorusSpec(4), np.random.default_rng(seed))
    v = propagator(u, t, alpha)
    for s in (0.0, 0.5, 2.0):
        assert math.isclose(sobolev_norm(v, s), sobolev_norm(u, s), rel_tol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(-3, 3))
def test_transform_is_linear(seed, scale):
    rng = np.random.default_rng(seed)
    sp = TorusSpec(3)
    u, v = random_field(sp, rng), random_field(sp, rng)
    lhs = to_grid(u + scale * v).values
    rhs = to_grid(u).values + scale * to_grid(v).values
    assert np.allclose(lhs, rhs, atol=1e-12)
