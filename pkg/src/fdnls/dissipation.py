"""Dissipation operators and the functionals M'(u; L u), E'(u; L u).

Two operators are provided. The strong one,
    L u = (-Delta)^(s-alpha) u + G(||u||_{H^s}) u,  G(rho) = c rho^2 exp(Lambda beta rho^2),
damps high Sobolev norms, and the weak one,
    L u = P_N(u exp(beta |u|^2)) + ((-Delta)^(s-alpha) + 1) u,
trades regularity for control of the nonlinearity. Spatial integrals are
evaluated by quadrature on the oversampled grid, which for products with
band-limited fields is the same as pairing with the projected nonlinearity.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .spectral import (
    FieldRangeError,
    SpectralField,
    exp_weight,
    spectral_power,
    transform,
)

KINDS = ("strong", "weak")

# Lambda beta rho^2 above this makes G overflow
_G_EXP_LIMIT = 700.0


@dataclass(frozen=True)
class DissipatorSpec:
    kind: str = "strong"
    alpha: float = 1.0
    beta: float = 0.5
    s: float = 2.0
    g_c: float = 1.0
    g_lambda: float = 8.0
    explore: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dissipator kind {self.kind!r}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.g_c < 0 or self.g_lambda <= 0:
            raise ValueError("G parameters need g_c >= 0 and g_lambda > 0")
        if self.kind == "strong" and not self.s > self.alpha:
            raise ValueError(f"strong dissipator needs s > alpha, got s={self.s}, alpha={self.alpha}")
        if self.kind == "weak" and self.s < self.alpha:
            raise ValueError(f"weak dissipator needs s >= alpha, got s={self.s}, alpha={self.alpha}")
        if self.kind == "weak" and self.s - self.alpha > 1 and not self.explore:
            warnings.warn(
                f"weak dissipator with s - alpha = {self.s - self.alpha:g} > 1 is outside the "
                "coercive range; set explore=True to silence",
                stacklevel=2,
            )

    @property
    def gamma(self) -> float:
        """Exponent s - alpha of the linear part."""
        return self.s - self.alpha


# -- the function G -----------------------------------------------------------

def g(rho, c: float = 1.0, lam: float = 8.0, beta: float = 0.5):
    """G(rho) = c rho^2 exp(Lambda beta rho^2)."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("G is defined for rho >= 0")
    arg = lam * beta * rho**2
    if np.any(arg > _G_EXP_LIMIT):
        raise FieldRangeError(f"G argument {float(np.max(arg)):.3g} exceeds the exp range")
    out = c * rho**2 * np.exp(arg)
    return float(out) if out.ndim == 0 else out


def g_tilde(rho, c: float = 1.0, lam: float = 8.0, beta: float = 0.5):
    """G~(rho) = ln(1 + G(rho)), evaluated without forming G for large rho."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("G~ is defined for rho >= 0")
    with np.errstate(divide="ignore"):
        log_g = np.log(c) + 2.0 * np.log(rho) + lam * beta * rho**2
    out = np.logaddexp(0.0, log_g)
    return float(out) if out.ndim == 0 else out


def g_tilde_inv(z, c: float = 1.0, lam: float = 8.0, beta: float = 0.5, tol: float = 1e-12):
    """Inverse of G~ by vectorised bisection to absolute tolerance ``tol``."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("G~^{-1} is defined for z >= 0")
    if c <= 0:
        raise ValueError("G~ is not invertible for c = 0")
    lo = np.zeros_like(z)
    hi = np.ones_like(z)
    while np.any(g_tilde(hi, c, lam, beta) < z):
        grow = g_tilde(hi, c, lam, beta) < z
        hi = np.where(grow, 2.0 * hi, hi)
    for _ in range(200):
        if np.max(hi - lo, initial=0.0) <= tol:
            break
        mid = 0.5 * (lo + hi)
        below = g_tilde(mid, c, lam, beta) < z
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    out = 0.5 * (lo + hi)
    return float(out) if out.ndim == 0 else out


# -- operator and functionals -------------------------------------------------

def _hs(spec, coeffs, s):
    return math.sqrt(float(np.sum((1.0 + spectral_power(spec, s)) * np.abs(coeffs) ** 2)))


def _G(ds: DissipatorSpec, rho: float) -> float:
    return g(rho, ds.g_c, ds.g_lambda, ds.beta)


def weighted_nonlinearity(u: SpectralField, beta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid samples v, weight exp(beta |v|^2), and coefficients of P_N(u exp(beta |u|^2))."""
    tr = transform(u.spec)
    v = tr.to_grid(u.coeffs)
    w = exp_weight(v, beta)
    return v, w, tr.from_grid(v * w)


def apply(ds: DissipatorSpec, u: SpectralField) -> SpectralField:
    lin = spectral_power(u.spec, ds.gamma) * u.coeffs
    if ds.kind == "strong":
        return SpectralField(u.spec, lin + _G(ds, _hs(u.spec, u.coeffs, ds.s)) * u.coeffs)
    _, _, pn = weighted_nonlinearity(u, ds.beta)
    return SpectralField(u.spec, pn + lin + u.coeffs)


def _re_dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.real(np.vdot(b, a)))


def mcal(ds: DissipatorSpec, u: SpectralField) -> float:
    """Mass dissipation M'(u; L u)."""
    abs2 = np.abs(u.coeffs) ** 2
    lam_g = spectral_power(u.spec, ds.gamma)
    if ds.kind == "strong":
        rho = _hs(u.spec, u.coeffs, ds.s)
        return float(np.sum(lam_g * abs2)) + _G(ds, rho) * float(np.sum(abs2))
    tr = transform(u.spec)
    v = tr.to_grid(u.coeffs)
    w = exp_weight(v, ds.beta)
    return tr.integrate(np.abs(v) ** 2 * w) + float(np.sum((1.0 + lam_g) * abs2))


def ecal(ds: DissipatorSpec, u: SpectralField) -> float:
    """Energy dissipation E'(u; L u)."""
    spec, c = u.spec, u.coeffs
    abs2 = np.abs(c) ** 2
    lam_a = spectral_power(spec, ds.alpha)
    lam_s = spectral_power(spec, ds.s)
    lam_g = spectral_power(spec, ds.gamma)
    tr = transform(spec)
    v = tr.to_grid(c)
    w = exp_weight(v, ds.beta)
    pn = tr.from_grid(v * w)
    if ds.kind == "strong":
        G = _G(ds, _hs(spec, c, ds.s))
        cross = _re_dot(pn, lam_g * c)
        bracket = float(np.sum(lam_a * abs2)) + 2.0 * ds.beta * tr.integrate(np.abs(v) ** 2 * w)
        return float(np.sum(lam_s * abs2)) + 2.0 * ds.beta * cross + G * bracket
    return (
        _re_dot(pn, lam_a * c)
        + 2.0 * ds.beta * float(np.sum(np.abs(pn) ** 2))
        + float(np.sum(lam_s * abs2))
        + float(np.sum(lam_a * abs2))
        + 2.0 * ds.beta * _re_dot((lam_g + 1.0) * c, pn)
    )


def coercivity_gap_strong(ds: DissipatorSpec, u: SpectralField, c: float = 0.01, C: float = 1e3) -> float:
    """E_cal - c [||u||^2_{dot H^s} + G (||u||^2_{dot H^alpha} + 2 beta int |u|^2 e^{beta|u|^2})] + C."""
    if ds.kind != "strong":
        raise ValueError("coercivity_gap_strong needs a strong dissipator")
    spec, co = u.spec, u.coeffs
    abs2 = np.abs(co) ** 2
    tr = transform(spec)
    v = tr.to_grid(co)
    w = exp_weight(v, ds.beta)
    G = _G(ds, _hs(spec, co, ds.s))
    inner = float(np.sum(spectral_power(spec, ds.alpha) * abs2)) + 2.0 * ds.beta * tr.integrate(np.abs(v) ** 2 * w)
    lower = float(np.sum(spectral_power(spec, ds.s) * abs2)) + G * inner
    return ecal(ds, u) - c * lower + C


def coercivity_gap_weak(ds: DissipatorSpec, u: SpectralField) -> float:
    """E_cal - 2 beta ||P_N(u e^{beta|u|^2})||^2 - ||u||^2_{dot H^s}."""
    if ds.kind != "weak":
        raise ValueError("coercivity_gap_weak needs a weak dissipator")
    if ds.gamma > 1 and not ds.explore:
        raise ValueError(f"weak coercivity needs s - alpha <= 1, got {ds.gamma:g}; set explore=True")
    _, _, pn = weighted_nonlinearity(u, ds.beta)
    lam_s = spectral_power(u.spec, ds.s)
    return ecal(ds, u) - 2.0 * ds.beta * float(np.sum(np.abs(pn) ** 2)) - float(np.sum(lam_s * np.abs(u.coeffs) ** 2))
