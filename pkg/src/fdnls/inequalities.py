"""Numerical checks of the exponential product, Cordoba-Cordoba and Young-type inequalities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.optimize import brentq, minimize_scalar
from scipy.special import lambertw

from .spectral import (
    GridField,
    SpectralField,
    TorusSpec,
    TWO_PI,
    grid_size,
    grid_spectrum,
    random_field,
    sobolev_norm,
    to_grid,
)


@dataclass(frozen=True)
class RandomFieldLaw:
    """Gaussian test fields with coefficient scale (1 + lambda)^(-decay/2).

    Each draw is multiplied by a factor uniform on (0, 1], so ``amplitude``
    is the largest scale in the ensemble.
    """

    N_f: int = 6
    decay: float = 5.0
    amplitude: float = 1.0
    real: bool = False
    seed: int = 0
    d: int = 2
    q: int = 4

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")

    @property
    def spec(self) -> TorusSpec:
        return TorusSpec(self.N_f, self.d, self.q)

    def smooth_enough(self, s: float) -> bool:
        return self.decay > self.d / 2.0 + s

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(stream,))))

    def sample(self, rng: np.random.Generator) -> SpectralField:
        scale = self.amplitude * (1.0 - rng.uniform())
        return random_field(self.spec, rng, decay=self.decay, amplitude=scale, real=self.real)


# -- grid Sobolev norms of non band-limited functions ----------------------------

def grid_sobolev_norm(g: GridField, s: float, homogeneous: bool = False) -> float:
    """H^s (or dot H^s) norm from the full discrete spectrum of grid samples."""
    hat, lam = grid_spectrum(g)
    w = np.power(lam, s) if homogeneous else 1.0 + np.power(lam, s)
    return math.sqrt(float(np.sum(w * np.abs(hat) ** 2)))


def _min_c(ratio: float, x: float) -> float:
    """Smallest C >= 0 with C exp(C x) >= ratio."""
    if ratio <= 0:
        return 0.0
    if x == 0:
        return ratio
    return float(np.real(lambertw(ratio * x))) / x


@dataclass
class LemSobReport:
    c_exp: np.ndarray
    c_prod: np.ndarray
    c_lip: np.ndarray
    s: float
    beta: float

    def maxima(self, upto: int | None = None) -> dict:
        sl = slice(0, None if upto is None else max(1, upto))
        return {"exp": float(np.max(self.c_exp[sl])), "product": float(np.max(self.c_prod[sl])),
                "lipschitz": float(np.max(self.c_lip[sl]))}


def lemsob_constants(u: SpectralField, v: SpectralField, s: float, beta: float) -> tuple[float, float, float]:
    """Smallest constants for the three exponential product estimates at one pair (u, v).

    (1) ||e^{beta|u|^2}||_{H^s} <= ||1||_{H^s} exp(C beta ||u||^2_{H^s})
    (2) ||u e^{beta|u|^2}||_{H^s} <= C ||u||_{H^s} exp(C beta ||u||^2_{H^s})
    (3) ||u e^{beta|u|^2} - v e^{beta|v|^2}||_{H^s} <= C exp(C beta (||u||^2 + ||v||^2)) ||u - v||_{H^s}
    The factor ||1||_{H^s} = Vol^(1/2) in (1) makes u = 0 an equality.
    """
    gu, gv = to_grid(u), to_grid(v)
    eu = np.exp(beta * np.abs(gu.values) ** 2)
    ev = np.exp(beta * np.abs(gv.values) ** 2)
    ru, rv = sobolev_norm(u, s), sobolev_norm(v, s)
    one = math.sqrt(u.spec.volume)
    lhs1 = grid_sobolev_norm(GridField(u.spec, eu, gu.n), s)
    x1 = beta * ru * ru
    c1 = math.log(lhs1 / one) / x1 if x1 > 0 else 0.0
    lhs2 = grid_sobolev_norm(GridField(u.spec, gu.values * eu, gu.n), s)
    c2 = _min_c(lhs2 / ru, x1) if ru > 0 else 0.0
    lhs3 = grid_sobolev_norm(GridField(u.spec, gu.values * eu - gv.values * ev, gu.n), s)
    duv = sobolev_norm(u - v, s)
    c3 = _min_c(lhs3 / duv, beta * (ru * ru + rv * rv)) if duv > 0 else 0.0
    return max(c1, 0.0), c2, c3


def check_lemsob(law: RandomFieldLaw, s: float, beta: float, trials: int) -> LemSobReport:
    """Empirical constants over ``trials`` random pairs drawn from ``law``."""
    if not s > law.d / 2.0:
        raise ValueError(f"the product estimates need s > d/2, got s={s}")
    rng = law.rng()
    out = np.zeros((trials, 3))
    for i in range(trials):
        u, v = law.sample(rng), law.sample(rng)
        out[i] = lemsob_constants(u, v, s, beta)
    return LemSobReport(out[:, 0], out[:, 1], out[:, 2], s, beta)


def lemsob_stable(report: LemSobReport, rel: float = 0.25) -> dict:
    """Compare maxima over the first half of the trials with the full set."""
    half = len(report.c_exp) // 2
    a, b = report.maxima(half), report.maxima()
    ok = {k: bool(np.isfinite(b[k]) and (a[k] == b[k] or abs(b[k] - a[k]) <= rel * max(a[k], 1e-300))) for k in a}
    return {"half": a, "full": b, "stable": ok}


# -- Cordoba-Cordoba ----------------------------------------------------------

def _spectral_lambda(n: int, d: int) -> np.ndarray:
    ax = sfft.fftfreq(n, 1.0 / n)
    lam = np.zeros((n,) * d)
    for i in range(d):
        shape = [1] * d
        shape[i] = n
        lam = lam + ax.reshape(shape) ** 2
    return lam


def cordoba_gap(f: SpectralField, gamma: float, n: int | None = None) -> float:
    """<f e^{|f|^2}, (-Delta)^gamma f> - ||e^{|f|^2/2}||^2_{dot H^gamma} on a grid of n points per axis."""
    spec = f.spec
    n = spec.n_grid if n is None else n
    g = to_grid(f, n).values
    lam = _spectral_lambda(n, spec.d)
    cell = (TWO_PI / n) ** spec.d
    lap_f = sfft.ifftn(np.power(lam, gamma) * sfft.fftn(g))
    a2 = np.abs(g) ** 2
    if float(np.max(a2, initial=0.0)) > 700:
        raise OverflowError("|f|^2 too large for exp")
    lhs = cell * float(np.real(np.sum(g * np.exp(a2) * np.conj(lap_f))))
    h = np.exp(0.5 * a2)
    hat = sfft.fftn(h, norm="forward") * TWO_PI ** (spec.d / 2.0)
    rhs = float(np.sum(np.power(lam, gamma) * np.abs(hat) ** 2))
    return lhs - rhs


def check_cordoba(f: SpectralField, gamma: float, explore: bool = False) -> dict:
    """Gap and its discretisation tolerance (change when the oversampling doubles)."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    if gamma > 1 and not explore:
        raise ValueError(f"gamma={gamma} > 1 is outside the guaranteed range; pass explore=True")
    n = f.spec.n_grid
    gap = cordoba_gap(f, gamma, n)
    gap2 = cordoba_gap(f, gamma, grid_size(2 * n))
    tol = abs(gap2 - gap)
    return {"gap": gap, "tol_disc": tol, "passed": bool(gap >= -tol), "gamma": gamma, "normative": gamma <= 1}


def cordoba_gap_gradient(f: SpectralField, n: int | None = None) -> float:
    """gamma = 1, real f: the gap equals int (1 + f^2) e^{f^2} |grad f|^2."""
    spec = f.spec
    n = spec.n_grid if n is None else n
    g = to_grid(f, n).values
    if float(np.max(np.abs(g.imag), initial=0.0)) > 1e-12 * max(1.0, float(np.max(np.abs(g)))):
        raise ValueError("the gradient route needs a real field")
    g = g.real
    ax = sfft.fftfreq(n, 1.0 / n)
    ghat = sfft.fftn(g)
    grad2 = np.zeros_like(g)
    for i in range(spec.d):
        shape = [1] * spec.d
        shape[i] = n
        grad2 += np.real(sfft.ifftn(1j * ax.reshape(shape) * ghat)) ** 2
    cell = (TWO_PI / n) ** spec.d
    return cell * float(np.sum((1.0 + g**2) * np.exp(g**2) * grad2))


# -- generalised Young function ----------------------------------------------

@dataclass(frozen=True, eq=False)
class PhiFunction:
    """Phi(v) = c v f^{-1}(v) with f(u) = u e^{b u^2}, tabulated on [0, v_max]."""

    b: float
    c: float
    grid: np.ndarray = field(repr=False)
    inv: np.ndarray = field(repr=False)

    def f(self, u):
        u = np.asarray(u, dtype=float)
        return u * np.exp(self.b * u * u)

    def f_inv(self, v, tol: float = 1e-15):
        return f_inverse(self.b, v, tol)

    def __call__(self, v):
        return phi_eval(self, v)


def f_inverse(b: float, v, tol: float = 1e-15, max_iter: int = 200):
    """Solve u e^{b u^2} = v for u >= 0 by Newton steps kept inside a shrinking bracket."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("f^{-1} is defined for v >= 0")
    lo = np.zeros_like(v)
    hi = v.copy()  # f(u) >= u
    u = np.minimum(v, np.sqrt(np.log1p(v) / b))
    for _ in range(max_iter):
        e = np.exp(b * u * u)
        fu = u * e - v
        lo = np.where(fu < 0, u, lo)
        hi = np.where(fu > 0, u, hi)
        step = fu / (e * (1.0 + 2.0 * b * u * u))
        nxt = u - step
        bad = (nxt <= lo) | (nxt >= hi)
        nxt = np.where(bad, 0.5 * (lo + hi), nxt)
        done = np.abs(nxt - u) <= tol * np.abs(u)
        u = nxt
        if np.all(done):
            break
    else:
        raise ArithmeticError("f^{-1} did not reach tolerance")
    return float(u) if u.ndim == 0 else u


def phi_build(b: float, c: float, v_max: float = 50.0, n: int = 2001) -> PhiFunction:
    if not (b > 0 and c > 0):
        raise ValueError("Phi needs b > 0 and c > 0")
    grid = np.linspace(0.0, v_max, n)
    inv = f_inverse(b, grid)
    grid.setflags(write=False)
    inv.setflags(write=False)
    return PhiFunction(b, c, grid, inv)


def phi_eval(phi: PhiFunction, v):
    v = np.asarray(v, dtype=float)
    out = phi.c * v * f_inverse(phi.b, v)
    return float(out) if np.ndim(out) == 0 else out


def phi_inverse(phi: PhiFunction, y: float) -> float:
    """v with Phi(v) = y, through Phi(f(u)) = c u f(u)."""
    if y < 0:
        raise ValueError("Phi^{-1} is defined for y >= 0")
    if y == 0:
        return 0.0
    target = y / phi.c
    u = brentq(lambda x: x * x * math.exp(phi.b * x * x) - target, 0.0, math.sqrt(target), xtol=1e-15, rtol=1e-15)
    return float(phi.f(u))


def _legendre(values_fn, slope: float, grid: np.ndarray) -> float:
    """sup over v >= 0 of slope v - values_fn(v), tabulated then refined by bounded Brent."""
    vals = slope * grid - values_fn(grid)
    k = int(np.argmax(vals))
    while k == grid.size - 1:
        grid = np.linspace(0.0, 2.0 * grid[-1], grid.size)
        vals = slope * grid - values_fn(grid)
        k = int(np.argmax(vals))
    lo, hi = grid[max(k - 1, 0)], grid[k + 1]
    res = minimize_scalar(lambda x: -(slope * x - float(values_fn(np.array(x)))), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-14})
    return max(float(-res.fun), float(vals[k]))


def phi_star_eval(phi: PhiFunction, y: float) -> float:
    """Legendre transform Phi*(y) = sup_v (v y - Phi(v))."""
    if y < 0:
        raise ValueError("Phi* is evaluated for y >= 0")
    return _legendre(lambda v: phi_eval(phi, v), y, np.asarray(phi.grid))


def phi_biconjugate(phi: PhiFunction, v: float, y_max: float | None = None, n: int = 2001) -> float:
    """Phi**(v) from a tabulated Phi*; equals Phi on convex Phi up to grid tolerance."""
    y_max = y_max if y_max is not None else 4.0 * float(phi_derivative(phi, max(v, 1e-3))) + 1.0
    ys = np.linspace(0.0, y_max, n)
    stars = np.array([phi_star_eval(phi, y) for y in ys])
    return _legendre(lambda y: np.interp(y, ys, stars), v, ys)


def phi_derivative(phi: PhiFunction, v):
    """Phi'(v) = c (f^{-1}(v) + v / f'(f^{-1}(v)))."""
    u = f_inverse(phi.b, v)
    fp = np.exp(phi.b * u * u) * (1.0 + 2.0 * phi.b * u * u)
    return phi.c * (u + np.asarray(v) / fp)


def phi_convexity_defect(phi: PhiFunction) -> float:
    """Most negative second difference of Phi on the tabulation grid."""
    vals = phi.c * phi.grid * phi.inv
    return float(np.min(vals[2:] - 2.0 * vals[1:-1] + vals[:-2]))
