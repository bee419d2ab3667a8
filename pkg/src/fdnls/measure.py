"""Empirical stationary measures and the statistics computed on them.

Samples come from Bogoliubov-Krylov time averages of SDE paths started at
zero. Standard errors use batch means within each path, pooled over paths,
so they account for autocorrelation along the path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dissipation import DissipatorSpec, ecal, g_tilde, g_tilde_inv, mcal
from .flows import FlowConfig, Trajectory, energy, evolve, growth_delay, growth_margin, mass
from .inequalities import phi_build, phi_inverse
from .reports import ObservableReport, batch_means, config_hash, mean_se
from .sde import (
    SdeConfig,
    brownian_increments,
    coarsen,
    path_rng,
    run_paths,
    simulate,
)
from .spectral import SpectralField, exp_weight, spectral_power, transform

N_BATCHES = 10


@dataclass(frozen=True, eq=False)
class MeasureSample:
    """Weighted draws of E_N-valued fields with their origin along SDE paths."""

    spec: object
    samples: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    times: np.ndarray = field(repr=False)
    path_index: np.ndarray = field(repr=False)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.complex128)
        w = np.asarray(self.weights, dtype=float)
        if x.shape[0] == 0:
            raise ValueError("a measure sample needs at least one draw")
        if x.shape[1:] != self.spec.shape:
            raise ValueError("sample shape does not match the spec")
        if w.shape != (x.shape[0],) or np.any(w < 0):
            raise ValueError("weights must be nonnegative, one per sample")
        if not math.isclose(float(np.sum(w)), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ValueError(f"weights sum to {np.sum(w)}, expected 1")
        for name, v in (("samples", x), ("weights", w)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def __len__(self) -> int:
        return self.samples.shape[0]

    def field(self, i: int) -> SpectralField:
        return SpectralField(self.spec, self.samples[i])

    def subsample(self, stride: int) -> "MeasureSample":
        idx = np.arange(0, len(self), stride)
        w = self.weights[idx] / np.sum(self.weights[idx])
        return replace(self, samples=self.samples[idx], weights=w, times=self.times[idx],
                       path_index=self.path_index[idx])

    def mean_se(self, values: np.ndarray) -> tuple[float, float]:
        """Weighted mean and pooled batch-means standard error."""
        values = np.asarray(values, dtype=float)
        est = float(np.sum(self.weights * values))
        blocks = []
        for p in np.unique(self.path_index):
            v = values[self.path_index == p]
            usable = v.size - v.size % N_BATCHES
            if usable >= N_BATCHES * 2:
                blocks.extend(v[:usable].reshape(N_BATCHES, -1).mean(axis=1))
            else:
                blocks.append(v.mean())
        blocks = np.asarray(blocks)
        if blocks.size < 2:
            return est, 0.0
        return est, float(np.std(blocks, ddof=1) / math.sqrt(blocks.size))


def bk_sample(
    cfg: SdeConfig,
    horizon: float,
    stride: int = 10,
    burn_in: float = 0.0,
    n_paths: int = 1,
    threads: int = 1,
) -> MeasureSample:
    """Time-averaged law of SDE paths started at u = 0.

    States are kept every ``stride`` steps on [burn_in * horizon, horizon].
    ``burn_in = 0`` is the plain Bogoliubov-Krylov average, transient included.
    """
    if not horizon > 0:
        raise ValueError(f"horizon must be > 0, got {horizon}")
    if not 0 <= burn_in < 1:
        raise ValueError(f"burn_in must lie in [0, 1), got {burn_in}")

    def one(i):
        return simulate(cfg.with_id(i), horizon, None, (), stride=stride, keep_states=True)

    recs = run_paths(one, range(n_paths), threads)
    xs, ts, ps = [], [], []
    for i, r in enumerate(recs):
        keep = r.times >= burn_in * horizon - 1e-12
        if burn_in == 0:
            keep[0] = True
        xs.append(r.states[keep])
        ts.append(r.times[keep])
        ps.append(np.full(int(np.sum(keep)), i))
    x = np.concatenate(xs)
    w = np.full(x.shape[0], 1.0 / x.shape[0])
    prov = {"sigma": cfg.sigma, "N": cfg.spec.N, "horizon": horizon, "burn_in": burn_in, "stride": stride,
            "dt": cfg.flow.dt, "seed": cfg.seed, "n_paths": n_paths, "config_hash": cfg.digest()}
    return MeasureSample(cfg.spec, x, w, np.concatenate(ts), np.concatenate(ps), prov)


def observable_values(ms: MeasureSample, name: str, cfg: SdeConfig, r: float = 1.5) -> np.ndarray:
    ds = cfg.diss
    if name == "mass":
        return np.array([mass(ms.field(i)) for i in range(len(ms))])
    if name == "energy":
        return np.array([energy(ms.field(i), cfg.flow.alpha, cfg.flow.beta) for i in range(len(ms))])
    if name == "mcal":
        return np.array([mcal(ds, ms.field(i)) for i in range(len(ms))])
    if name == "ecal":
        return np.array([ecal(ds, ms.field(i)) for i in range(len(ms))])
    if name == "hr_sq":
        w = 1.0 + spectral_power(ms.spec, r)
        axes = tuple(range(1, ms.spec.d + 1))
        return np.sum(w * np.abs(ms.samples) ** 2, axis=axes)
    if name == "hs_norm":
        w = 1.0 + spectral_power(ms.spec, cfg.flow.s)
        axes = tuple(range(1, ms.spec.d + 1))
        return np.sqrt(np.sum(w * np.abs(ms.samples) ** 2, axis=axes))
    raise ValueError(f"unknown observable {name!r}")


def stationary_dt_bias(cfg: SdeConfig, horizon: float, stride_time: float = 0.1, burn_in: float = 0.0,
                       n_paths: int = 1, observable: str = "mcal") -> dict:
    """Change of the time average of an observable when dt is halved on a shared Brownian path."""
    fine = cfg.with_dt(cfg.flow.dt / 2.0)
    n_fine = int(round(horizon / fine.flow.dt))
    out = []
    for i in range(n_paths):
        dW = brownian_increments(path_rng(cfg.seed, 10_000 + i), cfg.spec.shape, fine.flow.dt, n_fine)
        vals = []
        for c, inc in ((cfg, coarsen(dW, 2)), (fine, dW)):
            stride = max(1, int(round(stride_time / c.flow.dt)))
            r = simulate(c, horizon, None, (observable,), stride=stride, increments=inc)
            keep = r.times >= burn_in * horizon - 1e-12
            vals.append(float(np.mean(r.observables[observable][keep])))
        out.append(vals[1] - vals[0])
    delta = float(np.mean(out))
    return {"delta": delta, "allowance": 2.0 * abs(delta), "horizon": horizon, "n_paths": n_paths}


def check_stationary_mass(ms: MeasureSample, cfg: SdeConfig, dt_bias: float = 0.0) -> ObservableReport:
    """Time average of Mcal against A^0_N / 2 (target computed from the noise alone)."""
    target = 0.5 * cfg.noise.A(0.0)
    est, se = ms.mean_se(observable_values(ms, "mcal", cfg))
    tol = 3.0 * se + dt_bias
    if target == 0:
        tol = max(tol, 1e-14)
    return ObservableReport("stationary_mass", est, se, len(ms), target=target, tolerance=tol,
                            passed=bool(abs(est - target) <= tol), config_hash=cfg.digest(),
                            details={"dt_bias": dt_bias, **ms.provenance})


def energy_scale(cfg: SdeConfig) -> float:
    """A^alpha + A^((d-1)/2) (1 + A^0)."""
    n = cfg.noise
    return n.A(cfg.flow.alpha) + n.A((cfg.spec.d - 1) / 2.0) * (1.0 + n.A(0.0))


def check_stationary_energy(ms: MeasureSample, cfg: SdeConfig) -> ObservableReport:
    """Time average of Ecal and its ratio to the noise scale A^alpha + A^((d-1)/2)(1 + A^0)."""
    est, se = ms.mean_se(observable_values(ms, "ecal", cfg))
    scale = energy_scale(cfg)
    ratio = est / scale if scale > 0 else 0.0
    return ObservableReport("stationary_energy", est, se, len(ms), config_hash=cfg.digest(),
                            details={"scale": scale, "ratio": ratio, "ratio_se": se / scale if scale > 0 else 0.0,
                                     **ms.provenance})


def ratio_spread(reports: Sequence[ObservableReport]) -> float:
    """max/min of the energy ratios across a sweep."""
    r = np.array([rep.details["ratio"] for rep in reports])
    if np.any(r <= 0):
        return float("inf") if np.any(r > 0) else 1.0
    return float(np.max(r) / np.min(r))


def _push(ms: MeasureSample, flow: FlowConfig, t: float, max_samples: int | None):
    idx = np.arange(len(ms))
    if max_samples is not None and len(ms) > max_samples:
        idx = np.linspace(0, len(ms) - 1, max_samples).round().astype(int)
    sub = replace(ms, samples=ms.samples[idx], weights=np.full(idx.size, 1.0 / idx.size), times=ms.times[idx],
                  path_index=ms.path_index[idx])
    if t == 0:
        return sub, sub
    after = np.array([evolve(sub.field(i), t, flow, record_every=10**9).final.coeffs for i in range(len(sub))])
    return sub, replace(sub, samples=after)


def invariance_test(
    ms: MeasureSample,
    cfg: SdeConfig,
    t: float,
    observables: Sequence[str] = ("mass", "energy", "hr_sq", "mcal"),
    r: float = 1.5,
    max_samples: int | None = None,
    conserved_rtol: dict | None = None,
) -> list[ObservableReport]:
    """Compare observable means before and after the deterministic flow for time t.

    Mass and energy are conserved pathwise, so they must agree sample by
    sample to integrator tolerance (default relative 1e-8 for mass, 1e-5 for
    energy). Other observables pass when the means differ by at most three
    combined standard errors.
    """
    conserved_rtol = {"mass": 1e-8, "energy": 1e-5, **(conserved_rtol or {})}
    before, after = _push(ms, cfg.flow, t, max_samples)
    out = []
    for name in observables:
        v0 = observable_values(before, name, cfg, r)
        v1 = observable_values(after, name, cfg, r)
        m0, se0 = before.mean_se(v0)
        m1, se1 = after.mean_se(v1)
        diff = m1 - m0
        if name in conserved_rtol:
            scale = np.maximum(np.abs(v0), 1e-300)
            worst = float(np.max(np.abs(v1 - v0) / scale)) if t != 0 else 0.0
            tol = conserved_rtol[name] * max(abs(m0), 1e-300)
            passed = worst <= conserved_rtol[name]
            details = {"max_pathwise_rel_change": worst, "mode": "pathwise"}
        else:
            comb = math.sqrt(se0**2 + se1**2)
            tol = 3.0 * comb
            passed = abs(diff) <= tol
            details = {"before": m0, "after": m1, "combined_se": comb, "mode": "statistical"}
        out.append(ObservableReport(f"invariance_{name}", diff, math.sqrt(se0**2 + se1**2), len(before), target=0.0,
                                    tolerance=tol, passed=bool(passed), config_hash=cfg.digest(),
                                    details={"t": t, **details}))
    return out


def growth_delays(
    ms: MeasureSample,
    cfg: SdeConfig,
    r: float,
    horizon: float,
    record_every: int = 1,
    max_samples: int | None = None,
    i_max: int = 64,
    return_margins: bool = False,
):
    """Minimal time delay i per sample along phi^t on [0, horizon]; i_max + 1 marks 'none'.

    With ``return_margins`` the continuous margins (see ``growth_margin``) are
    returned as a second array.
    """
    if not r < cfg.flow.s:
        raise ValueError(f"growth sets need r < s, got r={r}, s={cfg.flow.s}")
    ds = cfg.diss
    ginv = lambda z: g_tilde_inv(z, ds.g_c, ds.g_lambda, ds.beta)  # noqa: E731
    gt = lambda x: g_tilde(x, ds.g_c, ds.g_lambda, ds.beta)  # noqa: E731
    sub, _ = _push(ms, cfg.flow, 0.0, max_samples)
    out, margins = [], []
    for i in range(len(sub)):
        traj = evolve(sub.field(i), horizon, cfg.flow, record_every=record_every)
        d = growth_delay(traj, r, ginv, i_max=i_max)
        out.append(i_max + 1 if d is None else d)
        margins.append(growth_margin(traj, r, gt))
    if return_margins:
        return np.array(out), np.array(margins)
    return np.array(out)


def growth_set_fraction(delays: np.ndarray, i) -> np.ndarray | float:
    """Fraction of samples outside the growth set of delay i (bound violated somewhere)."""
    delays = np.asarray(delays)
    i_arr = np.atleast_1d(np.asarray(i))
    out = np.array([float(np.mean(delays > k)) for k in i_arr])
    return float(out[0]) if np.ndim(i) == 0 else out


def log_linear_fit(i_values, fractions) -> dict:
    """Least-squares line through (i, ln fraction) over the positive fractions."""
    i_values = np.asarray(i_values, dtype=float)
    f = np.asarray(fractions, dtype=float)
    ok = f > 0
    if np.sum(ok) < 3:
        return {"slope": float("nan"), "intercept": float("nan"), "r2": float("nan"), "points": int(np.sum(ok))}
    x, y = i_values[ok], np.log(f[ok])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2, "points": int(np.sum(ok))}


# -- path norms ---------------------------------------------------------------

def path_norm_terms(traj: Trajectory, alpha: float, beta: float, s: float) -> dict:
    """Time integrands of the path norm, on the trajectory's sample grid.

    ||d_t u||_{dot H^(s-alpha) + L^2} is bounded by the witness split
    ||(-Delta)^alpha u||_{dot H^(s-alpha)} + ||2 beta P_N(u e^{beta|u|^2})||_{L^2}.
    """
    spec = traj.spec
    tr = transform(spec)
    lam_a = spectral_power(spec, alpha)
    lam_g = spectral_power(spec, s - alpha)
    ws = 1.0 + spectral_power(spec, s)
    hs, dual, l1, w2 = [], [], [], []
    for c in traj.states:
        v = tr.to_grid(c)
        w = exp_weight(v, beta)
        pn = tr.from_grid(v * w)
        hs.append(float(np.sum(ws * np.abs(c) ** 2)))
        a = math.sqrt(float(np.sum(lam_g * np.abs(lam_a * c) ** 2)))
        b = 2.0 * beta * math.sqrt(float(np.sum(np.abs(pn) ** 2)))
        dual.append((a + b) ** 2)
        l1.append(tr.integrate(np.abs(v) * w))
        w2.append(tr.integrate(np.abs(v) ** 2 * w))
    return {"hs_sq": np.array(hs), "dt_dual_sq": np.array(dual), "l1": np.array(l1), "weighted_l2": np.array(w2)}


def _trapz(y, t):
    return float(np.trapezoid(y, t)) if hasattr(np, "trapezoid") else float(np.trapz(y, t))


def path_norm_report(traj: Trajectory, T: float, alpha: float, beta: float, s: float) -> ObservableReport:
    """||u||^2_{X_T} / T for one trajectory, with ||u e^{beta|u|^2}||_{L^1 L^1} / T in the details."""
    if not T > 0:
        raise ValueError("T must be > 0")
    terms = path_norm_terms(traj, alpha, beta, s)
    t = np.abs(traj.times)
    xt = _trapz(terms["hs_sq"] + terms["dt_dual_sq"], t)
    l1 = _trapz(terms["l1"], t)
    w2 = _trapz(terms["weighted_l2"], t)
    return ObservableReport("path_norm", xt / T, 0.0, 1, details={"l1l1_per_T": l1 / T, "weighted_l2_per_T": w2 / T})


def path_norm_ensemble(ms: MeasureSample, cfg: SdeConfig, T: float, max_samples: int | None = 50,
                       record_every: int = 10) -> ObservableReport:
    """Path norms averaged over deterministic trajectories started from the samples.

    Also runs the Jensen cross-check: the averaged L^1 L^1 norm per unit time
    cannot exceed Vol Phi^{-1}(<int |u|^2 e^{beta|u|^2}> / Vol) with Phi built from b = beta, c = 1.
    """
    f = cfg.flow
    sub, _ = _push(ms, f, 0.0, max_samples)
    xs, l1s, w2s = [], [], []
    for i in range(len(sub)):
        traj = evolve(sub.field(i), T, f, record_every=record_every)
        rep = path_norm_report(traj, T, f.alpha, f.beta, f.s)
        xs.append(rep.estimate)
        l1s.append(rep.details["l1l1_per_T"])
        w2s.append(rep.details["weighted_l2_per_T"])
    est, se = mean_se(xs)
    vol = sub.spec.volume
    l1_mean = float(np.mean(l1s))
    jensen = vol * phi_inverse(phi_build(f.beta, 1.0), float(np.mean(w2s)) / vol) if f.beta > 0 else float("inf")
    return ObservableReport("path_norm_ratio", est, se, len(sub), config_hash=cfg.digest(),
                            details={"T": T, "l1l1_per_T": l1_mean, "jensen_bound": jensen,
                                     "jensen_ok": bool(l1_mean <= jensen * (1 + 1e-12)), "N": sub.spec.N})


def large_data_tail(ms: MeasureSample, K: float, s: float) -> tuple[float, float]:
    """Weighted fraction of samples with ||u||_{H^s} > K, with batch-means SE."""
    w = 1.0 + spectral_power(ms.spec, s)
    axes = tuple(range(1, ms.spec.d + 1))
    norms = np.sqrt(np.sum(w * np.abs(ms.samples) ** 2, axis=axes))
    return ms.mean_se((norms > K).astype(float))
