"""Experiment configuration: a YAML document with a fixed schema.

Sections map one-to-one to dataclasses below. Unknown sections or keys are
errors. Command-line flags override file values, which override defaults.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .dissipation import DissipatorSpec
from .flows import FlowConfig
from .sde import NoiseSpec, SdeConfig
from .spectral import TorusSpec


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass(frozen=True)
class TorusSection:
    d: int = 2
    N: int = 8
    q: int = 4


@dataclass(frozen=True)
class FlowSection:
    alpha: float = 1.0
    beta: float = 0.5
    s: float = 2.0
    dt: float = 1e-3
    scheme: str = "strang"
    picard_max_iters: int = 60
    picard_tol: float = 1e-13
    c0: float = 0.1
    C0: float = 1.0


@dataclass(frozen=True)
class DissipatorSection:
    kind: str = "strong"
    g_c: float = 1.0
    g_lambda: float = 8.0
    explore: bool = False


@dataclass(frozen=True)
class NoiseSection:
    p: float = 2.0
    sigma: float = 0.1
    scale_n: float = 1.0


@dataclass(frozen=True)
class InitialSection:
    kind: str = "zero"  # zero | random | mode
    amplitude: float = 0.3
    decay: float = 4.0
    cutoff: int | None = None
    k: tuple = (1, 0)
    seed: int = 0


@dataclass(frozen=True)
class RunSection:
    horizon: float = 1.0
    ensemble: int = 1
    seed: int = 0
    thinning: int = 10
    burn_in: float = 0.0
    threads: int = 1
    invariance_time: float = 0.2
    invariance_samples: int = 200
    dt_bias_horizon: float = 0.0
    initial: InitialSection = field(default_factory=InitialSection)


@dataclass(frozen=True)
class ReportSection:
    observables: tuple = ("mass", "energy", "hr_sq", "mcal")
    r_list: tuple = (1.5,)
    output_dir: str = "out"
    checkpoints: bool = True


@dataclass(frozen=True)
class SweepSection:
    axis: str = "sigma"  # sigma | n_modes | scale_n
    values: tuple = (0.2, 0.1, 0.05)
    horizon_scaling: bool = True


@dataclass(frozen=True)
class GrowthSection:
    r: float = 1.5
    horizon: float = 100.0
    i_values: tuple = (0, 1, 2, 3, 4, 5, 6)
    samples: int = 500
    record_every: int = 10
    dt: float = 0.05


@dataclass(frozen=True)
class VerifySection:
    trials: int = 100
    s: float = 2.0
    beta: float = 0.5
    N_f: int = 6
    decay: float = 5.0
    amplitude: float = 1.0
    gammas: tuple = (0.25, 0.5, 0.75, 1.0)
    cordoba_trials: int = 100
    phi_b: float = 0.5
    phi_c: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    torus: TorusSection = field(default_factory=TorusSection)
    flow: FlowSection = field(default_factory=FlowSection)
    dissipator: DissipatorSection = field(default_factory=DissipatorSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    run: RunSection = field(default_factory=RunSection)
    report: ReportSection = field(default_factory=ReportSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    growth: GrowthSection = field(default_factory=GrowthSection)
    verify: VerifySection = field(default_factory=VerifySection)

    # -- builders for module objects -----------------------------------------

    def torus_spec(self) -> TorusSpec:
        t = self.torus
        return TorusSpec(N=t.N, d=t.d, q=t.q)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(**asdict(self.flow))

    def dissipator_spec(self) -> DissipatorSpec:
        f, d = self.flow, self.dissipator
        return DissipatorSpec(kind=d.kind, alpha=f.alpha, beta=f.beta, s=f.s, g_c=d.g_c, g_lambda=d.g_lambda,
                              explore=d.explore)

    def noise_spec(self) -> NoiseSpec:
        n = self.noise
        return NoiseSpec.default(self.torus_spec(), sigma=n.sigma, p=n.p, scale_n=n.scale_n, alpha=self.flow.alpha)

    def sde_config(self) -> SdeConfig:
        return SdeConfig(self.flow_config(), self.noise_spec(), self.dissipator_spec(), seed=self.run.seed)

    def as_dict(self) -> dict:
        return _plain(asdict(self))

    def content_dict(self) -> dict:
        """The configuration minus settings that cannot change any output value.

        Output location and thread count are left out so that reruns elsewhere
        or with a different number of workers produce identical bytes.
        """
        doc = self.as_dict()
        del doc["report"]["output_dir"]
        del doc["run"]["threads"]
        return doc


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot, e.g. 1e-13."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)[eE][-+]?\d+$"),
    list("-+0123456789."),
)

_SCALAR_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _coerce(name: str, value: Any, default: Any, type_name: str):
    if dataclasses.is_dataclass(default):
        return _build(type(default), value, name)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return tuple(value)
    base = type_name.split("|")[0].strip()
    if value is None:
        if "None" in type_name:
            return None
        raise ConfigError(f"{name}: null is not allowed")
    target = _SCALAR_TYPES.get(base)
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Any, prefix: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"section '{prefix}'" if prefix else "top level"
        raise ConfigError(f"unknown key(s) {unknown} in {where}")
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        f = known[key]
        kwargs[key] = _coerce(f"{prefix}.{key}" if prefix else key, value, getattr(defaults, key), str(f.type))
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def load(path: str | Path) -> ExperimentConfig:
    """Read a YAML (or JSON) config; a manifest with a 'config' key is accepted too."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError:
        raise
    try:
        data = json.loads(text) if Path(path).suffix == ".json" else yaml.load(text, Loader=_Loader)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if isinstance(data, dict) and "config" in data and "command" in data:
        data = data["config"]
    return from_dict(data or {})


def override(cfg: ExperimentConfig, **flags) -> ExperimentConfig:
    """Apply command-line flags (None means not given)."""
    run, noise, report = cfg.run, cfg.noise, cfg.report
    if flags.get("seed") is not None:
        run = replace(run, seed=int(flags["seed"]))
    if flags.get("threads") is not None:
        run = replace(run, threads=int(flags["threads"]))
    if flags.get("scale_n") is not None:
        noise = replace(noise, scale_n=float(flags["scale_n"]))
    if flags.get("out") is not None:
        report = replace(report, output_dir=str(flags["out"]))
    verify = cfg.verify
    if flags.get("gamma"):
        verify = replace(verify, gammas=tuple(float(g) for g in flags["gamma"]))
    out = replace(cfg, run=run, noise=noise, report=report, verify=verify)
    validate(out)
    return out


def validate(cfg: ExperimentConfig) -> None:
    """Let every module check its own section; wrap failures as ConfigError."""
    try:
        cfg.torus_spec()
        cfg.flow_config()
        cfg.dissipator_spec()
        if cfg.noise.sigma < 0 or cfg.noise.scale_n < 0:
            raise ValueError("noise sigma and scale_n must be >= 0")
        r = cfg.run
        if r.horizon <= 0:
            raise ValueError("run.horizon must be > 0")
        if r.ensemble < 1 or r.thinning < 1 or r.threads < 1:
            raise ValueError("run.ensemble, run.thinning and run.threads must be >= 1")
        if not 0 <= r.burn_in < 1:
            raise ValueError("run.burn_in must lie in [0, 1)")
        if r.seed < 0 or r.seed >= 2**64:
            raise ValueError("run.seed must be an unsigned 64-bit integer")
        if r.initial.kind not in ("zero", "random", "mode"):
            raise ValueError(f"run.initial.kind must be zero, random or mode, got {r.initial.kind!r}")
        if cfg.sweep.axis not in ("sigma", "n_modes", "scale_n"):
            raise ValueError(f"sweep.axis must be sigma, n_modes or scale_n, got {cfg.sweep.axis!r}")
        if not cfg.growth.r < cfg.flow.s:
            raise ValueError("growth.r must be < flow.s")
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
