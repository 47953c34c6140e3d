"""Experiment configuration: JSON file plus environment overrides.

Sections map onto dataclasses; unknown keys are rejected and every
range constraint is checked before any computation starts. Environment
variables ``LISBAYES_<SECTION>__<KEY>`` (or ``LISBAYES_<KEY>`` for
top-level keys) override file values; their values are parsed as JSON
when possible, otherwise taken as strings.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import (
    ConstantModel,
    SyntheticProblem,
    make_elliptic_problem,
    make_lognormal_problem,
    make_linear_problem,
)

ENV_PREFIX = "LISBAYES_"


@dataclass
class ModelConfig:
    kind: str = "lognormal"
    dim: int = 50
    dim_obs: int = 20
    seed: int = 0
    lambda0: float = 10.0
    beta_lambda: float = 1.0
    gamma0: float = 1.0
    beta_gamma: float = 2.0
    sigma: float = 1.0
    corr_length: float = 0.3
    prior_scale: float = 1.0
    log_c: float = 0.0

    def validate(self):
        if self.kind not in ("linear", "lognormal", "elliptic", "constant"):
            raise ConfigError("model.kind", f"unknown model kind {self.kind!r}")
        _positive_int(self, "model", "dim", "dim_obs")
        _positive(self, "model", "lambda0", "gamma0", "sigma", "corr_length", "prior_scale")
        if self.kind == "elliptic" and self.dim < 3:
            raise ConfigError("model.dim", "elliptic model needs dim >= 3")


@dataclass
class GramConfig:
    m: int = 10_000
    seed: int = 1
    kinds: list = field(default_factory=lambda: ["H0", "H1"])
    m_values: list = field(default_factory=lambda: [100, 1000, 10_000])
    m_reference: int = 100_000

    def validate(self):
        _positive_int(self, "gram", "m", "m_reference")
        for k in self.kinds:
            if k not in ("H0", "H1"):
                raise ConfigError("gram.kinds", f"unknown Gram matrix {k!r}")
        if not self.kinds:
            raise ConfigError("gram.kinds", "must not be empty")
        _int_list(self.m_values, "gram.m_values", 1)


@dataclass
class SubspaceConfig:
    d_r: list = field(default_factory=lambda: [4, 8, 16])
    tail_tol: float | None = None

    def validate(self):
        _int_list(self.d_r, "subspace.d_r", 0)
        if self.tail_tol is not None and not self.tail_tol > 0:
            raise ConfigError("subspace.tail_tol", "must be positive")


@dataclass
class SurrogateConfig:
    kinds: list = field(default_factory=lambda: ["F", "G", "L"])
    M: list = field(default_factory=lambda: [4])
    M_sweep: list = field(default_factory=lambda: [1, 2, 4, 8])
    randomness: str = "FixedSeedBank"

    def validate(self):
        for k in self.kinds:
            if str(k).upper() not in ("F", "G", "L"):
                raise ConfigError("surrogate.kinds", f"unknown surrogate kind {k!r}")
        if not self.kinds:
            raise ConfigError("surrogate.kinds", "must not be empty")
        _int_list(self.M, "surrogate.M", 1)
        _int_list(self.M_sweep, "surrogate.M_sweep", 1)
        if self.randomness not in ("FixedSeedBank", "Fresh"):
            raise ConfigError("surrogate.randomness", "must be FixedSeedBank or Fresh")


@dataclass
class SamplerConfig:
    algorithm: str = "adaptive"
    epochs: int = 5
    t: int = 2000
    K_star: int = 1
    n_particles: int = 1024
    tau: float = 0.5
    t_k: int = 5
    betas: list | None = None
    step_size: float | None = None
    proposal: str = "RandomWalk"
    rho: float = 0.5
    d_r: int = 8
    kind: str = "G"
    M: int = 4
    resampling: str = "multinomial"

    def validate(self):
        if self.algorithm not in ("adaptive", "lis"):
            raise ConfigError("sampler.algorithm", "must be 'adaptive' or 'lis'")
        _positive_int(self, "sampler", "t", "n_particles", "t_k", "M")
        for name in ("epochs", "K_star", "d_r"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"sampler.{name}", "must be >= 0")
        if self.n_particles < 2:
            raise ConfigError("sampler.n_particles", "need at least two particles")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("sampler.tau", "must lie in (0, 1)")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError("sampler.step_size", "must be positive")
        if self.proposal not in ("RandomWalk", "PCN"):
            raise ConfigError("sampler.proposal", "must be RandomWalk or PCN")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError("sampler.rho", "must lie in (0, 1]")
        if str(self.kind).upper() not in ("F", "G", "L"):
            raise ConfigError("sampler.kind", "unknown surrogate kind")
        if self.resampling not in ("multinomial", "systematic"):
            raise ConfigError("sampler.resampling", "must be multinomial or systematic")
        if self.betas is not None:
            b = [float(v) for v in self.betas]
            if not b or any(y <= x for x, y in zip(b, b[1:])) or b[-1] != 1.0 or b[0] <= 0:
                raise ConfigError("sampler.betas", "must increase strictly within (0, 1] and end at 1")


@dataclass
class DiagnosticsConfig:
    kappa: float = 1.0
    replications: int = 100
    n_target: int = 20_000
    quantiles: list = field(default_factory=lambda: [0.1, 0.5, 0.9])
    oracle: bool = True
    thin: int = 5
    smc_particles: int = 1024

    def validate(self):
        _positive(self, "diagnostics", "kappa")
        _positive_int(self, "diagnostics", "replications", "n_target", "thin", "smc_particles")
        if self.n_target < 2:
            raise ConfigError("diagnostics.n_target", "need at least two samples")
        for q in self.quantiles:
            if not 0.0 <= q <= 1.0:
                raise ConfigError("diagnostics.quantiles", "quantiles must lie in [0, 1]")


SECTIONS = {
    "model": ModelConfig,
    "gram": GramConfig,
    "subspace": SubspaceConfig,
    "surrogate": SurrogateConfig,
    "sampler": SamplerConfig,
    "diagnostics": DiagnosticsConfig,
}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    gram: GramConfig = field(default_factory=GramConfig)
    subspace: SubspaceConfig = field(default_factory=SubspaceConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    seed: int = 0
    out: str = "out"

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        if int(self.seed) < 0 or int(self.seed) >= 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        if max(self.subspace.d_r, default=0) > self.model.dim:
            raise ConfigError("subspace.d_r", f"exceeds model dimension {self.model.dim}")
        if self.sampler.d_r > self.model.dim:
            raise ConfigError("sampler.d_r", f"exceeds model dimension {self.model.dim}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


def _positive(obj, section, *names):
    for n in names:
        v = getattr(obj, n)
        if not isinstance(v, (int, float)) or not v > 0:
            raise ConfigError(f"{section}.{n}", "must be positive")


def _positive_int(obj, section, *names):
    for n in names:
        v = getattr(obj, n)
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ConfigError(f"{section}.{n}", "must be a positive integer")


def _int_list(values, key, lo):
    if not isinstance(values, list) or not values:
        raise ConfigError(key, "must be a non-empty list")
    for v in values:
        if isinstance(v, bool) or not isinstance(v, int) or v < lo:
            raise ConfigError(key, f"entries must be integers >= {lo}")


def _build_section(cls, data, section):
    if not isinstance(data, dict):
        raise ConfigError(section, "must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in known:
            raise ConfigError(f"{section}.{k}", "unknown key")
    return cls(**data)


def _coerce(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env(data, environ=None):
    """Merge ``LISBAYES_*`` variables into a raw config dictionary."""
    environ = os.environ if environ is None else environ
    data = json.loads(json.dumps(data))
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        if len(path) == 1:
            data[path[0]] = _coerce(raw)
        elif len(path) == 2:
            data.setdefault(path[0], {})
            if not isinstance(data[path[0]], dict):
                raise ConfigError(path[0], "must be an object")
            data[path[0]][path[1]] = _coerce(raw)
        else:
            raise ConfigError(name, "environment override nests too deeply")
    return data


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key in SECTIONS:
            kwargs[key] = _build_section(SECTIONS[key], value, key)
        elif key in ("seed", "out"):
            kwargs[key] = value
        else:
            raise ConfigError(key, "unknown key")
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError("<root>", str(exc)) from None
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int):
        raise ConfigError("seed", "must be an integer")
    return cfg.validate()


def load_config(path=None, environ=None, overrides=None):
    """Read a JSON config (optional), apply env and explicit overrides, validate."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}") from None
    data = apply_env(data, environ)
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    return config_from_dict(data)


def build_problem(mc: ModelConfig) -> SyntheticProblem:
    if mc.kind == "linear":
        return make_linear_problem(mc.dim, mc.dim_obs, mc.seed, mc.lambda0, mc.beta_lambda, mc.gamma0,
                                   mc.beta_gamma, mc.sigma)
    if mc.kind == "lognormal":
        return make_lognormal_problem(mc.dim, mc.dim_obs, mc.seed, mc.gamma0, mc.beta_gamma, mc.lambda0,
                                      mc.beta_lambda, mc.sigma)
    if mc.kind == "elliptic":
        return make_elliptic_problem(mc.dim - 1, mc.dim_obs, mc.seed, mc.sigma, mc.corr_length, mc.prior_scale)
    return SyntheticProblem(ConstantModel(mc.dim, mc.log_c), np.zeros(mc.dim))
