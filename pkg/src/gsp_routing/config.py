"""Run configuration read from an INI file.

Sections and keys (all optional; defaults shown)::

    [network]
    service_rates = 0.15, 0.1, 0.25, 0.15, 0.2
    arrival_rate = 0.2

    [policy]
    name = gsp            ; gsp | ssp | ob
    beta =                ; GSP parameters; empty means "train" (compare)
    gamma =               ;   or the region midpoint (simulate, drift-check)
    eta =                 ; OB routing split; empty means "optimize" (compare)

    [sim]
    mode = bernoulli_dt   ; bernoulli_dt | event_driven
    dt = 0.1
    horizon = 100000
    warmup = 0
    seed = 0
    replications = 1
    initial_state =

    [train]
    init_arrival_rate = 0.1
    init_service_rate = 0.5
    beta0 =
    gamma0 =
    max_iters = 50
    theta_beta = 0.001
    theta_gamma = 0.001
    episode_length = 100000
    estimate_rates = true
    grid_step = 0.02
    refine_top = 10
    refine_factor = 10

    [drift]
    shells = 10, 50, 200, 1000
    per_shell = 2000
    check_from = 200

    [output]
    dir = out
    format = table        ; csv | json | table
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .analysis import SamplerConfig
from .errors import ConfigInvalid
from .learn import PiConfig
from .network import REFERENCE_SPEC, NetworkSpec
from .policy import KINDS, BernoulliWeights
from .sim import SimConfig

FORMATS = ("csv", "json", "table")

DEFAULTS = {
    "network": {
        "service_rates": ", ".join(repr(r) for r in REFERENCE_SPEC.service_rates),
        "arrival_rate": repr(REFERENCE_SPEC.arrival_rate),
    },
    "policy": {"name": "gsp", "beta": "", "gamma": "", "eta": ""},
    "sim": {
        "mode": "bernoulli_dt",
        "dt": "0.1",
        "horizon": "100000",
        "warmup": "0",
        "seed": "0",
        "replications": "1",
        "initial_state": "",
    },
    "train": {
        "init_arrival_rate": "0.1",
        "init_service_rate": "0.5",
        "beta0": "",
        "gamma0": "",
        "max_iters": "50",
        "theta_beta": "0.001",
        "theta_gamma": "0.001",
        "episode_length": "100000",
        "estimate_rates": "true",
        "grid_step": "0.02",
        "refine_top": "10",
        "refine_factor": "10",
    },
    "drift": {"shells": "10, 50, 200, 1000", "per_shell": "2000", "check_from": "200"},
    "output": {"dir": "out", "format": "table"},
}


@dataclass(frozen=True)
class PolicySettings:
    name: str = "gsp"
    beta: float | None = None
    gamma: float | None = None
    eta: BernoulliWeights | None = None


@dataclass(frozen=True)
class OptimizeSettings:
    grid_step: float = 0.02
    refine_top: int = 10
    refine_factor: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    spec: NetworkSpec = REFERENCE_SPEC
    policy: PolicySettings = field(default_factory=PolicySettings)
    sim: SimConfig = field(default_factory=SimConfig)
    replications: int = 1
    train: PiConfig = field(default_factory=PiConfig)
    optimize: OptimizeSettings = field(default_factory=OptimizeSettings)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    out_dir: Path = Path("out")
    format: str = "table"


def _floats(text: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigInvalid(f"{key}: expected numbers, got {text!r}") from exc


def _ints(text: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigInvalid(f"{key}: expected integers, got {text!r}") from exc


def _opt_float(section, key: str) -> float | None:
    text = section.get(key, "").strip()
    return _floats(text, key)[0] if text else None


def _get(section, key: str, conv):
    try:
        return conv(section.get(key))
    except ValueError as exc:
        raise ConfigInvalid(f"[{section.name}] {key}: {exc}") from exc


def _bool(section, key: str) -> bool:
    try:
        return section.getboolean(key)
    except ValueError as exc:
        raise ConfigInvalid(f"[{section.name}] {key}: {exc}") from exc


def load_config(path=None, *, seed=None, out_dir=None, fmt=None) -> RunConfig:
    """Read ``path`` (or defaults only) and apply command-line overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read_dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigInvalid(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigInvalid(f"cannot parse {path}: {exc}") from exc
    unknown = set(parser.sections()) - set(DEFAULTS)
    if unknown:
        raise ConfigInvalid(f"unknown config sections: {sorted(unknown)}")
    for name, keys in DEFAULTS.items():
        extra = set(parser[name]) - set(keys)
        if extra:
            raise ConfigInvalid(f"unknown keys in [{name}]: {sorted(extra)}")

    net = parser["network"]
    spec = NetworkSpec(_floats(net["service_rates"], "service_rates"), _get(net, "arrival_rate", float))

    pol = parser["policy"]
    name = pol["name"].strip().lower()
    if name not in KINDS:
        raise ConfigInvalid(f"[policy] name must be one of {sorted(KINDS)}, got {name!r}")
    eta_text = pol["eta"].strip()
    try:
        eta = BernoulliWeights(_floats(eta_text, "eta")) if eta_text else None
    except ValueError as exc:
        raise ConfigInvalid(f"[policy] eta: {exc}") from exc
    policy = PolicySettings(name, _opt_float(pol, "beta"), _opt_float(pol, "gamma"), eta)
    if (policy.beta is None) != (policy.gamma is None):
        raise ConfigInvalid("[policy] beta and gamma must be given together")

    s = parser["sim"]
    x0 = s["initial_state"].strip()
    sim = SimConfig(
        mode=s["mode"].strip(),
        dt=_get(s, "dt", float),
        horizon=_get(s, "horizon", float),
        warmup=_get(s, "warmup", float),
        seed=int(seed) if seed is not None else _get(s, "seed", int),
        initial_state=_ints(x0, "initial_state") if x0 else None,
    )
    sim.validate_for(spec)
    replications = _get(s, "replications", int)
    if replications < 1:
        raise ConfigInvalid("[sim] replications must be >= 1")

    t = parser["train"]
    train = PiConfig(
        init_arrival_rate=_get(t, "init_arrival_rate", float),
        init_service_rate=_get(t, "init_service_rate", float),
        beta0=_opt_float(t, "beta0"),
        gamma0=_opt_float(t, "gamma0"),
        max_iters=_get(t, "max_iters", int),
        theta_beta=_get(t, "theta_beta", float),
        theta_gamma=_get(t, "theta_gamma", float),
        episode_length=_get(t, "episode_length", float),
        estimate_rates=_bool(t, "estimate_rates"),
    )
    if train.max_iters < 0 or train.episode_length <= 0:
        raise ConfigInvalid("[train] max_iters must be >= 0 and episode_length > 0")
    if train.init_arrival_rate <= 0 or train.init_service_rate <= 0:
        raise ConfigInvalid("[train] initial rate guesses must be positive")
    optimize = OptimizeSettings(
        _get(t, "grid_step", float), _get(t, "refine_top", int), _get(t, "refine_factor", float)
    )
    if not 0 < optimize.grid_step <= 1 or optimize.refine_top < 1 or optimize.refine_factor <= 0:
        raise ConfigInvalid("[train] invalid grid search settings")

    d = parser["drift"]
    shells = _ints(d["shells"], "shells")
    if not shells or min(shells) < 1:
        raise ConfigInvalid("[drift] shells must be positive integers")
    sampler = SamplerConfig(
        shells=shells,
        per_shell=_get(d, "per_shell", int),
        seed=sim.seed,
        check_from=_get(d, "check_from", int),
    )
    if sampler.per_shell < 1:
        raise ConfigInvalid("[drift] per_shell must be >= 1")

    o = parser["output"]
    fmt = fmt if fmt is not None else o["format"].strip()
    if fmt not in FORMATS:
        raise ConfigInvalid(f"format must be one of {FORMATS}, got {fmt!r}")
    return RunConfig(
        spec=spec,
        policy=policy,
        sim=sim,
        replications=replications,
        train=train,
        optimize=optimize,
        sampler=sampler,
        out_dir=Path(out_dir) if out_dir is not None else Path(o["dir"]),
        format=fmt,
    )
