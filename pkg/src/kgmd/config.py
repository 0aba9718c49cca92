"""Run configuration: a flat, sectioned key-value file with documented defaults.

Every key falls back to the dataclass default; the effective (post-default)
configuration is echoed to the output directory and re-running from the echo
reproduces the run.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .gating import GateState, VARIANTS
from .network import RADII_PRESETS
from .physics import INITIAL_DATA, LossWeights, ProblemSpec, make_problem
from .training import TrainConfig


@dataclass(frozen=True)
class NetworkConfig:
    d_model: int = 64
    modes: int = 16
    radii_preset: str = "model-config"
    radii: tuple = ()            # explicit override of the preset
    counts: tuple = (3, 5, 7)
    encoder_widths: tuple = (64,)
    mixer_hidden: int = 8
    head_widths: tuple = (64, 64)

    def resolve_radii(self) -> tuple:
        if self.radii:
            return self.radii
        if self.radii_preset not in RADII_PRESETS:
            raise ConfigError(f"unknown radii preset {self.radii_preset!r}")
        return RADII_PRESETS[self.radii_preset]


@dataclass(frozen=True)
class ReferenceConfig:
    grid_n: int = 256
    nkge_dt_frac: float = 1.0 / 64.0     # dt = frac * eps^2
    env_dt: float = 1.0 / 256.0
    snapshots: int = 51
    method: str = "direct"               # or "envelope"


@dataclass(frozen=True)
class EvaluateConfig:
    rmae_outer_sqrt: bool = True


@dataclass(frozen=True)
class ConvergenceConfig:
    eps_list: tuple = (0.2, 0.1, 0.05)
    times: tuple = (1.0, 2.0, 3.0, 4.0)
    fit_time: float = 1.0
    grid_n: int = 256


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemSpec
    network: NetworkConfig
    training: TrainConfig
    reference: ReferenceConfig
    evaluate: EvaluateConfig
    convergence: ConvergenceConfig


_DEFAULT_PROBLEM = dict(init="gauss-sech", eps=0.5, lam=1.0, T=5.0,
                        domain="-16,16")


def _parse_tuple(s: str, cast) -> tuple:
    s = s.strip()
    if not s:
        return ()
    return tuple(cast(tok.strip()) for tok in s.split(",") if tok.strip())


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _get(cp, section, key, default, cast):
    if not cp.has_section(section) or not cp.has_option(section, key):
        return default
    raw = cp.get(section, key)
    try:
        return cast(raw)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc


_KNOWN_KEYS = {
    "problem": {"init", "eps", "lambda", "T", "domain"},
    "network": {"d_model", "modes", "radii_preset", "radii", "counts",
                "encoder_widths", "mixer_hidden", "head_widths"},
    "training": {"iterations", "adam_iterations", "adam_lr", "adam_beta1",
                 "adam_beta2", "adam_eps", "lbfgs_history", "lbfgs_max_probes",
                 "lbfgs_backtrack", "lbfgs_c1", "n_collocation", "n_initial",
                 "n_boundary", "w_res", "w_ic", "w_bd", "gate_alpha",
                 "gate_gamma0", "gate_eta", "gate_eps_tol", "gate_delta_max",
                 "gate_variant", "gate_residual_weighting", "probe_points",
                 "probe_dt_frac", "resample_every", "swap_fraction",
                 "window_min_gate", "window_floor_time", "prep_grid_n",
                 "seed"},
    "reference": {"grid_n", "nkge_dt_frac", "env_dt", "snapshots", "method"},
    "evaluate": {"rmae_outer_sqrt"},
    "convergence": {"eps_list", "times", "fit_time", "grid_n"},
}


def parse_config(path, seed_override: int | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read configuration file {path}")
    for section in cp.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp.options(section):
            if key.lower() not in {k.lower() for k in _KNOWN_KEYS[section]}:
                raise ConfigError(f"unknown key {key!r} in [{section}]")

    init = _get(cp, "problem", "init", _DEFAULT_PROBLEM["init"], str).strip()
    if init not in INITIAL_DATA:
        raise ConfigError(f"unknown initial data {init!r}; "
                          f"known: {sorted(INITIAL_DATA)}")
    eps = _get(cp, "problem", "eps", _DEFAULT_PROBLEM["eps"], float)
    lam = _get(cp, "problem", "lambda", _DEFAULT_PROBLEM["lam"], float)
    T = _get(cp, "problem", "T", _DEFAULT_PROBLEM["T"], float)
    dom_raw = _get(cp, "problem", "domain", _DEFAULT_PROBLEM["domain"], str)
    pieces = [p for p in dom_raw.split(";") if p.strip()]
    dims = INITIAL_DATA[init][0] or 1
    if len(pieces) == 1 and dims > 1:
        pieces = pieces * dims
    if len(pieces) != dims:
        raise ConfigError(f"domain must give {dims} interval(s)")
    domain = []
    for p in pieces:
        vals = _parse_tuple(p, float)
        if len(vals) != 2:
            raise ConfigError(f"bad domain interval {p!r}")
        domain.append(tuple(vals))
    try:
        problem = make_problem(init, eps=eps, lam=lam, T=T,
                               domain=tuple(domain))
    except Exception as exc:
        raise ConfigError(str(exc)) from exc

    network = NetworkConfig(
        d_model=_get(cp, "network", "d_model", 64, int),
        modes=_get(cp, "network", "modes", 16, int),
        radii_preset=_get(cp, "network", "radii_preset", "model-config",
                          str).strip(),
        radii=_get(cp, "network", "radii", (),
                   lambda s: _parse_tuple(s, float)),
        counts=_get(cp, "network", "counts", (3, 5, 7),
                    lambda s: _parse_tuple(s, int)),
        encoder_widths=_get(cp, "network", "encoder_widths", (64,),
                            lambda s: _parse_tuple(s, int)),
        mixer_hidden=_get(cp, "network", "mixer_hidden", 8, int),
        head_widths=_get(cp, "network", "head_widths", (64, 64),
                         lambda s: _parse_tuple(s, int)),
    )
    network.resolve_radii()

    variant = _get(cp, "training", "gate_variant", "tanh", str).strip()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown gate variant {variant!r}")
    gate = GateState(
        alpha=_get(cp, "training", "gate_alpha", 5.0, float),
        gamma=_get(cp, "training", "gate_gamma0", -0.5, float),
        eta=_get(cp, "training", "gate_eta", 1e-3, float),
        eps_tol=_get(cp, "training", "gate_eps_tol", 1.0, float),
        delta_max=_get(cp, "training", "gate_delta_max", 0.1, float),
        variant=variant,
    )
    weights = LossWeights(
        w_res=_get(cp, "training", "w_res", 1.0, float),
        w_ic=_get(cp, "training", "w_ic", 1.0, float),
        w_bd=_get(cp, "training", "w_bd", 1.0, float),
    )
    seed = _get(cp, "training", "seed", 0, int)
    if seed_override is not None:
        seed = seed_override
    training = TrainConfig(
        iterations=_get(cp, "training", "iterations", 1000, int),
        adam_iterations=_get(cp, "training", "adam_iterations", 500, int),
        adam_lr=_get(cp, "training", "adam_lr", 2e-3, float),
        adam_beta1=_get(cp, "training", "adam_beta1", 0.9, float),
        adam_beta2=_get(cp, "training", "adam_beta2", 0.999, float),
        adam_eps=_get(cp, "training", "adam_eps", 1e-8, float),
        lbfgs_history=_get(cp, "training", "lbfgs_history", 20, int),
        lbfgs_max_probes=_get(cp, "training", "lbfgs_max_probes", 25, int),
        lbfgs_backtrack=_get(cp, "training", "lbfgs_backtrack", 0.5, float),
        lbfgs_c1=_get(cp, "training", "lbfgs_c1", 1e-4, float),
        n_collocation=_get(cp, "training", "n_collocation", 1024, int),
        n_initial=_get(cp, "training", "n_initial", 128, int),
        n_boundary=_get(cp, "training", "n_boundary", 128, int),
        weights=weights,
        gate=gate,
        gate_residual_weighting=_get(cp, "training",
                                     "gate_residual_weighting", False,
                                     _parse_bool),
        probe_points=_get(cp, "training", "probe_points", 16, int),
        probe_dt_frac=_get(cp, "training", "probe_dt_frac", 0.02, float),
        resample_every=_get(cp, "training", "resample_every", 50, int),
        swap_fraction=_get(cp, "training", "swap_fraction", 0.2, float),
        window_min_gate=_get(cp, "training", "window_min_gate", 0.05, float),
        window_floor_time=_get(cp, "training", "window_floor_time", 0.5, float),
        prep_grid_n=_get(cp, "training", "prep_grid_n", 256, int),
        seed=seed,
    )

    method = _get(cp, "reference", "method", "direct", str).strip()
    if method not in ("direct", "envelope"):
        raise ConfigError(f"unknown reference method {method!r}")
    reference = ReferenceConfig(
        grid_n=_get(cp, "reference", "grid_n", 256, int),
        nkge_dt_frac=_get(cp, "reference", "nkge_dt_frac", 1.0 / 64.0, float),
        env_dt=_get(cp, "reference", "env_dt", 1.0 / 256.0, float),
        snapshots=_get(cp, "reference", "snapshots", 51, int),
        method=method,
    )
    evaluate = EvaluateConfig(
        rmae_outer_sqrt=_get(cp, "evaluate", "rmae_outer_sqrt", True,
                             _parse_bool),
    )
    convergence = ConvergenceConfig(
        eps_list=_get(cp, "convergence", "eps_list", (0.2, 0.1, 0.05),
                      lambda s: _parse_tuple(s, float)),
        times=_get(cp, "convergence", "times", (1.0, 2.0, 3.0, 4.0),
                   lambda s: _parse_tuple(s, float)),
        fit_time=_get(cp, "convergence", "fit_time", 1.0, float),
        grid_n=_get(cp, "convergence", "grid_n", 256, int),
    )
    return RunConfig(problem=problem, network=network, training=training,
                     reference=reference, evaluate=evaluate,
                     convergence=convergence)


def write_effective_config(path, cfg: RunConfig):
    """Echo every effective key so the file round-trips to the same run."""
    cp = configparser.ConfigParser(interpolation=None)
    p, n, t, r = cfg.problem, cfg.network, cfg.training, cfg.reference
    cp["problem"] = {
        "init": p.init_name,
        "eps": repr(p.eps),
        "lambda": repr(p.lam),
        "T": repr(p.T),
        "domain": ";".join(f"{a!r},{b!r}" for a, b in p.domain),
    }
    cp["network"] = {
        "d_model": str(n.d_model),
        "modes": str(n.modes),
        "radii_preset": n.radii_preset,
        "radii": ",".join(repr(v) for v in n.radii),
        "counts": ",".join(str(v) for v in n.counts),
        "encoder_widths": ",".join(str(v) for v in n.encoder_widths),
        "mixer_hidden": str(n.mixer_hidden),
        "head_widths": ",".join(str(v) for v in n.head_widths),
    }
    g, w = t.gate, t.weights
    cp["training"] = {
        "iterations": str(t.iterations),
        "adam_iterations": str(t.adam_iterations),
        "adam_lr": repr(t.adam_lr),
        "adam_beta1": repr(t.adam_beta1),
        "adam_beta2": repr(t.adam_beta2),
        "adam_eps": repr(t.adam_eps),
        "lbfgs_history": str(t.lbfgs_history),
        "lbfgs_max_probes": str(t.lbfgs_max_probes),
        "lbfgs_backtrack": repr(t.lbfgs_backtrack),
        "lbfgs_c1": repr(t.lbfgs_c1),
        "n_collocation": str(t.n_collocation),
        "n_initial": str(t.n_initial),
        "n_boundary": str(t.n_boundary),
        "w_res": repr(w.w_res),
        "w_ic": repr(w.w_ic),
        "w_bd": repr(w.w_bd),
        "gate_alpha": repr(g.alpha),
        "gate_gamma0": repr(g.gamma),
        "gate_eta": repr(g.eta),
        "gate_eps_tol": repr(g.eps_tol),
        "gate_delta_max": repr(g.delta_max),
        "gate_variant": g.variant,
        "gate_residual_weighting": str(t.gate_residual_weighting).lower(),
        "probe_points": str(t.probe_points),
        "probe_dt_frac": repr(t.probe_dt_frac),
        "resample_every": str(t.resample_every),
        "swap_fraction": repr(t.swap_fraction),
        "window_min_gate": repr(t.window_min_gate),
        "window_floor_time": repr(t.window_floor_time),
        "prep_grid_n": str(t.prep_grid_n),
        "seed": str(t.seed),
    }
    cp["reference"] = {
        "grid_n": str(r.grid_n),
        "nkge_dt_frac": repr(r.nkge_dt_frac),
        "env_dt": repr(r.env_dt),
        "snapshots": str(r.snapshots),
        "method": r.method,
    }
    cp["evaluate"] = {
        "rmae_outer_sqrt": str(cfg.evaluate.rmae_outer_sqrt).lower(),
    }
    c = cfg.convergence
    cp["convergence"] = {
        "eps_list": ",".join(repr(v) for v in c.eps_list),
        "times": ",".join(repr(v) for v in c.times),
        "fit_time": repr(c.fit_time),
        "grid_n": str(c.grid_n),
    }
    with open(path, "w") as fh:
        cp.write(fh)
