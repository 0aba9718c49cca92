"""Two-stage collocation training: optimizers, gate dynamics, gradient
correlation probes, gated resampling, and the stage loops.

Stage one fits the complex envelope of the wave-operator Schrodinger
equation; stage two fits the oscillatory remainder with the envelope frozen.
A single generic loop drives both stages and the vanilla single-network
baseline; stages differ only in their residual operators and initial data.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import JetArray, JetLayout, Tape, VALUE_ONLY, param_grad
from .errors import NumericError, StructuralError
from .fields import Field, Grid, TrigInterpolant
from .gating import GateState, gamma_update, gate_h, open_window_end
from .network import (Architecture, NetworkParams, forward_pipeline,
                      init_params, leaf_views, perturb, perturb_offsets)
from .physics import (LossWeights, ProblemSpec, assemble_loss,
                      interpolant_ic_provider, mean_square_sum, nkge_residual,
                      nlsw_residual, prepare_r_initial, prepare_z_initial,
                      remainder_residual, wkb_reconstruct, zero_ic_provider)

log = logging.getLogger(__name__)

Array = np.ndarray


def rng_stream(root_seed: int, name: str) -> np.random.Generator:
    """Named substream: adding a consumer never perturbs the others."""
    key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=root_seed,
                                                        spawn_key=(key,)))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    adam_iterations: int = 500
    adam_lr: float = 2e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lbfgs_history: int = 20
    lbfgs_max_probes: int = 25
    lbfgs_backtrack: float = 0.5
    lbfgs_c1: float = 1e-4
    # the quasi-Newton phase optimizes one frozen batch per segment; at the
    # per-step budget it interpolates the batch while the dense residual
    # grows, so its segments draw this multiple of n_collocation and keep it
    # for lbfgs_segment iterations (curvature history resets per segment)
    lbfgs_batch_multiplier: int = 4
    lbfgs_segment: int = 250
    n_collocation: int = 1024
    n_initial: int = 128
    n_boundary: int = 128
    weights: LossWeights = field(default_factory=LossWeights)
    gate: GateState = field(default_factory=GateState)
    gate_residual_weighting: bool = False
    probe_points: int = 16
    probe_dt_frac: float = 0.02
    resample_every: int = 50
    swap_fraction: float = 0.2
    window_min_gate: float = 0.05
    window_floor_time: float = 0.5
    # fresh interior draws per gradient step close the gaps a persistent
    # collocation set leaves between its points; without them the network
    # interpolates the batch while the dense residual grows unchecked
    fresh_collocation: bool = True
    prep_grid_n: int = 256
    seed: int = 0


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Array
    v: Array
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def fresh(n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return AdamState(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, grads: Array, params: Array):
    """Standard bias-corrected update; returns (new state, new params)."""
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise StructuralError("optimizer state and gradient sizes must match")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=step), new


@dataclass
class LbfgsState:
    history: list = field(default_factory=list)   # (s, y, 1/s.y)
    depth: int = 20
    max_probes: int = 25
    backtrack: float = 0.5
    c1: float = 1e-4

    def push(self, s: Array, y: Array):
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
            self.history.append((s, y, 1.0 / sy))
            if len(self.history) > self.depth:
                self.history.pop(0)

    def direction(self, grad: Array) -> Array:
        q = grad.copy()
        alphas = []
        for s, y, rho in reversed(self.history):
            a = rho * float(s @ q)
            q -= a * y
            alphas.append(a)
        if self.history:
            s, y, _ = self.history[-1]
            q *= float(s @ y) / float(y @ y)
        for (s, y, rho), a in zip(self.history, reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        return -q


def lbfgs_step(state: LbfgsState, eval_loss, eval_grad, params: Array,
               loss0: float, grad0: Array):
    """One quasi-Newton step with backtracking sufficient-decrease search.

    ``eval_loss(theta) -> float`` and ``eval_grad(theta) -> (loss, grad, ...)``
    must be deterministic over the step.  On line-search failure falls back
    to a conservative gradient step (logged).  Returns
    (state, new params, eval_grad result at the new params, info).
    """
    if not np.all(np.isfinite(grad0)):
        raise NumericError("non-finite gradient entering the quasi-Newton step")
    if float(np.linalg.norm(grad0)) == 0.0:
        return state, params, None, {"accepted": True, "step": 0.0,
                                     "fallback": False}
    direction = state.direction(grad0)
    slope = float(grad0 @ direction)
    if slope >= 0.0:
        state.history.clear()
        direction = -grad0
        slope = -float(grad0 @ grad0)
    step = 1.0
    accepted = False
    for _ in range(state.max_probes):
        cand = params + step * direction
        loss_c = eval_loss(cand)
        if np.isfinite(loss_c) and loss_c <= loss0 + state.c1 * step * slope:
            accepted = True
            break
        step *= state.backtrack
    if not accepted:
        gnorm = float(np.linalg.norm(grad0))
        step = min(1e-3, 1.0 / (gnorm + 1.0))
        cand = params - step * grad0
        log.warning("line search failed; conservative gradient step %.3e", step)
    result = eval_grad(cand)
    state.push(cand - params, result[1] - grad0)
    return state, cand, result, {"accepted": accepted, "step": step,
                                 "fallback": not accepted}


# ---------------------------------------------------------------------------
# gradient correlation probes
# ---------------------------------------------------------------------------

def _make_perturbed(t: Array, offsets, T: float):
    out = []
    for off in offsets:
        raw = t[:, None] + off
        out.append((np.clip(raw, 0.0, T), ((raw >= 0.0) & (raw <= T)).astype(np.float64)))
    return out


def output_param_gradient(arch: Architecture, flat: Array, x, t: float,
                          T: float, gate: GateState | None = None,
                          hard_ic=None, output_index: int = 0) -> Array:
    """Parameter gradient of one network output at a single point."""
    tape = Tape()
    views = leaf_views(tape, arch, flat)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tt = np.asarray([t], dtype=np.float64)
    perturbed = None
    if arch.radii:
        perturbed = perturb(x, tt, arch.perturb, T, None)
    outs = forward_pipeline(views, arch, x, tt, perturbed, gate, T,
                            VALUE_ONLY, hard_ic=hard_ic)
    return param_grad(tape, ad.sum_all(outs[output_index]["v"]))


def grad_correlation(arch: Architecture, flat: Array, x, t: float, dt: float,
                     T: float, gate: GateState | None = None, hard_ic=None,
                     output_index: int = 0, gate_weighting: bool = True,
                     normalized: bool = False) -> float:
    """|<dout/dtheta at t, dout/dtheta at t+dt>|, optionally gated/normalized."""
    g1 = output_param_gradient(arch, flat, x, t, T, gate, hard_ic, output_index)
    g2 = output_param_gradient(arch, flat, x, t + dt, T, gate, hard_ic,
                               output_index)
    corr = abs(float(g1 @ g2))
    if normalized:
        corr /= float(np.linalg.norm(g1) * np.linalg.norm(g2)) + 1e-12
    if gate is not None and gate_weighting:
        corr *= float(np.sqrt(gate_h(t, T, gate)) * np.sqrt(gate_h(t + dt, T, gate)))
    return corr


def stiffness_coefficient(arch: Architecture, flat: Array, x, t: float,
                          dt: float, T: float, lam_probe: float = 1e-6,
                          gate: GateState | None = None, hard_ic=None,
                          output_index: int = 0) -> float:
    """Finite-perturbation stiffness: shift theta along the gradient at t and
    measure the prediction change at t+dt, normalized by the shift size."""
    g1 = output_param_gradient(arch, flat, x, t, T, gate, hard_ic, output_index)
    base = _value_at(arch, flat, x, t + dt, T, gate, hard_ic)[output_index]
    moved = _value_at(arch, flat - lam_probe * g1, x, t + dt, T, gate,
                      hard_ic)[output_index]
    return abs(float(base - moved)) / lam_probe


def _value_at(arch: Architecture, flat: Array, x, t: float, T: float,
              gate: GateState | None, hard_ic) -> Array:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tt = np.asarray([t], dtype=np.float64)
    perturbed = None
    if arch.radii:
        perturbed = perturb(x, tt, arch.perturb, T, None)
    outs = forward_pipeline(dict(_views(arch, flat)), arch, x, tt, perturbed,
                            gate, T, VALUE_ONLY, hard_ic=hard_ic)
    return np.array([float(np.asarray(o["v"])[0]) for o in outs])


def _views(arch: Architecture, flat: Array):
    off = 0
    for name, shape in arch.param_shapes():
        n = int(np.prod(shape))
        yield name, flat[off:off + n].reshape(shape)
        off += n


@dataclass
class CorrelationProbe:
    """Fixed probe set; evaluates the mean gated, normalized correlation."""

    x: Array            # (n, dim)
    t: Array            # (n,)
    dt: float
    output_index: int = 0
    history: list = field(default_factory=list)

    def measure(self, arch: Architecture, flat: Array, T: float,
                gate: GateState | None, hard_ic=None) -> float:
        vals = []
        for i in range(self.t.shape[0]):
            vals.append(grad_correlation(
                arch, flat, self.x[i:i + 1], float(self.t[i]), self.dt, T,
                gate=gate, hard_ic=hard_ic, output_index=self.output_index,
                normalized=True))
        mean = float(np.mean(vals))
        self.history.append(mean)
        return mean


def make_probe(problem: ProblemSpec, cfg: TrainConfig, rng) -> CorrelationProbe:
    dt = cfg.probe_dt_frac * problem.T
    lows = np.array([a for a, _ in problem.domain])
    highs = np.array([b for _, b in problem.domain])
    x = rng.uniform(lows, highs, size=(cfg.probe_points, problem.dim))
    t = rng.uniform(0.0, problem.T - dt, size=cfg.probe_points)
    return CorrelationProbe(x=x, t=t, dt=dt)


def time_avg_correlation_check(arch: Architecture, T: float, region: float,
                               k: int, n_samples: int, seed: int,
                               gate: GateState | None = None) -> dict:
    """Empirical check that temporal averaging cannot decrease correlation.

    Samples random nets and offset sets with |dt|, |dt_i| <= region/3; a
    sample conforms when every pointwise cross-correlation between the two
    time clusters is nonnegative.  Over conforming samples, reports the
    fraction where the averaged construction's correlation is at least the
    pointwise one.
    """
    rng = rng_stream(seed, "time-avg-check")
    conforming = 0
    passed = 0
    for _ in range(n_samples):
        params = init_params(arch, rng)
        x = rng.uniform(-1.0, 1.0, size=(1, arch.dim))
        lim = region / 3.0
        t0 = float(rng.uniform(2.0 * lim, T - 2.0 * lim))
        dt = float(rng.uniform(-lim, lim))
        offs = rng.uniform(-lim, lim, size=k)

        def g(tt):
            return output_param_gradient(arch, params.flat, x, tt, T, gate)

        g_a = [g(t0)] + [g(t0 + o) for o in offs]
        g_b = [g(t0 + dt)] + [g(t0 + dt + o) for o in offs]
        cross = np.array([[float(ga @ gb) for gb in g_b] for ga in g_a])
        if np.any(cross < 0.0):
            continue
        conforming += 1
        base = abs(cross[0, 0])
        avg_a = g_a[0] + (np.sum(g_a[1:], axis=0) / k if k else 0.0)
        avg_b = g_b[0] + (np.sum(g_b[1:], axis=0) / k if k else 0.0)
        if abs(float(avg_a @ avg_b)) >= base - 1e-12 * max(base, 1.0):
            passed += 1
    frac = passed / conforming if conforming else float("nan")
    return {"n_samples": n_samples, "conforming": conforming,
            "pass_fraction": frac}


# ---------------------------------------------------------------------------
# collocation sampler
# ---------------------------------------------------------------------------

@dataclass
class SamplerState:
    """Collocation sets; interior residual magnitudes drive gated swaps."""

    x_f: Array
    t_f: Array
    residual_mag: Array
    x_0: Array
    bd: list                 # per dim: dict(x_a, x_b, t)

    @property
    def sizes(self) -> tuple:
        return (self.x_f.shape[0], self.x_0.shape[0],
                sum(b["t"].shape[0] for b in self.bd))


def _uniform_points(rng, lows, highs, n, dim):
    return rng.uniform(lows, highs, size=(n, dim))


def init_sampler(problem: ProblemSpec, cfg: TrainConfig, rng) -> SamplerState:
    lows = np.array([a for a, _ in problem.domain])
    highs = np.array([b for _, b in problem.domain])
    x_f = _uniform_points(rng, lows, highs, cfg.n_collocation, problem.dim)
    t_f = rng.uniform(0.0, problem.T, size=cfg.n_collocation)
    x_0 = _uniform_points(rng, lows, highs, cfg.n_initial, problem.dim)
    bd = []
    per_dim = max(1, cfg.n_boundary // problem.dim)
    for d in range(problem.dim):
        x_a = _uniform_points(rng, lows, highs, per_dim, problem.dim)
        a, b = problem.domain[d]
        x_a[:, d] = a
        x_b = x_a.copy()
        x_b[:, d] = b
        bd.append({"x_a": x_a, "x_b": x_b,
                   "t": rng.uniform(0.0, problem.T, size=per_dim)})
    return SamplerState(x_f=x_f, t_f=t_f,
                        residual_mag=np.zeros(cfg.n_collocation),
                        x_0=x_0, bd=bd)


def resample_gated(state: SamplerState, gate: GateState, problem: ProblemSpec,
                   cfg: TrainConfig, rng) -> SamplerState:
    """Swap the lowest-weighted interior points into the open gate window.

    Weight = h(t) * |residual|; the swapped fraction is redrawn uniformly
    over space x the window {t : h(t) >= window_min_gate}.  An empty window
    falls back to an early-time slab.  Set sizes never change; ties resolve
    to the lowest index (stable sort).
    """
    n = state.x_f.shape[0]
    n_swap = int(np.floor(cfg.swap_fraction * n))
    if n_swap == 0:
        return state
    weights = gate_h(state.t_f, problem.T, gate) * state.residual_mag
    order = np.argsort(weights, kind="stable")
    idx = order[:n_swap]
    t_max = open_window_end(problem.T, gate, cfg.window_min_gate)
    if t_max <= 0.0:
        t_max = min(problem.T, cfg.window_floor_time)
    lows = np.array([a for a, _ in problem.domain])
    highs = np.array([b for _, b in problem.domain])
    x_f = state.x_f.copy()
    t_f = state.t_f.copy()
    mag = state.residual_mag.copy()
    x_f[idx] = _uniform_points(rng, lows, highs, n_swap, problem.dim)
    t_f[idx] = rng.uniform(0.0, t_max, size=n_swap)
    mag[idx] = 0.0
    return SamplerState(x_f=x_f, t_f=t_f, residual_mag=mag, x_0=state.x_0,
                        bd=state.bd)


# ---------------------------------------------------------------------------
# stage definitions
# ---------------------------------------------------------------------------

@dataclass
class StageSetup:
    """Everything that differs between the two stages and the baseline."""

    name: str
    arch: Architecture
    hard_ic: tuple               # ([u0 provider per output], [du0 provider])
    ic_targets: list             # per output: (u0 interp-like, du0 interp-like)
    residual_terms: object       # fn(outs, x, t, aux) -> list of (B,) terms
    ic_terms: object             # fn(outs0, targets0) -> list of terms
    aux_values: object = None    # fn(x, t) -> aux passed to residual_terms
    probe_output: int = 0


def _cached_provider(provider):
    cache = {}

    def wrapped(x, layout):
        key = layout.coords
        if key not in cache:
            cache[key] = provider(x, layout)
        return cache[key]

    return wrapped, cache


def default_arch(problem: ProblemSpec, n_outputs: int, d_model: int = 64,
                 modes: int = 16, radii=(0.03, 0.05, 0.07),
                 counts=(3, 5, 7)) -> Architecture:
    return Architecture(dim=problem.dim, modes=modes, periods=problem.periods,
                        d_model=d_model, n_outputs=n_outputs,
                        radii=tuple(radii), counts=tuple(counts))


def stage1_setup(problem: ProblemSpec, arch: Architecture | None = None,
                 prep_grid: Grid | None = None) -> StageSetup:
    """Envelope stage: two outputs (Re z, Im z), well-prepared data."""
    arch = arch or default_arch(problem, n_outputs=2)
    prep_grid = prep_grid or Grid((256,) * problem.dim, problem.domain)
    z0, dz0 = prepare_z_initial(problem, prep_grid)
    interps = {
        "re_z0": TrigInterpolant(prep_grid, z0.real),
        "im_z0": TrigInterpolant(prep_grid, z0.imag),
        "re_dz0": TrigInterpolant(prep_grid, dz0.real),
        "im_dz0": TrigInterpolant(prep_grid, dz0.imag),
    }
    u0 = [interpolant_ic_provider(interps["re_z0"]),
          interpolant_ic_provider(interps["im_z0"])]
    du0 = [interpolant_ic_provider(interps["re_dz0"]),
           interpolant_ic_provider(interps["im_dz0"])]

    def residual_terms(outs, x, t, aux):
        imag_eq, real_eq = nlsw_residual(outs[0], outs[1], problem)
        return [imag_eq, real_eq]

    def ic_terms(outs0, targets):
        z_re, z_im = outs0
        return [ad.scale_add(z_re["v"], 1.0, -targets["re_z0"]),
                ad.scale_add(z_im["v"], 1.0, -targets["im_z0"]),
                ad.scale_add(z_re["d:t"], 1.0, -targets["re_dz0"]),
                ad.scale_add(z_im["d:t"], 1.0, -targets["im_dz0"])]

    return StageSetup(name="stage1", arch=arch, hard_ic=(u0, du0),
                      ic_targets=interps, residual_terms=residual_terms,
                      ic_terms=ic_terms)


def stage2_setup(problem: ProblemSpec, z_params: NetworkParams,
                 z_gate: GateState, arch: Architecture | None = None,
                 prep_grid: Grid | None = None) -> StageSetup:
    """Remainder stage: one output, envelope frozen, small initial data."""
    arch = arch or default_arch(problem, n_outputs=1)
    prep_grid = prep_grid or Grid((256,) * problem.dim, problem.domain)
    _, dz0 = prepare_z_initial(problem, prep_grid)
    _, dr0 = prepare_r_initial(dz0)
    dr0_interp = TrigInterpolant(prep_grid, dr0)
    u0 = [zero_ic_provider()]
    du0 = [interpolant_ic_provider(dr0_interp)]
    z_views = dict(_views(z_params.arch, z_params.flat))

    def aux_values(x, t):
        perturbed = None
        if z_params.arch.radii:
            perturbed = perturb(x, t, z_params.arch.perturb, problem.T, None)
        outs = forward_pipeline(z_views, z_params.arch, x, t, perturbed,
                                z_gate, problem.T, VALUE_ONLY)
        return {"z_re": np.asarray(outs[0]["v"]), "z_im": np.asarray(outs[1]["v"])}

    def residual_terms(outs, x, t, aux):
        return [remainder_residual(outs[0], aux["z_re"], aux["z_im"],
                                   problem, t)]

    def ic_terms(outs0, targets):
        r = outs0[0]
        return [r["v"], ad.scale_add(r["d:t"], 1.0, -targets["dr0"])]

    return StageSetup(name="stage2", arch=arch, hard_ic=(u0, du0),
                      ic_targets={"dr0": dr0_interp},
                      residual_terms=residual_terms, ic_terms=ic_terms,
                      aux_values=aux_values)


def baseline_setup(problem: ProblemSpec, arch: Architecture | None = None,
                   prep_grid: Grid | None = None) -> StageSetup:
    """Single-network formulation on u directly (no decomposition)."""
    if arch is None:
        arch = Architecture(dim=problem.dim, modes=16, periods=problem.periods,
                            d_model=64, n_outputs=1, radii=(), counts=(),
                            encoder_widths=(64, 64), head_widths=(64, 64))
    prep_grid = prep_grid or Grid((256,) * problem.dim, problem.domain)
    pts = prep_grid.points()
    phi1 = problem.phi1(pts).reshape(prep_grid.shape)
    v0 = problem.eps ** -2 * problem.phi2(pts).reshape(prep_grid.shape)
    phi1_i = TrigInterpolant(prep_grid, phi1)
    v0_i = TrigInterpolant(prep_grid, v0)
    u0 = [interpolant_ic_provider(phi1_i)]
    du0 = [interpolant_ic_provider(v0_i)]

    def residual_terms(outs, x, t, aux):
        return [nkge_residual(outs[0], problem)]

    def ic_terms(outs0, targets):
        u = outs0[0]
        return [ad.scale_add(u["v"], 1.0, -targets["phi1"]),
                ad.scale_add(u["d:t"], 1.0, -targets["v0"])]

    return StageSetup(name="baseline", arch=arch, hard_ic=(u0, du0),
                      ic_targets={"phi1": phi1_i, "v0": v0_i},
                      residual_terms=residual_terms, ic_terms=ic_terms)


# ---------------------------------------------------------------------------
# loss evaluation over one sampler state
# ---------------------------------------------------------------------------

class _Batch:
    """Frozen collocation sets plus cached parameter-independent data."""

    def __init__(self, setup: StageSetup, problem: ProblemSpec,
                 cfg: TrainConfig, sampler: SamplerState):
        self.setup = setup
        self.problem = problem
        self.cfg = cfg
        self.sampler = sampler
        arch = setup.arch
        coords = ("t",) + tuple(f"x{d}" for d in range(problem.dim))
        self.layout_res = JetLayout(coords)
        self.layout_ic = JetLayout(("t",))
        self.layout_bd = JetLayout(tuple(f"x{d}" for d in range(problem.dim)))
        self.hic_f = self._cache_ic(sampler.x_f)
        self.hic_0 = self._cache_ic(sampler.x_0)
        self.hic_bd = [self._cache_ic(np.vstack([b["x_a"], b["x_b"]]))
                       for b in sampler.bd]
        self.aux = (setup.aux_values(sampler.x_f, sampler.t_f)
                    if setup.aux_values else None)
        targets = {}
        for key, interp in setup.ic_targets.items():
            targets[key] = interp.value(sampler.x_0)
        self.ic_target_vals = targets

    def _cache_ic(self, x):
        u0s, du0s = self.setup.hard_ic
        u0c, du0c = [], []
        for p in u0s:
            u0c.append(_cached_provider(lambda xx, layout, pp=p: pp(x, layout))[0])
        for p in du0s:
            du0c.append(_cached_provider(lambda xx, layout, pp=p: pp(x, layout))[0])
        return (u0c, du0c)

    def refresh_interior(self, x_f, t_f):
        """Swap in a fresh interior set; static initial/boundary caches stay."""
        self.sampler = SamplerState(x_f=x_f, t_f=t_f,
                                    residual_mag=np.zeros(t_f.shape[0]),
                                    x_0=self.sampler.x_0, bd=self.sampler.bd)
        self.hic_f = self._cache_ic(x_f)
        self.aux = (self.setup.aux_values(x_f, t_f)
                    if self.setup.aux_values else None)

    def draw_offsets(self, rng):
        """Fresh perturbation offsets for every collocation set."""
        arch = self.setup.arch
        if not arch.radii:
            return None
        cfg = arch.perturb
        nb = [b["t"].shape[0] for b in self.sampler.bd]
        return {
            "f": perturb_offsets(cfg, self.sampler.t_f.shape[0], rng),
            "0": perturb_offsets(cfg, self.sampler.x_0.shape[0], rng),
            "bd": [perturb_offsets(cfg, n, rng) for n in nb],
        }

    def loss(self, tape: Tape | None, flat: Array, gate: GateState,
             offsets) -> tuple:
        """Build the stage loss; returns (loss, parts, per-point residual mag)."""
        setup, problem, cfg = self.setup, self.problem, self.cfg
        arch = setup.arch
        T = problem.T
        views = leaf_views(tape, arch, flat) if tape is not None \
            else dict(_views(arch, flat))

        def pert(t, offs):
            if not arch.radii:
                return None
            return _make_perturbed(t, offs, T)

        s = self.sampler
        outs = forward_pipeline(views, arch, s.x_f, s.t_f,
                                pert(s.t_f, offsets["f"] if offsets else None),
                                gate, T, self.layout_res, hard_ic=self.hic_f)
        res_terms = setup.residual_terms(outs, s.x_f, s.t_f, self.aux)
        mags = np.sqrt(sum(np.asarray(ad._as_value(r)) ** 2 for r in res_terms))
        res_weights = None
        if cfg.gate_residual_weighting:
            res_weights = gate_h(s.t_f, T, gate)
        l_res = mean_square_sum(res_terms, res_weights)

        t0 = np.zeros(s.x_0.shape[0])
        outs0 = forward_pipeline(views, arch, s.x_0, t0,
                                 pert(t0, offsets["0"] if offsets else None),
                                 gate, T, self.layout_ic, hard_ic=self.hic_0)
        l_ic = mean_square_sum(setup.ic_terms(outs0, self.ic_target_vals))

        bd_terms = []
        for d, b in enumerate(s.bd):
            nb = b["t"].shape[0]
            x_pair = np.vstack([b["x_a"], b["x_b"]])
            t_pair = np.concatenate([b["t"], b["t"]])
            offs = None
            if offsets:
                offs = [np.vstack([o, o]) for o in offsets["bd"][d]]
            outs_b = forward_pipeline(views, arch, x_pair, t_pair,
                                      pert(t_pair, offs), gate, T,
                                      self.layout_bd, hard_ic=self.hic_bd[d])
            for o in outs_b:
                for comp in ("v", f"d:x{d}"):
                    col = o[comp]
                    bd_terms.append(ad.sub(ad.slice_axis(col, 0, 0, nb),
                                           ad.slice_axis(col, 0, nb, 2 * nb)))
        l_bd = mean_square_sum(bd_terms)

        loss = assemble_loss(cfg.weights, l_res, l_ic, l_bd)
        parts = {"res": float(ad._as_value(l_res)),
                 "ic": float(ad._as_value(l_ic)),
                 "bd": float(ad._as_value(l_bd))}
        return loss, parts, mags


# ---------------------------------------------------------------------------
# report and checkpoints
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("iter", "loss_total", "loss_res", "loss_ic", "loss_bd",
                  "gamma", "G_mean", "wall_ms")


@dataclass
class TrainReport:
    stage: str
    seed: int
    rows: list = field(default_factory=list)

    def add(self, **kw):
        self.rows.append(tuple(kw[c] for c in REPORT_COLUMNS))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("# stage=%s seed=%d\n" % (self.stage, self.seed))
            fh.write(",".join(REPORT_COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")

    @staticmethod
    def from_csv(path) -> "TrainReport":
        with open(path) as fh:
            head = fh.readline().strip()
            if not head.startswith("#"):
                raise StructuralError("missing report header line")
            meta = dict(kv.split("=") for kv in head[1:].split())
            cols = fh.readline().strip().split(",")
            if tuple(cols) != REPORT_COLUMNS:
                raise StructuralError("unexpected report columns")
            rows = []
            for line in fh:
                vals = line.strip().split(",")
                rows.append(tuple([int(vals[0])] + [float(v) for v in vals[1:]]))
        return TrainReport(stage=meta["stage"], seed=int(meta["seed"]),
                           rows=rows)

    def content_hash(self) -> str:
        """Digest of everything except wall time (not reproducible)."""
        h = hashlib.sha256()
        h.update(f"{self.stage}|{self.seed}".encode())
        keep = [i for i, c in enumerate(REPORT_COLUMNS) if c != "wall_ms"]
        for row in self.rows:
            h.update("|".join(_fmt(row[i]) for i in keep).encode())
        return h.hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


CKPT_MAGIC = b"KGMDCKP\x00"
CKPT_VERSION = 1


def save_checkpoint(path, params: NetworkParams, *, stage: str, seed: int,
                    gate: GateState | None = None, extra: dict | None = None):
    meta = {"stage": stage, "seed": int(seed),
            "arch": json.loads(params.arch.to_json())}
    if gate is not None:
        meta["gate"] = {"alpha": gate.alpha, "gamma": gate.gamma,
                        "eta": gate.eta, "eps_tol": gate.eps_tol,
                        "delta_max": gate.delta_max, "variant": gate.variant}
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", params.flat.size))
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple:
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise StructuralError(f"bad checkpoint magic in {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise StructuralError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(blob_len).decode())
        (count,) = struct.unpack("<Q", fh.read(8))
        flat = np.frombuffer(fh.read(8 * count), dtype="<f8").copy()
    arch = Architecture.from_json(json.dumps(meta["arch"]))
    gate = None
    if "gate" in meta:
        gate = GateState(**meta["gate"])
    return NetworkParams(arch, flat), gate, meta


# ---------------------------------------------------------------------------
# the stage loop
# ---------------------------------------------------------------------------

def run_training(problem: ProblemSpec, setup: StageSetup, cfg: TrainConfig,
                 init_flat: Array | None = None):
    """Adam then quasi-Newton over gated, resampled collocation batches.

    Returns (params, report, gate).  The gate shift advances once per
    iteration from the mean probe correlation; the interior set is resampled
    on a fixed cadence; a non-finite loss aborts with the last good state.
    """
    arch = setup.arch
    rng_init = rng_stream(cfg.seed, f"{setup.name}-init")
    rng_sampler = rng_stream(cfg.seed, f"{setup.name}-sampler")
    rng_perturb = rng_stream(cfg.seed, f"{setup.name}-perturb")
    rng_probe = rng_stream(cfg.seed, f"{setup.name}-probe")

    flat = (init_flat.copy() if init_flat is not None
            else init_params(arch, rng_init).flat)
    gate = cfg.gate
    sampler = init_sampler(problem, cfg, rng_sampler)
    batch = _Batch(setup, problem, cfg, sampler)
    probe = make_probe(problem, cfg, rng_probe)
    report = TrainReport(stage=setup.name, seed=cfg.seed)

    adam = AdamState.fresh(flat.size, cfg.adam_lr, cfg.adam_beta1,
                           cfg.adam_beta2, cfg.adam_eps)
    lbfgs = LbfgsState(depth=cfg.lbfgs_history, max_probes=cfg.lbfgs_max_probes,
                       backtrack=cfg.lbfgs_backtrack, c1=cfg.lbfgs_c1)
    n_adam = min(cfg.adam_iterations, cfg.iterations)
    last_good = flat.copy()
    seg = None        # frozen quasi-Newton segment: (eval_loss, eval_grad, state)

    def make_segment(gate_frozen):
        if cfg.fresh_collocation and cfg.lbfgs_batch_multiplier > 0:
            n = cfg.n_collocation * cfg.lbfgs_batch_multiplier
            batch.refresh_interior(
                _uniform_points(rng_sampler, lows, highs, n, problem.dim),
                rng_sampler.uniform(0.0, problem.T, size=n))
        offsets = batch.draw_offsets(rng_perturb)

        def eval_loss(theta, _b=batch, _o=offsets, _g=gate_frozen):
            node, _, _ = _b.loss(None, theta, _g, _o)
            return float(np.asarray(node))

        def eval_grad(theta, _b=batch, _o=offsets, _g=gate_frozen):
            tape = Tape()
            node, parts, mags = _b.loss(tape, theta, _g, _o)
            return float(node.value), param_grad(tape, node), parts, mags

        return [eval_loss, eval_grad, eval_grad(flat)]

    lows = np.array([a for a, _ in problem.domain])
    highs = np.array([b for _, b in problem.domain])
    seg_age = 0
    for it in range(cfg.iterations):
        t_start = time.perf_counter()
        resample_now = (it > 0 and cfg.resample_every > 0
                        and it % cfg.resample_every == 0)
        if resample_now and not (cfg.fresh_collocation and it >= n_adam):
            sampler = resample_gated(batch.sampler, gate, problem, cfg,
                                     rng_sampler)
            batch = _Batch(setup, problem, cfg, sampler)
            seg = None                  # objective changed
            lbfgs.history.clear()
        if it < n_adam:
            if cfg.fresh_collocation:
                batch.refresh_interior(
                    _uniform_points(rng_sampler, lows, highs,
                                    cfg.n_collocation, problem.dim),
                    rng_sampler.uniform(0.0, problem.T,
                                        size=cfg.n_collocation))
            offsets = batch.draw_offsets(rng_perturb)
            tape = Tape()
            loss_node, parts, mags = batch.loss(tape, flat, gate, offsets)
            loss_val = float(loss_node.value)
            if not np.isfinite(loss_val):
                log.warning("%s: non-finite loss at iteration %d; reverting",
                            setup.name, it)
                flat = last_good
                break
            grads = param_grad(tape, loss_node)
            batch.sampler.residual_mag = mags
            last_good = flat.copy()
            adam, flat = adam_step(adam, grads, flat)
        else:
            # the gate is pinned per segment so the line search sees one
            # deterministic objective; it still advances in the report
            if cfg.fresh_collocation and seg is not None \
                    and seg_age >= cfg.lbfgs_segment:
                seg = None
            if seg is None:
                seg = make_segment(gate)
                seg_age = 0
                lbfgs.history.clear()
            seg_age += 1
            eval_loss, eval_grad, state = seg
            loss0, grad0, parts, mags = state
            if not np.isfinite(loss0):
                log.warning("%s: non-finite loss at iteration %d; reverting",
                            setup.name, it)
                flat = last_good
                break
            last_good = flat.copy()
            lbfgs, flat, result, _info = lbfgs_step(
                lbfgs, eval_loss, eval_grad, flat, loss0, grad0)
            if result is not None:
                seg[2] = result
            loss_val, _, parts, mags = seg[2]
            batch.sampler.residual_mag = mags
        g_mean = probe.measure(arch, flat, problem.T, gate)
        gate = gamma_update(gate, g_mean)
        wall_ms = (time.perf_counter() - t_start) * 1e3
        report.add(iter=it, loss_total=loss_val, loss_res=parts["res"],
                   loss_ic=parts["ic"], loss_bd=parts["bd"], gamma=gate.gamma,
                   G_mean=g_mean, wall_ms=wall_ms)
    return NetworkParams(arch, flat), report, gate


def train_stage1(problem: ProblemSpec, cfg: TrainConfig,
                 arch: Architecture | None = None, prep_grid=None):
    setup = stage1_setup(problem, arch, prep_grid)
    return run_training(problem, setup, cfg)


def train_stage2(problem: ProblemSpec, z_params: NetworkParams,
                 z_gate: GateState, cfg: TrainConfig,
                 arch: Architecture | None = None, prep_grid=None):
    setup = stage2_setup(problem, z_params, z_gate, arch, prep_grid)
    return run_training(problem, setup, cfg)


def train_baseline(problem: ProblemSpec, cfg: TrainConfig,
                   arch: Architecture | None = None, prep_grid=None):
    setup = baseline_setup(problem, arch, prep_grid)
    return run_training(problem, setup, cfg)


# ---------------------------------------------------------------------------
# trained-model field evaluation
# ---------------------------------------------------------------------------

def _batched_values(arch, flat, x, t, gate, T, hard_ic, chunk: int = 8192):
    views = dict(_views(arch, flat))
    outs = []
    for lo in range(0, x.shape[0], chunk):
        xs = x[lo:lo + chunk]
        ts = t[lo:lo + chunk]
        perturbed = None
        if arch.radii:
            perturbed = perturb(xs, ts, arch.perturb, T, None)
        res = forward_pipeline(views, arch, xs, ts, perturbed, gate, T,
                               VALUE_ONLY, hard_ic=hard_ic)
        outs.append(np.stack([np.asarray(o["v"]) for o in res], axis=1))
    return np.concatenate(outs, axis=0)


def model_on_grid(problem: ProblemSpec, params: NetworkParams,
                  gate: GateState | None, setup_for_ic: StageSetup,
                  grid: Grid, times) -> Array:
    """Evaluate a trained net over snapshot-times x grid (per output)."""
    times = np.asarray(times, dtype=np.float64)
    pts = grid.points()
    n_pts = pts.shape[0]
    hic = None
    if setup_for_ic is not None:
        u0s, du0s = setup_for_ic.hard_ic
        u0c = [_cached_provider(lambda xx, layout, pp=p: pp(pts, layout))[0]
               for p in u0s]
        du0c = [_cached_provider(lambda xx, layout, pp=p: pp(pts, layout))[0]
                for p in du0s]
        hic = (u0c, du0c)
    blocks = []
    for t in times:
        tt = np.full(n_pts, float(t))
        vals = _batched_values(params.arch, params.flat, pts, tt, gate,
                               problem.T, hic)
        blocks.append(vals)
    out = np.stack(blocks, axis=0)       # (nt, n_pts, n_outputs)
    return out.reshape((times.size,) + grid.shape + (params.arch.n_outputs,))


def reconstruct_fields(problem: ProblemSpec, grid: Grid, times,
                       z_params: NetworkParams, z_gate: GateState | None,
                       r_params: NetworkParams | None = None,
                       r_gate: GateState | None = None,
                       prep_grid: Grid | None = None):
    """Amplitude-only and (optionally) with-remainder reconstructions."""
    s1 = stage1_setup(problem, z_params.arch, prep_grid)
    zvals = model_on_grid(problem, z_params, z_gate, s1, grid, times)
    z = Field(zvals[..., 0] + 1j * zvals[..., 1], np.asarray(times), grid)
    u_amp = wkb_reconstruct(z, None, problem.eps)
    u_full = None
    if r_params is not None:
        s2 = stage2_setup(problem, z_params, z_gate, r_params.arch, prep_grid)
        rvals = model_on_grid(problem, r_params, r_gate, s2, grid, times)
        r = Field(rvals[..., 0], np.asarray(times), grid)
        u_full = wkb_reconstruct(z, r, problem.eps)
    return u_amp, u_full
