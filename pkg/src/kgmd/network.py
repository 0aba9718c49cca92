"""Forward architecture: periodic spatial embedding, coordinate encoder,
multiscale time perturbation, gated pooling, scale mixer, head, and hard
initial-condition wrappers.

One pipeline serves three callers: value-only evaluation (plain arrays), jet
evaluation (input derivatives), and taped jet evaluation (parameter gradients
of everything).  Which mode runs is decided solely by whether the parameter
views handed in are tape leaves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import JetArray, JetLayout, Jet2, VALUE_ONLY
from .errors import StructuralError
from .gating import GateState, gate_jet

Array = np.ndarray


@dataclass(frozen=True)
class EmbeddingSpec:
    """Periodic spatial embedding: ``modes`` Fourier pairs per dimension."""

    periods: tuple
    modes: int


@dataclass(frozen=True)
class PerturbConfig:
    """Multiscale time regions: half-width and perturbation count per scale."""

    radii: tuple = (0.03, 0.05, 0.07)
    counts: tuple = (3, 5, 7)

    def __post_init__(self):
        if len(self.radii) != len(self.counts):
            raise StructuralError("radii and counts must align")
        if any(k < 1 for k in self.counts):
            raise StructuralError("perturbation counts must be >= 1")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise StructuralError("region half-widths must be strictly increasing")

    @property
    def n_scales(self) -> int:
        return len(self.radii)

    @property
    def n_points(self) -> int:
        return 1 + sum(self.counts)


# Two region-size sets are quoted in different places; both are shipped.
RADII_PRESETS = {
    "model-config": (0.03, 0.05, 0.07),
    "benchmarks": (0.01, 0.05, 0.09),
}


@dataclass(frozen=True)
class Architecture:
    """Static shape of the network; fully determines the flat parameter layout.

    ``radii=()`` drops the time regions and the mixer, leaving a plain
    encoder/head MLP (used by the single-network baseline).
    """

    dim: int = 1
    modes: int = 16
    periods: tuple = (32.0,)
    d_model: int = 64
    n_outputs: int = 2
    radii: tuple = (0.03, 0.05, 0.07)
    counts: tuple = (3, 5, 7)
    encoder_widths: tuple = (64,)
    mixer_hidden: int = 8
    head_widths: tuple = (64, 64)

    def __post_init__(self):
        if len(self.periods) != self.dim:
            raise StructuralError("one period per spatial dimension required")
        if self.encoder_widths[-1] != self.d_model:
            raise StructuralError("encoder must end at d_model")
        if self.radii:
            PerturbConfig(self.radii, self.counts)

    @property
    def embed_dim(self) -> int:
        return 2 + 2 * self.modes * self.dim

    @property
    def perturb(self) -> PerturbConfig | None:
        if not self.radii:
            return None
        return PerturbConfig(self.radii, self.counts)

    def param_shapes(self) -> list:
        shapes = []
        n_in = self.embed_dim
        for i, w in enumerate(self.encoder_widths):
            shapes.append((f"enc{i}_w", (w, n_in)))
            shapes.append((f"enc{i}_b", (w,)))
            n_in = w
        if self.radii:
            s = len(self.radii) + 1
            shapes.append(("mix0_w", (self.mixer_hidden, s)))
            shapes.append(("mix0_b", (self.mixer_hidden,)))
            shapes.append(("mix1_w", (1, self.mixer_hidden)))
            shapes.append(("mix1_b", (1,)))
        n_in = self.d_model
        for i, w in enumerate(self.head_widths):
            shapes.append((f"head{i}_w", (w, n_in)))
            shapes.append((f"head{i}_b", (w,)))
            n_in = w
        shapes.append(("out_w", (self.n_outputs, n_in)))
        shapes.append(("out_b", (self.n_outputs,)))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in (
            "dim", "modes", "periods", "d_model", "n_outputs", "radii",
            "counts", "encoder_widths", "mixer_hidden", "head_widths")}
        return json.dumps(d)

    @staticmethod
    def from_json(s: str) -> "Architecture":
        d = json.loads(s)
        for k in ("periods", "radii", "counts", "encoder_widths", "head_widths"):
            d[k] = tuple(d[k])
        return Architecture(**d)


@dataclass
class NetworkParams:
    """Architecture descriptor plus the flat parameter vector."""

    arch: Architecture
    flat: Array

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.arch.n_params,):
            raise StructuralError(
                f"parameter length {self.flat.shape} does not match "
                f"architecture size ({self.arch.n_params},)")

    def views(self) -> dict:
        return param_views(self.arch, self.flat)


def param_views(arch: Architecture, flat) -> dict:
    out = {}
    off = 0
    for name, shape in arch.param_shapes():
        n = int(np.prod(shape))
        out[name] = flat[off:off + n].reshape(shape)
        off += n
    return out


def leaf_views(tape, arch: Architecture, flat: Array) -> dict:
    """Per-tensor tape leaves covering the flat vector, in layout order."""
    out = {}
    off = 0
    for name, shape in arch.param_shapes():
        n = int(np.prod(shape))
        out[name] = tape.leaf(flat[off:off + n].reshape(shape), param=True)
        off += n
    return out


def init_params(arch: Architecture, rng: np.random.Generator) -> NetworkParams:
    """Uniform fan-in initialization over the flat layout."""
    chunks = []
    for name, shape in arch.param_shapes():
        fan_in = shape[1] if len(shape) == 2 else shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return NetworkParams(arch, np.concatenate(chunks))


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def embed(x, t, spec: EmbeddingSpec) -> Array:
    """[t, 1, cos(2pi x/P), sin(2pi x/P), ..., m-th pair] per dimension."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    cols = [t, np.ones_like(t)]
    for d, period in enumerate(spec.periods):
        for n in range(1, spec.modes + 1):
            a = 2.0 * np.pi * n / period
            cols.append(np.cos(a * x[:, d]))
            cols.append(np.sin(a * x[:, d]))
    return np.stack(cols, axis=1)


def embed_jets(x, t, spec: EmbeddingSpec, layout: JetLayout, dt_mask=None) -> Array:
    """Embedding as a parameter-independent stacked jet (n_comps, B, F)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    B = t.shape[0]
    F = 2 + 2 * spec.modes * len(spec.periods)
    mask = np.ones_like(t) if dt_mask is None else np.asarray(dt_mask, dtype=np.float64)

    out = np.zeros((layout.n, B, F))
    v = out[0]
    v[:, 0] = t
    v[:, 1] = 1.0
    blocks = {}
    col = 2
    for d, period in enumerate(spec.periods):
        blocks[d] = col
        for n in range(1, spec.modes + 1):
            a = 2.0 * np.pi * n / period
            v[:, col] = np.cos(a * x[:, d])
            v[:, col + 1] = np.sin(a * x[:, d])
            col += 2
    for comp in layout.comps:
        if comp == "v" or comp == "dd:t":
            continue
        m = out[layout.index(comp)]
        if comp == "d:t":
            m[:, 0] = mask
            continue
        second = comp.startswith("dd:")
        d = int(comp.split(":x")[1])
        col = blocks[d]
        period = spec.periods[d]
        for n in range(1, spec.modes + 1):
            a = 2.0 * np.pi * n / period
            c, s = v[:, col], v[:, col + 1]
            if second:
                m[:, col] = -a * a * c
                m[:, col + 1] = -a * a * s
            else:
                m[:, col] = -a * s
                m[:, col + 1] = a * c
            col += 2
    return out


# ---------------------------------------------------------------------------
# time perturbation
# ---------------------------------------------------------------------------

def perturb_offsets(cfg: PerturbConfig, n: int, rng: np.random.Generator | None):
    """Per-scale offset draws (n, k_l); rng=None gives the symmetric stencil."""
    offs = []
    for radius, k in zip(cfg.radii, cfg.counts):
        if rng is None:
            base = np.linspace(-radius, radius, k) if k > 1 else np.zeros(1)
            offs.append(np.broadcast_to(base, (n, k)).copy())
        else:
            offs.append(rng.uniform(-radius, radius, size=(n, k)))
    return offs


def perturb(x, t, cfg: PerturbConfig, T: float, rng: np.random.Generator | None):
    """Clipped perturbed times per scale, with their clip masks.

    Returns a list of (times (n, k_l), mask (n, k_l)); the base point is
    implicit.  Perturbed times stay differentiable inputs: mask carries
    d(clip(t+dt))/dt so downstream jets see the clamp.
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    out = []
    for off in perturb_offsets(cfg, t.shape[0], rng):
        raw = t[:, None] + off
        clipped = np.clip(raw, 0.0, T)
        mask = ((raw >= 0.0) & (raw <= T)).astype(np.float64)
        out.append((clipped, mask))
    return out


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

POOL_FLOOR = 1e-12


def _encode(views, arch, feats: JetArray) -> JetArray:
    h = feats
    for i in range(len(arch.encoder_widths)):
        h = ad.jet_affine(h, views[f"enc{i}_w"], views[f"enc{i}_b"])
        ad.check_finite(h.node, f"encoder.{i}")
        h = ad.jet_tanh(h)
    return h


def _head(views, arch, h: JetArray) -> JetArray:
    for i in range(len(arch.head_widths)):
        h = ad.jet_affine(h, views[f"head{i}_w"], views[f"head{i}_b"])
        ad.check_finite(h.node, f"head.{i}")
        h = ad.jet_tanh(h)
    h = ad.jet_affine(h, views["out_w"], views["out_b"])
    ad.check_finite(h.node, "head.out")
    return h


def gate_stack(times: Array, mask: Array, T: float, gate: GateState | None,
               layout: JetLayout) -> Array:
    """Gate values over perturbed times as a stacked const jet (n, B, k)."""
    out = np.zeros((layout.n,) + times.shape)
    if gate is None:
        out[0] = 1.0
        return out
    gj = gate_jet(times, T, gate, dt_mask=mask)
    out[0] = gj["v"]
    if "t" in layout.coords:
        out[layout.index("d:t")] = gj["d:t"]
        out[layout.index("dd:t")] = gj["dd:t"]
    return out


def _pool_region(region: JetArray, gates: Array) -> JetArray:
    """Gated mean over one region: sum(h_i X_i) / max(sum h_i, floor)."""
    weighted = ad.jet_const_mul(region, gates[..., None])
    num = JetArray(region.layout, ad.sum_axis(weighted.node, 2))
    denom = gates.sum(axis=2, keepdims=True)
    open_mask = denom[0] > POOL_FLOOR
    safe = denom.copy()
    safe[0] = np.where(open_mask, denom[0], POOL_FLOOR)
    safe[1:] *= open_mask
    return ad.jet_const_mul(num, ad.const_jet_recip(safe, region.layout))


def _mix(views, point: JetArray, pooled: list) -> JetArray:
    # scale channels stacked on the trailing axis: (n, B, D, S+1)
    stacked = JetArray(point.layout,
                       ad.stack([point.node] + [p.node for p in pooled], axis=-1))
    h = ad.jet_affine(stacked, views["mix0_w"], views["mix0_b"])
    ad.check_finite(h.node, "mixer.0")
    h = ad.jet_tanh(h)
    h = ad.jet_affine(h, views["mix1_w"], views["mix1_b"])
    ad.check_finite(h.node, "mixer.1")
    val = ad._as_value(h.node)
    return JetArray(point.layout, ad.reshape_(h.node, val.shape[:-1]))


def ic_blend_weights(t, layout: JetLayout) -> tuple:
    """Stacked jets in t of the three hard-IC blend weights."""
    t = np.asarray(t, dtype=np.float64)
    e = np.exp(-t)
    w0 = np.zeros((layout.n,) + t.shape)
    w1 = np.zeros_like(w0)
    w2 = np.zeros_like(w0)
    w0[0] = (1.0 + t) * e
    w1[0] = t * e
    w2[0] = 1.0 - e - t * e
    if "t" in layout.coords:
        di, si = layout.index("d:t"), layout.index("dd:t")
        w0[di] = -t * e
        w0[si] = (t - 1.0) * e
        w1[di] = (1.0 - t) * e
        w1[si] = (t - 2.0) * e
        w2[di] = t * e
        w2[si] = (1.0 - t) * e
    return w0, w1, w2


def hard_ic_wrap(raw: JetArray, u0_jet: Array, du0_jet: Array, t) -> JetArray:
    """Blend making value and first time derivative exact at t = 0.

    ``u0_jet``/``du0_jet`` are parameter-independent stacked jets of the
    prescribed initial value and initial time derivative (spatial derivative
    rows filled, time rows zero); ``raw`` is the network output jet.
    """
    layout = raw.layout
    w0, w1, w2 = ic_blend_weights(t, layout)
    fixed = ad.const_jet_mul(w0, u0_jet, layout) + ad.const_jet_mul(w1, du0_jet, layout)
    return ad.jet_add_const(ad.jet_const_mul(raw, w2), fixed)


def const_jet_stack(layout: JetLayout, B: int, **entries) -> Array:
    """Build a stacked parameter-independent jet from named components."""
    out = np.zeros((layout.n, B))
    for comp, val in entries.items():
        key = comp.replace("d_", "d:").replace("dd_", "dd:") if ":" not in comp else comp
        out[layout.index(key)] = val
    return out


def forward_pipeline(views: dict, arch: Architecture, x, t, perturbed,
                     gate: GateState | None, T: float, layout: JetLayout,
                     hard_ic=None) -> list:
    """Run the full pipeline; returns one (B,)-shaped JetArray per output.

    ``views`` may hold tape leaves (training) or plain arrays (evaluation);
    ``perturbed`` is the output of :func:`perturb`, or None when the
    architecture has no time regions.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    B = t.shape[0]
    espec = EmbeddingSpec(arch.periods, arch.modes)

    if arch.radii:
        if perturbed is None:
            raise StructuralError("architecture expects perturbed time regions")
        d_model = arch.d_model
        point = _encode(views, arch,
                        JetArray(layout, embed_jets(x, t, espec, layout)))
        pooled = []
        for times, mask in perturbed:
            k = times.shape[1]
            feats = embed_jets(np.repeat(x, k, axis=0), times.reshape(-1),
                               espec, layout, dt_mask=mask.reshape(-1))
            enc = _encode(views, arch, JetArray(layout, feats))
            block = JetArray(layout,
                             ad.reshape_(enc.node, (layout.n, B, k, d_model)))
            gates = gate_stack(times, mask, T, gate, layout)
            pooled.append(_pool_region(block, gates))
        mixed = _mix(views, point, pooled)
    else:
        feats = embed_jets(x, t, espec, layout)
        mixed = _encode(views, arch, JetArray(layout, feats))

    out = _head(views, arch, mixed)
    outputs = []
    for j in range(arch.n_outputs):
        oj = JetArray(layout, ad.slice_axis(out.node, 2, j))
        if hard_ic is not None:
            u0_jet = hard_ic[0][j](x, layout)
            du0_jet = hard_ic[1][j](x, layout)
            oj = hard_ic_wrap(oj, u0_jet, du0_jet, t)
        outputs.append(oj)
    return outputs


def forward_field(params: NetworkParams, x, t, cfg: PerturbConfig | None,
                  gate: GateState | None, rng, T: float, hard_ic=None) -> Array:
    """Value-only forward pass; returns (B, n_outputs)."""
    arch = params.arch
    perturbed = None
    if arch.radii:
        tt = np.asarray(t, dtype=np.float64).reshape(-1)
        perturbed = perturb(x, tt, cfg or arch.perturb, T, rng)
    outs = forward_pipeline(params.views(), arch, x, t, perturbed, gate, T,
                            VALUE_ONLY, hard_ic=hard_ic)
    return np.stack([o.value() for o in outs], axis=1)


def pool_mix(point_feat, region_feats, gates, params: NetworkParams) -> Array:
    """Gated pooling plus scale mixing for a single point (value level)."""
    views = params.views()
    layout = VALUE_ONLY
    point = JetArray(layout, np.asarray(point_feat, dtype=np.float64)[None, None, :])
    pooled = []
    for feats, g in zip(region_feats, gates):
        feats = np.asarray(feats, dtype=np.float64)[None, None, :, :]
        gst = np.asarray(g, dtype=np.float64)[None, None, :]
        pooled.append(_pool_region(JetArray(layout, feats), gst))
    mixed = _mix(views, point, pooled)
    return mixed.values()[0, 0]


def forward_jet(params: NetworkParams, point, wanted,
                gate: GateState | None = None, T: float = 1.0,
                hard_ic=None, rng=None):
    """Full-pipeline jet at one raw input point (x..., t).

    ``wanted`` names raw input coordinates ("t", "x0", ...); the symmetric
    evaluation stencil fills the time regions unless ``rng`` is given.
    Returns one :class:`Jet2` per output (a single Jet2 for one output).
    """
    point = np.asarray(point, dtype=np.float64).reshape(-1)
    arch = params.arch
    if point.shape[0] != arch.dim + 1:
        raise StructuralError("input point must supply one value per coordinate")
    x = point[:arch.dim][None, :]
    t = point[arch.dim:]
    layout = JetLayout(tuple(wanted))
    perturbed = perturb(x, t, arch.perturb, T, rng) if arch.radii else None
    outs = forward_pipeline(params.views(), arch, x, t, perturbed, gate, T,
                            layout, hard_ic=hard_ic)
    jets = []
    for o in outs:
        vals = o.values()
        d1 = {c: float(vals[layout.index(f"d:{c}")][0]) for c in wanted}
        d2 = {(c, c): float(vals[layout.index(f"dd:{c}")][0]) for c in wanted}
        jets.append(Jet2(float(vals[0][0]), d1, d2))
    return jets[0] if arch.n_outputs == 1 else tuple(jets)
