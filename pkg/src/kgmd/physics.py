"""PDE-level mathematics for the oscillatory Klein-Gordon problem.

Covers problem instances and benchmark initial data, the residual operators
of the full equation, the wave-operator Schrodinger envelope equation and the
remainder equation, well-prepared initial data, WKB reconstruction, the
remainder-selection criterion, loss assembly, and the relative error metrics.

Residual operators are written against the autodiff op layer, so the same
code runs on floats, numpy arrays, and tape nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import DataError, MetricError, StructuralError
from .fields import Field, Grid, TrigInterpolant, require_same_layout

Array = np.ndarray


# ---------------------------------------------------------------------------
# problem instances and initial data
# ---------------------------------------------------------------------------

def _sech(a: Array) -> Array:
    # stable for large a: 2 e^{-|a|} / (1 + e^{-2|a|})
    a = np.abs(a)
    e = np.exp(-a)
    return 2.0 * e / (1.0 + e * e)


def _gauss_sech_phi1(x):
    return np.exp(-x[:, 0] ** 2) / np.sqrt(np.pi)


def _gauss_sech_phi2(x):
    return 0.5 * _sech(x[:, 0] ** 2) * np.sin(x[:, 0])


def _sine_gauss_phi1(x):
    return 1.5 * np.sin(x[:, 0]) * _sech(0.5 * x[:, 0] ** 2)


def _sine_gauss_phi2(x):
    return 2.0 * np.exp(-x[:, 0] ** 2) / np.sqrt(np.pi)


def _gauss_pair_2d_phi1(x):
    return (np.exp(-(x[:, 0] + 2.0) ** 2 - x[:, 1] ** 2)
            + np.exp(-(x[:, 0] - 2.0) ** 2 - x[:, 1] ** 2))


def _gauss_pair_2d_phi2(x):
    return np.exp(-x[:, 0] ** 2 - x[:, 1] ** 2)


def _zero(x):
    return np.zeros(x.shape[0])


INITIAL_DATA = {
    "gauss-sech": (1, _gauss_sech_phi1, _gauss_sech_phi2),
    "sine-gauss": (1, _sine_gauss_phi1, _sine_gauss_phi2),
    "gauss-pair-2d": (2, _gauss_pair_2d_phi1, _gauss_pair_2d_phi2),
    "zero": (None, _zero, _zero),
}


@dataclass(frozen=True)
class ProblemSpec:
    """One instance of the oscillatory Klein-Gordon problem.

    phi1/phi2 take points of shape (B, dim) and return (B,) values; the
    initial velocity of the full equation is eps^-2 * phi2.
    """

    eps: float
    lam: float
    domain: tuple           # ((a, b),) per dimension
    T: float
    dim: int
    init_name: str = "custom"
    phi1: object = None
    phi2: object = None

    def __post_init__(self):
        if not 0.0 < self.eps <= 1.0:
            raise StructuralError("eps must lie in (0, 1]")
        if self.T <= 0.0:
            raise StructuralError("final time must be positive")
        if len(self.domain) != self.dim:
            raise StructuralError("one interval per dimension required")
        for a, b in self.domain:
            if not b > a:
                raise StructuralError("domain intervals must be nonempty")

    @property
    def periods(self) -> tuple:
        return tuple(b - a for a, b in self.domain)


def make_problem(init_name: str, eps: float, lam: float = 1.0, T: float = 5.0,
                 domain=None) -> ProblemSpec:
    if init_name not in INITIAL_DATA:
        raise StructuralError(f"unknown initial data {init_name!r}; "
                              f"known: {sorted(INITIAL_DATA)}")
    dim, phi1, phi2 = INITIAL_DATA[init_name]
    if dim is None:
        dim = 1
    if domain is None:
        domain = tuple(((-16.0, 16.0),) * dim)
    return ProblemSpec(eps=eps, lam=lam, domain=tuple(domain), T=T, dim=dim,
                       init_name=init_name, phi1=phi1, phi2=phi2)


# ---------------------------------------------------------------------------
# residual operators (polymorphic over floats / arrays / tape nodes)
# ---------------------------------------------------------------------------

def _laplacian_of(jet, dim: int):
    out = jet["dd:x0"]
    for d in range(1, dim):
        out = ad.add(out, jet[f"dd:x{d}"])
    return out


def nkge_residual(u_jet, spec: ProblemSpec):
    """eps^2 u_tt - Lap(u) + eps^-2 u + lam u^3 for real-valued u."""
    e2 = spec.eps ** 2
    u = u_jet["v"]
    out = ad.sub(ad.scale_add(u_jet["dd:t"], e2), _laplacian_of(u_jet, spec.dim))
    out = ad.add(out, ad.scale_add(u, 1.0 / e2))
    if spec.lam != 0.0:
        out = ad.add(out, ad.scale_add(ad.mul(ad.square(u), u), spec.lam))
    return out


def nlsw_residual(zre_jet, zim_jet, spec: ProblemSpec):
    """Real projections of 2i dz/dt + eps^2 z_tt - Lap(z) + 3 lam |z|^2 z.

    Returns (imaginary-part equation, real-part equation):
      imag: 2 d_t z_re + eps^2 d_tt z_im - Lap z_im + 3 lam |z|^2 z_im
      real: -2 d_t z_im + eps^2 d_tt z_re - Lap z_re + 3 lam |z|^2 z_re
    """
    e2 = spec.eps ** 2
    c = 3.0 * spec.lam
    mod2 = ad.add(ad.square(zre_jet["v"]), ad.square(zim_jet["v"]))
    imag_eq = ad.add(ad.scale_add(zre_jet["d:t"], 2.0),
                     ad.scale_add(zim_jet["dd:t"], e2))
    imag_eq = ad.sub(imag_eq, _laplacian_of(zim_jet, spec.dim))
    imag_eq = ad.add(imag_eq, ad.scale_add(ad.mul(mod2, zim_jet["v"]), c))
    real_eq = ad.add(ad.scale_add(zim_jet["d:t"], -2.0),
                     ad.scale_add(zre_jet["dd:t"], e2))
    real_eq = ad.sub(real_eq, _laplacian_of(zre_jet, spec.dim))
    real_eq = ad.add(real_eq, ad.scale_add(ad.mul(mod2, zre_jet["v"]), c))
    return imag_eq, real_eq


def coupling_term(z_re, z_im, r, t, spec: ProblemSpec):
    """The remainder equation's forcing, collapsed to its real form.

    2 lam Re(E^3 z^3) + 6 lam Re(E^2 z^2) r + 6 lam Re(E z) r^2
    + 6 lam |z|^2 r + lam r^3, with E = exp(i t / eps^2).

    z_re/z_im/t are parameter-independent values; r may be a tape node.
    """
    lam = spec.lam
    phase = np.asarray(t, dtype=np.float64) / spec.eps ** 2
    c1, s1 = np.cos(phase), np.sin(phase)
    c2, s2 = np.cos(2.0 * phase), np.sin(2.0 * phase)
    c3, s3 = np.cos(3.0 * phase), np.sin(3.0 * phase)
    z_re = np.asarray(z_re, dtype=np.float64)
    z_im = np.asarray(z_im, dtype=np.float64)
    mod2 = z_re * z_re + z_im * z_im
    # z^2 and z^3 components
    z2_re = z_re * z_re - z_im * z_im
    z2_im = 2.0 * z_re * z_im
    z3_re = z2_re * z_re - z2_im * z_im
    z3_im = z2_re * z_im + z2_im * z_re
    const = 2.0 * lam * (c3 * z3_re - s3 * z3_im)
    lin = 6.0 * lam * (c2 * z2_re - s2 * z2_im) + 6.0 * lam * mod2
    quad = 6.0 * lam * (c1 * z_re - s1 * z_im)
    r2 = ad.square(r)
    out = ad.scale_add(ad.mul(r, lin), 1.0, const)
    out = ad.add(out, ad.mul(r2, quad))
    out = ad.add(out, ad.scale_add(ad.mul(r2, r), lam))
    return out


def remainder_residual(r_jet, z_re, z_im, spec: ProblemSpec, t):
    """eps^2 r_tt - Lap(r) + eps^-2 r + f_r(z, r; t), z frozen."""
    e2 = spec.eps ** 2
    out = ad.sub(ad.scale_add(r_jet["dd:t"], e2), _laplacian_of(r_jet, spec.dim))
    out = ad.add(out, ad.scale_add(r_jet["v"], 1.0 / e2))
    return ad.add(out, coupling_term(z_re, z_im, r_jet["v"], t, spec))


# ---------------------------------------------------------------------------
# well-prepared initial data
# ---------------------------------------------------------------------------

def _check_periodic_compatible(spec: ProblemSpec, tol: float = 1e-8):
    for d in range(spec.dim):
        a, b = spec.domain[d]
        lo = np.zeros((1, spec.dim))
        hi = np.zeros((1, spec.dim))
        lo[0, d], hi[0, d] = a, b
        for phi in (spec.phi1, spec.phi2):
            jump = abs(float(phi(lo)[0]) - float(phi(hi)[0]))
            if jump > tol:
                raise DataError(
                    f"initial data jump {jump:.3e} at the domain edge of "
                    f"dimension {d} exceeds {tol:.0e}")


def prepare_z_initial(spec: ProblemSpec, grid: Grid):
    """Well-prepared envelope data: z0 = (phi1 - i phi2)/2 and
    dz0 = (i/2)(-Lap z0 + 3 lam |z0|^2 z0), the Laplacian spectral."""
    _check_periodic_compatible(spec)
    pts = grid.points()
    z0 = 0.5 * (spec.phi1(pts) - 1j * spec.phi2(pts)).reshape(grid.shape)
    lap = grid.laplacian(z0)
    dz0 = 0.5j * (-lap + 3.0 * spec.lam * np.abs(z0) ** 2 * z0)
    return z0, dz0


def prepare_r_initial(dz0: Array):
    """Small remainder data: r0 = 0, dr0 = -2 Re(dz0)."""
    return np.zeros_like(dz0.real), -2.0 * np.real(dz0)


# ---------------------------------------------------------------------------
# reconstruction, selection, metrics
# ---------------------------------------------------------------------------

def wkb_reconstruct(z: Field, r: Field | None, eps: float) -> Field:
    """u = 2 (Re z cos(t/eps^2) - Im z sin(t/eps^2)) + r."""
    if r is not None:
        require_same_layout(z, r)
    phase = z.times / eps ** 2
    cos_p = np.cos(phase).reshape((-1,) + (1,) * z.grid.dim)
    sin_p = np.sin(phase).reshape((-1,) + (1,) * z.grid.dim)
    u = 2.0 * (z.values.real * cos_p - z.values.imag * sin_p)
    if r is not None:
        u = u + r.values
    return Field(u, z.times, z.grid)


def error_criterion(u_amp: Field, u_full: Field, truth: Field):
    """Pick the reconstruction with the smaller global L2 error.

    Returns (selected field, tag); ties go to "amplitude-only".
    """
    require_same_layout(u_amp, truth)
    require_same_layout(u_full, truth)
    err_amp = float(np.sqrt(np.sum((u_amp.values - truth.values) ** 2)))
    err_full = float(np.sqrt(np.sum((u_full.values - truth.values) ** 2)))
    if err_amp <= err_full:
        return u_amp, "amplitude-only"
    return u_full, "with-remainder"


def rmae(pred, truth, outer_sqrt: bool = True) -> float:
    """Relative L1 error; printed form carries an outer square root."""
    pred = np.asarray(pred.values if isinstance(pred, Field) else pred)
    truth = np.asarray(truth.values if isinstance(truth, Field) else truth)
    denom = float(np.sum(np.abs(truth)))
    if denom == 0.0:
        raise MetricError("relative L1 error undefined for zero truth")
    ratio = float(np.sum(np.abs(pred - truth))) / denom
    return float(np.sqrt(ratio)) if outer_sqrt else ratio


def rrmse(pred, truth) -> float:
    """Relative root-mean-square error."""
    pred = np.asarray(pred.values if isinstance(pred, Field) else pred)
    truth = np.asarray(truth.values if isinstance(truth, Field) else truth)
    denom = float(np.sum(np.abs(truth) ** 2))
    if denom == 0.0:
        raise MetricError("relative RMS error undefined for zero truth")
    return float(np.sqrt(float(np.sum(np.abs(pred - truth) ** 2)) / denom))


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    w_res: float = 1.0
    w_ic: float = 1.0
    w_bd: float = 1.0

    def __post_init__(self):
        for w in (self.w_res, self.w_ic, self.w_bd):
            if not np.isfinite(w) or w < 0.0:
                raise StructuralError("loss weights must be finite and >= 0")


def mean_square_sum(terms, point_weights=None):
    """Mean over points of the sum of squared terms (optionally weighted)."""
    total = None
    for term in terms:
        sq = ad.square(term)
        if point_weights is not None:
            sq = ad.mul(sq, point_weights)
        total = sq if total is None else ad.add(total, sq)
    return ad.mean_all(total)


def assemble_loss(w: LossWeights, l_res, l_ic, l_bd):
    """w_res * L_res + w_ic * L_ic + w_bd * L_bd."""
    out = ad.scale_add(l_res, w.w_res)
    out = ad.add(out, ad.scale_add(l_ic, w.w_ic))
    return ad.add(out, ad.scale_add(l_bd, w.w_bd))


def assemble_loss_stage1(res_terms, ic_terms, bd_terms, w: LossWeights,
                         res_weights=None):
    """Stage-one total: residual pair, initial-data terms, boundary pairs."""
    return assemble_loss(w, mean_square_sum(res_terms, res_weights),
                         mean_square_sum(ic_terms), mean_square_sum(bd_terms))


def assemble_loss_stage2(res_terms, ic_terms, bd_terms, w: LossWeights,
                         res_weights=None):
    """Stage-two total; same shape as stage one with the remainder residual."""
    return assemble_loss(w, mean_square_sum(res_terms, res_weights),
                         mean_square_sum(ic_terms), mean_square_sum(bd_terms))


# ---------------------------------------------------------------------------
# hard-IC data providers over stacked jet layouts
# ---------------------------------------------------------------------------

def interpolant_ic_provider(interp: TrigInterpolant):
    """Wrap a grid interpolant as a stacked-jet initial-data provider."""

    def provider(x: Array, layout) -> Array:
        x = np.atleast_2d(x)
        out = np.zeros((layout.n, x.shape[0]))
        out[0] = interp.value(x)
        for c in layout.coords:
            if c == "t":
                continue
            d = int(c[1:])
            out[layout.index(f"d:{c}")] = interp.derivative(x, d, order=1)
            out[layout.index(f"dd:{c}")] = interp.derivative(x, d, order=2)
        return out

    return provider


def zero_ic_provider():
    def provider(x: Array, layout) -> Array:
        return np.zeros((layout.n, np.atleast_2d(x).shape[0]))

    return provider
