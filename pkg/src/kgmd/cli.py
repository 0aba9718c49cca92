"""Command-line interface: reference, train, evaluate, convergence, baseline,
diagnose.

Every command reads one configuration file, writes its artifacts (delimited
outputs plus rendered figures) under --out, and echoes the effective
configuration so the run can be reproduced from the echo alone.

Exit codes: 0 ok, 2 configuration/structural error, 3 numeric abort,
4 resolution refusal.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace as dc_replace

import numpy as np

from . import figures
from .config import RunConfig, parse_config, write_effective_config
from .errors import (ConfigError, DataError, KgmdError, MetricError,
                     NumericError, ResolutionError, StructuralError)
from .fields import Field, Grid, read_field_bin, write_field_bin, write_field_csv
from .gating import GateState
from .network import Architecture
from .physics import error_criterion, rmae, rrmse
from .spectral import (envelope_reconstruction, eta_curves,
                       fit_convergence_order, solve_nkge, solve_nlse,
                       solve_nlsw)
from .training import (CorrelationProbe, TrainConfig, baseline_setup,
                       grad_correlation, load_checkpoint, make_probe,
                       model_on_grid, reconstruct_fields, rng_stream,
                       save_checkpoint, stiffness_coefficient,
                       time_avg_correlation_check, train_baseline,
                       train_stage1, train_stage2)


def _prepare_out(cfg: RunConfig, out: str):
    os.makedirs(out, exist_ok=True)
    write_effective_config(os.path.join(out, "effective_config.cfg"), cfg)


def _snapshot_times(cfg: RunConfig) -> np.ndarray:
    return np.linspace(0.0, cfg.problem.T, cfg.reference.snapshots)


def _reference_grid(cfg: RunConfig) -> Grid:
    n = cfg.reference.grid_n
    return Grid((n,) * cfg.problem.dim, cfg.problem.domain)


def _write_rows(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _compute_reference(cfg: RunConfig, grid: Grid, times) -> tuple:
    prob = cfg.problem
    if cfg.reference.method == "direct":
        dt = cfg.reference.nkge_dt_frac * prob.eps ** 2
        return solve_nkge(prob, grid, dt, times)
    z, info = solve_nlsw(prob, grid, cfg.reference.env_dt, times)
    return envelope_reconstruction(z, prob.eps), info


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_reference(cfg: RunConfig, out: str) -> int:
    _prepare_out(cfg, out)
    prob = cfg.problem
    grid = _reference_grid(cfg)
    times = _snapshot_times(cfg)
    u, info_u = _compute_reference(cfg, grid, times)
    z_sw, info_sw = solve_nlsw(prob, grid, cfg.reference.env_dt, times)
    z_s, info_s = solve_nlse(prob, grid, cfg.reference.env_dt, times)
    write_field_bin(os.path.join(out, "nkge.bin"), u)
    write_field_csv(os.path.join(out, "nkge.csv"), u, column="u")
    write_field_bin(os.path.join(out, "nlsw.bin"), z_sw)
    write_field_csv(os.path.join(out, "nlsw.csv"), z_sw, column="z")
    write_field_bin(os.path.join(out, "nlse.bin"), z_s)
    write_field_csv(os.path.join(out, "nlse.csv"), z_s, column="z")
    rows = [
        ("nkge", cfg.reference.method, info_u["dt"], info_u["steps"],
         info_u.get("energy_drift", float("nan"))),
        ("nlsw", "exponential", info_sw["dt"], info_sw["steps"], float("nan")),
        ("nlse", "splitting", info_s["dt"], info_s["steps"],
         info_s.get("mass_drift", float("nan"))),
    ]
    _write_rows(os.path.join(out, "reference_info.csv"),
                ("model", "scheme", "dt", "steps", "drift"), rows)
    return 0


def _train_one_stage(cfg: RunConfig, out: str, stage: str, z_ckpt=None):
    prob = cfg.problem
    net = cfg.network
    tcfg = cfg.training
    radii = net.resolve_radii()
    if stage == "1":
        arch = Architecture(dim=prob.dim, modes=net.modes,
                            periods=prob.periods, d_model=net.d_model,
                            n_outputs=2, radii=radii, counts=net.counts,
                            encoder_widths=net.encoder_widths,
                            mixer_hidden=net.mixer_hidden,
                            head_widths=net.head_widths)
        params, report, gate = train_stage1(prob, tcfg, arch)
    else:
        z_params, z_gate, _meta = z_ckpt
        arch = Architecture(dim=prob.dim, modes=net.modes,
                            periods=prob.periods, d_model=net.d_model,
                            n_outputs=1, radii=radii, counts=net.counts,
                            encoder_widths=net.encoder_widths,
                            mixer_hidden=net.mixer_hidden,
                            head_widths=net.head_widths)
        params, report, gate = train_stage2(prob, z_params, z_gate, tcfg, arch)
    tag = f"stage{stage}"
    ckpt_path = os.path.join(out, f"checkpoint_{tag}.bin")
    save_checkpoint(ckpt_path, params, stage=tag, seed=tcfg.seed, gate=gate)
    report.to_csv(os.path.join(out, f"report_{tag}.csv"))
    if report.rows:
        figures.save_training_curves(
            os.path.join(out, f"training_{tag}.png"), report.rows,
            f"{tag} (eps={prob.eps:g})")
    return params, gate, ckpt_path


def cmd_train(cfg: RunConfig, out: str, stage: str, stage1_ckpt=None) -> int:
    _prepare_out(cfg, out)
    if stage in ("1", "both"):
        params1, gate1, ckpt1 = _train_one_stage(cfg, out, "1")
        z_ckpt = (params1, gate1, None)
    else:
        if not stage1_ckpt:
            raise StructuralError("stage 2 requires --stage1-checkpoint")
        z_ckpt = load_checkpoint(stage1_ckpt)
    if stage in ("2", "both"):
        _train_one_stage(cfg, out, "2", z_ckpt=z_ckpt)
    return 0


def _evaluate_reconstructions(cfg: RunConfig, out: str, truth: Field,
                              u_amp: Field, u_full: Field | None,
                              prefix: str = "") -> dict:
    outer = cfg.evaluate.rmae_outer_sqrt
    entries = [("amplitude-only", u_amp)]
    if u_full is not None:
        entries.append(("with-remainder", u_full))
        selected, tag = error_criterion(u_amp, u_full, truth)
    else:
        selected, tag = u_amp, "amplitude-only"
    entries.append(("selected", selected))
    rows = []
    for name, f in entries:
        rows.append((name, rmae(f, truth, outer_sqrt=outer), rrmse(f, truth),
                     tag if name == "selected" else ""))
        err = Field(np.abs(f.values - truth.values), truth.times, truth.grid)
        slug = name.replace("-", "_")
        write_field_csv(os.path.join(out, f"{prefix}error_{slug}.csv"), err,
                        column="abs_error")
        figures.save_heatmap(os.path.join(out, f"{prefix}error_{slug}.png"),
                             err, f"|u_model - u| ({name})")
    _write_rows(os.path.join(out, f"{prefix}metrics.csv"),
                ("reconstruction", "rmae", "rrmse", "criterion"), rows)
    return {name: (row[1], row[2]) for (name, _), row in zip(entries, rows)} \
        | {"criterion": tag}


def cmd_evaluate(cfg: RunConfig, out: str, stage1_ckpt: str,
                 stage2_ckpt: str | None = None,
                 reference: str | None = None) -> int:
    _prepare_out(cfg, out)
    prob = cfg.problem
    if reference:
        truth = read_field_bin(reference)
        if truth.grid.intervals != prob.domain:
            raise StructuralError("reference grid does not match the problem")
    else:
        grid = _reference_grid(cfg)
        times = _snapshot_times(cfg)
        truth, _ = _compute_reference(cfg, grid, times)
        write_field_bin(os.path.join(out, "nkge.bin"), truth)
    z_params, z_gate, _ = load_checkpoint(stage1_ckpt)
    r_params = r_gate = None
    if stage2_ckpt:
        r_params, r_gate, _ = load_checkpoint(stage2_ckpt)
    prep = Grid((cfg.training.prep_grid_n,) * prob.dim, prob.domain)
    u_amp, u_full = reconstruct_fields(prob, truth.grid, truth.times,
                                       z_params, z_gate, r_params, r_gate,
                                       prep_grid=prep)
    _evaluate_reconstructions(cfg, out, truth, u_amp, u_full)
    return 0


def cmd_convergence(cfg: RunConfig, out: str) -> int:
    _prepare_out(cfg, out)
    conv = cfg.convergence
    base = cfg.problem
    times = np.asarray(conv.times, dtype=np.float64)
    fit_idx = int(np.argmin(np.abs(times - conv.fit_time)))
    rows = []
    curves_by_eps = {}
    fit_errors = []
    for eps in conv.eps_list:
        prob = dc_replace(base, eps=eps, T=float(times[-1]))
        grid = Grid((conv.grid_n,) * base.dim, base.domain)
        curves = eta_curves(prob, grid, times,
                            dt_nkge=cfg.reference.nkge_dt_frac * eps ** 2,
                            dt_env=cfg.reference.env_dt)
        curves_by_eps[eps] = curves
        fit_errors.append(curves["eta_nlsw"][fit_idx])
        for i, t in enumerate(times):
            rows.append((eps, t, curves["eta_nlsw"][i], curves["eta_nlse"][i]))
    _write_rows(os.path.join(out, "eta_curves.csv"),
                ("eps", "t", "eta_nlsw", "eta_nlse"), rows)
    slope = fit_convergence_order(conv.eps_list, fit_errors)
    srow = [("nlsw_order_at_t%g" % conv.fit_time, slope)]
    for eps, curves in curves_by_eps.items():
        sw, s = curves["eta_nlsw"], curves["eta_nlse"]
        srow.append((f"nlsw_time_ratio_eps{eps:g}", sw[-1] / sw[fit_idx]))
        srow.append((f"nlse_growth_ratio_eps{eps:g}", s[-1] / s[fit_idx]))
    _write_rows(os.path.join(out, "slopes.csv"), ("quantity", "value"), srow)
    figures.save_eta_curves(os.path.join(out, "eta_curves.png"), curves_by_eps)
    figures.save_convergence_fit(os.path.join(out, "convergence_fit.png"),
                                 conv.eps_list, fit_errors, slope)
    return 0


def cmd_baseline(cfg: RunConfig, out: str) -> int:
    _prepare_out(cfg, out)
    prob = cfg.problem
    params, report, gate = train_baseline(prob, cfg.training)
    save_checkpoint(os.path.join(out, "checkpoint_baseline.bin"), params,
                    stage="baseline", seed=cfg.training.seed, gate=gate)
    report.to_csv(os.path.join(out, "report_baseline.csv"))
    if report.rows:
        figures.save_training_curves(os.path.join(out, "training_baseline.png"),
                                     report.rows, f"baseline (eps={prob.eps:g})")
    grid = _reference_grid(cfg)
    times = _snapshot_times(cfg)
    truth, _ = _compute_reference(cfg, grid, times)
    setup = baseline_setup(prob, params.arch,
                           Grid((cfg.training.prep_grid_n,) * prob.dim,
                                prob.domain))
    vals = model_on_grid(prob, params, gate, setup, grid, times)
    u_model = Field(vals[..., 0], times, grid)
    outer = cfg.evaluate.rmae_outer_sqrt
    rows = [("baseline", rmae(u_model, truth, outer_sqrt=outer),
             rrmse(u_model, truth), "")]
    _write_rows(os.path.join(out, "metrics_baseline.csv"),
                ("reconstruction", "rmae", "rrmse", "criterion"), rows)
    err = Field(np.abs(u_model.values - truth.values), times, grid)
    write_field_csv(os.path.join(out, "error_baseline.csv"), err,
                    column="abs_error")
    figures.save_heatmap(os.path.join(out, "error_baseline.png"), err,
                         "|u_baseline - u|")
    return 0


def cmd_diagnose(cfg: RunConfig, out: str, checkpoint: str) -> int:
    _prepare_out(cfg, out)
    prob = cfg.problem
    params, gate, meta = load_checkpoint(checkpoint)
    tcfg = cfg.training
    probe = make_probe(prob, tcfg, rng_stream(tcfg.seed, "diagnose-probe"))
    rows = []
    for i in range(probe.t.shape[0]):
        x = probe.x[i:i + 1]
        t = float(probe.t[i])
        for dt in (0.0, probe.dt):
            corr = grad_correlation(params.arch, params.flat, x, t, dt,
                                    prob.T, gate=None)
            gated = grad_correlation(params.arch, params.flat, x, t, dt,
                                     prob.T, gate=gate)
            stiff = stiffness_coefficient(params.arch, params.flat, x, t, dt,
                                          prob.T, lam_probe=1e-6)
            rows.append((i,) + tuple(float(c) for c in probe.x[i]) +
                        (t, dt, corr, gated, stiff))
    header = ("probe",) + tuple(f"x{d}" for d in range(prob.dim)) + \
        ("t", "delta_t", "grad_corr", "grad_corr_gated", "stiffness")
    _write_rows(os.path.join(out, "diagnostics.csv"), header, rows)
    check = time_avg_correlation_check(
        Architecture(dim=prob.dim, modes=2, periods=prob.periods, d_model=8,
                     n_outputs=1, radii=(), counts=(), encoder_widths=(8,),
                     head_widths=(8, 8)),
        prob.T, region=0.05 * prob.T, k=5, n_samples=50, seed=tcfg.seed)
    _write_rows(os.path.join(out, "timeavg.csv"),
                ("n_samples", "conforming", "pass_fraction"),
                [(check["n_samples"], check["conforming"],
                  check["pass_fraction"])])
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgmd",
        description="Multiscale-decomposition collocation solver for the "
                    "oscillatory Klein-Gordon equation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")

    p = sub.add_parser("reference", help="pseudospectral reference snapshots")
    common(p)
    p = sub.add_parser("train", help="two-stage collocation training")
    common(p)
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--stage1-checkpoint", default=None,
                   help="existing envelope checkpoint (stage 2 only)")
    p = sub.add_parser("evaluate", help="metrics and error maps for checkpoints")
    common(p)
    p.add_argument("--stage1", required=True, help="envelope checkpoint")
    p.add_argument("--stage2", default=None, help="remainder checkpoint")
    p.add_argument("--reference", default=None,
                   help="reference field .bin (recomputed when absent)")
    p = sub.add_parser("convergence", help="limit-model convergence harness")
    common(p)
    p = sub.add_parser("baseline", help="single-network baseline run")
    common(p)
    p = sub.add_parser("diagnose", help="correlation and stiffness probes")
    common(p)
    p.add_argument("--checkpoint", required=True)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = parse_config(args.config, seed_override=args.seed)
    if args.command == "reference":
        return cmd_reference(cfg, args.out)
    if args.command == "train":
        return cmd_train(cfg, args.out, args.stage, args.stage1_checkpoint)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, args.out, args.stage1, args.stage2,
                            args.reference)
    if args.command == "convergence":
        return cmd_convergence(cfg, args.out)
    if args.command == "baseline":
        return cmd_baseline(cfg, args.out)
    if args.command == "diagnose":
        return cmd_diagnose(cfg, args.out, args.checkpoint)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    try:
        return run(argv)
    except ResolutionError as exc:
        print(f"resolution refusal: {exc}", file=sys.stderr)
        if exc.required_dt is not None:
            print(f"required dt <= {exc.required_dt:.6e}", file=sys.stderr)
        return 4
    except (NumericError, MetricError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, StructuralError, DataError, KgmdError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
