"""Desk calibration of the default training configuration.

Runs both stages at the requested eps values, evaluates against the direct
reference, and prints per-phase metrics so defaults can be pinned.
"""

import json
import sys
import time

import numpy as np

from kgmd.fields import Grid
from kgmd.physics import error_criterion, make_problem, rrmse, rmae
from kgmd.spectral import solve_nkge
from kgmd.training import (TrainConfig, reconstruct_fields, train_stage1,
                           train_stage2)


def run(eps: float, iterations: int, adam_iters: int, lr: float, seed: int):
    prob = make_problem("gauss-sech", eps=eps, lam=1.0, T=5.0)
    grid = Grid((256,), prob.domain)
    times = np.linspace(0.0, prob.T, 51)
    t0 = time.time()
    truth, info = solve_nkge(prob, grid, eps ** 2 / 64.0, times)
    print(f"[eps={eps}] reference: {info['steps']} steps, "
          f"drift {info['energy_drift']:.2e}, {time.time()-t0:.0f}s", flush=True)

    cfg = TrainConfig(iterations=iterations, adam_iterations=adam_iters,
                      adam_lr=lr, seed=seed)
    t0 = time.time()
    z_params, rep1, z_gate = train_stage1(prob, cfg)
    t_s1 = time.time() - t0
    u_amp, _ = reconstruct_fields(prob, grid, times, z_params, z_gate)
    amp_rrmse = rrmse(u_amp, truth)
    print(f"[eps={eps}] stage1: {t_s1:.0f}s, final loss "
          f"{rep1.rows[-1][1]:.3e}, amp rRMSE {amp_rrmse:.4f}", flush=True)

    t0 = time.time()
    r_params, rep2, r_gate = train_stage2(prob, z_params, z_gate, cfg)
    t_s2 = time.time() - t0
    u_amp, u_full = reconstruct_fields(prob, grid, times, z_params, z_gate,
                                       r_params, r_gate)
    full_rrmse = rrmse(u_full, truth)
    sel, tag = error_criterion(u_amp, u_full, truth)
    print(f"[eps={eps}] stage2: {t_s2:.0f}s, final loss "
          f"{rep2.rows[-1][1]:.3e}, full rRMSE {full_rrmse:.4f}, "
          f"selected={tag} rRMSE {rrmse(sel, truth):.4f} "
          f"rMAE {rmae(sel, truth):.4f}", flush=True)


if __name__ == "__main__":
    eps = float(sys.argv[1])
    iters = int(sys.argv[2]) if len(sys.argv) > 2 else 1000
    adam = int(sys.argv[3]) if len(sys.argv) > 3 else 500
    lr = float(sys.argv[4]) if len(sys.argv) > 4 else 2e-3
    seed = int(sys.argv[5]) if len(sys.argv) > 5 else 0
    run(eps, iters, adam, lr, seed)
