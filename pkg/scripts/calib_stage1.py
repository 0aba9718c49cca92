"""Stage-1 calibration: full default budget, saving artifacts for analysis."""

import sys
import time

import numpy as np

from kgmd.fields import Grid
from kgmd.physics import make_problem, rrmse
from kgmd.spectral import solve_nlsw, solve_nkge, envelope_reconstruction
from kgmd.training import (TrainConfig, model_on_grid, save_checkpoint,
                           stage1_setup, train_stage1, reconstruct_fields)

eps = float(sys.argv[1])
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 2e-3
seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0
tag = sys.argv[4] if len(sys.argv) > 4 else "a"

prob = make_problem("gauss-sech", eps=eps, lam=1.0, T=5.0)
grid = Grid((256,), prob.domain)
cfg = TrainConfig(adam_lr=lr, seed=seed)
t0 = time.time()
z_params, rep, z_gate = train_stage1(prob, cfg)
print(f"stage1 {time.time()-t0:.0f}s; loss path: "
      f"{rep.rows[0][1]:.3e} -> {rep.rows[499][1]:.3e} (end of Adam) -> "
      f"{rep.rows[-1][1]:.3e}", flush=True)
save_checkpoint(f"/tmp/z_eps{eps}_{tag}.bin", z_params, stage="stage1",
                seed=seed, gate=z_gate)
rep.to_csv(f"/tmp/z_eps{eps}_{tag}_report.csv")

times = np.linspace(0.0, prob.T, 51)
z_ref, _ = solve_nlsw(prob, grid, 1.0 / 256.0, times[1:])
s1 = stage1_setup(prob, z_params.arch)
zv = model_on_grid(prob, z_params, z_gate, s1, grid, times[1:])
z_model = zv[..., 0] + 1j * zv[..., 1]
err = np.sqrt(np.sum(np.abs(z_model - z_ref.values) ** 2)
              / np.sum(np.abs(z_ref.values) ** 2))
print(f"z-field rRMSE vs envelope reference: {err:.4f}", flush=True)

truth, _ = solve_nkge(prob, grid, eps ** 2 / 64.0, times)
u_amp, _ = reconstruct_fields(prob, grid, times, z_params, z_gate)
print(f"amplitude-only rRMSE vs direct truth: {rrmse(u_amp, truth):.4f}",
      flush=True)
u_env = envelope_reconstruction(z_ref, eps)
vals = truth.values[1:]
env_err = np.sqrt(np.sum((u_env.values - vals) ** 2) / np.sum(vals ** 2))
print(f"(exact-envelope reconstruction rRMSE: {env_err:.4f})", flush=True)
