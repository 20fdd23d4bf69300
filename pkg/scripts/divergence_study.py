#!/usr/bin/env python3
"""||B u|| after a few steps versus pressure tolerance for both projection variants."""
import argparse

import numpy as np

from shallowflow.geometry import box_mesh
from shallowflow.stepper import Operators, PhysicalParams, SimulationState, SolverSettings, advance

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--steps", type=int, default=5)
a = p.parse_args()

grid, mesh = box_mesh(16, 8, 4, 1.6e6, 8e5, 4000.0, tau_x=0.1, land_ring=True)
params = PhysicalParams(f=1e-4, wind_scale=1 / 1025)
tols = [1e-4, 1e-6, 1e-8, 1e-10]
for projection in ("laplacian", "consistent"):
    div = []
    for tol in tols:
        ops = Operators(mesh, params, grid, SolverSettings(pressure_tol=tol, projection=projection))
        s = SimulationState.at_rest(mesh)
        for _ in range(a.steps):
            s = advance(s, ops, params)
        div.append(s.info.divergence)
        print(f"{projection:>10} tol={tol:.0e} |Bu|={s.info.divergence:.3e} pressure its={s.info.pressure_iterations}")
    slope = np.polyfit(np.log10(tols), np.log10(div), 1)[0]
    print(f"{projection:>10} log-log slope {slope:.3f}")
