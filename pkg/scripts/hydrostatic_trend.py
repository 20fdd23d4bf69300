#!/usr/bin/env python3
"""Hydrostatic residual of the wind-driven basin as the aspect ratio shrinks."""
import argparse

from shallowflow.scaling import hydrostatic_trend

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--eps", type=float, nargs="+", default=[1.0, 0.3, 0.1, 0.03])
p.add_argument("--n", type=int, default=6)
p.add_argument("--steps", type=int, default=40)
a = p.parse_args()

print(f"{'eps':>8} {'residual':>10} {'energy':>12}")
for pt in hydrostatic_trend(a.eps, n=a.n, steps=a.steps):
    print(f"{pt.epsilon:8.3g} {pt.residual:10.4f} {pt.kinetic_energy:12.4e}")
