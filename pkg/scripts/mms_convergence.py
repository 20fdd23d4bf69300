#!/usr/bin/env python3
"""Spatial and temporal manufactured-solution studies, printed and saved as CSV."""
import argparse
import logging

from shallowflow.mms import spatial_study, temporal_study

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--prefix", default="mms")
p.add_argument("--navier-stokes", action="store_true",
               help="temporal study with convection and Coriolis (first order unless --extrapolate)")
p.add_argument("--extrapolate", action="store_true", help="extrapolate explicit terms to second order")
a = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

spatial = spatial_study()
print(spatial.format())
spatial.to_csv(f"{a.prefix}_spatial.csv")
kw = dict(nu=(1.0, 1.0, 1.0), f=0.5, convection=True) if a.navier_stokes else {}
temporal = temporal_study(extrapolate=a.extrapolate, **kw)
print(temporal.format())
temporal.to_csv(f"{a.prefix}_temporal.csv")
