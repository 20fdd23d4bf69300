#!/usr/bin/env python3
"""Write a synthetic closed ocean basin in the bathymetry raster format.

The basin has a continental shelf along every coast, a mid-basin ridge and
a double-gyre zonal wind tau_x = -tau0 cos(2 pi y / Ly) in N/m^2.
"""
import argparse

import numpy as np

from shallowflow.geometry import BathymetryGrid, save_bathymetry


def synthetic_basin(nx, ny, lx, ly, depth, tau0, ridge=0.3):
    dx, dy = lx / nx, ly / ny
    xc = (np.arange(nx) + 0.5) / nx
    yc = (np.arange(ny) + 0.5) / ny
    X, Y = np.meshgrid(xc, yc, indexing="ij")
    coast = np.minimum(np.minimum(X, 1 - X), np.minimum(Y, 1 - Y))
    h = depth * np.clip(coast / 0.12, 0.15, 1.0)
    h *= 1 - ridge * np.exp(-((X - 0.5) / 0.06) ** 2)
    h[[0, -1], :] = 0.0
    h[:, [0, -1]] = 0.0
    tau_x = -tau0 * np.cos(2 * np.pi * Y)
    return BathymetryGrid(nx, ny, 0.0, 0.0, dx, dy, h, tau_x, np.zeros_like(h))


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out")
    p.add_argument("--nx", type=int, default=24)
    p.add_argument("--ny", type=int, default=16)
    p.add_argument("--lx", type=float, default=4.0e6, help="zonal extent [m]")
    p.add_argument("--ly", type=float, default=3.0e6, help="meridional extent [m]")
    p.add_argument("--depth", type=float, default=4000.0, help="abyssal depth [m]")
    p.add_argument("--tau", type=float, default=0.1, help="wind stress amplitude [N/m^2]")
    a = p.parse_args()
    save_bathymetry(synthetic_basin(a.nx, a.ny, a.lx, a.ly, a.depth, a.tau), a.out)
    print(f"wrote {a.out} ({a.nx} x {a.ny} cells)")


if __name__ == "__main__":
    main()
