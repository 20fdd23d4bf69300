#!/usr/bin/env python3
"""Generate the synthetic grid if needed and run ``basin.cfg`` through the CLI."""
import subprocess
import sys
from pathlib import Path

from shallowflow.driver import main

here = Path(__file__).resolve().parent
grid = here / "basin_grid.txt"
if not grid.exists():
    subprocess.run([sys.executable, str(here / "make_basin_grid.py"), str(grid)], check=True)
sys.exit(main(["run", str(here / "basin.cfg"), *sys.argv[1:]]))
