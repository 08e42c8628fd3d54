#!/usr/bin/env python3
"""Where and when can one target be observed?

Walks a single sky position through the bundled five-site array over a
4-hour window and prints each site's visibility windows with their best
airmass.  Run from anywhere: python demos/visibility_tour.py
"""
from datetime import datetime, timezone

from obsched.ephemeris import (
    SkyCoord,
    TimeGrid,
    VisibilityConstraints,
    local_sidereal_time,
    sun_altitude,
    visibility_windows,
)
from obsched.scenario import default_sites

# a target in the southern sky, and the default northern-winter epoch
target = SkyCoord(ra=260.0, dec=-25.0)
grid = TimeGrid(epoch_utc=datetime(2025, 6, 21, 4, 0, tzinfo=timezone.utc), horizon_steps=240)
cons = VisibilityConstraints()  # airmass <= 3, altitude > 5 deg, sun <= -12 deg

print(f"target ra={target.ra} dec={target.dec}, {grid.horizon_steps} one-minute steps")
print(f"constraints: airmass <= {cons.max_airmass}, sun <= {cons.max_sun_altitude_deg} deg\n")

for i, site in enumerate(default_sites()):
    sun0 = sun_altitude(grid.epoch_utc, 0, site.coord)
    lst0 = local_sidereal_time(grid.epoch_utc, 0, site.coord)
    wins = visibility_windows(target, site.coord, grid, cons, site_index=i)
    line = ", ".join(
        f"[{w.start_step:3d},{w.end_step:3d}) X>={w.min_airmass_in_window:.2f}" for w in wins
    ) or "never visible"
    print(f"{site.name:>16}  sun={sun0:+6.1f}  lst={lst0:6.1f}  ->  {line}")

print(
    "\nSites in daylight (sun above -12) contribute nothing; the dark sites"
    "\ndisagree about airmass, which is what the distributed site rules exploit."
)
