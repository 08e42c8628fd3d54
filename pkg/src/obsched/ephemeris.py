"""Observability geometry: sidereal time, target altitude, airmass, solar
position, and per-site visibility windows on a discrete minute grid.

All formulas are standard low-precision closed forms (Meeus-style GMST
polynomial, Kasten & Young 1989 relative airmass, mean-element solar
ephemeris).  Accuracy is far inside the coarse thresholds that matter for
scheduling (degrees, not arcseconds).  Everything here is a pure function
of immutable inputs and safe to call concurrently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

__all__ = [
    "UNOBSERVABLE",
    "SkyCoord",
    "GeoCoord",
    "TimeGrid",
    "VisibilityConstraints",
    "VisibilityWindow",
    "julian_date",
    "gmst_degrees",
    "local_sidereal_time",
    "altitude",
    "airmass",
    "sun_equatorial",
    "sun_altitude",
    "site_dark_steps",
    "visibility_mask",
    "visibility_masks_multi",
    "visibility_windows",
]

#: Airmass sentinel for altitudes at or below the horizon cutoff.  Using
#: +inf means "airmass <= limit" naturally rejects unobservable steps.
UNOBSERVABLE = math.inf

_J2000 = datetime(2000, 1, 1, 12, 0, 0, tzinfo=timezone.utc)
_JD_J2000 = 2451545.0
_DEG = math.pi / 180.0


@dataclass(frozen=True)
class SkyCoord:
    """Equatorial target coordinates in degrees.

    ``ra`` wraps modulo 360 and ``dec`` is clamped to [-90, +90] at
    construction, so every instance is valid by invariant.
    """

    ra: float
    dec: float

    def __post_init__(self):
        object.__setattr__(self, "ra", float(self.ra) % 360.0)
        object.__setattr__(self, "dec", float(min(90.0, max(-90.0, self.dec))))


@dataclass(frozen=True)
class GeoCoord:
    """Geographic site coordinates, east-positive longitude in (-180, 180]."""

    lat: float
    lon: float
    altitude_m: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"lat out of range: {self.lat}")
        if not -180.0 < self.lon <= 180.0:
            raise ValueError(f"lon out of range: {self.lon}")


@dataclass(frozen=True)
class TimeGrid:
    """Discrete scheduling clock: integer steps of ``step_minutes`` from
    ``epoch_utc``.  All scheduling times are grid indices in
    [0, horizon_steps]."""

    epoch_utc: datetime
    step_minutes: int = 1
    horizon_steps: int = 240

    def __post_init__(self):
        if self.epoch_utc.tzinfo is None:
            object.__setattr__(self, "epoch_utc", self.epoch_utc.replace(tzinfo=timezone.utc))
        if self.step_minutes < 1:
            raise ValueError("step_minutes must be >= 1")
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")

    def time_at(self, step: float) -> datetime:
        return self.epoch_utc + timedelta(minutes=float(step) * self.step_minutes)


@dataclass(frozen=True)
class VisibilityConstraints:
    """Thresholds of the per-step visibility predicate.

    A step counts as observable when the target sits above
    ``min_altitude_deg``, its airmass is at most ``max_airmass``, and the
    sun is at or below ``max_sun_altitude_deg`` (nautical twilight by
    default).
    """

    max_airmass: float = 3.0
    min_altitude_deg: float = 5.0
    max_sun_altitude_deg: float = -12.0


@dataclass(frozen=True)
class VisibilityWindow:
    """Maximal run of consecutive observable steps, half-open [start, end)."""

    site_index: int
    start_step: int
    end_step: int
    min_airmass_in_window: float


def julian_date(when: datetime) -> float:
    """Julian date of a (timezone-aware, UTC) instant."""
    if when.tzinfo is None:
        when = when.replace(tzinfo=timezone.utc)
    return _JD_J2000 + (when - _J2000).total_seconds() / 86400.0


def gmst_degrees(when: datetime) -> float:
    """Greenwich mean sidereal time in degrees, standard IAU-1982 polynomial."""
    d = julian_date(when) - _JD_J2000
    t = d / 36525.0
    gmst = (
        280.46061837
        + 360.98564736629 * d
        + 0.000387933 * t * t
        - t * t * t / 38710000.0
    )
    return gmst % 360.0


def local_sidereal_time(
    epoch_utc: datetime, step_index: float, site: GeoCoord, *, step_minutes: int = 1
) -> float:
    """Apparent local sidereal time, degrees in [0, 360), at a grid instant.

    ``step_index`` counts ``step_minutes`` intervals from ``epoch_utc``;
    the site's east longitude is added to GMST.
    """
    when = epoch_utc + timedelta(minutes=float(step_index) * step_minutes)
    return (gmst_degrees(when) + site.lon) % 360.0


def altitude(target: SkyCoord, site: GeoCoord, lst_degrees: float) -> float:
    """Target altitude in degrees for a given local sidereal time.

    sin(alt) = sin(lat) sin(dec) + cos(lat) cos(dec) cos(HA), HA = LST - RA.
    """
    ha = (lst_degrees - target.ra) * _DEG
    lat = site.lat * _DEG
    dec = target.dec * _DEG
    s = math.sin(lat) * math.sin(dec) + math.cos(lat) * math.cos(dec) * math.cos(ha)
    return math.degrees(math.asin(min(1.0, max(-1.0, s))))


def airmass(alt_degrees: float, *, min_altitude_deg: float = 5.0) -> float:
    """Kasten & Young (1989) relative airmass; UNOBSERVABLE below the cutoff.

    X = 1 / (sin(alt) + 0.50572 (alt_deg + 6.07995)^-1.6364)
    """
    if alt_degrees <= min_altitude_deg:
        return UNOBSERVABLE
    return 1.0 / (
        math.sin(alt_degrees * _DEG)
        + 0.50572 * (alt_degrees + 6.07995) ** (-1.6364)
    )


def sun_equatorial(when: datetime) -> SkyCoord:
    """Low-precision solar RA/dec from mean anomaly and ecliptic longitude.

    Mean-element model (Meeus ch. 25, truncated); good to a few arcminutes,
    orders of magnitude tighter than the twilight thresholds it feeds.
    """
    t = (julian_date(when) - _JD_J2000) / 36525.0
    # mean anomaly and mean longitude, degrees
    m = math.radians((357.52911 + 35999.05029 * t) % 360.0)
    l0 = (280.46646 + 36000.76983 * t) % 360.0
    # equation of center -> apparent ecliptic longitude
    c = (
        (1.914602 - 0.004817 * t) * math.sin(m)
        + (0.019993 - 0.000101 * t) * math.sin(2 * m)
        + 0.000289 * math.sin(3 * m)
    )
    lam = math.radians((l0 + c) % 360.0)
    eps = math.radians(23.439291 - 0.0130042 * t)
    ra = math.degrees(math.atan2(math.cos(eps) * math.sin(lam), math.cos(lam))) % 360.0
    dec = math.degrees(math.asin(math.sin(eps) * math.sin(lam)))
    return SkyCoord(ra=ra, dec=dec)


def sun_altitude(
    epoch_utc: datetime, step_index: float, site: GeoCoord, *, step_minutes: int = 1
) -> float:
    """Sun altitude in degrees at a grid instant for a site."""
    when = epoch_utc + timedelta(minutes=float(step_index) * step_minutes)
    sun = sun_equatorial(when)
    lst = local_sidereal_time(epoch_utc, step_index, site, step_minutes=step_minutes)
    return altitude(sun, site, lst)


def _step_jds(grid: TimeGrid) -> np.ndarray:
    jd0 = julian_date(grid.epoch_utc)
    steps = np.arange(grid.horizon_steps, dtype=np.float64)
    return jd0 + steps * (grid.step_minutes / 1440.0)


def _gmst_vec(jd: np.ndarray) -> np.ndarray:
    d = jd - _JD_J2000
    t = d / 36525.0
    return (280.46061837 + 360.98564736629 * d + 0.000387933 * t * t - t**3 / 38710000.0) % 360.0


def _altitude_vec(ra: np.ndarray, dec: np.ndarray, lat_deg: float, lst: np.ndarray) -> np.ndarray:
    ha = np.radians(lst - ra)
    lat = math.radians(lat_deg)
    dec_r = np.radians(dec)
    s = math.sin(lat) * np.sin(dec_r) + math.cos(lat) * np.cos(dec_r) * np.cos(ha)
    return np.degrees(np.arcsin(np.clip(s, -1.0, 1.0)))


def _sun_radec_vec(jd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = (jd - _JD_J2000) / 36525.0
    m = np.radians((357.52911 + 35999.05029 * t) % 360.0)
    l0 = (280.46646 + 36000.76983 * t) % 360.0
    c = (
        (1.914602 - 0.004817 * t) * np.sin(m)
        + (0.019993 - 0.000101 * t) * np.sin(2 * m)
        + 0.000289 * np.sin(3 * m)
    )
    lam = np.radians((l0 + c) % 360.0)
    eps = np.radians(23.439291 - 0.0130042 * t)
    ra = np.degrees(np.arctan2(np.cos(eps) * np.sin(lam), np.cos(lam))) % 360.0
    dec = np.degrees(np.arcsin(np.sin(eps) * np.sin(lam)))
    return ra, dec


def site_dark_steps(site: GeoCoord, grid: TimeGrid, constraints: VisibilityConstraints) -> np.ndarray:
    """Boolean per-step darkness (sun at or below the twilight threshold)."""
    jd = _step_jds(grid)
    lst = (_gmst_vec(jd) + site.lon) % 360.0
    sun_ra, sun_dec = _sun_radec_vec(jd)
    sun_alt = _altitude_vec(sun_ra, sun_dec, site.lat, lst)
    return sun_alt <= constraints.max_sun_altitude_deg


def visibility_masks_multi(
    ra: np.ndarray,
    dec: np.ndarray,
    site: GeoCoord,
    grid: TimeGrid,
    constraints: VisibilityConstraints = VisibilityConstraints(),
) -> tuple[np.ndarray, np.ndarray]:
    """Observability of many targets from one site at once.

    Returns ``(mask, airmass)`` of shape (n_targets, horizon_steps); the
    sidereal clock and sun position are computed once per call.
    """
    jd = _step_jds(grid)
    lst = (_gmst_vec(jd) + site.lon) % 360.0
    sun_ra, sun_dec = _sun_radec_vec(jd)
    sun_alt = _altitude_vec(sun_ra, sun_dec, site.lat, lst)
    dark = sun_alt <= constraints.max_sun_altitude_deg

    ra = np.atleast_1d(np.asarray(ra, dtype=np.float64))
    dec = np.atleast_1d(np.asarray(dec, dtype=np.float64))
    ha = np.radians(lst[None, :] - ra[:, None])
    lat = math.radians(site.lat)
    dec_r = np.radians(dec)[:, None]
    s = math.sin(lat) * np.sin(dec_r) + math.cos(lat) * np.cos(dec_r) * np.cos(ha)
    alt = np.degrees(np.arcsin(np.clip(s, -1.0, 1.0)))

    am = np.full(alt.shape, UNOBSERVABLE)
    above = alt > constraints.min_altitude_deg
    if above.any():
        a = alt[above]
        am[above] = 1.0 / (np.sin(np.radians(a)) + 0.50572 * (a + 6.07995) ** (-1.6364))
    mask = above & (am <= constraints.max_airmass) & dark[None, :]
    return mask, am


def visibility_mask(
    target: SkyCoord,
    site: GeoCoord,
    grid: TimeGrid,
    constraints: VisibilityConstraints = VisibilityConstraints(),
) -> tuple[np.ndarray, np.ndarray]:
    """Per-step observability of a target from a site.

    Returns ``(mask, airmass)`` arrays of length ``horizon_steps``: a boolean
    visibility predicate per step and the airmass value at each step
    (UNOBSERVABLE where the target is at or below the altitude cutoff).
    The predicate of step ``k`` is evaluated at the instant the step begins.
    """
    mask, am = visibility_masks_multi(
        np.array([target.ra]), np.array([target.dec]), site, grid, constraints
    )
    return mask[0], am[0]


def visibility_windows(
    target: SkyCoord,
    site: GeoCoord,
    grid: TimeGrid,
    constraints: VisibilityConstraints = VisibilityConstraints(),
    *,
    site_index: int = 0,
) -> list[VisibilityWindow]:
    """Maximal disjoint runs of observable steps, sorted by start step.

    Returns an empty list when the target is never observable; that is a
    valid result, not an error.
    """
    mask, am = visibility_mask(target, site, grid, constraints)
    return windows_from_mask(mask, am, site_index=site_index)


def windows_from_mask(
    mask: np.ndarray, am: np.ndarray, *, site_index: int = 0
) -> list[VisibilityWindow]:
    """Group a boolean step mask into maximal half-open windows."""
    out: list[VisibilityWindow] = []
    edges = np.flatnonzero(np.diff(np.concatenate(([False], mask, [False])).astype(np.int8)))
    for start, end in zip(edges[0::2], edges[1::2]):
        out.append(
            VisibilityWindow(
                site_index=site_index,
                start_step=int(start),
                end_step=int(end),
                min_airmass_in_window=float(np.min(am[start:end])),
            )
        )
    return out
