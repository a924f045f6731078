"""Labeled anomaly injection for normal trajectories.

Four anomaly kinds mirror deceptive-broadcast behaviors: speed (time-axis
distortion), bearing (sustained directional shift), drift (growing lateral
offset), and replay (a segment copied from another track with physically
inconsistent joins). Injection is pure per trajectory; dataset assembly is
sequential so labels are deterministic under a fixed seed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .geodata import (EARTH_RADIUS_M, Trajectory, initial_bearing_rad,
                      project_xy, unproject_xy, wrap_angle)

KINDS = ("speed", "bearing", "drift", "replay")

# Documented severity ranges: speed is the time-compression factor u (the
# derived speed scales by 1/u), bearing is the rotation in radians, drift is
# meters of lateral offset per step, replay picks the donor segment start as
# a fraction of the donor's free span.
SEVERITY_RANGES = {
    "speed": (0.5, 1.5),
    "bearing": (math.pi / 2.0, math.pi),
    "drift": (0.5, 2.0),
    "replay": (0.0, 1.0),
}
SPEED_EXCLUSION = (0.9, 1.1)  # u ~ 1 is not an anomaly

MIN_WINDOW = 5


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    severity: float
    window: tuple  # [start, end) point indices
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SynthError(f"unknown anomaly kind {self.kind!r}")
        lo, hi = SEVERITY_RANGES[self.kind]
        if not (lo <= self.severity <= hi):
            raise SynthError(f"{self.kind} severity {self.severity} outside [{lo}, {hi}]")


def inject(traj, spec, rng, donor=None):
    """Apply one anomaly to a copy of `traj`; returns (trajectory, spec).

    Derived kinematics are dropped from the result because the injection
    invalidates them; re-derive downstream. The window must hold at least
    5 steps and lie inside the trajectory.
    """
    s, e = spec.window
    n = len(traj)
    if not (0 <= s < e <= n):
        raise SynthError(f"window {spec.window} outside trajectory of {n} points")
    if e - s < MIN_WINDOW:
        raise SynthError(f"window {spec.window} shorter than {MIN_WINDOW} steps")

    if spec.kind == "speed":
        return _inject_speed(traj, spec), spec
    if spec.kind == "bearing":
        return _inject_bearing(traj, spec), spec
    if spec.kind == "drift":
        return _inject_drift(traj, spec), spec
    if spec.kind == "replay":
        if donor is None:
            raise SynthError("replay injection requires a donor trajectory")
        return _inject_replay(traj, spec, donor), spec
    raise SynthError(f"unknown anomaly kind {spec.kind!r}")


def _bare(traj, lat, lon, t):
    return Trajectory(id=traj.id, lat=lat, lon=lon, t=t)


def _inject_speed(traj, spec):
    # compress/dilate the time intervals inside the window; positions stay
    # put, so the derived speed scales by 1/u there
    s, e = spec.window
    u = spec.severity
    dt = np.diff(traj.t)
    dt[s:e - 1] = dt[s:e - 1] * u
    t = np.concatenate([[traj.t[0]], traj.t[0] + np.cumsum(dt)])
    return _bare(traj, traj.lat.copy(), traj.lon.copy(), t)


def _inject_bearing(traj, spec):
    # rigidly rotate the downstream sub-path about the window-start point;
    # the rotation sign extends whatever turn already exists there so the
    # wrapped heading jump is at least the requested severity
    s, e = spec.window
    p_lat, p_lon = float(traj.lat[s]), float(traj.lon[s])
    if s >= 1:
        inc = initial_bearing_rad(traj.lat[s - 1], traj.lon[s - 1], p_lat, p_lon)
        out = initial_bearing_rad(p_lat, p_lon, traj.lat[s + 1], traj.lon[s + 1])
        sign = math.copysign(1.0, wrap_angle(out - inc)) if wrap_angle(out - inc) != 0 else 1.0
    else:
        sign = 1.0
    theta = sign * spec.severity
    x, y = project_xy(traj.lat[s:], traj.lon[s:], p_lat, p_lon)
    # heading angles are clockwise from north, so rotate the path by -theta
    # in the mathematical (counterclockwise) convention
    c, si = math.cos(-theta), math.sin(-theta)
    xr = c * x - si * y
    yr = si * x + c * y
    lat = traj.lat.copy()
    lon = traj.lon.copy()
    lat[s:], lon[s:] = unproject_xy(xr, yr, p_lat, p_lon)
    return _bare(traj, lat, lon, traj.t.copy())


def _inject_drift(traj, spec):
    # lateral offset growing linearly inside the window, perpendicular to
    # the heading at the window start; points outside the window stay
    # bit-identical
    s, e = spec.window
    head = initial_bearing_rad(traj.lat[s], traj.lon[s], traj.lat[s + 1], traj.lon[s + 1])
    perp = head + math.pi / 2.0
    # bearing is clockwise from north: east = sin, north = cos
    ux, uy = math.sin(perp), math.cos(perp)
    steps = np.arange(1, e - s + 1, dtype=np.float64)
    de = spec.severity * steps * ux  # meters east
    dn = spec.severity * steps * uy  # meters north
    lat = traj.lat.copy()
    lon = traj.lon.copy()
    lat[s:e] = lat[s:e] + np.degrees(dn / EARTH_RADIUS_M)
    lon[s:e] = lon[s:e] + np.degrees(de / (EARTH_RADIUS_M * np.cos(np.radians(traj.lat[s:e]))))
    return _bare(traj, lat, lon, traj.t.copy())


def _inject_replay(traj, spec, donor):
    # replace the window with a same-length donor segment translated to
    # join at the window start: plausible shape, inconsistent joins; points
    # outside the window stay bit-identical
    s, e = spec.window
    m = e - s
    if len(donor) < m:
        raise SynthError(f"replay donor has {len(donor)} points, window needs {m}")
    free = len(donor) - m
    j = int(round(spec.severity * free))
    p_lat, p_lon = float(traj.lat[s]), float(traj.lon[s])
    dx, dy = project_xy(donor.lat[j:j + m], donor.lon[j:j + m], p_lat, p_lon)
    lat = traj.lat.copy()
    lon = traj.lon.copy()
    lat[s:e], lon[s:e] = unproject_xy(dx - dx[0], dy - dy[0], p_lat, p_lon)
    return _bare(traj, lat, lon, traj.t.copy())


# -- dataset assembly ----------------------------------------------------


@dataclass
class LabeledDataset:
    """Trajectories plus per-trajectory labels at a controlled anomaly rate."""

    trajectories: list
    labels: dict            # id -> AnomalySpec | None
    anomaly_rate: float

    def anomalous_ids(self):
        return [tid for tid, spec in self.labels.items() if spec is not None]

    def __len__(self):
        return len(self.trajectories)


def draw_severity(kind, rng):
    lo, hi = SEVERITY_RANGES[kind]
    if kind == "speed":
        # avoid the no-op band around u = 1
        lo_b, hi_b = SPEED_EXCLUSION
        width_low = lo_b - lo
        width_high = hi - hi_b
        r = rng.uniform(0.0, width_low + width_high)
        return lo + r if r < width_low else hi_b + (r - width_low)
    return float(rng.uniform(lo, hi))


def draw_window(n, rng, kind="bearing"):
    """Random injection window; drift and speed anomalies develop gradually
    so they draw longer windows than the join-discontinuity kinds."""
    if kind in ("drift", "speed"):
        lo, hi = n // 3, 2 * n // 3
    else:
        lo, hi = n // 4, n // 2
    length = int(rng.integers(max(MIN_WINDOW, lo), max(MIN_WINDOW + 1, hi)))
    length = min(length, n - 2)
    start = int(rng.integers(1, n - length))
    return (start, start + length)


def build_dataset(normals, rate, kind_mix=None, rng=None):
    """Inject one anomaly into a uniformly random ceil(rate*N) subset.

    `kind_mix` maps kind -> probability (defaults to uniform over all four
    kinds) and must sum to 1. Deterministic for a fixed rng seed.
    """
    if not (0.0 < rate < 1.0):
        raise SynthError(f"anomaly rate {rate} outside (0, 1)")
    if rng is None:
        raise SynthError("an Rng is required for reproducible assembly")
    kind_mix = kind_mix or {k: 0.25 for k in KINDS}
    if abs(sum(kind_mix.values()) - 1.0) > 1e-9:
        raise SynthError("kind_mix must sum to 1")
    kinds = sorted(kind_mix)
    probs = np.array([kind_mix[k] for k in kinds])

    n_total = len(normals)
    n_anom = math.ceil(rate * n_total)
    chosen = sorted(int(i) for i in rng.choice(n_total, size=n_anom, replace=False))
    chosen_set = set(chosen)

    out = []
    labels = {}
    for i, traj in enumerate(normals):
        if i not in chosen_set:
            out.append(traj)
            labels[traj.id] = None
            continue
        pick = min(int(np.searchsorted(np.cumsum(probs), rng.uniform(0.0, 1.0), side="right")),
                   len(kinds) - 1)
        kind = kinds[pick]
        severity = draw_severity(kind, rng)
        window = draw_window(len(traj), rng, kind)
        spec = AnomalySpec(kind=kind, severity=severity, window=window,
                           seed=int(rng.integers(0, 2 ** 32)))
        donor = None
        if kind == "replay":
            j = int(rng.integers(0, n_total - 1))
            if j >= i:
                j += 1
            donor = normals[j]
        injected, spec = inject(traj, spec, rng, donor=donor)
        out.append(injected)
        labels[traj.id] = spec
    return LabeledDataset(trajectories=out, labels=labels, anomaly_rate=rate)


def write_labels(ds, fh=None):
    out = fh or io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["id", "label", "kind", "severity", "window_start", "window_end", "seed"])
    for traj in ds.trajectories:
        spec = ds.labels[traj.id]
        if spec is None:
            w.writerow([traj.id, "normal", "", "", "", "", ""])
        else:
            w.writerow([traj.id, "anomalous", spec.kind, repr(float(spec.severity)),
                        spec.window[0], spec.window[1], spec.seed])
    if fh is None:
        return out.getvalue()
    return None


def read_labels(text):
    """Parse a labels CSV back to {id: AnomalySpec | None}."""
    reader = csv.DictReader(io.StringIO(text))
    labels = {}
    for row in reader:
        if row["label"] == "normal":
            labels[row["id"]] = None
        else:
            labels[row["id"]] = AnomalySpec(
                kind=row["kind"], severity=float(row["severity"]),
                window=(int(row["window_start"]), int(row["window_end"])),
                seed=int(row["seed"]))
    return labels
