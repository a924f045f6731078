"""Kinematic bicycle model: exact dynamics, RK4 integration, feasibility
residuals, and a generator of physically consistent synthetic tracks.

State is (x, y, psi, v) in meters/radians/meters-per-second; the control
input is curvature kappa (1/m) plus longitudinal acceleration a (m/s^2),
which keeps the model vehicle-agnostic (no wheelbase needed except for the
steering-angle conversion).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geodata import Trajectory, project_xy, unproject_xy, wrap_angle


class KbmError(ValueError):
    pass


@dataclass(frozen=True)
class KbmState:
    x: float
    y: float
    psi: float
    v: float

    def as_array(self):
        return np.array([self.x, self.y, self.psi, self.v], dtype=np.float64)


@dataclass(frozen=True)
class KbmControl:
    kappa: float
    a: float


@dataclass(frozen=True)
class KbmParams:
    """Vehicle geometry; the wheelbase only matters for steering<->curvature."""

    wheelbase_m: float = 2.7
    kappa_max: float = 0.2
    a_max: float = 3.0

    def __post_init__(self):
        if self.wheelbase_m <= 0:
            raise KbmError("wheelbase must be positive")


@dataclass(frozen=True)
class TurningRadius:
    """Turning radius with an explicit straight-line flag (kappa = 0 has no
    finite radius)."""

    finite: bool
    meters: float | None = None


def kbm_derivative(state, u):
    """d/dt (x, y, psi, v) = (v cos psi, v sin psi, v kappa, a)."""
    return (state.v * math.cos(state.psi),
            state.v * math.sin(state.psi),
            state.v * u.kappa,
            u.a)


def steering_to_curvature(delta, params):
    """kappa = tan(delta) / L for steering angle delta."""
    if abs(delta) >= math.pi / 2.0:
        raise KbmError(f"steering angle {delta} out of (-pi/2, pi/2)")
    return math.tan(delta) / params.wheelbase_m


def curvature_to_radius(kappa):
    if kappa == 0.0:
        return TurningRadius(finite=False)
    return TurningRadius(finite=True, meters=1.0 / abs(kappa))


def _deriv(arr, kappa, a):
    x, y, psi, v = arr
    return np.array([v * math.cos(psi), v * math.sin(psi), v * kappa, a])


def integrate(state0, controls, dt):
    """Classic RK4 with zero-order-hold controls.

    Returns an (len(controls)+1, 4) array of states starting at `state0`.
    Raises with the offending step index if the state ever goes non-finite.
    """
    if dt <= 0:
        raise KbmError("dt must be positive")
    out = np.empty((len(controls) + 1, 4), dtype=np.float64)
    out[0] = state0.as_array() if isinstance(state0, KbmState) else np.asarray(state0, dtype=np.float64)
    s = out[0]
    for i, u in enumerate(controls):
        kap, acc = (u.kappa, u.a) if isinstance(u, KbmControl) else (float(u[0]), float(u[1]))
        k1 = _deriv(s, kap, acc)
        k2 = _deriv(s + 0.5 * dt * k1, kap, acc)
        k3 = _deriv(s + 0.5 * dt * k2, kap, acc)
        k4 = _deriv(s + dt * k3, kap, acc)
        s = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(s)):
            raise KbmError(f"non-finite state at integration step {i}")
        out[i + 1] = s
    return out


def controls_to_point_channels(kappas, accs):
    """Per-point kappa/a channels from per-segment zero-order-hold controls.

    Interior points take the average of the two adjacent segment controls
    (the effective control "at" the sample instant), which keeps the
    central-difference residuals of integrator output at O(dt^2).
    """
    kappas = np.asarray(kappas, dtype=np.float64)
    accs = np.asarray(accs, dtype=np.float64)
    n = len(kappas) + 1
    kp = np.empty(n)
    ap = np.empty(n)
    kp[0], kp[-1] = kappas[0], kappas[-1]
    ap[0], ap[-1] = accs[0], accs[-1]
    kp[1:-1] = 0.5 * (kappas[:-1] + kappas[1:])
    ap[1:-1] = 0.5 * (accs[:-1] + accs[1:])
    return kp, ap


def kbm_residuals(x, y, psi, v, kappa, a, dt):
    """Central-difference violations of the bicycle-model ODE.

    All inputs are per-step arrays in physical units on a uniform dt grid.
    Returns (r1, r2, r3, r4) at the interior steps 1..n-2:
      r1 = dx/dt - v cos psi,  r2 = dy/dt - v sin psi,
      r3 = dpsi/dt - v kappa,  r4 = dv/dt - a,
    with the heading difference wrapped so a 2pi jump never fakes
    infeasibility.
    """
    x, y, psi, v = (np.asarray(q, dtype=np.float64) for q in (x, y, psi, v))
    kappa, a = np.asarray(kappa, dtype=np.float64), np.asarray(a, dtype=np.float64)
    n = len(x)
    if n < 3:
        raise KbmError(f"residuals need >= 3 points, got {n}")
    if dt <= 0:
        raise KbmError("dt must be positive")
    mid = slice(1, n - 1)
    dx = (x[2:] - x[:-2]) / (2.0 * dt)
    dy = (y[2:] - y[:-2]) / (2.0 * dt)
    dpsi = wrap_angle(psi[2:] - psi[:-2]) / (2.0 * dt)
    dv = (v[2:] - v[:-2]) / (2.0 * dt)
    r1 = dx - v[mid] * np.cos(psi[mid])
    r2 = dy - v[mid] * np.sin(psi[mid])
    r3 = dpsi - v[mid] * kappa[mid]
    r4 = dv - a[mid]
    return r1, r2, r3, r4


def compass_to_math(psi):
    """Compass bearing (0 = north, clockwise) -> planar angle from +x
    (east), counterclockwise. Self-inverse."""
    return wrap_angle(math.pi / 2.0 - np.asarray(psi, dtype=np.float64))


def trajectory_residuals(traj, lat0=None, lon0=None):
    """`kbm_residuals` for a geodesic trajectory with derived kinematics.

    Positions are projected into the local planar frame first; the
    trajectory must be uniformly sampled. The trajectory's compass-bearing
    heading and curvature channels are converted to the planar math
    convention the ODE uses. Channels missing from `traj` (kappa, a) are
    treated as zero.
    """
    if traj.psi is None or traj.v is None:
        raise KbmError("trajectory needs derived v and psi")
    dts = np.diff(traj.t)
    dt = float(np.mean(dts))
    if np.max(np.abs(dts - dt)) > 1e-6 * max(dt, 1.0):
        raise KbmError("trajectory not uniformly sampled")
    la0 = lat0 if lat0 is not None else float(np.mean(traj.lat))
    lo0 = lon0 if lon0 is not None else float(np.mean(traj.lon))
    x, y = project_xy(traj.lat, traj.lon, la0, lo0)
    kappa = traj.kappa if traj.kappa is not None else np.zeros(len(traj))
    a = traj.a if traj.a is not None else np.zeros(len(traj))
    return kbm_residuals(x, y, compass_to_math(traj.psi), traj.v, -kappa, a, dt)


@dataclass(frozen=True)
class GenConfig:
    """Defaults for synthetic normal-traffic generation.

    Increment scales are deliberately gentle so the central-difference
    residuals of generated tracks stay well under 1e-2 at dt = 1 s. The
    origin sits on the equator where the equirectangular projection is
    first-order exact; mid-latitude origins work too but loosen the
    feasibility tolerances.
    """

    origin_lat: float = 0.0
    origin_lon: float = 0.0
    spread_m: float = 3000.0
    v_lo: float = 5.0
    v_hi: float = 10.0
    kappa_sigma: float = 0.001
    kappa_step: float = 1e-4
    a_sigma: float = 0.03
    a_step: float = 0.004
    speed_pull: float = 0.02


def generate_normal(rng, n=180, dt=1.0, params=None, control_smoothness=1.0,
                    cfg=None, traj_id=None, start=None, heading=None,
                    cruise=None):
    """Generate one physically feasible trajectory.

    Controls follow bounded mean-reverting random walks scaled by
    `control_smoothness` (0 gives constant controls, i.e. a straight track
    when the initial curvature is zero), integrated with RK4 and converted
    to WGS84 about the configured origin. The returned trajectory carries
    the integrator's exact v/psi and the applied kappa/a, so its physics
    residuals vanish up to discretization error.

    `start` (x, y meters), `heading` (planar rad) and `cruise` (m/s) pin
    the initial state; left as None they are drawn uniformly.
    """
    if n < 2:
        raise KbmError("n must be >= 2")
    params = params or KbmParams()
    cfg = cfg or GenConfig()
    sm = float(control_smoothness)

    x0 = rng.uniform(-cfg.spread_m, cfg.spread_m) if start is None else float(start[0])
    y0 = rng.uniform(-cfg.spread_m, cfg.spread_m) if start is None else float(start[1])
    psi0 = rng.uniform(-math.pi, math.pi) if heading is None else float(heading)
    v_cruise = rng.uniform(cfg.v_lo, cfg.v_hi) if cruise is None else float(cruise)

    kappas = np.empty(n - 1)
    accs = np.empty(n - 1)
    states = np.empty((n, 4))
    states[0] = (x0, y0, psi0, v_cruise)
    s = states[0]
    kap = 0.0
    acc_ar = 0.0
    for i in range(n - 1):
        kap = 0.995 * kap + sm * cfg.kappa_step * rng.normal()
        kap = float(np.clip(kap, -min(params.kappa_max, 4 * cfg.kappa_sigma),
                            min(params.kappa_max, 4 * cfg.kappa_sigma)))
        acc_ar = 0.99 * acc_ar + sm * cfg.a_step * rng.normal()
        acc = acc_ar + cfg.speed_pull * (v_cruise - s[3])
        acc = float(np.clip(acc, -min(params.a_max, 4 * cfg.a_sigma),
                            min(params.a_max, 4 * cfg.a_sigma)))
        kappas[i] = kap
        accs[i] = acc
        k1 = _deriv(s, kap, acc)
        k2 = _deriv(s + 0.5 * dt * k1, kap, acc)
        k3 = _deriv(s + 0.5 * dt * k2, kap, acc)
        k4 = _deriv(s + dt * k3, kap, acc)
        s = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        states[i + 1] = s

    lat, lon = unproject_xy(states[:, 0], states[:, 1], cfg.origin_lat, cfg.origin_lon)
    kappa_pts, a_pts = controls_to_point_channels(kappas, accs)
    jerk = np.append(np.diff(a_pts) / dt, 0.0)
    # trajectory channels use the compass convention (0 = north, clockwise
    # positive), so flip the planar state heading and curvature sign
    return Trajectory(
        id=traj_id if traj_id is not None else f"gen-{rng.seed:08x}",
        lat=lat, lon=lon, t=dt * np.arange(n, dtype=np.float64),
        v=states[:, 3], psi=compass_to_math(states[:, 2]),
        a=a_pts, jerk=jerk, kappa=-kappa_pts)


FLEET_CFG = GenConfig(spread_m=400.0, v_lo=1.0, v_hi=2.5,
                      kappa_sigma=2e-4, kappa_step=2e-5,
                      a_sigma=0.02, a_step=0.002, speed_pull=0.05)


def generate_fleet(rng, count, n=180, dt=1.0, routes=4, params=None,
                   cfg=None, id_prefix="t"):
    """Generate a fleet of feasible tracks organized into route corridors.

    Real traffic concentrates on shared routes; each synthetic route fixes
    a start area, initial heading and cruise speed, and tracks scatter
    tightly around it (15 m start jitter, 0.01 rad heading jitter, 8%
    speed jitter). The corridor structure is what makes position
    predictable for a generative model, mirroring road/sea-lane datasets
    at desk scale; the fleet profile is slow, compact and well regulated
    so default-severity anomalies are large relative to normal variation.
    """
    cfg = cfg or FLEET_CFG
    route_defs = []
    for r in range(routes):
        ang = 2.0 * math.pi * r / routes
        route_rng = rng.derive(f"route{r}")
        route_defs.append({
            "start": (cfg.spread_m * 0.5 * math.cos(ang + 0.7),
                      cfg.spread_m * 0.5 * math.sin(ang + 0.7)),
            "heading": ang,
            "cruise": float(route_rng.uniform(cfg.v_lo, cfg.v_hi)),
        })
    out = []
    for i in range(count):
        tr = rng.derive(f"traj{i}")
        route = route_defs[int(tr.integers(0, routes))]
        start = (route["start"][0] + tr.normal() * 15.0,
                 route["start"][1] + tr.normal() * 15.0)
        heading = route["heading"] + tr.normal() * 0.01
        cruise = route["cruise"] * (1.0 + 0.08 * tr.normal())
        out.append(generate_normal(
            tr.derive("walk"), n=n, dt=dt, params=params, cfg=cfg,
            traj_id=f"{id_prefix}{i:03d}", start=start, heading=heading,
            cruise=max(cruise, 1.0)))
    return out
