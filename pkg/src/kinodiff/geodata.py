"""Trajectory ingestion and the canonical feature representation.

Raw AIS / Geolife / canonical-CSV records become `Trajectory` objects
(WGS84 positions + timestamps), get kinematic features derived by numerical
differentiation, are resampled to a fixed length, and are projected +
normalized into the fixed-width feature matrices the diffusion model
consumes. Spatiotemporal neighbor lookup for the context encoder lives here
too.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

# WGS84 equatorial radius; one degree of latitude ~ 111.32 km.
EARTH_RADIUS_M = 6378137.0
KNOTS_TO_MPS = 0.514444

# Canonical feature columns, in order.
FEATURES = ("x", "y", "v", "psi")


class ParseError(ValueError):
    pass


class GeoError(ValueError):
    pass


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters between WGS84 points (degrees)."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2.0) ** 2
    return EARTH_RADIUS_M * 2.0 * np.arctan2(np.sqrt(a), np.sqrt(1.0 - a))


def initial_bearing_rad(lat1, lon1, lat2, lon2):
    """Initial great-circle bearing, radians, 0 = north, clockwise positive,
    wrapped to (-pi, pi]."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dlam = np.radians(lon2) - np.radians(lon1)
    y = np.sin(dlam) * np.cos(p2)
    x = np.cos(p1) * np.sin(p2) - np.sin(p1) * np.cos(p2) * np.cos(dlam)
    return np.arctan2(y, x)


@dataclass(frozen=True)
class TrajPoint:
    lat: float
    lon: float
    t: float
    v: float | None = None


@dataclass
class Trajectory:
    """Chronologically ordered geodesic samples with derived kinematics.

    `lat`, `lon`, `t` are mandatory parallel arrays; `v` is observed or
    derived speed (m/s). `psi` (heading, rad), `a` (m/s^2), `jerk` (m/s^3)
    and `kappa` (1/m) are attached by `derive_kinematics` and length-match
    the points.
    """

    id: str
    lat: np.ndarray
    lon: np.ndarray
    t: np.ndarray
    v: np.ndarray | None = None
    psi: np.ndarray | None = None
    a: np.ndarray | None = None
    jerk: np.ndarray | None = None
    kappa: np.ndarray | None = None

    def __post_init__(self):
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        n = len(self.t)
        if n < 2:
            raise GeoError(f"trajectory {self.id!r}: needs >= 2 points, got {n}")
        if len(self.lat) != n or len(self.lon) != n:
            raise GeoError(f"trajectory {self.id!r}: coordinate/time length mismatch")
        if np.any(np.abs(self.lat) > 90.0) or np.any(np.abs(self.lon) > 180.0):
            raise GeoError(f"trajectory {self.id!r}: coordinates out of WGS84 bounds")
        if np.any(np.diff(self.t) <= 0.0):
            raise GeoError(f"trajectory {self.id!r}: timestamps not strictly increasing")
        for name in ("v", "psi", "a", "jerk", "kappa"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float64)
                if len(arr) != n:
                    raise GeoError(f"trajectory {self.id!r}: derived {name} length mismatch")
                setattr(self, name, arr)

    def __len__(self):
        return len(self.t)

    @property
    def points(self):
        v = self.v if self.v is not None else [None] * len(self)
        return [TrajPoint(la, lo, tt, vv) for la, lo, tt, vv in zip(self.lat, self.lon, self.t, v)]

    def length_m(self):
        return float(np.sum(haversine_m(self.lat[:-1], self.lon[:-1], self.lat[1:], self.lon[1:])))

    def duration_s(self):
        return float(self.t[-1] - self.t[0])


@dataclass
class ParseResult:
    trajectories: list
    dropped_invalid: int = 0
    dropped_duplicate: int = 0
    dropped_short: int = 0

    def __iter__(self):
        return iter(self.trajectories)

    def __len__(self):
        return len(self.trajectories)


def parse(fmt, data):
    """Parse raw bytes/text in one of the supported formats.

    Formats: "ais-csv" (MMSI, BaseDateTime, LAT, LON, SOG in knots, COG),
    "geolife-plt" (6 header lines, then lat,lon,_,alt,days,date,time) and
    "canonical" (id,seq,t,lat,lon,v). Rows with out-of-range coordinates are
    dropped and counted; duplicate timestamps within an object keep the
    first occurrence.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    if fmt == "ais-csv":
        return _parse_ais_csv(data)
    if fmt == "geolife-plt":
        return _parse_geolife_plt(data)
    if fmt == "canonical":
        return _parse_canonical(data)
    raise ParseError(f"unknown format {fmt!r}")


def _valid_coord(lat, lon):
    return math.isfinite(lat) and math.isfinite(lon) and abs(lat) <= 90.0 and abs(lon) <= 180.0


def _parse_ais_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    required = {"MMSI", "BaseDateTime", "LAT", "LON", "SOG"}
    if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
        raise ParseError(f"ais-csv: header must contain {sorted(required)}")
    rows = {}
    dropped = 0
    for row in reader:
        try:
            lat = float(row["LAT"])
            lon = float(row["LON"])
            sog = float(row["SOG"])
            ts = datetime.fromisoformat(row["BaseDateTime"])
            if ts.tzinfo is None:
                ts = ts.replace(tzinfo=timezone.utc)
            t = ts.timestamp()
        except (TypeError, ValueError):
            dropped += 1
            continue
        if not _valid_coord(lat, lon):
            dropped += 1
            continue
        rows.setdefault(str(row["MMSI"]), []).append((t, lat, lon, sog * KNOTS_TO_MPS))
    return _assemble(rows, dropped)


def _parse_geolife_plt(text, traj_id="geolife-0"):
    lines = text.splitlines()
    if len(lines) <= 6:
        raise ParseError("geolife-plt: no data rows after 6 header lines")
    rows = {}
    dropped = 0
    for line in lines[6:]:
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) < 7:
            dropped += 1
            continue
        try:
            lat = float(parts[0])
            lon = float(parts[1])
            ts = datetime.strptime(parts[5].strip() + " " + parts[6].strip(), "%Y-%m-%d %H:%M:%S")
            t = ts.replace(tzinfo=timezone.utc).timestamp()
        except ValueError:
            dropped += 1
            continue
        if not _valid_coord(lat, lon):
            dropped += 1
            continue
        rows.setdefault(traj_id, []).append((t, lat, lon, None))
    return _assemble(rows, dropped)


def _parse_canonical(text):
    reader = csv.DictReader(io.StringIO(text))
    required = {"id", "seq", "t", "lat", "lon", "v"}
    if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
        raise ParseError(f"canonical: header must contain {sorted(required)}")
    per_id = {}
    dropped = 0
    for row in reader:
        try:
            seq = int(row["seq"])
            t = float(row["t"])
            lat = float(row["lat"])
            lon = float(row["lon"])
            v = float(row["v"]) if row["v"] not in ("", None) else None
        except (TypeError, ValueError):
            dropped += 1
            continue
        if not _valid_coord(lat, lon):
            dropped += 1
            continue
        per_id.setdefault(str(row["id"]), []).append((seq, t, lat, lon, v))
    rows = {}
    for tid, recs in per_id.items():
        recs.sort(key=lambda r: r[0])
        rows[tid] = [(t, lat, lon, v) for _, t, lat, lon, v in recs]
    return _assemble(rows, dropped, presorted=True)


def _assemble(rows, dropped, presorted=False):
    trajs = []
    dup = 0
    short = 0
    for tid in sorted(rows):
        recs = rows[tid] if presorted else sorted(rows[tid], key=lambda r: r[0])
        seen = set()
        uniq = []
        for rec in recs:
            if rec[0] in seen:
                dup += 1
                continue
            seen.add(rec[0])
            uniq.append(rec)
        if len(uniq) < 2:
            short += 1
            continue
        t = np.array([r[0] for r in uniq])
        lat = np.array([r[1] for r in uniq])
        lon = np.array([r[2] for r in uniq])
        vs = [r[3] for r in uniq]
        v = None if any(x is None for x in vs) else np.array(vs, dtype=np.float64)
        trajs.append(Trajectory(id=tid, lat=lat, lon=lon, t=t, v=v))
    if dup:
        warnings.warn(f"dropped {dup} duplicate-timestamp rows", stacklevel=2)
    if not trajs:
        raise ParseError("no valid trajectories in input")
    return ParseResult(trajs, dropped_invalid=dropped, dropped_duplicate=dup, dropped_short=short)


def write_canonical(trajs, fh=None):
    """Serialize trajectories to the canonical CSV (id,seq,t,lat,lon,v)."""
    out = fh or io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["id", "seq", "t", "lat", "lon", "v"])
    for traj in trajs:
        v = traj.v if traj.v is not None else [""] * len(traj)
        for i in range(len(traj)):
            vi = v[i]
            w.writerow([traj.id, i, repr(float(traj.t[i])), repr(float(traj.lat[i])),
                        repr(float(traj.lon[i])), "" if vi == "" else repr(float(vi))])
    if fh is None:
        return out.getvalue()
    return None


def derive_kinematics(traj):
    """Attach v, psi, a, jerk, kappa estimated by numerical differentiation.

    Speed comes from haversine distance over dt when not observed; heading
    is the initial great-circle bearing of each segment; acceleration and
    jerk are successive differences; curvature is wrapped heading change
    per unit arc length (0 where the step length is 0). Trailing entries
    repeat the last defined value so arrays length-match the points.
    """
    n = len(traj)
    dt = np.diff(traj.t)
    if np.any(dt <= 0.0):
        raise GeoError(f"trajectory {traj.id!r}: non-positive dt")
    dist = haversine_m(traj.lat[:-1], traj.lon[:-1], traj.lat[1:], traj.lon[1:])
    v = traj.v
    if v is None:
        v = np.empty(n)
        v[:-1] = dist / dt
        v[-1] = v[-2]
    psi_seg = initial_bearing_rad(traj.lat[:-1], traj.lon[:-1], traj.lat[1:], traj.lon[1:])
    psi = np.empty(n)
    psi[:-1] = psi_seg
    psi[-1] = psi_seg[-1]

    a = jerk = kappa = None
    if n >= 3:
        a = np.empty(n)
        a[:-1] = np.diff(v) / dt
        a[-1] = a[-2]
        kappa = np.zeros(n)
        dpsi = wrap_angle(np.diff(psi_seg))
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.where(dist[:-1] > 0.0, dpsi / dist[:-1], 0.0)
        kappa[: n - 2] = k
        kappa[n - 2 :] = k[-1] if len(k) else 0.0
    if n >= 4:
        jerk = np.empty(n)
        jerk[:-1] = np.diff(a) / dt
        jerk[-1] = jerk[-2]
    return replace(traj, v=v, psi=psi, a=a, jerk=jerk, kappa=kappa)


def resample(traj, n):
    """Linearly interpolate lat/lon/v onto `n` uniformly spaced times over
    [t_first, t_last]; endpoints are preserved exactly. Derived kinematics
    are dropped (re-derive on the uniform grid)."""
    if n < 2:
        raise GeoError(f"resample: n must be >= 2, got {n}")
    tt = np.linspace(traj.t[0], traj.t[-1], n)
    tt[0] = traj.t[0]
    tt[-1] = traj.t[-1]
    lat = np.interp(tt, traj.t, traj.lat)
    lon = np.interp(tt, traj.t, traj.lon)
    v = np.interp(tt, traj.t, traj.v) if traj.v is not None else None
    return Trajectory(id=traj.id, lat=lat, lon=lon, t=tt, v=v)


def split_on_gaps(traj, factor=10.0):
    """Split a trajectory at recording gaps larger than `factor` times the
    median dt, so resampling never fabricates motion across outages."""
    dt = np.diff(traj.t)
    med = float(np.median(dt))
    cuts = np.nonzero(dt > factor * med)[0]
    if len(cuts) == 0:
        return [traj]
    segs = []
    start = 0
    bounds = list(cuts + 1) + [len(traj)]
    for j, end in enumerate(bounds):
        if end - start >= 2:
            segs.append(Trajectory(
                id=f"{traj.id}-seg{j}" if len(bounds) > 1 else traj.id,
                lat=traj.lat[start:end], lon=traj.lon[start:end], t=traj.t[start:end],
                v=traj.v[start:end] if traj.v is not None else None))
        start = end
    return segs


# -- projection + normalization -----------------------------------------


def project_xy(lat, lon, lat0, lon0):
    """Local equirectangular projection about (lat0, lon0), meters."""
    x = EARTH_RADIUS_M * np.radians(np.asarray(lon) - lon0) * math.cos(math.radians(lat0))
    y = EARTH_RADIUS_M * np.radians(np.asarray(lat) - lat0)
    return x, y


def unproject_xy(x, y, lat0, lon0):
    lon = lon0 + np.degrees(np.asarray(x) / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    lat = lat0 + np.degrees(np.asarray(y) / EARTH_RADIUS_M)
    return lat, lon


@dataclass
class CanonicalTraj:
    """Fixed-length normalized feature matrix for the diffusion model.

    `features` is (n, 4) with columns x, y, v, psi in normalized units;
    `dt` is the uniform step in seconds and `t0` the first timestamp, so
    the time base is t0 + i*dt.
    """

    id: str
    features: np.ndarray
    dt: float
    t0: float
    normalizer: "Normalizer"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[1] != len(FEATURES):
            raise GeoError(f"canonical {self.id!r}: features must be (n, {len(FEATURES)})")
        if not np.all(np.isfinite(self.features)):
            raise GeoError(f"canonical {self.id!r}: non-finite features")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.n)


@dataclass
class Normalizer:
    """Affine feature scaler plus the planar projection origin.

    Modes: "minmax" maps the fitted range to [-1, 1]; "zscore" subtracts the
    mean and divides by the std. Constant features map to 0 (with a warning
    at fit time) so the transform stays invertible everywhere else.
    """

    mode: str
    lat0: float
    lon0: float
    center: np.ndarray  # (4,) min (minmax) or mean (zscore)
    scale: np.ndarray   # (4,) max-min (minmax) or std (zscore); 0 = constant feature

    @classmethod
    def fit(cls, trajs, mode="minmax"):
        if mode not in ("minmax", "zscore"):
            raise GeoError(f"unknown normalizer mode {mode!r}")
        lat0 = float(np.mean([np.mean(t.lat) for t in trajs]))
        lon0 = float(np.mean([np.mean(t.lon) for t in trajs]))
        cols = [[], [], [], []]
        for traj in trajs:
            traj = traj if traj.psi is not None else derive_kinematics(traj)
            x, y = project_xy(traj.lat, traj.lon, lat0, lon0)
            cols[0].append(x)
            cols[1].append(y)
            cols[2].append(traj.v)
            cols[3].append(np.unwrap(traj.psi))
        stacked = [np.concatenate(c) for c in cols]
        if mode == "minmax":
            center = np.array([s.min() for s in stacked])
            scale = np.array([s.max() - s.min() for s in stacked])
        else:
            center = np.array([s.mean() for s in stacked])
            scale = np.array([s.std() for s in stacked])
        for i, s in enumerate(scale):
            if s == 0.0:
                warnings.warn(f"feature {FEATURES[i]!r} constant across dataset; maps to 0",
                              stacklevel=2)
        return cls(mode=mode, lat0=lat0, lon0=lon0, center=center, scale=scale)

    def transform(self, raw):
        """Normalize a raw (n, 4) feature block (x, y, v, psi units)."""
        out = np.zeros_like(raw)
        for i in range(len(FEATURES)):
            if self.scale[i] == 0.0:
                continue
            if self.mode == "minmax":
                out[:, i] = 2.0 * (raw[:, i] - self.center[i]) / self.scale[i] - 1.0
            else:
                out[:, i] = (raw[:, i] - self.center[i]) / self.scale[i]
        return out

    def inverse(self, norm):
        raw = np.zeros_like(norm)
        for i in range(len(FEATURES)):
            if self.scale[i] == 0.0:
                raw[:, i] = self.center[i]
            elif self.mode == "minmax":
                raw[:, i] = (norm[:, i] + 1.0) / 2.0 * self.scale[i] + self.center[i]
            else:
                raw[:, i] = norm[:, i] * self.scale[i] + self.center[i]
        return raw

    def affine(self):
        """Per-feature (scale, offset) of the raw = s * normalized + c map."""
        s = np.where(self.scale == 0.0, 0.0,
                     self.scale / 2.0 if self.mode == "minmax" else self.scale)
        c = self.center + (self.scale / 2.0 if self.mode == "minmax" else 0.0)
        return s, c

    def to_dict(self):
        return {"mode": self.mode, "lat0": self.lat0, "lon0": self.lon0,
                "center": list(map(float, self.center)), "scale": list(map(float, self.scale))}

    @classmethod
    def from_dict(cls, d):
        return cls(mode=d["mode"], lat0=float(d["lat0"]), lon0=float(d["lon0"]),
                   center=np.array(d["center"], dtype=np.float64),
                   scale=np.array(d["scale"], dtype=np.float64))


def normalize(traj, normalizer):
    """Build the CanonicalTraj for a uniformly resampled trajectory."""
    traj = traj if traj.psi is not None else derive_kinematics(traj)
    dt_all = np.diff(traj.t)
    dt = float(np.mean(dt_all))
    if dt <= 0 or np.max(np.abs(dt_all - dt)) > 1e-6 * max(dt, 1.0):
        raise GeoError(f"trajectory {traj.id!r}: not uniformly sampled; resample first")
    x, y = project_xy(traj.lat, traj.lon, normalizer.lat0, normalizer.lon0)
    raw = np.stack([x, y, traj.v, np.unwrap(traj.psi)], axis=1)
    return CanonicalTraj(id=traj.id, features=normalizer.transform(raw),
                         dt=dt, t0=float(traj.t[0]), normalizer=normalizer)


def denormalize(canon):
    """Invert `normalize`: CanonicalTraj back to a WGS84 Trajectory."""
    raw = canon.normalizer.inverse(canon.features)
    lat, lon = unproject_xy(raw[:, 0], raw[:, 1], canon.normalizer.lat0, canon.normalizer.lon0)
    return Trajectory(id=canon.id, lat=lat, lon=lon, t=canon.times,
                      v=raw[:, 2], psi=wrap_angle(raw[:, 3]))


# -- neighbor context ----------------------------------------------------


@dataclass
class NeighborContext:
    """Up to K neighbor feature matrices aligned to a target's time steps.

    `features` is (K, n, 4) in normalized units, `mask` is (K, n) with 1.0
    where the neighbor temporally overlaps the target step. K may be 0.
    """

    target_id: str
    neighbor_ids: list
    features: np.ndarray
    mask: np.ndarray

    @classmethod
    def empty(cls, target_id, n):
        return cls(target_id, [], np.zeros((0, n, len(FEATURES))), np.zeros((0, n)))

    @property
    def k(self):
        return self.features.shape[0]


def canonicalize_dataset(trajs, n, normalizer=None, k=4, radius_m=5000.0,
                         mode="minmax"):
    """Full preprocessing for a trajectory set: derive kinematics, resample
    to length n, fit a normalizer when none is given, normalize, and build
    each trajectory's neighbor context.

    Returns (canons, contexts, normalizer) with lists aligned to `trajs`.
    Fit the normalizer on the training split only and pass it in for
    validation/test data.
    """
    uniform = [derive_kinematics(resample(t, n)) for t in trajs]
    if normalizer is None:
        normalizer = Normalizer.fit(uniform, mode=mode)
    canons = [normalize(t, normalizer) for t in uniform]
    contexts = [neighbor_query(uniform, t, k=k, radius_m=radius_m,
                               normalizer=normalizer) for t in uniform]
    return canons, contexts, normalizer


def pad_contexts(contexts, k_max=None):
    """Stack variable-K contexts into (N, K, n, d) features and (N, K, n)
    masks, zero-padding short ones."""
    if not contexts:
        raise GeoError("no contexts to pad")
    n = contexts[0].features.shape[1]
    k = max((c.k for c in contexts), default=0) if k_max is None else k_max
    feats = np.zeros((len(contexts), k, n, len(FEATURES)))
    mask = np.zeros((len(contexts), k, n))
    for i, c in enumerate(contexts):
        kk = min(c.k, k)
        if kk:
            feats[i, :kk] = c.features[:kk]
            mask[i, :kk] = c.mask[:kk]
    return feats, mask


def neighbor_query(dataset, target, window=None, k=4, radius_m=5000.0, normalizer=None):
    """Find the K nearest trajectories by mean planar distance over the
    shared time window and align them to the target's steps.

    `target` must be uniformly sampled (its steps define the alignment
    grid). Neighbors are interpolated onto the target timestamps; steps
    outside a neighbor's own span are zero-masked. Ties break by id; fewer
    than K are returned when fewer qualify.
    """
    lat0 = normalizer.lat0 if normalizer else float(np.mean(target.lat))
    lon0 = normalizer.lon0 if normalizer else float(np.mean(target.lon))
    t_lo, t_hi = (window if window is not None else (target.t[0], target.t[-1]))
    steps = target.t[(target.t >= t_lo) & (target.t <= t_hi)]
    n = len(target.t)
    if len(steps) == 0:
        return NeighborContext.empty(target.id, n)

    tx, ty = project_xy(target.lat, target.lon, lat0, lon0)
    scored = []
    for cand in dataset:
        if cand.id == target.id:
            continue
        lo = max(t_lo, cand.t[0])
        hi = min(t_hi, cand.t[-1])
        sel = (target.t >= lo) & (target.t <= hi)
        if not np.any(sel):
            continue
        cx, cy = project_xy(cand.lat, cand.lon, lat0, lon0)
        ix = np.interp(target.t[sel], cand.t, cx)
        iy = np.interp(target.t[sel], cand.t, cy)
        d = float(np.mean(np.hypot(ix - tx[sel], iy - ty[sel])))
        if d <= radius_m:
            scored.append((d, cand.id, cand))
    scored.sort(key=lambda s: (s[0], s[1]))
    chosen = scored[:k]
    if not chosen:
        return NeighborContext.empty(target.id, n)

    feats = np.zeros((len(chosen), n, len(FEATURES)))
    mask = np.zeros((len(chosen), n))
    for j, (_, _, cand) in enumerate(chosen):
        cand = cand if cand.psi is not None else derive_kinematics(cand)
        inside = (target.t >= cand.t[0]) & (target.t <= cand.t[-1])
        cx, cy = project_xy(cand.lat, cand.lon, lat0, lon0)
        raw = np.zeros((n, len(FEATURES)))
        raw[:, 0] = np.interp(target.t, cand.t, cx)
        raw[:, 1] = np.interp(target.t, cand.t, cy)
        raw[:, 2] = np.interp(target.t, cand.t, cand.v)
        raw[:, 3] = np.interp(target.t, cand.t, np.unwrap(cand.psi))
        feats[j] = normalizer.transform(raw) if normalizer else raw
        feats[j][~inside] = 0.0
        mask[j][inside] = 1.0
    return NeighborContext(target_id=target.id,
                           neighbor_ids=[c[1] for c in chosen],
                           features=feats, mask=mask)
