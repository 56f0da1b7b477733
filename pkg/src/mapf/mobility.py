"""Urban-mobility dynamics and GPS observations in a local planar frame (meters).

One tick is 10 seconds. Observations are rows ``(x, y)`` or ``(x, y, accuracy)``;
when the accuracy column is present it overrides the model's GPS sigma.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from mapf import kernels
from mapf.errors import ConfigError, InvariantViolation, ParseError
from mapf.models import ModelSpec, register_family

TICK_SECONDS = 10.0
DEFAULT_GPS_SIGMA = 10.62
DEFAULT_CORRIDOR = 15.0
MAX_REJECTIONS = 100

SPEED_PRESETS = {
    "walk": (1.0, 0.3, 0.05),
    "cycle": (2.0, 0.8, 0.05),
    "car": (3.1, 1.6, 0.05),
}


@dataclass(frozen=True)
class Route:
    waypoints: np.ndarray

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=np.float64)
        if wp.ndim != 2 or wp.shape[1] != 2:
            raise InvariantViolation("waypoints must be an (n, 2) array")
        if wp.shape[0] < 2:
            raise InvariantViolation("a route needs at least 2 waypoints")
        d = np.diff(wp, axis=0)
        if np.any(np.all(d == 0.0, axis=1)):
            i = int(np.flatnonzero(np.all(d == 0.0, axis=1))[0])
            raise InvariantViolation(f"waypoints {i + 1} and {i + 2} coincide")
        object.__setattr__(self, "waypoints", wp)

    @property
    def lengths(self):
        return np.hypot(*np.diff(self.waypoints, axis=0).T)

    @property
    def headings(self):
        d = np.diff(self.waypoints, axis=0)
        return np.arctan2(d[:, 1], d[:, 0])

    @property
    def n_segments(self):
        return self.waypoints.shape[0] - 1


@dataclass(frozen=True)
class RouteDynParams:
    lambda1: float
    lambda2: float
    corridor: float = DEFAULT_CORRIDOR

    def __post_init__(self):
        if not (self.lambda1 > self.lambda2 > 0):
            raise ConfigError(
                f"route covariance needs lambda1 > lambda2 > 0, got {self.lambda1}, {self.lambda2}"
            )
        if not self.corridor > 0:
            raise ConfigError("corridor half-width must be positive")


@dataclass(frozen=True)
class MultimodalParams:
    b1: float = 1.0
    b2: float = 0.3
    b3: float = 0.05

    def __post_init__(self):
        if not (self.b1 > self.b2 > self.b3 > 0):
            raise ConfigError(f"need b1 > b2 > b3 > 0, got {self.b1}, {self.b2}, {self.b3}")

    @classmethod
    def preset(cls, name):
        if name not in SPEED_PRESETS:
            raise ConfigError(f"unknown speed preset {name!r}; known: {sorted(SPEED_PRESETS)}")
        return cls(*SPEED_PRESETS[name])

    @property
    def scales(self):
        return np.array([self.b1, self.b2, self.b3])


@dataclass
class Trace:
    t: np.ndarray
    positions: np.ndarray
    accuracy: np.ndarray
    mode: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.t) and np.any(np.diff(self.t) <= 0):
            i = int(np.flatnonzero(np.diff(self.t) <= 0)[0])
            raise InvariantViolation(f"ticks must be strictly increasing (row {i + 2})")

    def observations(self):
        """One entry per tick from first to last; ticks without a reading are ``None``."""
        if len(self.t) == 0:
            return [], np.empty(0, dtype=np.int64)
        ticks = np.arange(self.t[0], self.t[-1] + 1)
        rows = {int(t): i for i, t in enumerate(self.t)}
        obs = []
        for t in ticks:
            i = rows.get(int(t))
            obs.append(None if i is None else np.array([*self.positions[i], self.accuracy[i]]))
        return obs, ticks


# -- geometry --------------------------------------------------------------


def nearest_segment(route, x):
    """Closest segment to each point (1-based, lowest index on ties), projection and heading.

    ``x`` may be a single point ``(2,)`` or an array ``(M, 2)``.
    """
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    seg, proj, _ = kernels.nearest_segment(pts.reshape(-1, 2), route.waypoints)
    heading = route.headings[seg]
    if single:
        return int(seg[0]) + 1, proj[0], float(heading[0])
    return seg + 1, proj, heading


def distance_to_route(route, x):
    _, _, dist = kernels.nearest_segment(np.asarray(x, dtype=np.float64).reshape(-1, 2), route.waypoints)
    return dist


def route_step(route, x_prev, params, rng):
    """Gaussian step whose major axis follows the current segment, truncated to the corridor.

    Samples farther than ``params.corridor`` from the route are redrawn up to
    100 times; the survivors of that are projected onto the route.
    """
    x = np.asarray(x_prev, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(-1, 2)
    seg, _, _ = kernels.nearest_segment(x, route.waypoints)
    th = route.headings[seg]
    c, s = np.cos(th), np.sin(th)
    sd1, sd2 = math.sqrt(params.lambda1), math.sqrt(params.lambda2)

    def draw(idx):
        z = rng.standard_normal((idx.size, 2))
        z[:, 0] *= sd1
        z[:, 1] *= sd2
        return x[idx] + np.column_stack((c[idx] * z[:, 0] - s[idx] * z[:, 1], s[idx] * z[:, 0] + c[idx] * z[:, 1]))

    out = draw(np.arange(x.shape[0]))
    if math.isfinite(params.corridor):
        pending = np.arange(x.shape[0])
        for _ in range(MAX_REJECTIONS):
            _, proj, dist = kernels.nearest_segment(out[pending], route.waypoints)
            bad = dist > params.corridor
            if not bad.any():
                pending = pending[:0]
                break
            pending = pending[bad]
            out[pending] = draw(pending)
        if pending.size:
            _, proj, dist = kernels.nearest_segment(out[pending], route.waypoints)
            far = dist > params.corridor
            out[pending[far]] = proj[far]
    return out[0] if single else out


def multimodal_step(x_prev, params, rng):
    """Isotropic Gaussian step with a scale picked uniformly from ``(b1, b2, b3)``."""
    x = np.asarray(x_prev, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(-1, 2)
    b = params.scales[rng.integers(0, 3, size=x.shape[0])]
    out = x + b[:, None] * rng.standard_normal(x.shape)
    return out[0] if single else out


def gps_likelihood(y, x, sigma=DEFAULT_GPS_SIGMA):
    """Log density of ``N(y; x, sigma^2 I_2)`` for each row of ``x``."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d = x.reshape(-1, 2) - y[:2]
    var = sigma * sigma
    out = -math.log(2.0 * math.pi * var) - 0.5 * np.einsum("ij,ij->i", d, d) / var
    return out if x.ndim > 1 else float(out[0])


def _obs_sigma(y, sigma):
    y = np.ravel(y)
    if y.size >= 3 and np.isfinite(y[2]) and y[2] > 0:
        return float(y[2])
    return sigma


# -- families --------------------------------------------------------------


def _resolve(path, base_dir):
    p = Path(path)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return p


def _gaussian_init(x0, init_std):
    x0 = np.asarray(x0, dtype=np.float64).reshape(2)

    def init(m, rng):
        return x0 + init_std * rng.standard_normal((m, 2))

    return init


def _gps_observe(sigma):
    def observe(x, t, rng):
        return x + sigma * rng.standard_normal(x.shape)

    return observe


@register_family("route")
def route_family(
    lambda1,
    lambda2,
    waypoints=None,
    route_file=None,
    corridor=DEFAULT_CORRIDOR,
    sigma=DEFAULT_GPS_SIGMA,
    x0=None,
    init_std=1.0,
    _base_dir=None,
    **_,
):
    """Route-constrained vehicle (bus, tram, train)."""
    if (waypoints is None) == (route_file is None):
        raise ConfigError("route family needs exactly one of 'waypoints' or 'route_file'")
    route = Route(np.asarray(waypoints)) if waypoints is not None else load_route(_resolve(route_file, _base_dir))
    params = RouteDynParams(float(lambda1), float(lambda2), float(corridor))
    start = route.waypoints[0] if x0 is None else np.asarray(x0, dtype=np.float64)

    def transition(x, t, rng):
        return route_step(route, x, params, rng)

    def likelihood(y, x, t):
        return gps_likelihood(y, x, _obs_sigma(y, sigma))

    return ModelSpec(
        transition_sample=transition,
        likelihood=likelihood,
        state_dim=2,
        obs_dim=2,
        initial_sample=_gaussian_init(start, init_std),
        observation_sample=_gps_observe(sigma),
        family="route",
        params=dict(route=route, dyn=params, sigma=sigma, x0=start, init_std=init_std),
    )


@register_family("multimodal")
def multimodal_family(b=None, preset="walk", sigma=DEFAULT_GPS_SIGMA, x0=(0.0, 0.0), init_std=1.0, **_):
    """Three-speed random walk (walking, cycling, car)."""
    params = MultimodalParams(*b) if b is not None else MultimodalParams.preset(preset)

    def transition(x, t, rng):
        return multimodal_step(x, params, rng)

    def likelihood(y, x, t):
        return gps_likelihood(y, x, _obs_sigma(y, sigma))

    return ModelSpec(
        transition_sample=transition,
        likelihood=likelihood,
        state_dim=2,
        obs_dim=2,
        initial_sample=_gaussian_init(x0, init_std),
        observation_sample=_gps_observe(sigma),
        family="multimodal",
        params=dict(speeds=params, sigma=sigma, x0=np.asarray(x0, dtype=np.float64), init_std=init_std),
    )


# -- file formats ----------------------------------------------------------


def load_route(path):
    """Read a route file: one ``x y`` waypoint per line, ``#`` starts a comment."""
    pts = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ParseError(f"expected 2 numbers, got {len(parts)}", path, lineno)
            try:
                pts.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise ParseError(f"not a number in {line!r}", path, lineno) from None
    if not pts:
        raise ParseError("route file has no waypoints", path)
    return Route(np.array(pts))


def _numeric(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_trace(path):
    """Read a CSV trace ``t,x,y[,accuracy][,mode]``; the header line is optional."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [(i, r) for i, r in enumerate(rows, start=1) if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise ParseError("trace file is empty", path)
    _, header = rows[0]
    header = [h.strip().lower() for h in header]
    if _numeric(header[0]):
        # headerless file: positional t,x,y[,accuracy[,mode]]
        if not 3 <= len(header) <= 5:
            raise ParseError(f"expected 3 to 5 fields, got {len(header)}", path, rows[0][0])
        header = ["t", "x", "y", "accuracy", "mode"][: len(header)]
        rows = [(0, header)] + rows
    for col in ("t", "x", "y"):
        if col not in header:
            raise ParseError(f"header lacks column {col!r}", path, rows[0][0])
    ix = {h: header.index(h) for h in header}
    ts, pos, acc, mode = [], [], [], []
    for lineno, r in rows[1:]:
        if len(r) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(r)}", path, lineno)
        try:
            tv = float(r[ix["t"]])
            if tv != int(tv):
                raise ValueError
            ts.append(int(tv))
            pos.append((float(r[ix["x"]]), float(r[ix["y"]])))
            a = r[ix["accuracy"]].strip() if "accuracy" in ix else ""
            acc.append(float(a) if a else DEFAULT_GPS_SIGMA)
            if "mode" in ix:
                mode.append(int(r[ix["mode"]]))
        except ValueError:
            raise ParseError(f"malformed row {','.join(r)!r}", path, lineno) from None
    if not ts:
        raise ParseError("trace file has no data rows", path)
    return Trace(
        np.array(ts, dtype=np.int64),
        np.array(pos, dtype=np.float64),
        np.array(acc, dtype=np.float64),
        np.array(mode, dtype=np.int64) if mode else None,
    )


def write_trace(path, ticks, positions, accuracy=None, mode=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["t", "x", "y", "accuracy"] + (["mode"] if mode is not None else [])
        w.writerow(header)
        for i, t in enumerate(ticks):
            a = DEFAULT_GPS_SIGMA if accuracy is None else accuracy[i]
            row = [int(t), repr(float(positions[i][0])), repr(float(positions[i][1])), repr(float(a))]
            if mode is not None:
                row.append(int(mode[i]))
            w.writerow(row)


# -- synthetic scenario ----------------------------------------------------


DEMO_ROUTE = np.array(
    [[0.0, 0.0], [800.0, 0.0], [1400.0, 500.0], [1400.0, 1300.0], [2200.0, 1900.0], [3000.0, 1900.0]]
)


def mobility_scenario(T=400, switch=200, lambda1=1600.0, lambda2=4.0, corridor=DEFAULT_CORRIDOR,
                      sigma=DEFAULT_GPS_SIGMA, waypoints=None, preset="walk"):
    """Route vehicle for ticks ``1..switch``, then a walker from where the vehicle stopped.

    The bank is ``[route model, walker model]`` with the same parameters as
    the generators; labels are 1 then 2.
    """
    from mapf.models import ModelBank, TrueModelSchedule
    from mapf.scenarios import Scenario

    wp = DEMO_ROUTE if waypoints is None else np.asarray(waypoints, dtype=np.float64)
    route = Route(wp)
    # start mid-route so the vehicle does not run off either end
    mid = route.waypoints[route.n_segments // 2]
    bus = route_family(lambda1, lambda2, waypoints=wp, corridor=corridor, sigma=sigma, x0=mid)
    walk = multimodal_family(preset=preset, sigma=sigma, x0=mid)
    bank = ModelBank.from_models([
        route_family(lambda1, lambda2, waypoints=wp, corridor=corridor, sigma=sigma, x0=mid),
        multimodal_family(preset=preset, sigma=sigma, x0=mid),
    ])
    sched = TrueModelSchedule([(1, bus), (switch + 1, walk)], labels=[1, 2])
    return Scenario(bank, sched, T)
