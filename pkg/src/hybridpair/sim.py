"""Deterministic kinematic lane simulator for ego, adversary and independent adversary.

The road is a grid: each cell is one vehicle length long and half a lane wide,
so a lane holds two lateral cells. Adversary paths are sequences of relative
grid moves plus per-step accelerations. Each step lasts ``step_period`` seconds.
During a step the vehicle steers toward the next waypoint's cell center with a
critically damped response (rate ``tracking_rate``), in a frame that itself
advances with the integrated speed. The ego keeps its lane at a cruise speed and brakes when a vehicle
is close ahead in its lane.

Trace file layout (one row per timestep, ``#``-prefixed JSON header line)::

    t, then for prefix in (ego, adv, ind_adv):
      {p}_x {p}_y {p}_heading {p}_vel_x {p}_vel_y {p}_vel_z
      {p}_accel_x {p}_accel_y {p}_accel_z
      {p}_ang_vel_x {p}_ang_vel_y {p}_ang_vel_z {p}_length {p}_width
    then adv_raw_speed
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .distributions import MOVE_DELTAS, HybridParams, HybridPath

VEHICLES = ("ego", "adv", "ind_adv")
TRACK_FIELDS = (
    "x", "y", "heading",
    "vel_x", "vel_y", "vel_z",
    "accel_x", "accel_y", "accel_z",
    "ang_vel_x", "ang_vel_y", "ang_vel_z",
    "length", "width",
)
TRACE_COLUMNS = ("t",) + tuple(f"{v}_{f}" for v in VEHICLES for f in TRACK_FIELDS) + ("adv_raw_speed",)
ALLOWED_TIMESTEPS = (0.05, 0.1)


@dataclass(frozen=True)
class GridMap:
    lanes: int = 3
    cell_length: float = 4.5
    cell_width: float = 1.75
    road_length: int = 400

    cells_per_lane_width = 2

    def __post_init__(self):
        if self.lanes < 2:
            raise ValueError("a grid map needs at least two lanes")
        if self.cell_length <= 0 or self.cell_width <= 0 or self.road_length <= 0:
            raise ValueError("grid cell dimensions must be positive")

    @property
    def n_lateral(self) -> int:
        return self.cells_per_lane_width * self.lanes

    @property
    def lane_width(self) -> float:
        return self.cells_per_lane_width * self.cell_width

    def lateral_center(self, cell):
        return (np.asarray(cell, dtype=float) + 0.5) * self.cell_width

    def lane_center(self, lane: int) -> float:
        return (lane + 0.5) * self.lane_width

    def on_map(self, cell) -> bool:
        long, lat = cell
        return 0 <= lat < self.n_lateral and 0 <= long < self.road_length


@dataclass(frozen=True)
class VehicleState:
    position: tuple[float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    acceleration: tuple[float, float, float] = (0.0, 0.0, 0.0)
    angular_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    heading: float = 0.0
    bbox: tuple[float, float] = (4.5, 1.8)

    def __post_init__(self):
        if self.bbox[0] <= 0 or self.bbox[1] <= 0:
            raise ValueError("bounding box dimensions must be positive")


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """Three-vehicle scenario. Start cells are ``(longitudinal, lateral)`` grid indices."""

    adv_prior: HybridParams
    grid: GridMap = field(default_factory=GridMap)
    ego_lane: int = 2
    ego_speed: float = 25.0
    ego_x: float = 0.0
    adv_start: tuple[int, int] = (0, 2)
    adv_speed: float = 25.0
    ind_start: tuple[int, int] = (2, 1)
    ind_speed: float = 25.0
    ind_prior: HybridParams | None = None
    ind_script: HybridPath | None = None
    timestep: float = 0.1
    horizon: float = 8.0
    step_period: float = 1.0
    collision_inflation: float = 0.0
    bbox: tuple[float, float] = (4.5, 1.8)
    max_speed: float = 40.0
    brake_decel: float = 6.0
    brake_range: float = 1.5
    resume_accel: float = 2.0
    tracking_rate: float = 1.0

    def __post_init__(self):
        if not any(math.isclose(self.timestep, a) for a in ALLOWED_TIMESTEPS):
            raise ValueError(f"timestep must be one of {ALLOWED_TIMESTEPS}")
        ratio = self.step_period / self.timestep
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("step_period must be a multiple of the timestep")
        steps = self.horizon / self.timestep
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("horizon must be a multiple of the timestep")
        if self.path_steps * self.step_period > self.horizon + 1e-9:
            raise ValueError("horizon is shorter than the path duration")
        if self.ind_prior is None and self.ind_script is None:
            raise ValueError("independent adversary needs params or a scripted profile")
        for prior in (self.ind_prior,):
            if prior is not None and prior.horizon != self.path_steps:
                raise ValueError("independent adversary params horizon differs from the adversary's")
        if self.ind_script is not None and self.ind_script.horizon != self.path_steps:
            raise ValueError("scripted profile horizon differs from the adversary's")
        if not 0 <= self.ego_lane < self.grid.lanes:
            raise ValueError("ego lane is off the map")
        for cell in (self.adv_start, self.ind_start):
            if not self.grid.on_map(cell):
                raise ValueError(f"start cell {cell} is off the map")
        if not self.tracking_rate > 0:
            raise ValueError("tracking_rate must be positive")
        if self.collision_inflation < 0:
            raise ValueError("collision inflation must be non-negative")

    @property
    def path_steps(self) -> int:
        return self.adv_prior.horizon

    @property
    def ticks_per_step(self) -> int:
        return int(round(self.step_period / self.timestep))

    @property
    def n_samples(self) -> int:
        return int(round(self.horizon / self.timestep)) + 1


@dataclass(eq=False)
class VehicleTrack:
    pos: np.ndarray       # (n, 2)
    heading: np.ndarray   # (n,)
    vel: np.ndarray       # (n, 3)
    acc: np.ndarray       # (n, 3)
    angvel: np.ndarray    # (n, 3)
    bbox: tuple[float, float]

    def state(self, i: int) -> VehicleState:
        return VehicleState(
            position=tuple(self.pos[i]),
            velocity=tuple(self.vel[i]),
            acceleration=tuple(self.acc[i]),
            angular_velocity=tuple(self.angvel[i]),
            heading=float(self.heading[i]),
            bbox=self.bbox,
        )

    def columns(self) -> np.ndarray:
        n = len(self.heading)
        box = np.tile(np.asarray(self.bbox, dtype=float), (n, 1))
        return np.column_stack([self.pos, self.heading, self.vel, self.acc, self.angvel, box])

    @classmethod
    def from_columns(cls, cols: np.ndarray) -> "VehicleTrack":
        bbox = (float(cols[0, 12]), float(cols[0, 13])) if len(cols) else (4.5, 1.8)
        return cls(cols[:, 0:2].copy(), cols[:, 2].copy(), cols[:, 3:6].copy(),
                   cols[:, 6:9].copy(), cols[:, 9:12].copy(), bbox)


@dataclass(eq=False)
class SimTrace:
    t: np.ndarray
    ego: VehicleTrack
    adv: VehicleTrack
    ind_adv: VehicleTrack
    adv_raw_speed: np.ndarray
    collision: bool
    t_collision: float | None
    min_distance: float
    off_road: bool
    timestep: float

    def __len__(self):
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    def track(self, name: str) -> VehicleTrack:
        return {"ego": self.ego, "adv": self.adv, "ind_adv": self.ind_adv}[name]

    def states(self, i: int):
        return self.ego.state(i), self.adv.state(i), self.ind_adv.state(i)

    def meta(self) -> dict:
        return {
            "collision": self.collision,
            "t_collision": self.t_collision,
            "min_distance": self.min_distance,
            "off_road": self.off_road,
            "timestep": self.timestep,
        }

    def to_text(self) -> str:
        data = np.column_stack([self.t, self.ego.columns(), self.adv.columns(),
                                self.ind_adv.columns(), self.adv_raw_speed])
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.meta(), sort_keys=True) + "\n")
        buf.write(",".join(TRACE_COLUMNS) + "\n")
        for row in data:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "SimTrace":
        lines = text.splitlines()
        meta = {}
        if lines and lines[0].startswith("#"):
            meta = json.loads(lines[0][1:])
            lines = lines[1:]
        header = lines[0].split(",") if lines else []
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError("trace file does not carry the expected column layout")
        rows = [[float(v) for v in line.split(",")] for line in lines[1:] if line.strip()]
        data = np.asarray(rows, dtype=float).reshape(-1, len(TRACE_COLUMNS))
        w = len(TRACK_FIELDS)
        tracks = [VehicleTrack.from_columns(data[:, 1 + j * w: 1 + (j + 1) * w]) for j in range(3)]
        timestep = meta.get("timestep")
        if timestep is None:
            timestep = float(data[1, 0] - data[0, 0]) if len(data) > 1 else 0.1
        return cls(data[:, 0].copy(), *tracks, adv_raw_speed=data[:, -1].copy(),
                   collision=bool(meta.get("collision", False)),
                   t_collision=meta.get("t_collision"),
                   min_distance=float(meta.get("min_distance", math.nan)),
                   off_road=bool(meta.get("off_road", False)),
                   timestep=float(timestep))

    @classmethod
    def load(cls, path) -> "SimTrace":
        return cls.from_text(Path(path).read_text())


# -- geometry ---------------------------------------------------------------

def obb_overlap(ca, ha, half_a, cb, hb, half_b):
    """Separating-axis overlap test for oriented rectangles; broadcasts over leading dims.

    ``c*`` are centers (..., 2), ``h*`` headings (...), ``half_*`` half extents (..., 2).
    Touching boxes count as overlapping.
    """
    ca, cb = np.asarray(ca, float), np.asarray(cb, float)
    ha, hb = np.asarray(ha, float), np.asarray(hb, float)
    half_a, half_b = np.asarray(half_a, float), np.asarray(half_b, float)
    ua = np.stack([np.cos(ha), np.sin(ha)], axis=-1)
    va = np.stack([-np.sin(ha), np.cos(ha)], axis=-1)
    ub = np.stack([np.cos(hb), np.sin(hb)], axis=-1)
    vb = np.stack([-np.sin(hb), np.cos(hb)], axis=-1)
    d = cb - ca
    separated = np.zeros(np.broadcast(ha, hb, d[..., 0]).shape, dtype=bool)
    for axis in (ua, va, ub, vb):
        ra = half_a[..., 0] * np.abs((ua * axis).sum(-1)) + half_a[..., 1] * np.abs((va * axis).sum(-1))
        rb = half_b[..., 0] * np.abs((ub * axis).sum(-1)) + half_b[..., 1] * np.abs((vb * axis).sum(-1))
        separated |= np.abs((d * axis).sum(-1)) > ra + rb
    return ~separated


def detect_collision(a: VehicleState, b: VehicleState, inflation: float = 0.0) -> bool:
    half_a = (a.bbox[0] / 2 + inflation, a.bbox[1] / 2 + inflation)
    half_b = (b.bbox[0] / 2 + inflation, b.bbox[1] / 2 + inflation)
    return bool(obb_overlap(a.position, a.heading, half_a, b.position, b.heading, half_b))


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(w <= -np.pi, np.pi, w)


def relative_geometry(a: VehicleState, b: VehicleState) -> tuple[float, float]:
    dx = b.position[0] - a.position[0]
    dy = b.position[1] - a.position[1]
    return math.hypot(dx, dy), float(wrap_angle(math.atan2(dy, dx) - a.heading))


# -- simulation -------------------------------------------------------------

def _track_target(target, omega, dt):
    """Critically damped second-order tracking of a piecewise-constant target, exact per tick.

    ``target`` is (B, n); returns position, velocity and acceleration, each (B, n).
    """
    B, n = target.shape
    p = np.empty((B, n))
    v = np.empty((B, n))
    p[:, 0] = target[:, 0]
    v[:, 0] = 0.0
    decay = math.exp(-omega * dt)
    for j in range(n - 1):
        e0 = p[:, j] - target[:, j]
        c = v[:, j] + omega * e0
        p[:, j + 1] = target[:, j] + (e0 + c * dt) * decay
        v[:, j + 1] = (v[:, j] - omega * c * dt) * decay
    a = -omega ** 2 * (p - target) - 2 * omega * v
    return p, v, a


def _open_loop(cfg: ScenarioConfig, moves, accels, start, speed0):
    """Kinematics of path-following vehicles, vectorized over the batch axis."""
    grid = cfg.grid
    B, T = moves.shape
    n, tps, dt = cfg.n_samples, cfg.ticks_per_step, cfg.timestep

    way = np.zeros((B, T + 1, 2), dtype=np.int64)
    way[:, 1:] = np.cumsum(MOVE_DELTAS[moves], axis=1)
    way += np.asarray(start, dtype=np.int64)

    # during step k the vehicle steers toward waypoint k + 1
    i = np.arange(n)
    k = np.minimum(i // tps, T)
    goal = way[:, np.minimum(k + 1, T)].astype(float)
    goal[:, 0] = way[:, 0]
    grid_long, dlong, ddlong = _track_target(goal[..., 0], cfg.tracking_rate, dt)
    grid_lat, dlat, ddlat = _track_target(goal[..., 1], cfg.tracking_rate, dt)

    a_cmd = np.zeros((B, n))
    on_path = k < T
    a_cmd[:, on_path] = accels[:, k[on_path]]

    # speed integrates the commanded acceleration and is clamped; one extra tick
    # so every sample has a forward-difference effective acceleration
    v = np.empty((B, n + 1))
    travel = np.empty((B, n))
    v[:, 0] = speed0
    travel[:, 0] = 0.0
    for j in range(n):
        v[:, j + 1] = np.clip(v[:, j] + a_cmd[:, j] * dt, 0.0, cfg.max_speed)
        if j + 1 < n:
            travel[:, j + 1] = travel[:, j] + 0.5 * (v[:, j] + v[:, j + 1]) * dt
    a_eff = (v[:, 1:] - v[:, :-1]) / dt
    v = v[:, :n]
    raw_speed = speed0 + np.concatenate([np.zeros((B, 1)), np.cumsum(a_cmd * dt, axis=1)[:, :-1]], axis=1)

    x = grid_long * grid.cell_length + travel
    y = grid.lateral_center(grid_lat)
    vx = v + dlong * grid.cell_length
    vy = dlat * grid.cell_width
    ax = a_eff + ddlong * grid.cell_length
    ay = ddlat * grid.cell_width

    # off-road: first step whose target lateral cell leaves the road, or running off the far end
    lat_bad = (way[:, 1:, 1] < 0) | (way[:, 1:, 1] >= grid.n_lateral)
    off_tick = np.full(B, np.iinfo(np.int64).max)
    has_bad = lat_bad.any(axis=1)
    off_tick[has_bad] = np.argmax(lat_bad[has_bad], axis=1) * tps
    end_bad = x >= grid.road_length * grid.cell_length
    has_end = end_bad.any(axis=1)
    off_tick[has_end] = np.minimum(off_tick[has_end], np.argmax(end_bad[has_end], axis=1))
    return dict(x=x, y=y, vx=vx, vy=vy, ax=ax, ay=ay, raw_speed=raw_speed, off_tick=off_tick)


def _heading_terms(vx, vy, ax, ay):
    speed2 = vx ** 2 + vy ** 2
    moving = speed2 > 1e-12
    heading = np.where(moving, np.arctan2(vy, vx), 0.0)
    yaw_rate = np.where(moving, (vx * ay - vy * ax) / np.where(moving, speed2, 1.0), 0.0)
    return heading, yaw_rate


def _track(x, y, vx, vy, ax, ay, heading, yaw_rate, bbox) -> VehicleTrack:
    n = len(x)
    zeros = np.zeros(n)
    return VehicleTrack(
        pos=np.column_stack([x, y]),
        heading=heading.copy(),
        vel=np.column_stack([vx, vy, zeros]),
        acc=np.column_stack([ax, ay, zeros]),
        angvel=np.column_stack([zeros, zeros, yaw_rate]),
        bbox=bbox,
    )


def _as_arrays(paths: Sequence[HybridPath], T: int):
    moves = np.stack([p.moves for p in paths]) if paths else np.zeros((0, T), np.int64)
    accels = np.stack([p.accels for p in paths]) if paths else np.zeros((0, T))
    if moves.shape[1] != T:
        raise ValueError(f"path horizon {moves.shape[1]} differs from scenario path steps {T}")
    if moves.size and moves.max() >= len(MOVE_DELTAS):
        raise ValueError("move index outside the alphabet")
    return moves, accels


def simulate_batch(cfg: ScenarioConfig, adv_paths: Sequence[HybridPath],
                   ind_paths: Sequence[HybridPath] | None = None) -> list[SimTrace]:
    """Run ``len(adv_paths)`` independent scenarios; element b depends only on its own inputs."""
    T = cfg.path_steps
    B = len(adv_paths)
    if ind_paths is None:
        if cfg.ind_script is None:
            raise ValueError("no independent adversary paths and no scripted profile")
        ind_paths = [cfg.ind_script] * B
    if len(ind_paths) != B:
        raise ValueError("need one independent-adversary path per adversary path")
    if B == 0:
        return []
    grid = cfg.grid
    n, dt = cfg.n_samples, cfg.timestep
    L, W = cfg.bbox

    adv = _open_loop(cfg, *_as_arrays(adv_paths, T), cfg.adv_start, cfg.adv_speed)
    ind = _open_loop(cfg, *_as_arrays(ind_paths, T), cfg.ind_start, cfg.ind_speed)

    # ego: lane keeping, brake reflex when a vehicle is close ahead in its lane
    y_e = grid.lane_center(cfg.ego_lane)
    x_e = np.empty((B, n))
    v_e = np.empty((B, n))
    a_e = np.empty((B, n))
    x_e[:, 0] = cfg.ego_x
    v_e[:, 0] = cfg.ego_speed
    reach = cfg.brake_range * L
    for j in range(n):
        threat = np.zeros(B, dtype=bool)
        for other in (adv, ind):
            dx = other["x"][:, j] - x_e[:, j]
            lateral = np.abs(other["y"][:, j] - y_e) < W
            threat |= lateral & (dx > 0) & (dx - L <= reach)
        v = v_e[:, j]
        a = np.where(threat & (v > 0), -cfg.brake_decel,
                     np.where(v < cfg.ego_speed, cfg.resume_accel, 0.0))
        v_next = np.where(a > 0, np.minimum(v + a * dt, cfg.ego_speed), np.maximum(v + a * dt, 0.0))
        a_e[:, j] = (v_next - v) / dt
        if j + 1 < n:
            v_e[:, j + 1] = v_next
            x_e[:, j + 1] = x_e[:, j] + 0.5 * (v + v_next) * dt

    adv_heading, adv_yaw = _heading_terms(adv["vx"], adv["vy"], adv["ax"], adv["ay"])
    ind_heading, ind_yaw = _heading_terms(ind["vx"], ind["vy"], ind["ax"], ind["ay"])

    infl = cfg.collision_inflation
    half = np.array([L / 2 + infl, W / 2 + infl])
    ego_c = np.stack([x_e, np.full_like(x_e, y_e)], axis=-1)
    adv_c = np.stack([adv["x"], adv["y"]], axis=-1)
    hit = obb_overlap(ego_c, np.zeros_like(x_e), half, adv_c, adv_heading, half)
    dist = np.hypot(adv["x"] - x_e, adv["y"] - y_e)

    t = np.round(np.arange(n) * dt, 9)
    traces = []
    for b in range(B):
        col_tick = int(np.argmax(hit[b])) if hit[b].any() else None
        off_tick = int(min(adv["off_tick"][b], ind["off_tick"][b], n))
        collision = col_tick is not None and col_tick <= off_tick
        if collision:
            end, off_road = col_tick, False
        elif off_tick < n:
            end, off_road = off_tick, True
        else:
            end, off_road = n - 1, False
        sl = slice(0, end + 1)
        zeros = np.zeros(end + 1)
        ego_track = _track(x_e[b, sl], np.full(end + 1, y_e), v_e[b, sl], zeros, a_e[b, sl], zeros,
                           zeros, zeros, cfg.bbox)
        adv_track = _track(adv["x"][b, sl], adv["y"][b, sl], adv["vx"][b, sl], adv["vy"][b, sl],
                           adv["ax"][b, sl], adv["ay"][b, sl], adv_heading[b, sl], adv_yaw[b, sl], cfg.bbox)
        ind_track = _track(ind["x"][b, sl], ind["y"][b, sl], ind["vx"][b, sl], ind["vy"][b, sl],
                           ind["ax"][b, sl], ind["ay"][b, sl], ind_heading[b, sl], ind_yaw[b, sl], cfg.bbox)
        traces.append(SimTrace(
            t=t[sl].copy(), ego=ego_track, adv=adv_track, ind_adv=ind_track,
            adv_raw_speed=adv["raw_speed"][b, sl].copy(),
            collision=bool(collision),
            t_collision=float(t[col_tick]) if collision else None,
            min_distance=float(dist[b, sl].min()),
            off_road=off_road,
            timestep=dt,
        ))
    return traces


def run_scenario(cfg: ScenarioConfig, adv_path: HybridPath, ind_path: HybridPath | None = None) -> SimTrace:
    return simulate_batch(cfg, [adv_path], None if ind_path is None else [ind_path])[0]
