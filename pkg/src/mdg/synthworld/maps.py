"""Procedural road maps made of lane centerlines.

Every lane is a dense path sampled every ``SPACING`` metres with per-waypoint
headings; the map's polylines are 16-waypoint windows of those paths.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mdg.errors import ContractError

SPACING = 2.0
N_WAYPOINTS = 16
LANE_WIDTH = 4.0
KINDS = ("straight", "curve", "intersection", "merge")

RED, YELLOW, GREEN, UNKNOWN = 0, 1, 2, 3
PHASE_NAMES = ("red", "yellow", "green", "unknown")


@dataclass
class Lane:
    path: np.ndarray                 # (P, 3) x, y, heading
    s: np.ndarray = field(init=False)

    def __post_init__(self):
        seg = np.hypot(np.diff(self.path[:, 0]), np.diff(self.path[:, 1]))
        self.s = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def pose_at(self, s):
        """Interpolated (x, y, heading) at arclength(s); clamps to the ends."""
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.length)
        x = np.interp(s, self.s, self.path[:, 0])
        y = np.interp(s, self.s, self.path[:, 1])
        i = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2)
        th = np.arctan2(self.path[i + 1, 1] - self.path[i, 1], self.path[i + 1, 0] - self.path[i, 0])
        return x, y, th

    def project(self, xy):
        """Arclength and signed lateral offset (left positive) of points (..., 2)."""
        p = np.asarray(xy, dtype=np.float64)
        a = self.path[:-1, :2]
        d = self.path[1:, :2] - a
        seg_len2 = (d * d).sum(-1)
        rel = p[..., None, :] - a
        t = np.clip((rel * d).sum(-1) / seg_len2, 0.0, 1.0)
        closest = a + t[..., None] * d
        dist2 = ((p[..., None, :] - closest) ** 2).sum(-1)
        k = np.argmin(dist2, axis=-1)
        tk = np.take_along_axis(t, k[..., None], -1)[..., 0]
        s = self.s[k] + tk * np.sqrt(seg_len2[k])
        dk = d[k]
        relk = p - a[k]
        cross = dk[..., 0] * relk[..., 1] - dk[..., 1] * relk[..., 0]
        lat = np.sign(cross) * np.sqrt(np.take_along_axis(dist2, k[..., None], -1)[..., 0])
        return s, lat


@dataclass
class Light:
    phase: int
    x: float
    y: float
    theta: float
    lane: int
    s_stop: float


@dataclass
class RoadMap:
    kind: str
    lanes: list[Lane]
    lights: list[Light]
    map_lanes: list[int]             # lanes whose polylines enter the map (continuations are excluded)

    def polylines(self) -> np.ndarray:
        polys = [p for i in self.map_lanes for p in split_polylines(self.lanes[i].path)]
        return np.stack(polys) if polys else np.zeros((0, N_WAYPOINTS, 3))

    def light_array(self) -> np.ndarray:
        if not self.lights:
            return np.zeros((0, 4))
        return np.array([[lt.phase, lt.x, lt.y, lt.theta] for lt in self.lights], dtype=np.float64)


def split_polylines(path: np.ndarray, n_w: int = N_WAYPOINTS) -> list[np.ndarray]:
    """Windows of ``n_w`` waypoints sharing end points; the last window is flush with the path end."""
    if len(path) < n_w:
        raise ContractError(f"path with {len(path)} waypoints is shorter than one polyline")
    starts = list(range(0, len(path) - n_w + 1, n_w - 1))
    if starts[-1] != len(path) - n_w:
        starts.append(len(path) - n_w)
    return [path[s:s + n_w].copy() for s in starts]


def _line(p0, heading: float, length: float) -> np.ndarray:
    n = int(round(length / SPACING))
    s = np.arange(n + 1) * SPACING
    return np.stack([p0[0] + s * np.cos(heading), p0[1] + s * np.sin(heading), np.full(n + 1, heading)], axis=1)


def _arc(center, radius: float, phi0: float, dphi: float, n: int) -> np.ndarray:
    phi = phi0 + np.arange(n + 1) * dphi
    x = center[0] + radius * np.cos(phi)
    y = center[1] + radius * np.sin(phi)
    heading = phi + np.pi / 2 * np.sign(dphi)
    heading = np.mod(heading + np.pi, 2 * np.pi) - np.pi
    return np.stack([x, y, heading], axis=1)


def straight_map(rng: np.random.Generator) -> RoadMap:
    lanes = [Lane(_line((-60.0, y), 0.0, 240.0)) for y in (-LANE_WIDTH, 0.0, LANE_WIDTH)]
    lights = []
    if rng.random() < 0.5:
        phase = int(rng.choice([RED, YELLOW, GREEN]))
        x_stop = float(rng.uniform(90.0, 130.0))
        for i, lane in enumerate(lanes):
            lights.append(Light(phase, x_stop, float(lane.path[0, 1]), 0.0, i, x_stop + 60.0))
    return RoadMap("straight", lanes, lights, [0, 1, 2])


def curve_map(rng: np.random.Generator, radius: float = 50.0) -> RoadMap:
    dphi = SPACING / radius
    n = 75
    phi0 = -np.pi / 2
    center = (0.0, radius)
    lanes = [Lane(_arc(center, r, phi0, dphi, n)) for r in (radius - LANE_WIDTH, radius, radius + LANE_WIDTH)]
    return RoadMap("curve", lanes, [], [0, 1, 2])


def intersection_map(rng: np.random.Generator) -> RoadMap:
    half = LANE_WIDTH / 2
    lanes = [
        Lane(_line((-90.0, -half), 0.0, 180.0)),          # eastbound
        Lane(_line((90.0, half), np.pi, 180.0)),          # westbound
        Lane(_line((half, -90.0), np.pi / 2, 180.0)),     # northbound
        Lane(_line((-half, 90.0), -np.pi / 2, 180.0)),    # southbound
    ]
    ns_green = bool(rng.random() < 0.5)
    stop_s = 90.0 - 12.0
    lights = []
    for i, lane in enumerate(lanes):
        green_axis = (i >= 2) == ns_green
        phase = GREEN if green_axis else int(rng.choice([RED, RED, YELLOW]))
        x, y, th = lane.pose_at(stop_s)
        lights.append(Light(phase, float(x), float(y), float(th), i, stop_s))
    return RoadMap("intersection", lanes, lights, [0, 1, 2, 3])


def merge_map(rng: np.random.Generator) -> RoadMap:
    main = _line((-90.0, 0.0), 0.0, 240.0)
    second = _line((-90.0, LANE_WIDTH), 0.0, 240.0)
    merge_x = 30.0
    ramp_len = 90.0
    phi = 0.1333
    start = (merge_x - ramp_len * np.cos(phi), -ramp_len * np.sin(phi))
    ramp = _line(start, phi, ramp_len)
    ramp[-1, :2] = (merge_x, 0.0)
    k = int(round((merge_x + 90.0) / SPACING))
    ramp_full = np.concatenate([ramp, main[k + 1:]], axis=0)
    lanes = [Lane(main), Lane(second), Lane(ramp_full)]
    # the ramp's continuation duplicates the main lane, so only its own 90 m enter the map
    ramp_lane_only = Lane(ramp)
    lanes.append(ramp_lane_only)
    return RoadMap("merge", lanes, [], [0, 1, 3])


def generate_map(kind: str, rng: np.random.Generator) -> RoadMap:
    builders = {"straight": straight_map, "curve": curve_map, "intersection": intersection_map, "merge": merge_map}
    if kind not in builders:
        raise ContractError(f"unknown map kind {kind!r}; valid kinds: {', '.join(KINDS)}")
    return builders[kind](rng)


def drivable_lanes(rm: RoadMap) -> list[int]:
    """Lanes vehicles may be spawned on."""
    return [i for i in range(len(rm.lanes)) if not (rm.kind == "merge" and i == 3)]
