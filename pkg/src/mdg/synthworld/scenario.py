"""The scenario record: map, lights, agent histories and ground-truth futures."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

VEHICLE = 0
PEDESTRIAN = 1

ARRAY_FIELDS = ("map_polylines", "lights", "history", "future", "types", "extents", "routes")


@dataclass
class Scenario:
    scenario_id: int
    kind: str
    dt: float
    ego: int
    map_polylines: np.ndarray    # (N_m, 16, 3) x, y, heading
    lights: np.ndarray           # (N_s, 4) phase, x, y, heading of the stop point
    history: np.ndarray          # (N, H, 5) x, y, theta, vx, vy; last row is the current state
    future: np.ndarray           # (N, T, 5)
    types: np.ndarray            # (N,) int64
    extents: np.ndarray          # (N, 2) length, width
    routes: np.ndarray           # (N_r, 16, 3) ego route polylines

    @property
    def n_agents(self) -> int:
        return int(self.history.shape[0])

    @property
    def current(self) -> np.ndarray:
        return self.history[:, -1]

    def replace(self, **changes) -> "Scenario":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(changes)
        return Scenario(**vals)


def scenarios_equal(a: Scenario, b: Scenario) -> bool:
    """Deep, bitwise equality of two scenarios."""
    for f in fields(Scenario):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if f.name in ARRAY_FIELDS:
            if x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
                return False
        elif x != y:
            return False
    return True
