"""Driving quality scoring: no-collision, drivable-area compliance, ego
progress, time-to-collision, comfort, and their gated aggregate.

Sub-scores are binary pass/fail; the aggregate multiplies the gating terms
(NC, DAC) into a weighted mean of EP, TTC, and Comfort.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenes import (A_MAX, CELL, DRIVABLE, DT, GRID, HORIZON, JERK_MAX,
                     ROUTE, X_MIN, Y_MIN, EGO_LENGTH, EGO_WIDTH)


@dataclass
class ScoreConfig:
    ttc_threshold: float = 1.0
    a_max: float = A_MAX
    jerk_max: float = JERK_MAX
    w_ep: float = 5.0
    w_ttc: float = 5.0
    w_c: float = 2.0

    def __post_init__(self):
        if min(self.w_ep, self.w_ttc, self.w_c) <= 0:
            raise ValueError("aggregation weights must be positive")


@dataclass
class SubScores:
    nc: float
    dac: float
    ep: float
    ttc: float
    c: float
    pdms: float


def _box_corners(center, heading, half_len, half_wid):
    c, s = np.cos(heading), np.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    local = np.array([[half_len, half_wid], [half_len, -half_wid],
                      [-half_len, -half_wid], [-half_len, half_wid]])
    return local @ rot.T + np.asarray(center)


def boxes_overlap(c1, h1, e1, c2, h2, e2) -> bool:
    """Oriented-rectangle overlap via the separating axis theorem."""
    p1 = _box_corners(c1, h1, e1[0], e1[1])
    p2 = _box_corners(c2, h2, e2[0], e2[1])
    for heading in (h1, h2):
        for ang in (heading, heading + np.pi / 2):
            axis = np.array([np.cos(ang), np.sin(ang)])
            a1, a2 = p1 @ axis, p2 @ axis
            if a1.max() < a2.min() or a2.max() < a1.min():
                return False
    return True


def _agents_at(agents: np.ndarray, t: float) -> np.ndarray:
    moved = agents.copy()
    moved[:, 0] += agents[:, 2] * t
    moved[:, 1] += agents[:, 3] * t
    return moved


def _ego_collides(pos, heading, agents, t) -> bool:
    for a in _agents_at(agents, t):
        if boxes_overlap(pos, heading, (EGO_LENGTH / 2, EGO_WIDTH / 2),
                         a[:2], a[6], (a[4], a[5])):
            return True
    return False


def no_collision(traj: np.ndarray, agents: np.ndarray) -> int:
    """1 iff the ego box overlaps no (linearly propagated) agent box at any
    of the waypoint timesteps."""
    if agents.shape[0] == 0:
        return 1
    for i in range(traj.shape[0]):
        t = (i + 1) * DT
        if _ego_collides(traj[i, :2], traj[i, 2], agents, t):
            return 0
    return 1


def no_collision_dense(traj: np.ndarray, agents: np.ndarray,
                       hz: float = 20.0) -> int:
    """Fine-grained oracle: linear ego interpolation from the origin pose."""
    if agents.shape[0] == 0:
        return 1
    times = np.arange(0, HORIZON + 1) * DT
    pts = np.vstack([[0.0, 0.0, 0.0], traj])
    for t in np.arange(0.0, HORIZON * DT + 1e-9, 1.0 / hz):
        x = np.interp(t, times, pts[:, 0])
        y = np.interp(t, times, pts[:, 1])
        h = np.interp(t, times, np.unwrap(pts[:, 2]))
        if _ego_collides((x, y), h, agents, t):
            return 0
    return 1


def drivable_compliance(traj: np.ndarray, semantic_map: np.ndarray) -> int:
    """1 iff every waypoint center cell is drivable (route cells count);
    waypoints outside the map fail."""
    for p in traj:
        ix = int(np.floor((p[0] - X_MIN) / CELL))
        iy = int(np.floor((p[1] - Y_MIN) / CELL))
        if not (0 <= ix < GRID and 0 <= iy < GRID):
            return 0
        if semantic_map[ix, iy] not in (DRIVABLE, ROUTE):
            return 0
    return 1


def _arclength_of(point: np.ndarray, route: np.ndarray) -> float:
    """Arclength of the closest route polyline point to ``point``."""
    seg = np.diff(route, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    best_d, best_s = np.inf, 0.0
    for i in range(len(seg)):
        L2 = seg_len[i] ** 2
        if L2 == 0:
            continue
        u = np.clip(np.dot(point - route[i], seg[i]) / L2, 0.0, 1.0)
        proj = route[i] + u * seg[i]
        d = np.hypot(*(point - proj))
        if d < best_d:
            best_d, best_s = d, cum[i] + u * seg_len[i]
    return best_s


def progress(traj: np.ndarray, route: np.ndarray,
             gt_traj: np.ndarray) -> float:
    """Projected arclength of the final waypoint relative to the ground-truth
    trajectory's arclength; clamped to [0, 1]."""
    ref = _arclength_of(gt_traj[-1, :2], route)
    if ref <= 1e-9:
        return 1.0
    got = _arclength_of(traj[-1, :2], route)
    return float(np.clip(got / ref, 0.0, 1.0))


def time_to_collision(traj: np.ndarray, agents: np.ndarray,
                      cfg: ScoreConfig) -> int:
    """1 iff projecting the ego forward at its waypoint velocity for the
    threshold horizon never produces a collision. NC failure implies 0."""
    if no_collision(traj, agents) == 0:
        return 0
    if agents.shape[0] == 0:
        return 1
    pts = np.vstack([[0.0, 0.0, 0.0], traj])
    for i in range(1, pts.shape[0]):
        t0 = i * DT
        vel = (pts[i, :2] - pts[i - 1, :2]) / DT
        for tau in np.arange(0.1, cfg.ttc_threshold + 1e-9, 0.1):
            pos = pts[i, :2] + vel * tau
            if _ego_collides(pos, pts[i, 2], agents, t0 + tau):
                return 0
    return 1


def comfort(traj: np.ndarray, cfg: ScoreConfig) -> int:
    """1 iff finite-difference acceleration and jerk magnitudes stay within
    bounds across the 8 waypoints."""
    xy = traj[:, :2]
    v = np.diff(xy, axis=0) / DT
    a = np.diff(v, axis=0) / DT
    j = np.diff(a, axis=0) / DT
    if np.hypot(a[:, 0], a[:, 1]).max(initial=0.0) > cfg.a_max:
        return 0
    if np.hypot(j[:, 0], j[:, 1]).max(initial=0.0) > cfg.jerk_max:
        return 0
    return 1


def pdms(sub: SubScores, cfg: ScoreConfig) -> float:
    """Gated weighted aggregate of the sub-scores."""
    w_sum = cfg.w_ep + cfg.w_ttc + cfg.w_c
    return sub.nc * sub.dac * (
        cfg.w_ep * sub.ep + cfg.w_ttc * sub.ttc + cfg.w_c * sub.c) / w_sum


def score_scene(traj: np.ndarray, scene, cfg: ScoreConfig) -> SubScores:
    nc = no_collision(traj, scene.agents)
    dac = drivable_compliance(traj, scene.semantic_map)
    ep = progress(traj, scene.route, scene.gt_trajectory)
    ttc = time_to_collision(traj, scene.agents, cfg)
    c = comfort(traj, cfg)
    sub = SubScores(nc=nc, dac=dac, ep=ep, ttc=ttc, c=c, pdms=0.0)
    sub.pdms = pdms(sub, cfg)
    return sub
