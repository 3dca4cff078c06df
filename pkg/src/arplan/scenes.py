"""Synthetic driving scene generation and dataset persistence.

Scenes are built in the ego frame (ego at the origin, heading +x). Each scene
carries a BEV semantic grid, deterministic BEV feature tokens derived from it,
an ego state, constant-velocity agents, a route centerline, and an 8-waypoint
ground-truth trajectory at 2 Hz that respects the same kinematic bounds the
refiner enforces.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

GENERATOR_VERSION = "scene-v1"

# Planning horizon
HORIZON = 8
DT = 0.5

# Kinematic bounds shared with the refiner and comfort scoring
KAPPA_MAX = 0.2
A_MAX = 4.0
V_MAX = 15.0
JERK_MAX = 10.0

# BEV grid: 64 m x 64 m at 2 m cells, x in [-16, 48), y in [-32, 32)
GRID = 32
CELL = 2.0
X_MIN, Y_MIN = -16.0, -32.0
C_BEV = 64           # 8 x 8 token grid, one token per 4x4 cell patch
D_FEAT = 64
PATCH = 4

# Semantic classes
NON_DRIVABLE, DRIVABLE, AGENT, ROUTE = 0, 1, 2, 3
N_CLASSES = 4

# Driving commands (one-hot index)
CMD_LEFT, CMD_STRAIGHT, CMD_RIGHT, CMD_UNKNOWN = 0, 1, 2, 3
COMMAND_NAMES = ("left", "straight", "right", "unknown")
DIRECTIONS = ("left", "straight", "right")

KINDS = ("straight", "left-turn", "right-turn", "intersection", "roundabout")

CORRIDOR_HALF = 4.0
ROUTE_HALF = 1.0

EGO_LENGTH = 4.5
EGO_WIDTH = 2.0


class DatasetFormatError(ValueError):
    """Raised when a dataset file is malformed or truncated."""


class DatasetVersionError(ValueError):
    """Raised when a dataset file was written by an incompatible generator."""


@dataclass
class EgoState:
    command: np.ndarray      # one-hot over (left, straight, right, unknown)
    velocity: np.ndarray     # m/s, ego frame
    acceleration: np.ndarray  # m/s^2

    def vector(self) -> np.ndarray:
        return np.concatenate([self.command, self.velocity, self.acceleration])


@dataclass
class Scene:
    kind: str
    behavior_label: str          # realized maneuver direction
    command_mismatch: bool
    ego: EgoState
    bev_tokens: np.ndarray       # [C_BEV, D_FEAT]
    semantic_map: np.ndarray     # [GRID, GRID] uint8
    agents: np.ndarray           # [n, 7]: x, y, vx, vy, half_len, half_wid, heading
    route: np.ndarray            # [r, 2] centerline points
    gt_trajectory: np.ndarray    # [HORIZON, 3]: x, y, heading

    def to_bytes(self) -> bytes:
        meta = {
            "kind": self.kind,
            "behavior": self.behavior_label,
            "mismatch": bool(self.command_mismatch),
            "n_agents": int(self.agents.shape[0]),
            "route_n": int(self.route.shape[0]),
        }
        parts = [json.dumps(meta, sort_keys=True).encode() + b"\n",
                 self.ego.vector().tobytes(),
                 self.bev_tokens.tobytes(),
                 self.semantic_map.astype(np.uint8).tobytes(),
                 self.agents.astype(np.float64).tobytes(),
                 self.route.astype(np.float64).tobytes(),
                 self.gt_trajectory.tobytes()]
        return b"".join(parts)

    @staticmethod
    def from_bytes(blob: bytes) -> "Scene":
        try:
            nl = blob.index(b"\n")
            meta = json.loads(blob[:nl])
            buf = blob[nl + 1:]
            off = 0

            def take(n_bytes):
                nonlocal off
                chunk = buf[off:off + n_bytes]
                if len(chunk) != n_bytes:
                    raise DatasetFormatError("scene record truncated")
                off += n_bytes
                return chunk

            ego_vec = np.frombuffer(take(8 * 8), dtype=np.float64)
            bev = np.frombuffer(take(C_BEV * D_FEAT * 8), dtype=np.float64)
            sem = np.frombuffer(take(GRID * GRID), dtype=np.uint8)
            agents = np.frombuffer(take(meta["n_agents"] * 7 * 8), dtype=np.float64)
            route = np.frombuffer(take(meta["route_n"] * 2 * 8), dtype=np.float64)
            gt = np.frombuffer(take(HORIZON * 3 * 8), dtype=np.float64)
        except (ValueError, KeyError) as exc:
            raise DatasetFormatError(f"unparseable scene record: {exc}") from exc
        ego = EgoState(command=ego_vec[:4].copy(), velocity=ego_vec[4:6].copy(),
                       acceleration=ego_vec[6:8].copy())
        return Scene(
            kind=meta["kind"], behavior_label=meta["behavior"],
            command_mismatch=meta["mismatch"], ego=ego,
            bev_tokens=bev.reshape(C_BEV, D_FEAT).copy(),
            semantic_map=sem.reshape(GRID, GRID).copy(),
            agents=agents.reshape(-1, 7).copy(),
            route=route.reshape(-1, 2).copy(),
            gt_trajectory=gt.reshape(HORIZON, 3).copy())


@dataclass
class Dataset:
    scenes: list = field(default_factory=list)
    seed: int = 0
    version: str = GENERATOR_VERSION

    def __len__(self):
        return len(self.scenes)


# ---------------------------------------------------------------------------
# Path construction


def _integrate_path(segments, ds: float = 0.05):
    """Piecewise-constant-curvature path -> dense (s, x, y, psi) samples.

    Zero-curvature paths stay exactly on the x axis (no float drift).
    """
    s_list, x_list, y_list, psi_list = [0.0], [0.0], [0.0], [0.0]
    x = y = psi = 0.0
    for length, kappa in segments:
        n = max(1, int(round(length / ds)))
        step = length / n
        for _ in range(n):
            if kappa == 0.0:
                x += step * np.cos(psi)
                y += step * np.sin(psi)
            else:
                psi_new = psi + kappa * step
                x += (np.sin(psi_new) - np.sin(psi)) / kappa
                y += (np.cos(psi) - np.cos(psi_new)) / kappa
                psi = psi_new
            s_list.append(s_list[-1] + step)
            x_list.append(x)
            y_list.append(y)
            psi_list.append(psi)
    return (np.asarray(s_list), np.asarray(x_list),
            np.asarray(y_list), np.asarray(psi_list))


def _sample_path(path, s_query):
    s, x, y, psi = path
    xq = np.interp(s_query, s, x)
    yq = np.interp(s_query, s, y)
    pq = np.interp(s_query, s, psi)
    return np.stack([xq, yq, pq], axis=-1)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(-np.asarray(a) + np.pi, 2.0 * np.pi)
    return -(w - np.pi)


def _plan_kind(rng, kind, direction):
    """Pick segments, realized direction, and a speed profile for a scene kind."""
    if kind == "straight":
        # cap the speed so the 4 s rollout (v0*4 + 0.5*a*16 m) stays inside
        # the mapped region; x spans [-16, 48)
        v0 = rng.uniform(3.0, 10.9)
        a_lon = rng.uniform(-0.4, 0.4)
        return [(70.0, 0.0)], "straight", v0, a_lon
    if kind in ("left-turn", "right-turn"):
        realized = "left" if kind == "left-turn" else "right"
        dpsi = rng.uniform(0.58, 1.45)
        v0 = rng.uniform(2.6, min(8.0, 11.0 / dpsi))
        kappa = dpsi / (4.0 * v0)
        sign = 1.0 if realized == "left" else -1.0
        return ([(dpsi / kappa, sign * kappa), (20.0, 0.0)], realized, v0, 0.0)
    if kind == "intersection":
        realized = direction if direction else rng.choice(DIRECTIONS)
        v0 = rng.uniform(3.0, 5.0)
        if realized == "straight":
            return [(60.0, 0.0)], realized, v0, 0.0
        lead = rng.uniform(2.0, 5.0)
        dpsi = rng.uniform(1.2, 1.5)
        kappa = min(0.18, 3.0 / v0 ** 2, 4.5 / v0 ** 2) * rng.uniform(0.6, 0.95)
        sign = 1.0 if realized == "left" else -1.0
        return ([(lead, 0.0), (dpsi / kappa, sign * kappa), (20.0, 0.0)],
                realized, v0, 0.0)
    if kind == "roundabout":
        v0 = rng.uniform(2.8, 4.2)
        lead = rng.uniform(2.0, 4.0)
        kappa = rng.uniform(0.12, min(0.16, 3.0 / v0 ** 2, 4.5 / v0 ** 2))
        sweep = rng.uniform(1.6, 2.4)
        return ([(lead, 0.0), (sweep / kappa, kappa), (20.0, 0.0)],
                "left", v0, 0.0)
    raise ValueError(f"unknown scene kind: {kind!r}")


# ---------------------------------------------------------------------------
# Rasterization and BEV tokens


def _cell_centers():
    idx = (np.arange(GRID) + 0.5) * CELL
    xs = X_MIN + idx
    ys = Y_MIN + idx
    return np.meshgrid(xs, ys, indexing="ij")  # [GRID, GRID] each, x-major


def cell_of(x: float, y: float):
    """Half-open cell ownership: [lo, hi) in both axes."""
    ix = int(np.floor((x - X_MIN) / CELL))
    iy = int(np.floor((y - Y_MIN) / CELL))
    return ix, iy


def _rasterize(route: np.ndarray, agents: np.ndarray) -> np.ndarray:
    cx, cy = _cell_centers()
    pts = np.stack([cx.ravel(), cy.ravel()], axis=1)
    d2 = ((pts[:, None, :] - route[None, :, :]) ** 2).sum(axis=2)
    dmin = np.sqrt(d2.min(axis=1)).reshape(GRID, GRID)
    grid = np.full((GRID, GRID), NON_DRIVABLE, dtype=np.uint8)
    grid[dmin <= CORRIDOR_HALF] = DRIVABLE
    grid[dmin <= ROUTE_HALF] = ROUTE
    for a in agents:
        x, y, _, _, hl, hw, hd = a
        c, s = np.cos(hd), np.sin(hd)
        corners_local = np.array([[hl, hw], [hl, -hw], [-hl, hw], [-hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        corners = corners_local @ rot.T + np.array([x, y])
        lo = np.floor((corners.min(axis=0) - np.array([X_MIN, Y_MIN])) / CELL)
        hi = np.floor((corners.max(axis=0) - np.array([X_MIN, Y_MIN])) / CELL)
        ix0, iy0 = np.clip(lo.astype(int), 0, GRID - 1)
        ix1, iy1 = np.clip(hi.astype(int), 0, GRID - 1)
        grid[ix0:ix1 + 1, iy0:iy1 + 1] = AGENT
    return grid


def _projection_matrix(version: str):
    digest = hashlib.sha256(version.encode()).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0 / np.sqrt(7.0), size=(7, D_FEAT))
    b = rng.normal(0.0, 0.1, size=D_FEAT)
    return w, b


def encode_bev(semantic_map: np.ndarray, agents: np.ndarray,
               version: str = GENERATOR_VERSION) -> np.ndarray:
    """Deterministic BEV tokens: per-patch pooled stats through a fixed projection."""
    n_tok_side = GRID // PATCH
    feats = np.zeros((n_tok_side, n_tok_side, 7))
    onehot = np.eye(N_CLASSES)[semantic_map.astype(int)]
    for i in range(n_tok_side):
        for j in range(n_tok_side):
            patch = onehot[i * PATCH:(i + 1) * PATCH, j * PATCH:(j + 1) * PATCH]
            feats[i, j, :4] = patch.mean(axis=(0, 1))
    for a in agents:
        ix, iy = cell_of(a[0], a[1])
        if 0 <= ix < GRID and 0 <= iy < GRID:
            pi, pj = ix // PATCH, iy // PATCH
            feats[pi, pj, 4] += 0.25
            feats[pi, pj, 5] += a[2] / 10.0
            feats[pi, pj, 6] += a[3] / 10.0
    w, b = _projection_matrix(version)
    tokens = np.tanh(feats.reshape(C_BEV, 7) @ w + b)
    return tokens


# ---------------------------------------------------------------------------
# Scene generation


def _place_agents(rng, path, gt_xy, v0):
    s, x, y, psi = path
    agents = []
    for _ in range(int(rng.integers(0, 5))):
        s_a = rng.uniform(5.0, 35.0)
        lat = rng.uniform(5.0, 9.0) * (1.0 if rng.random() < 0.5 else -1.0)
        base = _sample_path(path, np.array([s_a]))[0]
        nx, ny = -np.sin(base[2]), np.cos(base[2])
        pos = np.array([base[0] + lat * nx, base[1] + lat * ny])
        speed = rng.uniform(0.0, 6.0)
        vel = speed * np.array([np.cos(base[2]), np.sin(base[2])])
        half = np.array([rng.uniform(1.8, 2.4), rng.uniform(0.8, 1.0)])
        agent = np.array([pos[0], pos[1], vel[0], vel[1], half[0], half[1], base[2]])
        for _ in range(4):
            if _clear_of_ego(agent, gt_xy):
                agents.append(agent)
                break
            lat += np.sign(lat) * 4.0
            agent = agent.copy()
            agent[0] = base[0] + lat * nx
            agent[1] = base[1] + lat * ny
    if agents:
        return np.stack(agents)
    return np.zeros((0, 7))


def _clear_of_ego(agent, gt_xy, clearance: float = 5.2) -> bool:
    t = np.arange(0.0, HORIZON * DT + 1e-9, 0.05)
    ego_t = np.vstack([[0.0, 0.0], gt_xy])
    ego_times = np.arange(0, HORIZON + 1) * DT
    ex = np.interp(t, ego_times, ego_t[:, 0])
    ey = np.interp(t, ego_times, ego_t[:, 1])
    ax = agent[0] + agent[2] * t
    ay = agent[1] + agent[3] * t
    d = np.hypot(ex - ax, ey - ay)
    return bool(d.min() > clearance)


def generate_scene(seed, kind: str, direction: str | None = None,
                   mismatch: bool = False) -> Scene:
    """Build one deterministic scene of the given kind.

    ``seed`` may be an int or a seed sequence list. ``mismatch`` forces the
    driving command to contradict the realized behavior.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown scene kind: {kind!r}")
    rng = np.random.default_rng(seed)
    segments, realized, v0, a_lon = _plan_kind(rng, kind, direction)
    path = _integrate_path(segments)

    t = np.arange(1, HORIZON + 1) * DT
    s_query = np.minimum(v0 * t + 0.5 * a_lon * t * t, path[0][-1])
    gt = _sample_path(path, s_query)
    gt[:, 2] = wrap_angle(gt[:, 2])

    route_s = np.arange(0.0, min(path[0][-1], 60.0), 0.5)
    route = _sample_path(path, route_s)[:, :2]

    agents = _place_agents(rng, path, gt[:, :2], v0)
    semantic_map = _rasterize(route, agents)
    bev_tokens = encode_bev(semantic_map, agents)

    true_cmd = DIRECTIONS.index(realized)
    if mismatch:
        choices = [i for i in range(4) if i != true_cmd]
        cmd = int(rng.choice(choices))
    else:
        cmd = true_cmd
    command = np.zeros(4)
    command[cmd] = 1.0
    ego = EgoState(command=command, velocity=np.array([v0, 0.0]),
                   acceleration=np.array([a_lon, 0.0]))
    return Scene(kind=kind, behavior_label=realized, command_mismatch=mismatch,
                 ego=ego, bev_tokens=bev_tokens, semantic_map=semantic_map,
                 agents=agents, route=route, gt_trajectory=gt)


_KIND_BY_DIRECTION = {
    "straight": (("straight", "intersection"), (0.8, 0.2)),
    "left": (("left-turn", "intersection", "roundabout"), (0.6, 0.25, 0.15)),
    "right": (("right-turn", "intersection"), (0.7, 0.3)),
}


def generate_dataset(n: int, seed: int, mismatch_rate: float = 0.0) -> Dataset:
    """Generate ``n`` scenes with imbalanced maneuver directions (5:2:1
    straight:left:right) and a ``mismatch_rate`` fraction of contradictory
    driving commands."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    if not 0.0 <= mismatch_rate <= 1.0:
        raise ValueError("mismatch_rate must lie in [0, 1]")
    rng = np.random.default_rng([seed, 0xD5])
    scenes = []
    for i in range(n):
        direction = rng.choice(("straight", "left", "right"),
                               p=(0.625, 0.25, 0.125))
        kinds, probs = _KIND_BY_DIRECTION[direction]
        kind = rng.choice(kinds, p=probs)
        mismatch = bool(rng.random() < mismatch_rate)
        scenes.append(generate_scene([seed, i], str(kind),
                                     direction=str(direction), mismatch=mismatch))
    return Dataset(scenes=scenes, seed=seed)


# ---------------------------------------------------------------------------
# Persistence: JSON text header + length-prefixed binary scene records


def save_dataset(dataset: Dataset, path) -> None:
    header = {"version": dataset.version, "seed": dataset.seed,
              "n": len(dataset.scenes), "d_feat": D_FEAT, "c_bev": C_BEV}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for scene in dataset.scenes:
            blob = scene.to_bytes()
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"bad dataset header: {exc}") from exc
        if header.get("version") != GENERATOR_VERSION:
            raise DatasetVersionError(
                f"dataset version {header.get('version')!r} is incompatible "
                f"with generator {GENERATOR_VERSION!r}")
        scenes = []
        for _ in range(int(header["n"])):
            raw_len = fh.read(4)
            if len(raw_len) != 4:
                raise DatasetFormatError("dataset truncated: missing record length")
            (blob_len,) = struct.unpack("<I", raw_len)
            blob = fh.read(blob_len)
            if len(blob) != blob_len:
                raise DatasetFormatError("dataset truncated: short scene record")
            scenes.append(Scene.from_bytes(blob))
    return Dataset(scenes=scenes, seed=int(header["seed"]),
                   version=header["version"])
