"""Procedural terrain heightfields: level ground, slopes, rough noise and
stairs, with bilinear height queries and the body-frame height scan used as
privileged critic input.

Grid convention: heights[ix, iy] is the height at
(origin[0] + ix * cell_size, origin[1] + iy * cell_size).
"""

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_ABS_HEIGHT = 5.0
MAX_SLOPE_ANGLE = np.deg2rad(25.0)
MAX_STAIR_RISE = 0.18
MAX_ROUGH_AMPLITUDE = 0.08

# 17 points along the heading axis, 11 across; 187 samples total.
SCAN_NX = 17
SCAN_NY = 11
SCAN_SIZE = SCAN_NX * SCAN_NY


class TerrainKind(enum.Enum):
    """Terrain classes; enum order fixes the one-hot / classifier class order."""

    LEVEL = 0
    SLOPE = 1
    ROUGH = 2
    STAIRS = 3

    @classmethod
    def from_name(cls, name: str) -> "TerrainKind":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise TerrainParameterError(f"unknown terrain kind {name!r}") from None


class TerrainParameterError(ValueError):
    pass


@dataclass
class TerrainHeightfield:
    heights: np.ndarray            # (nx, ny)
    cell_size: float
    origin: np.ndarray             # (2,) world xy of heights[0, 0]
    kind: TerrainKind
    kind_params: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def nx(self) -> int:
        return self.heights.shape[0]

    @property
    def ny(self) -> int:
        return self.heights.shape[1]


def _check_range(name: str, value: float, lo: float, hi: float) -> float:
    value = float(value)
    if not np.isfinite(value) or not lo <= value <= hi:
        raise TerrainParameterError(f"{name}={value} outside [{lo}, {hi}]")
    return value


def _value_noise(rng: np.random.Generator, xs: np.ndarray, ys: np.ndarray, spacing: float) -> np.ndarray:
    """Bilinearly interpolated random lattice; values in [-1, 1]."""
    x0, y0 = xs[0], ys[0]
    ni = int(np.floor((xs[-1] - x0) / spacing)) + 2
    nj = int(np.floor((ys[-1] - y0) / spacing)) + 2
    lattice = rng.uniform(-1.0, 1.0, size=(ni + 1, nj + 1))
    fx = (xs - x0) / spacing
    fy = (ys - y0) / spacing
    ix = np.minimum(fx.astype(int), ni - 1)
    iy = np.minimum(fy.astype(int), nj - 1)
    tx = fx - ix
    ty = fy - iy
    txg = tx[:, None]
    tyg = ty[None, :]
    v00 = lattice[np.ix_(ix, iy)]
    v10 = lattice[np.ix_(ix + 1, iy)]
    v01 = lattice[np.ix_(ix, iy + 1)]
    v11 = lattice[np.ix_(ix + 1, iy + 1)]
    return (v00 * (1 - txg) * (1 - tyg) + v10 * txg * (1 - tyg)
            + v01 * (1 - txg) * tyg + v11 * txg * tyg)


def generate_terrain(kind: TerrainKind, params: dict | None = None, seed: int = 0,
                     extent: float = 12.0, cell_size: float = 0.1) -> TerrainHeightfield:
    """Deterministic heightfield covering [-extent, extent]^2.

    Recognized params per kind:
      SLOPE  angle (rad, ascending +x), <= 25 deg
      STAIRS rise (m, <= 0.18) and run (m)
      ROUGH  amplitude (m, <= 0.08)
    """
    params = dict(params or {})
    n = int(round(2.0 * extent / cell_size)) + 1
    xs = -extent + cell_size * np.arange(n)
    ys = -extent + cell_size * np.arange(n)
    if kind is TerrainKind.LEVEL:
        heights = np.zeros((n, n))
    elif kind is TerrainKind.SLOPE:
        angle = _check_range("angle", params.get("angle", 0.2), -MAX_SLOPE_ANGLE, MAX_SLOPE_ANGLE)
        heights = np.tan(angle) * np.broadcast_to(xs[:, None], (n, n)).copy()
    elif kind is TerrainKind.STAIRS:
        rise = _check_range("rise", params.get("rise", 0.08), 0.0, MAX_STAIR_RISE)
        run = _check_range("run", params.get("run", 0.3), 0.05, 2.0)
        steps = np.floor((xs + 1e-9) / run)
        heights = rise * np.broadcast_to(steps[:, None], (n, n)).copy()
    elif kind is TerrainKind.ROUGH:
        amp = _check_range("amplitude", params.get("amplitude", 0.04), 0.0, MAX_ROUGH_AMPLITUDE)
        rng = np.random.default_rng(np.random.SeedSequence([seed, kind.value]))
        coarse = _value_noise(rng, xs, ys, spacing=1.0)
        fine = _value_noise(rng, xs, ys, spacing=0.5)
        heights = amp * (0.65 * coarse + 0.35 * fine)
    else:
        raise TerrainParameterError(f"unknown terrain kind {kind!r}")
    np.clip(heights, -MAX_ABS_HEIGHT, MAX_ABS_HEIGHT, out=heights)
    return TerrainHeightfield(heights=heights, cell_size=float(cell_size),
                              origin=np.array([-extent, -extent]), kind=kind,
                              kind_params=params, seed=int(seed))


def terrain_height_flagged(field: TerrainHeightfield, x: float, y: float) -> tuple[float, bool]:
    """Bilinear height at (x, y); out-of-bounds queries clamp to the border
    and report clamped=True."""
    fx = (x - field.origin[0]) / field.cell_size
    fy = (y - field.origin[1]) / field.cell_size
    clamped = not (0.0 <= fx <= field.nx - 1 and 0.0 <= fy <= field.ny - 1)
    fx = min(max(fx, 0.0), field.nx - 1.0)
    fy = min(max(fy, 0.0), field.ny - 1.0)
    ix = min(int(fx), field.nx - 2)
    iy = min(int(fy), field.ny - 2)
    tx = fx - ix
    ty = fy - iy
    h = (field.heights[ix, iy] * (1 - tx) * (1 - ty)
         + field.heights[ix + 1, iy] * tx * (1 - ty)
         + field.heights[ix, iy + 1] * (1 - tx) * ty
         + field.heights[ix + 1, iy + 1] * tx * ty)
    return float(h), clamped


def terrain_height(field: TerrainHeightfield, x: float, y: float) -> float:
    return terrain_height_flagged(field, x, y)[0]


def terrain_heights_batch(field: TerrainHeightfield, xy: np.ndarray) -> tuple[np.ndarray, bool]:
    """Vectorized bilinear query for an (N, 2) array of world points."""
    fx = (xy[:, 0] - field.origin[0]) / field.cell_size
    fy = (xy[:, 1] - field.origin[1]) / field.cell_size
    clamped = bool(np.any(fx < 0) or np.any(fy < 0)
                   or np.any(fx > field.nx - 1) or np.any(fy > field.ny - 1))
    fx = np.clip(fx, 0.0, field.nx - 1.0)
    fy = np.clip(fy, 0.0, field.ny - 1.0)
    ix = np.minimum(fx.astype(int), field.nx - 2)
    iy = np.minimum(fy.astype(int), field.ny - 2)
    tx = fx - ix
    ty = fy - iy
    h = (field.heights[ix, iy] * (1 - tx) * (1 - ty)
         + field.heights[ix + 1, iy] * tx * (1 - ty)
         + field.heights[ix, iy + 1] * (1 - tx) * ty
         + field.heights[ix + 1, iy + 1] * tx * ty)
    return h, clamped


def scan_offsets(spacing: float = 0.1) -> np.ndarray:
    """Body-frame xy offsets of the 187 scan points, x-major (17 x 11)."""
    xs = spacing * (np.arange(SCAN_NX) - (SCAN_NX - 1) / 2.0)
    ys = spacing * (np.arange(SCAN_NY) - (SCAN_NY - 1) / 2.0)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def height_scan(field: TerrainHeightfield, base_position: np.ndarray, base_yaw: float,
                spacing: float = 0.1) -> np.ndarray:
    """187 terrain heights sampled on a yaw-aligned grid around the base,
    expressed relative to base height (terrain - base_z)."""
    offsets = scan_offsets(spacing)
    c, s = np.cos(base_yaw), np.sin(base_yaw)
    world = np.empty_like(offsets)
    world[:, 0] = base_position[0] + c * offsets[:, 0] - s * offsets[:, 1]
    world[:, 1] = base_position[1] + s * offsets[:, 0] + c * offsets[:, 1]
    h, _ = terrain_heights_batch(field, world)
    return h - float(base_position[2])


def export_terrain_csv(field: TerrainHeightfield, path: str | Path) -> None:
    """Grid dump: one header line, then row-major heights (one x-row per line)."""
    path = Path(path)
    params = ",".join(f"{k}={float(v)!r}" for k, v in sorted(field.kind_params.items()))
    header = (f"# kind={field.kind.name} cell_size={float(field.cell_size)!r} "
              f"origin={float(field.origin[0])!r},{float(field.origin[1])!r} "
              f"nx={field.nx} ny={field.ny} seed={field.seed} params={params}")
    lines = [header]
    for ix in range(field.nx):
        lines.append(",".join(repr(float(v)) for v in field.heights[ix]))
    path.write_text("\n".join(lines) + "\n")


def load_terrain_csv(path: str | Path) -> TerrainHeightfield:
    lines = Path(path).read_text().strip().split("\n")
    fields = dict(item.split("=", 1) for item in lines[0].lstrip("# ").split(" ") if "=" in item)
    heights = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    ox, oy = fields["origin"].split(",")
    params = {}
    if fields.get("params"):
        for item in fields["params"].split(","):
            key, val = item.split("=", 1)
            params[key] = float(val)
    return TerrainHeightfield(heights=heights, cell_size=float(fields["cell_size"]),
                              origin=np.array([float(ox), float(oy)]),
                              kind=TerrainKind[fields["kind"]], kind_params=params,
                              seed=int(fields["seed"]))
