"""Truncated signed distance grids and the procedural synthetic corpus."""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import map_coordinates

from ._typings import FloatArray, PointArray, Shape3, SlotsT
from .errors import EmptySurfaceError, NonFiniteError, ShapeError, SpecError
from .helper import Helper

__all__ = [
    "DEFAULT_TRUNCATION",
    "KINDS",
    "NOISE_KINDS",
    "ShapeSpec",
    "SurfacePointSet",
    "TsdfGrid",
    "add_noise",
    "generate_shape",
    "grid_centers",
    "make_corpus",
    "normalize_points",
    "sample_surface_points",
    "truncate_and_normalize",
]

logger = logging.getLogger(__name__)

DEFAULT_TRUNCATION: float = 0.2
CUBE_LIMIT: float = 0.9
KINDS: Tuple[str, str, str] = ("box", "cylinder", "union")
NOISE_KINDS: Tuple[str, str] = ("gaussian", "uniform")


def grid_centers(extent: int) -> FloatArray:
    """Cell centre coordinates of one axis of an extent-voxel grid over [-1, 1]"""
    return -1.0 + (np.arange(extent) + 0.5) * (2.0 / extent)


class TsdfGrid:
    """Dense (H, W, D) truncated signed distance grid indexed [x, y, z] over [-1, 1]³"""

    __slots__: SlotsT = ["__weakref__", "values", "truncation"]

    def __init__(self, values: Any, truncation: float = DEFAULT_TRUNCATION) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3:
            raise ShapeError(f"TsdfGrid needs a 3-d array, got shape {values.shape}")
        if truncation <= 0:
            raise ValueError(f"truncation must be positive: {truncation}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("TsdfGrid values must be finite")
        if values.size and (values.min() < -truncation or values.max() > truncation):
            raise ValueError(
                f"TsdfGrid values outside [-{truncation}, {truncation}]: "
                f"{values.min()}..{values.max()}"
            )
        self.values: FloatArray = values
        self.truncation: float = float(truncation)

    @property
    def dims(self) -> Shape3:
        h, w, d = self.values.shape
        return h, w, d

    @property
    def spacing(self) -> float:
        """Largest voxel edge length in normalized units"""
        return 2.0 / min(self.dims)

    def check_divisible(self, edge: int) -> None:
        if any(extent % edge for extent in self.dims):
            raise ShapeError(f"grid dims {self.dims} are not divisible by patch edge {edge}")

    def interpolate(self, points: PointArray) -> FloatArray:
        """Trilinear interpolation at (n, 3) world coordinates"""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        coords = [
            (pts[:, axis] + 1.0) * (extent / 2.0) - 0.5
            for axis, extent in enumerate(self.dims)
        ]
        return map_coordinates(self.values, coords, order=1, mode="nearest")

    def negated(self) -> "TsdfGrid":
        return TsdfGrid(-self.values, self.truncation)

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, TsdfGrid):
            return NotImplemented
        return self.truncation == other.truncation and np.array_equal(
            self.values, other.values
        )

    def __str__(self) -> str:
        return f"TsdfGrid(dims={self.dims}, truncation={self.truncation})"

    def __repr__(self) -> str:
        return self.__str__()


class SurfacePointSet:
    __slots__: SlotsT = ["__weakref__", "points"]

    def __init__(self, points: Any) -> None:
        self.points: PointArray = np.asarray(points, dtype=np.float64).reshape(-1, 3)

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def __len__(self) -> int:
        return self.count

    def __array__(self, dtype: Optional[np.dtype] = None) -> np.ndarray:
        return self.points if dtype is None else self.points.astype(dtype)

    def __str__(self) -> str:
        return f"SurfacePointSet(count={self.count})"

    def __repr__(self) -> str:
        return self.__str__()


class ShapeSpec:
    """Analytic solid: an axis-aligned box, a z-axis cylinder or the union of two solids

    Box params: ``center`` and ``half``. Cylinder params: ``center``, ``radius``
    and ``half_height``. A union keeps its two members in ``parts``.
    """

    __slots__: SlotsT = ["__weakref__", "kind", "params", "parts", "class_label", "classes"]

    def __init__(
        self,
        kind: str,
        params: Optional[Dict[str, Any]] = None,
        class_label: int = 0,
        classes: int = 1,
        parts: Sequence["ShapeSpec"] = (),
    ) -> None:
        if kind not in KINDS:
            raise SpecError(f"unknown shape kind {kind!r}, expected one of {KINDS}")
        self.kind: str = kind
        self.params: Dict[str, Any] = {
            k: np.asarray(v, dtype=np.float64) for k, v in (params or {}).items()
        }
        self.parts: Tuple["ShapeSpec", ...] = tuple(parts)
        self.class_label: int = int(class_label)
        self.classes: int = int(classes)

    @classmethod
    def box(cls, center: Sequence[float], half: Sequence[float], **kwargs: Any) -> "ShapeSpec":
        return cls("box", dict(center=center, half=half), **kwargs)

    @classmethod
    def cylinder(
        cls, center: Sequence[float], radius: float, half_height: float, **kwargs: Any
    ) -> "ShapeSpec":
        return cls(
            "cylinder", dict(center=center, radius=radius, half_height=half_height), **kwargs
        )

    @classmethod
    def union(cls, first: "ShapeSpec", second: "ShapeSpec", **kwargs: Any) -> "ShapeSpec":
        return cls("union", parts=(first, second), **kwargs)

    @classmethod
    def random(cls, rng: np.random.Generator, class_label: int, classes: int) -> "ShapeSpec":
        """Draw a spec whose kind is fixed by the class so classes differ in geometry"""
        kind = KINDS[class_label % len(KINDS)]
        jitter = rng.uniform(-0.15, 0.15, size=3)
        if kind == "box":
            return cls.box(
                jitter, rng.uniform(0.25, 0.6, size=3), class_label=class_label, classes=classes
            )
        if kind == "cylinder":
            return cls.cylinder(
                jitter,
                rng.uniform(0.25, 0.55),
                rng.uniform(0.3, 0.65),
                class_label=class_label,
                classes=classes,
            )
        small = rng.uniform(-0.05, 0.05, size=3)
        base = cls.box(
            np.array([0.0, 0.0, -0.2]) + small,
            [rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6), rng.uniform(0.15, 0.25)],
        )
        top = cls.cylinder(
            np.array([small[0], small[1], 0.25]), rng.uniform(0.15, 0.3), rng.uniform(0.2, 0.35)
        )
        return cls.union(base, top, class_label=class_label, classes=classes)

    def bounds(self) -> Tuple[FloatArray, FloatArray]:
        if self.kind == "box":
            c, h = self.params["center"], np.abs(self.params["half"])
            return c - h, c + h
        if self.kind == "cylinder":
            c = self.params["center"]
            r, hh = float(self.params["radius"]), float(self.params["half_height"])
            ext = np.array([r, r, hh])
            return c - ext, c + ext
        lows, highs = zip(*(p.bounds() for p in self.parts))
        return np.min(lows, axis=0), np.max(highs, axis=0)

    def validate(self) -> None:
        if not 0 <= self.class_label < self.classes:
            raise SpecError(f"class label {self.class_label} not in [0, {self.classes})")
        if self.kind == "union" and len(self.parts) != 2:
            raise SpecError(f"a union needs two parts, got {len(self.parts)}")
        low, high = self.bounds()
        if np.any(low <= -CUBE_LIMIT) or np.any(high >= CUBE_LIMIT):
            raise SpecError(
                f"{self.kind} with bounds {low.tolist()}..{high.tolist()} leaves (-{CUBE_LIMIT}, {CUBE_LIMIT})³"
            )

    def sdf(self, points: PointArray) -> FloatArray:
        """Signed distance at (..., 3) points, negative inside"""
        p = np.asarray(points, dtype=np.float64)
        if self.kind == "box":
            q = np.abs(p - self.params["center"]) - np.abs(self.params["half"])
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        if self.kind == "cylinder":
            c = self.params["center"]
            radial = np.linalg.norm(p[..., :2] - c[:2], axis=-1) - float(self.params["radius"])
            axial = np.abs(p[..., 2] - c[2]) - float(self.params["half_height"])
            d = np.stack([radial, axial], axis=-1)
            return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        return np.minimum(self.parts[0].sdf(p), self.parts[1].sdf(p))

    def __str__(self) -> str:
        params = {k: np.round(v, 4).tolist() for k, v in self.params.items()}
        return f"ShapeSpec(kind={self.kind}, params={params}, parts={list(self.parts)}, class_label={self.class_label})"

    def __repr__(self) -> str:
        return self.__str__()


def truncate_and_normalize(
    raw: Union[FloatArray, TsdfGrid], threshold: float = DEFAULT_TRUNCATION
) -> TsdfGrid:
    """Clamp raw signed distances to [-threshold, threshold]"""
    if threshold <= 0:
        raise ValueError(f"threshold must be positive: {threshold}")
    values = raw.values if isinstance(raw, TsdfGrid) else np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("raw distance grid contains non-finite values")
    return TsdfGrid(np.clip(values, -threshold, threshold), threshold)


def generate_shape(
    spec: ShapeSpec,
    dims: Sequence[int] = (16, 16, 16),
    truncation: float = DEFAULT_TRUNCATION,
    patch_edge: int = 1,
) -> TsdfGrid:
    """Sample the analytic signed distance of spec at cell centres and truncate it

    :param spec: The solid
    :param dims: Voxel counts (H, W, D)
    :param truncation: Truncation threshold τ
    :param patch_edge: The dims must be divisible by this patch edge
    """
    if truncation <= 0:
        raise ValueError(f"truncation must be positive: {truncation}")
    if any(int(extent) % patch_edge for extent in dims):
        raise ShapeError(f"dims {tuple(dims)} are not divisible by patch edge {patch_edge}")
    spec.validate()
    axes = [grid_centers(int(extent)) for extent in dims]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return truncate_and_normalize(spec.sdf(points), truncation)


def _edge_crossings(grid: TsdfGrid) -> PointArray:
    values = grid.values
    axes = [grid_centers(extent) for extent in grid.dims]
    found: List[PointArray] = []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        v0, v1 = values[tuple(lo)], values[tuple(hi)]
        crossing = (v0 < 0) != (v1 < 0)
        if not crossing.any():
            continue
        idx = np.nonzero(crossing)
        a, b = v0[idx], v1[idx]
        frac = a / (a - b)
        pts = np.stack([axes[k][idx[k]] for k in range(3)], axis=-1)
        pts[:, axis] += frac * (axes[axis][1] - axes[axis][0])
        found.append(pts)
    if not found:
        return np.zeros((0, 3))
    return np.concatenate(found, axis=0)


def sample_surface_points(grid: TsdfGrid, n: int, seed: int) -> SurfacePointSet:
    """Draw n points from the zero crossings of the grid

    Crossings are located on the edges between neighbouring cell centres with
    a sign change and refined by linear interpolation along the edge, so the
    trilinear field vanishes at every returned point.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1: {n}")
    crossings = _edge_crossings(grid)
    if crossings.shape[0] == 0:
        raise EmptySurfaceError(f"{grid} has no zero crossing")
    rng = Helper.rng(seed)
    replace = n > crossings.shape[0]
    chosen = rng.choice(crossings.shape[0], size=n, replace=replace)
    return SurfacePointSet(crossings[chosen])


def add_noise(grid: TsdfGrid, alpha: float, kind: str = "gaussian", seed: int = 0) -> TsdfGrid:
    """X + alpha * eps with standard normal or U(-1, 1) eps, truncated again"""
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}, expected one of {NOISE_KINDS}")
    rng = Helper.rng(seed)
    if kind == "gaussian":
        eps = rng.standard_normal(grid.dims)
    else:
        eps = rng.uniform(-1.0, 1.0, size=grid.dims)
    return truncate_and_normalize(grid.values + alpha * eps, grid.truncation)


def normalize_points(
    clouds: Sequence[Union[PointArray, SurfacePointSet]], mode: str = "unit-cube"
) -> List[PointArray]:
    """Normalize a population of point clouds

    ``unit-cube`` leaves grid derived points as they are, they already live in
    [-1, 1]³. ``dataset`` recentres every cloud on the population centroid and
    divides by the largest radius seen across the population.
    """
    arrays = [np.asarray(c, dtype=np.float64) for c in clouds]
    if mode == "unit-cube":
        return arrays
    if mode != "dataset":
        raise ValueError(f"unknown normalization mode {mode!r}")
    stacked = np.concatenate(arrays, axis=0)
    centroid = stacked.mean(axis=0)
    radius = float(np.linalg.norm(stacked - centroid, axis=-1).max()) or 1.0
    return [(a - centroid) / radius for a in arrays]


def make_corpus(
    count: int,
    classes: int,
    dims: Sequence[int] = (16, 16, 16),
    seed: int = 0,
    truncation: float = DEFAULT_TRUNCATION,
    threads: int = 1,
    progress: bool = True,
) -> List[Tuple[TsdfGrid, int]]:
    """Deterministic class balanced corpus; shape i has label i % classes

    Every shape draws its spec from a seed derived from (seed, "corpus", i),
    so the output does not depend on the thread count.
    """
    if count < 1 or classes < 1:
        raise ValueError(f"count and classes must be positive: {count}, {classes}")

    def _one(i: int) -> Tuple[TsdfGrid, int]:
        label = i % classes
        rng = Helper.rng(Helper.derive_seed(seed, "corpus", i))
        spec = ShapeSpec.random(rng, label, classes)
        return generate_shape(spec, dims, truncation), label

    indices = Helper.progress(range(count), "corpus", total=count, disable=not progress)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            corpus = list(pool.map(_one, indices))
    else:
        corpus = [_one(i) for i in indices]
    logger.info("generated %d shapes over %d classes at %s", count, classes, tuple(dims))
    return corpus
