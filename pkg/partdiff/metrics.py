"""Point set distances, generation and completion metrics, and DCT spectra."""
import logging
from concurrent.futures import ThreadPoolExecutor
from itertools import combinations
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import ujson
from scipy.fft import dctn
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist, directed_hausdorff

from ._typings import FloatArray, PointArray, SlotsT
from .errors import EmptySurfaceError, ShapeError
from .helper import Helper
from .shape_corpus import SurfacePointSet, TsdfGrid, normalize_points, sample_surface_points

__all__ = [
    "DISTANCES",
    "MAX_EMD_POINTS",
    "MetricReport",
    "SpectralDensity",
    "band_power",
    "chamfer",
    "dct_psd",
    "emd",
    "evaluate_completion",
    "evaluate_generation",
    "mean_top_band_power",
    "mmd_amd",
    "one_nna",
    "pairwise",
    "read_reports",
    "tmd",
    "uhd",
    "write_reports",
]

logger = logging.getLogger(__name__)

PointsLike = Union[SurfacePointSet, PointArray, Sequence[Sequence[float]]]
Distance = Callable[[PointsLike, PointsLike], float]

MAX_EMD_POINTS: int = 512


def _points(x: PointsLike, name: str = "point set") -> PointArray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty (n, d) array, got shape {arr.shape}")
    return arr


def chamfer(x: PointsLike, y: PointsLike) -> float:
    """Mean squared nearest neighbour distance, summed over both directions"""
    a, b = _points(x, "X"), _points(y, "Y")
    d = cdist(a, b, "sqeuclidean")
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def emd(x: PointsLike, y: PointsLike) -> float:
    """Exact earth mover distance: optimal perfect matching cost over |X|"""
    a, b = _points(x, "X"), _points(y, "Y")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"EMD needs equal sizes, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] > MAX_EMD_POINTS:
        raise ValueError(f"exact EMD is limited to {MAX_EMD_POINTS} points, got {a.shape[0]}")
    cost = cdist(a, b, "euclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / a.shape[0])


DISTANCES: Dict[str, Distance] = {"CD": chamfer, "EMD": emd}


def _distance(kind: str) -> Distance:
    try:
        return DISTANCES[kind.upper()]
    except KeyError:
        raise ValueError(f"unknown distance {kind!r}, expected one of {sorted(DISTANCES)}")


def pairwise(
    first: Sequence[PointsLike],
    second: Optional[Sequence[PointsLike]] = None,
    kind: str = "CD",
    threads: int = 1,
) -> FloatArray:
    """Distance matrix between two populations, or within one when second is None

    Entries are computed independently, so the result does not depend on threads.
    """
    fn = _distance(kind)
    symmetric = second is None
    other = first if second is None else second
    out = np.zeros((len(first), len(other)))
    if symmetric:
        pairs = list(combinations(range(len(first)), 2))
    else:
        pairs = [(i, j) for i in range(len(first)) for j in range(len(other))]

    def _one(pair: Tuple[int, int]) -> float:
        return fn(first[pair[0]], other[pair[1]])

    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(_one, pairs))
    else:
        values = [_one(p) for p in pairs]
    for (i, j), value in zip(pairs, values):
        out[i, j] = value
        if symmetric:
            out[j, i] = value
    return out


def one_nna(
    generated: Sequence[PointsLike],
    reference: Sequence[PointsLike],
    kind: str = "CD",
    threads: int = 1,
) -> float:
    """Leave-one-out accuracy of the 1-nearest-neighbour classifier on the pooled populations

    0.5 means the populations are indistinguishable. Ties go to the lowest
    pooled index.
    """
    if len(generated) < 2 or len(reference) < 2:
        raise ValueError("1-NNA needs at least 2 sets in each population")
    pooled = list(generated) + list(reference)
    labels = np.array([0] * len(generated) + [1] * len(reference))
    d = pairwise(pooled, kind=kind, threads=threads)
    np.fill_diagonal(d, np.inf)
    nearest = np.argmin(d, axis=1)
    return float(np.mean(labels[nearest] == labels))


def mmd_amd(
    completions: Sequence[Sequence[PointsLike]],
    references: Sequence[PointsLike],
    kind: str = "CD",
) -> Tuple[float, float]:
    """(MMD, AMD): per reference the min and the mean distance over its completions, averaged"""
    if len(completions) != len(references):
        raise ValueError(f"{len(completions)} completion groups for {len(references)} references")
    if not references:
        raise ValueError("no references")
    fn = _distance(kind)
    mins, means = [], []
    for group, ref in zip(completions, references):
        if not group:
            raise ValueError("every reference needs at least one completion")
        dists = [fn(c, ref) for c in group]
        mins.append(min(dists))
        means.append(float(np.mean(dists)))
    return float(np.mean(mins)), float(np.mean(means))


def tmd(completions: Sequence[PointsLike], kind: str = "CD") -> float:
    """Mean pairwise distance over all unordered pairs of completions"""
    if len(completions) < 2:
        raise ValueError("TMD needs at least 2 completions")
    fn = _distance(kind)
    return float(np.mean([fn(a, b) for a, b in combinations(completions, 2)]))


def uhd(partial: PointsLike, completions: Sequence[PointsLike]) -> float:
    """Mean directed Hausdorff distance from the partial input to each completion"""
    if not completions:
        raise ValueError("UHD needs at least 1 completion")
    p = _points(partial, "partial")
    return float(np.mean([directed_hausdorff(p, _points(c, "completion"))[0] for c in completions]))


class SpectralDensity:
    """Power of the orthonormal 3-d DCT-II binned into octave bands of radial frequency

    Band 0 holds the DC coefficient; band b >= 1 holds coefficients whose index
    norm r satisfies 2**(b-1) <= r < 2**b.
    """

    __slots__: SlotsT = ["__weakref__", "power", "counts", "total", "signal_energy"]

    def __init__(self, power: FloatArray, counts: Any, total: float, signal_energy: float) -> None:
        self.power: FloatArray = power
        self.counts: np.ndarray = np.asarray(counts, dtype=np.int64)
        self.total: float = total
        self.signal_energy: float = signal_energy

    @property
    def bands(self) -> int:
        return int(self.power.size)

    @property
    def mean_power(self) -> FloatArray:
        return self.power / np.maximum(self.counts, 1)

    def parseval_error(self) -> float:
        return abs(self.total - self.signal_energy) / max(self.signal_energy, 1e-300)

    def to_dict(self) -> Dict[str, Any]:
        return dict(
            power=self.power.tolist(),
            mean_power=self.mean_power.tolist(),
            counts=self.counts.tolist(),
            total=self.total,
        )

    def __str__(self) -> str:
        return f"SpectralDensity(bands={self.bands}, total={self.total:.6g})"

    def __repr__(self) -> str:
        return self.__str__()


def _band_index(dims: Sequence[int]) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    radius = np.sqrt(sum(g.astype(np.float64) ** 2 for g in grids))
    band = np.zeros(radius.shape, dtype=np.int64)
    nonzero = radius > 0
    band[nonzero] = np.floor(np.log2(radius[nonzero])).astype(np.int64) + 1
    return band


def dct_psd(grid: Union[TsdfGrid, FloatArray]) -> SpectralDensity:
    values = grid.values if isinstance(grid, TsdfGrid) else np.asarray(grid, dtype=np.float64)
    if values.ndim != 3 or len(set(values.shape)) != 1:
        raise ShapeError(f"dct_psd needs a cubic grid, got shape {values.shape}")
    coef = dctn(values, type=2, norm="ortho")
    energy = coef * coef
    band = _band_index(values.shape)
    count = int(band.max()) + 1
    power = np.bincount(band.reshape(-1), weights=energy.reshape(-1), minlength=count)
    counts = np.bincount(band.reshape(-1), minlength=count)
    return SpectralDensity(power, counts, float(energy.sum()), float(np.sum(values * values)))


def band_power(psd: SpectralDensity, band: int = -1) -> float:
    """Mean per-coefficient power of one band, the top band by default"""
    return float(psd.mean_power[band])


def mean_top_band_power(grids: Sequence[Union[TsdfGrid, FloatArray]]) -> float:
    if not grids:
        raise ValueError("no grids")
    return float(np.mean([band_power(dct_psd(g)) for g in grids]))


class MetricReport:
    __slots__: SlotsT = ["__weakref__", "name", "value", "sizes", "distance", "params"]

    def __init__(
        self,
        name: str,
        value: float,
        sizes: Sequence[int] = (),
        distance: str = "CD",
        params: Optional[Dict[str, Any]] = None,
    ) -> None:
        self.name: str = name
        self.value: float = float(value)
        self.sizes: Tuple[int, ...] = tuple(int(s) for s in sizes)
        self.distance: str = distance
        self.params: Dict[str, Any] = dict(params or {})

    def param_string(self) -> str:
        fields = dict(distance=self.distance, sizes="x".join(str(s) for s in self.sizes))
        fields.update(self.params)
        return ",".join(f"{k}={v}" for k, v in sorted(fields.items()))

    def line(self) -> str:
        return f"{self.name}\t{self.value!r}\t{self.param_string()}"

    def to_dict(self) -> Dict[str, Any]:
        return dict(
            name=self.name,
            value=self.value,
            sizes=list(self.sizes),
            distance=self.distance,
            params=self.params,
        )

    def __str__(self) -> str:
        return f"MetricReport({self.line()!r})"

    def __repr__(self) -> str:
        return self.__str__()


def write_reports(path: Union[str, Path], reports: Sequence[MetricReport]) -> Tuple[Path, Path]:
    """metric<TAB>value<TAB>params lines at path and a JSON table next to it"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text("".join(r.line() + "\n" for r in reports), encoding="utf-8")
    table = target.with_suffix(".json")
    table.write_text(ujson.dumps([r.to_dict() for r in reports], indent=2) + "\n", encoding="utf-8")
    return target, table


def read_reports(path: Union[str, Path]) -> List[MetricReport]:
    rows = ujson.loads(Path(path).with_suffix(".json").read_text(encoding="utf-8"))
    return [
        MetricReport(r["name"], r["value"], r["sizes"], r["distance"], r["params"]) for r in rows
    ]


def _clouds(grids: Sequence[TsdfGrid], points: int, seed: int, component: str) -> List[PointArray]:
    return [
        np.asarray(sample_surface_points(g, points, Helper.derive_seed(seed, component, i)))
        for i, g in enumerate(grids)
    ]


def _surviving_clouds(
    grids: Sequence[TsdfGrid], points: int, seed: int, component: str
) -> Tuple[List[PointArray], int]:
    """Clouds of the grids that have a surface, and how many grids were skipped

    A grid without a zero crossing is logged, counted and left out.
    """
    clouds: List[PointArray] = []
    skipped = 0
    for i, g in enumerate(grids):
        try:
            clouds.append(np.asarray(sample_surface_points(g, points, Helper.derive_seed(seed, component, i))))
        except EmptySurfaceError:
            logger.warning("%s %d has no zero crossing, skipping it", component, i)
            skipped += 1
    return clouds, skipped


def evaluate_generation(
    generated: Sequence[TsdfGrid],
    reference: Sequence[TsdfGrid],
    points: int = 256,
    seed: int = 0,
    normalization: str = "unit-cube",
    distances: Sequence[str] = ("CD", "EMD"),
    threads: int = 1,
) -> List[MetricReport]:
    """1-NNA per distance kind, plus the mean top octave DCT power of both populations

    Generated grids without a surface are skipped for 1-NNA and counted in the
    ``skipped`` parameter; the spectrum still covers every generated grid.
    """
    gen, skipped = _surviving_clouds(generated, points, seed, "eval-generated")
    if len(gen) < 2:
        raise EmptySurfaceError(f"only {len(gen)} of {len(generated)} generated grids have a surface")
    ref = _clouds(reference, points, seed, "eval-reference")
    pooled = normalize_points(gen + ref, normalization)
    gen, ref = pooled[: len(gen)], pooled[len(gen) :]
    sizes = (len(gen), len(ref))
    params = dict(points=points, normalization=normalization, skipped=skipped)
    reports = []
    for kind in distances:
        value = one_nna(gen, ref, kind, threads)
        logger.info("1-NNA-%s = %.4f", kind, value)
        reports.append(MetricReport(f"1-NNA-{kind}", value, sizes, kind, params))
    reports.append(
        MetricReport("top-band-power-generated", mean_top_band_power(generated), (len(generated),), "DCT")
    )
    reports.append(MetricReport("top-band-power-reference", mean_top_band_power(reference), sizes[1:], "DCT"))
    return reports


def evaluate_completion(
    completions: Sequence[Sequence[TsdfGrid]],
    references: Sequence[TsdfGrid],
    partials: Sequence[PointsLike],
    points: int = 256,
    seed: int = 0,
) -> List[MetricReport]:
    """MMD, AMD, mean TMD and UHD over groups of completions of each reference

    Completions without a surface are skipped and counted in the ``skipped``
    parameter. A reference left with no completion drops out of every metric.
    """
    if len(completions) != len(references) or len(partials) != len(references):
        raise ValueError(
            f"{len(completions)} completion groups and {len(partials)} partials for {len(references)} references"
        )
    refs = _clouds(references, points, seed, "eval-reference")
    groups: List[List[PointArray]] = []
    kept_refs: List[PointArray] = []
    kept_partials: List[PointsLike] = []
    skipped = 0
    for i, group in enumerate(completions):
        clouds, missing = _surviving_clouds(
            group, points, Helper.derive_seed(seed, "eval-completion", i), "completion"
        )
        skipped += missing
        if clouds:
            groups.append(clouds)
            kept_refs.append(refs[i])
            kept_partials.append(partials[i])
    if not groups:
        raise EmptySurfaceError("no completion has a surface")
    sizes = (len(groups), max(len(g) for g in groups))
    params = dict(skipped=skipped)
    mmd, amd = mmd_amd(groups, kept_refs)
    reports = [MetricReport("MMD", mmd, sizes, params=params), MetricReport("AMD", amd, sizes, params=params)]
    diverse = [g for g in groups if len(g) >= 2]
    if diverse:
        reports.append(MetricReport("TMD", float(np.mean([tmd(g) for g in diverse])), sizes, params=params))
    reports.append(
        MetricReport(
            "UHD",
            float(np.mean([uhd(p, g) for p, g in zip(kept_partials, groups)])),
            sizes,
            "Hausdorff",
            params,
        )
    )
    return reports
