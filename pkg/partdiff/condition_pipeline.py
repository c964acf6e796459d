"""Reverse chain drivers for generation, completion, denoising and editing.

Every conditional mode works by corruption start: the observed tokens are
diffused forward to step k and the reverse chain runs from k down to 1
instead of from T.
"""
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pyee2 import EventEmitterS

from ._typings import IntArray, OptionalLoop, PointArray, SlotsT
from .denoiser import Denoiser
from .discrete_diffusion import DiffusionSchedule, apply_cfg, q_sample, reverse_step
from .errors import ConfigError, ShapeError, UnresolvedMaskError
from .events import Events
from .helper import Helper
from .patch_codec import PatchCodec, PatchSpec, TokenMap
from .shape_corpus import TsdfGrid

__all__ = [
    "CONDITION_KINDS",
    "ConditionSpec",
    "DEFAULT_START",
    "FractionBox",
    "REGION_PRESETS",
    "ShapeSampler",
    "start_step",
]

logger = logging.getLogger(__name__)

CONDITION_KINDS = ("unconditional", "completion", "denoise", "edit", "class-conditional", "token-sequence")

DEFAULT_START: Dict[str, float] = {"completion": 0.5, "denoise": 0.5, "edit": 0.98}

Interval = Tuple[float, float]

REGION_PRESETS: Dict[str, Tuple[Interval, Interval, Interval]] = {
    "bottom-half": ((0.0, 1.0), (0.0, 1.0), (0.0, 0.5)),
    "top-half": ((0.0, 1.0), (0.0, 1.0), (0.5, 1.0)),
    "octant": ((0.0, 0.5), (0.0, 0.5), (0.0, 0.5)),
    "full": ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)),
}

_TOLERANCE = 1e-9


def start_step(fraction: float, T: int) -> int:
    """k = floor(fraction * T + 0.5)"""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"start fraction must lie in [0, 1]: {fraction}")
    return int(np.floor(fraction * T + 0.5))


class FractionBox:
    """Axis aligned box in fractions of the volume, [0, 1] per axis"""

    __slots__: SlotsT = ["__weakref__", "bounds"]

    def __init__(self, bounds: Sequence[Interval]) -> None:
        if len(bounds) != 3:
            raise ShapeError(f"a fraction box needs 3 intervals, got {len(bounds)}")
        checked = []
        for lo, hi in bounds:
            lo, hi = float(lo), float(hi)
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError(f"invalid fraction interval [{lo}, {hi}]")
            checked.append((lo, hi))
        self.bounds: Tuple[Interval, ...] = tuple(checked)

    @classmethod
    def parse(cls, text: str) -> "FractionBox":
        """A preset name or ``x0:x1,y0:y1,z0:z1``"""
        text = text.strip()
        if text in REGION_PRESETS:
            return cls(REGION_PRESETS[text])
        try:
            intervals = [tuple(float(v) for v in part.split(":")) for part in text.split(",")]
        except ValueError:
            raise ConfigError(f"cannot parse region {text!r}")
        if len(intervals) != 3 or any(len(iv) != 2 for iv in intervals):
            raise ConfigError(f"region {text!r} is not a preset or x0:x1,y0:y1,z0:z1")
        try:
            return cls(intervals)  # type: ignore
        except ValueError as e:
            raise ConfigError(f"region {text!r}: {e}")

    def patch_mask(self, spec: PatchSpec) -> np.ndarray:
        """Row-major (N,) mask of patches lying entirely inside the box"""
        per_axis = []
        for (lo, hi), count in zip(self.bounds, spec.patches_per_axis):
            start = np.arange(count) / count
            end = (np.arange(count) + 1) / count
            per_axis.append((start >= lo - _TOLERANCE) & (end <= hi + _TOLERANCE))
        mx, my, mz = per_axis
        return (mx[:, None, None] & my[None, :, None] & mz[None, None, :]).reshape(-1)

    def voxel_mask(self, dims: Sequence[int]) -> np.ndarray:
        """(H, W, D) mask of voxels whose centres lie inside the box"""
        per_axis = []
        for (lo, hi), extent in zip(self.bounds, dims):
            centre = (np.arange(extent) + 0.5) / extent
            per_axis.append((centre >= lo) & (centre <= hi))
        mx, my, mz = per_axis
        return mx[:, None, None] & my[None, :, None] & mz[None, None, :]

    def contains(self, points: PointArray) -> np.ndarray:
        """Mask of points in [-1, 1]³ coordinates that fall inside the box"""
        frac = (np.asarray(points, dtype=np.float64) + 1.0) / 2.0
        inside = np.ones(frac.shape[0], dtype=bool)
        for axis, (lo, hi) in enumerate(self.bounds):
            inside &= (frac[:, axis] >= lo - _TOLERANCE) & (frac[:, axis] <= hi + _TOLERANCE)
        return inside

    def __str__(self) -> str:
        return "FractionBox(" + ",".join(f"{lo:g}:{hi:g}" for lo, hi in self.bounds) + ")"

    def __repr__(self) -> str:
        return self.__str__()


class ConditionSpec:
    __slots__: SlotsT = [
        "__weakref__",
        "mode",
        "start_fraction",
        "observed_region",
        "class_label",
        "guidance",
        "seed",
    ]

    def __init__(
        self,
        mode: str = "unconditional",
        start_fraction: Optional[float] = None,
        observed_region: Optional[FractionBox] = None,
        class_label: Optional[int] = None,
        guidance: float = 0.5,
        seed: int = 0,
    ) -> None:
        if mode not in CONDITION_KINDS:
            raise ValueError(f"unknown condition mode {mode!r}")
        if mode == "completion" and observed_region is None:
            raise ValueError("completion needs an observed region")
        if guidance < 0:
            raise ValueError(f"guidance weight must be non negative: {guidance}")
        if start_fraction is None:
            start_fraction = DEFAULT_START.get(mode, 1.0)
        if not 0.0 <= start_fraction <= 1.0:
            raise ValueError(f"start fraction must lie in [0, 1]: {start_fraction}")
        self.mode: str = mode
        self.start_fraction: float = float(start_fraction)
        self.observed_region: Optional[FractionBox] = observed_region
        self.class_label: Optional[int] = class_label
        self.guidance: float = float(guidance)
        self.seed: int = int(seed)

    def __str__(self) -> str:
        return (
            f"ConditionSpec(mode={self.mode}, k/T={self.start_fraction}, region={self.observed_region}, "
            f"label={self.class_label}, w={self.guidance}, seed={self.seed})"
        )

    def __repr__(self) -> str:
        return self.__str__()


class ShapeSampler(EventEmitterS):
    """Runs reverse chains with a trained denoiser and decodes them with the codec"""

    def __init__(
        self,
        denoiser: Denoiser,
        schedule: DiffusionSchedule,
        codec: PatchCodec,
        guidance: float = 0.5,
        loop: OptionalLoop = None,
    ) -> None:
        super().__init__(loop=Helper.ensure_loop(loop))
        if schedule.K != codec.codebook.size or denoiser.config.codebook_size != codec.codebook.size:
            raise ShapeError(f"codebook size mismatch between {denoiser}, {schedule} and {codec}")
        if denoiser.config.tokens != codec.patch_spec.count:
            raise ShapeError(f"{denoiser} expects {denoiser.config.tokens} tokens, {codec.patch_spec} has {codec.patch_spec.count}")
        if guidance < 0:
            raise ValueError(f"guidance weight must be non negative: {guidance}")
        self.denoiser: Denoiser = denoiser
        self.schedule: DiffusionSchedule = schedule
        self.codec: PatchCodec = codec
        self.guidance: float = guidance

    @property
    def mask_index(self) -> int:
        return self.schedule.mask_index

    def _guided(self, label: Optional[int], condition: Optional[IntArray]) -> bool:
        if self.denoiser.config.condition_mode == "none":
            return False
        return label is not None or condition is not None

    def run_chain(
        self,
        s_k: IntArray,
        k: int,
        label: Optional[int] = None,
        condition: Optional[IntArray] = None,
        seed: int = 0,
        mode: str = "unconditional",
    ) -> IntArray:
        """Reverse steps t = k..1 from s_k; the result is checked to be mask free"""
        if not 0 <= k <= self.schedule.T:
            raise ValueError(f"start step {k} outside [0, {self.schedule.T}]")
        s = np.asarray(s_k, dtype=np.int64).copy()
        rng = Helper.rng(seed)
        guided = self._guided(label, condition)
        self.emit(Events.Sampler.ChainStart, mode, k)
        for t in range(k, 0, -1):
            log_p0 = self.denoiser.log_probs(s, t, label, condition)
            if guided and self.guidance > 0:
                log_u = self.denoiser.log_probs(s, t, None, None)
                log_p0 = apply_cfg(log_p0, log_u, self.guidance)
            s = reverse_step(log_p0, s, t, self.schedule, rng)
            self.emit(Events.Sampler.Step, t, s)
        if np.any(s >= self.mask_index):
            raise UnresolvedMaskError(f"{mode} chain ended with [MASK] tokens at t = 0")
        self.emit(Events.Sampler.ChainEnd, mode, s)
        return s

    def _decode(self, tokens: TokenMap) -> TsdfGrid:
        return self.codec.detokenize(tokens)

    def sample_unconditional_tokens(
        self,
        label: Optional[int] = None,
        seed: int = 0,
        condition: Optional[IntArray] = None,
    ) -> TokenMap:
        """All [MASK] start at t = T; guided when a label or condition is given"""
        spec = self.codec.patch_spec
        start = np.full(spec.count, self.mask_index, dtype=np.int64)
        mode = "unconditional" if label is None else "class-conditional"
        s = self.run_chain(start, self.schedule.T, label, condition, seed, mode)
        return TokenMap(s, spec, label)

    def sample_unconditional(
        self,
        label: Optional[int] = None,
        seed: int = 0,
        condition: Optional[IntArray] = None,
    ) -> TsdfGrid:
        return self._decode(self.sample_unconditional_tokens(label, seed, condition))

    def corrupt(self, tokens: TokenMap, k: int, observed: Optional[np.ndarray], seed: int) -> IntArray:
        """Observed positions diffused to step k, the rest set to [MASK]"""
        s = tokens.indices.copy()
        if k > 0:
            s = q_sample(s, k, self.schedule, Helper.rng(seed))
        if observed is not None:
            s[~observed] = self.mask_index
        return s

    def complete_tokens(
        self,
        partial: TsdfGrid,
        region: FractionBox,
        n_samples: int = 1,
        start_fraction: float = DEFAULT_START["completion"],
        label: Optional[int] = None,
        seed: int = 0,
    ) -> List[TokenMap]:
        spec = self.codec.patch_spec
        observed = region.patch_mask(spec)
        if not observed.any():
            raise ValueError(f"{region} does not fully contain any patch of {spec}")
        k = start_step(start_fraction, self.schedule.T)
        if k == 0 and not observed.all():
            raise ValueError("a start step of 0 leaves unobserved patches masked")
        tokens = self.codec.tokenize(partial, label)
        logger.info("completing from %d of %d patches, k = %d", int(observed.sum()), spec.count, k)
        out = []
        for i in range(n_samples):
            sub = Helper.derive_seed(seed, "complete", i)
            s_k = self.corrupt(tokens, k, observed, Helper.derive_seed(sub, "corrupt"))
            s = self.run_chain(s_k, k, label, None, Helper.derive_seed(sub, "chain"), "completion")
            out.append(TokenMap(s, spec, label))
        return out

    def complete(
        self,
        partial: TsdfGrid,
        region: FractionBox,
        n_samples: int = 1,
        start_fraction: float = DEFAULT_START["completion"],
        label: Optional[int] = None,
        seed: int = 0,
    ) -> List[TsdfGrid]:
        maps = self.complete_tokens(partial, region, n_samples, start_fraction, label, seed)
        return [self._decode(m) for m in maps]

    def denoise_tokens(
        self,
        noisy: TsdfGrid,
        start_fraction: float = DEFAULT_START["denoise"],
        label: Optional[int] = None,
        seed: int = 0,
    ) -> TokenMap:
        if abs(noisy.truncation - self.codec.truncation) > 1e-6:
            logger.warning("noisy grid truncation %g differs from the codec's %g", noisy.truncation, self.codec.truncation)
        k = start_step(start_fraction, self.schedule.T)
        tokens = self.codec.tokenize(noisy, label)
        s_k = self.corrupt(tokens, k, None, Helper.derive_seed(seed, "corrupt"))
        s = self.run_chain(s_k, k, label, None, Helper.derive_seed(seed, "chain"), "denoise")
        return TokenMap(s, tokens.patch_spec, label)

    def denoise(
        self,
        noisy: TsdfGrid,
        start_fraction: float = DEFAULT_START["denoise"],
        label: Optional[int] = None,
        seed: int = 0,
    ) -> TsdfGrid:
        return self._decode(self.denoise_tokens(noisy, start_fraction, label, seed))

    def edit_tokens(
        self,
        current: TokenMap,
        new_label: int,
        start_fraction: float = DEFAULT_START["edit"],
        seed: int = 0,
    ) -> TokenMap:
        if current.has_mask(self.mask_index):
            raise ValueError(f"{current} must be mask free to be edited")
        if not 0 <= new_label < self.denoiser.config.empty_label:
            raise ValueError(f"label {new_label} outside [0, {self.denoiser.config.empty_label})")
        k = start_step(start_fraction, self.schedule.T)
        s_k = self.corrupt(current, k, None, Helper.derive_seed(seed, "corrupt"))
        s = self.run_chain(s_k, k, new_label, None, Helper.derive_seed(seed, "chain"), "edit")
        return TokenMap(s, current.patch_spec, new_label)

    def edit(
        self,
        current: TokenMap,
        new_label: int,
        start_fraction: float = DEFAULT_START["edit"],
        seed: int = 0,
    ) -> TsdfGrid:
        return self._decode(self.edit_tokens(current, new_label, start_fraction, seed))

    def edit_sequence_tokens(
        self,
        current: TokenMap,
        labels: Sequence[int],
        start_fraction: float = DEFAULT_START["edit"],
        seed: int = 0,
    ) -> List[TokenMap]:
        """Chained edits; each edit starts from the previous result"""
        out = []
        for i, label in enumerate(labels):
            current = self.edit_tokens(current, label, start_fraction, Helper.derive_seed(seed, "edit", i))
            out.append(current)
        return out

    def edit_sequence(
        self,
        current: TokenMap,
        labels: Sequence[int],
        start_fraction: float = DEFAULT_START["edit"],
        seed: int = 0,
    ) -> List[TsdfGrid]:
        return [self._decode(m) for m in self.edit_sequence_tokens(current, labels, start_fraction, seed)]

    def run(self, spec: ConditionSpec, source: Any = None, n_samples: int = 1) -> List[TsdfGrid]:
        """Dispatch on a ConditionSpec

        :param source: The partial or noisy TsdfGrid, the TokenMap to edit, or
            the condition token sequence
        """
        previous, self.guidance = self.guidance, spec.guidance
        try:
            return self._dispatch(spec, source, n_samples)
        finally:
            self.guidance = previous

    def _dispatch(self, spec: ConditionSpec, source: Any, n_samples: int) -> List[TsdfGrid]:
        if spec.mode in ("unconditional", "class-conditional"):
            return [
                self.sample_unconditional(spec.class_label, Helper.derive_seed(spec.seed, "sample", i))
                for i in range(n_samples)
            ]
        if spec.mode == "completion":
            assert spec.observed_region is not None
            return self.complete(
                source, spec.observed_region, n_samples, spec.start_fraction, spec.class_label, spec.seed
            )
        if spec.mode == "denoise":
            return [self.denoise(source, spec.start_fraction, spec.class_label, spec.seed)]
        if spec.mode == "edit":
            if spec.class_label is None:
                raise ValueError("edit needs a target label")
            return [self.edit(source, spec.class_label, spec.start_fraction, spec.seed)]
        if spec.mode == "token-sequence":
            if source is None:
                raise ValueError("token-sequence sampling needs the condition tokens as source")
            condition = np.asarray(source, dtype=np.int64)
            return [
                self.sample_unconditional(spec.class_label, Helper.derive_seed(spec.seed, "sample", i), condition)
                for i in range(n_samples)
            ]
        raise ValueError(f"unknown condition mode {spec.mode!r}")

    def __str__(self) -> str:
        return f"ShapeSampler({self.denoiser}, T={self.schedule.T}, w={self.guidance})"

    def __repr__(self) -> str:
        return self.__str__()
