"""Run configuration: flat ``key = value`` sections with desk scale defaults.

Every section is a class whose slots are its keys. Reading a file is total:
an unknown section or key is a :class:`ConfigError`, values are coerced to
the type of the default.
"""
import configparser
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, Union

from ._typings import Shape3, SlotsT
from .errors import ConfigError
from .helper import Helper

__all__ = [
    "CodecConfig",
    "DenoiserConfig",
    "EvalConfig",
    "GeometryConfig",
    "PRESETS",
    "RunConfig",
    "SamplingConfig",
    "ScheduleConfig",
    "TrainingConfig",
]

logger = logging.getLogger(__name__)


def _parse_triple(value: Union[str, Tuple[int, ...], List[int]]) -> Shape3:
    if isinstance(value, str):
        parts = [p for p in value.replace("x", ",").split(",") if p.strip()]
    else:
        parts = list(value)
    if len(parts) != 3:
        raise ConfigError(f"expected three comma separated integers, got {value!r}")
    try:
        a, b, c = (int(str(p).strip()) for p in parts)
    except ValueError:
        raise ConfigError(f"expected three comma separated integers, got {value!r}")
    return a, b, c


def _parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


class Section:
    """Base of config sections; subclasses list their keys in __slots__"""

    __slots__: SlotsT = ["__weakref__"]
    name: str = ""

    def __init__(self, **kwargs: Any) -> None:
        for key, value in kwargs.items():
            self.set(key, value)

    @classmethod
    def keys(cls) -> List[str]:
        return [k for k in cls.__slots__ if not k.startswith("__")]

    def set(self, key: str, value: Any) -> None:
        if key not in self.keys():
            raise ConfigError(f"unknown key {key!r} in section [{self.name}]")
        current = getattr(self, key)
        try:
            if isinstance(current, bool):
                value = _parse_bool(value)
            elif isinstance(current, tuple):
                value = _parse_triple(value)
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            else:
                value = str(value).strip()
        except ValueError:
            raise ConfigError(
                f"[{self.name}] {key} = {value!r} is not a valid {type(current).__name__}"
            )
        setattr(self, key, value)

    def to_dict(self) -> Dict[str, Any]:
        return {k: getattr(self, k) for k in self.keys()}

    def __str__(self) -> str:
        fields = ", ".join(f"{k}={v!r}" for k, v in self.to_dict().items())
        return f"{type(self).__name__}({fields})"

    def __repr__(self) -> str:
        return self.__str__()


class GeometryConfig(Section):
    __slots__: SlotsT = ["dims", "patch_edge", "truncation"]
    name = "geometry"

    def __init__(self, **kwargs: Any) -> None:
        self.dims: Shape3 = (16, 16, 16)
        self.patch_edge: int = 4
        self.truncation: float = 0.2
        super().__init__(**kwargs)

    @property
    def patch_grid(self) -> Shape3:
        a, b, c = (extent // self.patch_edge for extent in self.dims)
        return a, b, c

    @property
    def tokens(self) -> int:
        a, b, c = self.patch_grid
        return a * b * c


class CodecConfig(Section):
    __slots__: SlotsT = [
        "codebook_size",
        "latent_dim",
        "commitment",
        "warmup_epochs",
        "epochs",
        "batch_size",
        "lr",
        "beta1",
        "beta2",
        "lr_decay",
        "lr_decay_every",
        "kmeans_iters",
    ]
    name = "codec"

    def __init__(self, **kwargs: Any) -> None:
        self.codebook_size: int = 32
        self.latent_dim: int = 32
        self.commitment: float = 0.25
        self.warmup_epochs: int = 20
        self.epochs: int = 40
        self.batch_size: int = 128
        self.lr: float = 1e-3
        self.beta1: float = 0.5
        self.beta2: float = 0.9
        self.lr_decay: float = 0.5
        self.lr_decay_every: int = 30
        self.kmeans_iters: int = 25
        super().__init__(**kwargs)


class ScheduleConfig(Section):
    """Corruption schedule; the default masks 0.9 and resamples 0.1 of the mass by t = T

    The masked share alone stays below 1, but together with the uniform share
    nothing of s_0 is kept at T (alpha_bar_T = 0), so the chain is fully
    corrupting. Set mask_final = 1 and uniform_final = 0 for an all [MASK] s_T.
    """

    __slots__: SlotsT = ["steps", "kind", "mask_final", "uniform_final", "gamma", "beta"]
    name = "schedule"

    def __init__(self, **kwargs: Any) -> None:
        self.steps: int = 25
        self.kind: str = "linear-cumulative"
        # cumulative masked and uniform mass reached at t = T
        self.mask_final: float = 0.9
        self.uniform_final: float = 0.1
        # per step values for the constant kind
        self.gamma: float = 0.1
        self.beta: float = 0.05
        super().__init__(**kwargs)


class DenoiserConfig(Section):
    __slots__: SlotsT = [
        "channels",
        "ordinary_blocks",
        "mfm_layers",
        "heads",
        "mlp_ratio",
        "num_classes",
        "condition_mode",
        "pool",
        "mfm_fusion",
        "mfm_dual_fusion",
        "mfm_dual_attention",
        "codebook_size",
        "grid",
        "steps",
        "init_scale",
    ]
    name = "denoiser"

    def __init__(self, **kwargs: Any) -> None:
        self.channels: int = 64
        self.ordinary_blocks: int = 4
        self.mfm_layers: int = 3
        self.heads: int = 2
        self.mlp_ratio: int = 4
        # real classes plus the empty label, which is always the last id
        self.num_classes: int = 4
        self.condition_mode: str = "class"
        self.pool: int = 2
        self.mfm_fusion: str = "residual-add"
        self.mfm_dual_fusion: bool = True
        self.mfm_dual_attention: bool = True
        self.codebook_size: int = 32
        self.grid: Shape3 = (4, 4, 4)
        self.steps: int = 25
        self.init_scale: float = 0.02
        super().__init__(**kwargs)

    @property
    def tokens(self) -> int:
        a, b, c = self.grid
        return a * b * c

    @property
    def empty_label(self) -> int:
        return self.num_classes - 1


class TrainingConfig(Section):
    __slots__: SlotsT = [
        "batch_size",
        "steps",
        "steps_per_epoch",
        "lr",
        "weight_decay",
        "lr_decay",
        "lr_decay_every",
        "aux_weight",
        "label_dropout",
        "loss_main",
        "log_every",
    ]
    name = "training"

    def __init__(self, **kwargs: Any) -> None:
        self.batch_size: int = 16
        self.steps: int = 3000
        self.steps_per_epoch: int = 100
        self.lr: float = 1e-3
        self.weight_decay: float = 0.01
        self.lr_decay: float = 0.5
        self.lr_decay_every: int = 10
        self.aux_weight: float = 1e-3
        self.label_dropout: float = 0.5
        self.loss_main: str = "sampled"
        self.log_every: int = 50
        super().__init__(**kwargs)


class SamplingConfig(Section):
    __slots__: SlotsT = [
        "guidance",
        "complete_start",
        "denoise_start",
        "edit_start",
        "samples",
        "region",
        "noise_kind",
        "noise_level",
    ]
    name = "sampling"

    def __init__(self, **kwargs: Any) -> None:
        self.guidance: float = 0.5
        self.complete_start: float = 0.5
        self.denoise_start: float = 0.5
        self.edit_start: float = 0.98
        self.samples: int = 10
        self.region: str = "bottom-half"
        self.noise_kind: str = "gaussian"
        self.noise_level: float = 0.05
        super().__init__(**kwargs)


class EvalConfig(Section):
    __slots__: SlotsT = ["points", "distance", "normalization"]
    name = "eval"

    def __init__(self, **kwargs: Any) -> None:
        self.points: int = 256
        self.distance: str = "CD"
        self.normalization: str = "unit-cube"
        super().__init__(**kwargs)


SECTIONS: Tuple[Type[Section], ...] = (
    GeometryConfig,
    CodecConfig,
    ScheduleConfig,
    DenoiserConfig,
    TrainingConfig,
    SamplingConfig,
    EvalConfig,
)

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "desk": {},
    "full": {
        "geometry": dict(dims=(64, 64, 64), patch_edge=8),
        "codec": dict(codebook_size=512, latent_dim=256, lr=1e-4),
        "schedule": dict(steps=100),
        "denoiser": dict(channels=256, ordinary_blocks=16, heads=8),
        "training": dict(lr=1e-4, lr_decay=0.9, lr_decay_every=30),
        "eval": dict(points=2048),
    },
}


class RunConfig:
    __slots__: SlotsT = [
        "__weakref__",
        "seed",
        "threads",
        "geometry",
        "codec",
        "schedule",
        "denoiser",
        "training",
        "sampling",
        "eval",
    ]

    def __init__(self, seed: int = 0, threads: int = 1, preset: str = "desk") -> None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        self.seed: int = seed
        self.threads: int = threads
        self.geometry: GeometryConfig = GeometryConfig()
        self.codec: CodecConfig = CodecConfig()
        self.schedule: ScheduleConfig = ScheduleConfig()
        self.denoiser: DenoiserConfig = DenoiserConfig()
        self.training: TrainingConfig = TrainingConfig()
        self.sampling: SamplingConfig = SamplingConfig()
        self.eval: EvalConfig = EvalConfig()
        for section, values in PRESETS[preset].items():
            for key, value in values.items():
                self.section(section).set(key, value)
        self.sync()

    def section(self, name: str) -> Section:
        if name not in [s.name for s in SECTIONS]:
            raise ConfigError(f"unknown config section [{name}]")
        return getattr(self, name)

    def sync(self) -> None:
        """Copy the derived denoiser fields from the geometry, codec and schedule"""
        if any(extent % self.geometry.patch_edge for extent in self.geometry.dims):
            raise ConfigError(
                f"dims {self.geometry.dims} are not divisible by patch_edge {self.geometry.patch_edge}"
            )
        if self.geometry.patch_edge < 2:
            raise ConfigError("patch_edge must be at least 2")
        self.denoiser.codebook_size = self.codec.codebook_size
        self.denoiser.grid = self.geometry.patch_grid
        self.denoiser.steps = self.schedule.steps

    @classmethod
    def load(
        cls,
        path: Optional[Union[str, Path]] = None,
        seed: Optional[int] = None,
        threads: Optional[int] = None,
        preset: str = "desk",
    ) -> "RunConfig":
        config = cls(preset=preset)
        if path is not None:
            config.read(path)
        if seed is not None:
            config.seed = seed
        if threads is not None:
            config.threads = threads
        config.sync()
        return config

    def read(self, path: Union[str, Path]) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, "r") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist")
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}")
        for name in parser.sections():
            if name == "run":
                for key, value in parser.items(name):
                    if key not in ("seed", "threads"):
                        raise ConfigError(f"unknown key {key!r} in section [run]")
                    try:
                        setattr(self, key, int(value))
                    except ValueError:
                        raise ConfigError(f"[run] {key} = {value!r} is not a valid int")
                continue
            section = self.section(name)
            for key, value in parser.items(name):
                section.set(key, value)
        logger.info("read config %s", path)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"run": {"seed": self.seed, "threads": self.threads}}
        for section in SECTIONS:
            values = self.section(section.name).to_dict()
            out[section.name] = {
                k: list(v) if isinstance(v, tuple) else v for k, v in values.items()
            }
        return out

    def write(self, path: Union[str, Path]) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        for name, values in self.to_dict().items():
            parser[name] = {
                k: ",".join(str(x) for x in v) if isinstance(v, list) else str(v)
                for k, v in values.items()
            }
        with open(path, "w") as fh:
            parser.write(fh)

    def hash(self) -> str:
        """Digest of the configuration without the thread count"""
        values = self.to_dict()
        values["run"] = {"seed": self.seed}
        return Helper.config_hash(values)

    def __str__(self) -> str:
        return f"RunConfig(seed={self.seed}, threads={self.threads}, hash={self.hash()})"

    def __repr__(self) -> str:
        return self.__str__()
