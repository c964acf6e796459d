from collections import defaultdict
from pathlib import Path
from typing import Any, Callable, DefaultDict, Dict, List, Tuple, Union

import numpy as np
from pyee2 import EventEmitter

from partdiff.autodiff import Tensor
from partdiff.config import DenoiserConfig
from partdiff.denoiser import Denoiser
from partdiff.discrete_diffusion import DiffusionSchedule, log_onehot
from partdiff.helper import Helper
from partdiff.patch_codec import Codebook, CodecParams, PatchCodec, PatchSpec
from partdiff.shape_corpus import TsdfGrid

__all__ = ["EEHandler", "TestUtil"]

EEListener = Dict[str, Any]


class EEHandler:
    """Registers listeners on emitters, records what they saw and removes them afterwards"""

    __slots__ = ["listeners", "seen"]

    def __init__(self) -> None:
        self.listeners: List[EEListener] = []
        self.seen: DefaultDict[str, List[Tuple[Any, ...]]] = defaultdict(list)

    def addEventListener(
        self, emitter: EventEmitter, eventName: str, handler: Callable
    ) -> None:
        emitter.on(eventName, handler)
        self.listeners.append(
            dict(emitter=emitter, eventName=eventName, handler=handler)
        )

    def record(self, emitter: EventEmitter, *eventNames: str) -> None:
        for eventName in eventNames:

            def _record(*args: Any, _name: str = eventName) -> None:
                self.seen[_name].append(args)

            self.addEventListener(emitter, eventName, _record)

    def clean_up(self) -> None:
        for listener in self.listeners:
            emitter = listener["emitter"]
            eventName = listener["eventName"]
            handler = listener["handler"]
            emitter.remove_listener(eventName, handler)
        self.listeners.clear()
        self.seen.clear()


class TestUtil:
    @staticmethod
    def denoiser_config(**overrides: Any) -> DenoiserConfig:
        """A denoiser small enough for finite difference checks: C=4, N=8, K=5"""
        values: Dict[str, Any] = dict(
            channels=4,
            ordinary_blocks=1,
            mfm_layers=1,
            heads=2,
            mlp_ratio=2,
            num_classes=3,
            condition_mode="class",
            pool=2,
            codebook_size=5,
            grid=(2, 2, 2),
            steps=4,
            init_scale=0.3,
        )
        values.update(overrides)
        return DenoiserConfig(**values)

    @staticmethod
    def randomize(denoiser: Denoiser, scale: float = 0.4, seed: int = 3) -> Denoiser:
        """Overwrite every parameter, including the zero initialized ones, with noise"""
        rng = Helper.rng(seed)
        for tensor in denoiser.params.parameters():
            tensor.data = rng.standard_normal(tensor.shape) * scale
        return denoiser

    @staticmethod
    def codec(
        dims: Tuple[int, int, int] = (4, 4, 4),
        edge: int = 2,
        K: int = 5,
        latent_dim: int = 3,
        seed: int = 0,
        truncation: float = 0.2,
    ) -> PatchCodec:
        rng = Helper.rng(seed)
        params = CodecParams(edge, latent_dim, truncation, seed=seed)
        codebook = Codebook(rng.standard_normal((K, latent_dim)))
        return PatchCodec(PatchSpec(dims, edge), params, codebook)

    @staticmethod
    def random_grid(
        dims: Tuple[int, int, int] = (4, 4, 4), seed: int = 0, truncation: float = 0.2
    ) -> TsdfGrid:
        rng = Helper.rng(seed)
        return TsdfGrid(rng.uniform(-truncation, truncation, size=dims), truncation)

    @staticmethod
    def product_matrix(schedule: DiffusionSchedule, t: int) -> np.ndarray:
        """Q_1 Q_2 ... Q_t multiplied out explicitly"""
        out = np.eye(schedule.states)
        for step in range(1, t + 1):
            out = out @ schedule.step_matrix(step)
        return out

    @staticmethod
    def bayes_posterior(schedule: DiffusionSchedule, s0: int, st: int, t: int) -> np.ndarray:
        """q(s_{t-1} | s_t, s_0) by direct enumeration over s_{t-1}"""
        step = schedule.step_matrix(t)
        previous = TestUtil.product_matrix(schedule, t - 1)
        joint = np.array(
            [previous[s0, s] * step[s, st] for s in range(schedule.states)]
        )
        return joint / joint.sum()

    @staticmethod
    def table_denoiser(
        schedule: DiffusionSchedule, seed: int, scale: float = 2.0
    ) -> Callable[[np.ndarray, int], np.ndarray]:
        """A denoiser that looks its logits up in a random (t, s_t) table"""
        rng = Helper.rng(seed)
        logits = rng.standard_normal((schedule.T + 1, schedule.states, schedule.K)) * scale

        def _denoise(st: np.ndarray, t: int) -> np.ndarray:
            rows = logits[t, np.asarray(st, dtype=np.int64)]
            return rows - np.log(np.exp(rows).sum(axis=-1, keepdims=True))

        return _denoise

    @staticmethod
    def oracle_denoiser(s0: np.ndarray, K: int) -> Callable[[np.ndarray, int], np.ndarray]:
        """Always predicts the true s_0 (log one-hot with the log floor)"""

        def _denoise(st: np.ndarray, t: int) -> np.ndarray:
            return log_onehot(s0, K)

        return _denoise

    @staticmethod
    def leaf(shape: Tuple[int, ...], seed: int, scale: float = 1.0, name: str = "x") -> Tensor:
        return Tensor(Helper.rng(seed).standard_normal(shape) * scale, requires_grad=True, name=name)

    @staticmethod
    def write_config(path: Union[str, Path], sections: Dict[str, Dict[str, Any]]) -> Path:
        lines: List[str] = []
        for name, values in sections.items():
            lines.append(f"[{name}]")
            for key, value in values.items():
                if isinstance(value, (tuple, list)):
                    value = ",".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        target = Path(path)
        target.write_text("\n".join(lines), encoding="utf-8")
        return target
