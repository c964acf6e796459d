import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pyee2 import EventEmitterS

from . import autodiff as ad
from ._typings import IntArray, OptionalLoop
from .config import TrainingConfig
from .denoiser import Denoiser, drop_labels, save_denoiser
from .discrete_diffusion import DiffusionSchedule, training_loss
from .errors import ShapeError, TrainingDivergedError
from .events import Events
from .helper import Helper
from .optim import AdamW, StepDecay, global_grad_norm
from .patch_codec import TokenMap

__all__ = ["DenoiserTrainer", "LOSS_MAINS", "smoothed_loss"]

logger = logging.getLogger(__name__)

LOSS_MAINS = ("sampled", "expected")


def smoothed_loss(curve: Sequence[float], fraction: float = 0.1, tail: bool = True) -> float:
    """Mean of the last (or first) fraction of a loss curve"""
    if not curve:
        raise ValueError("empty loss curve")
    count = max(1, int(len(curve) * fraction))
    window = curve[-count:] if tail else curve[:count]
    return float(np.mean(window))


class DenoiserTrainer(EventEmitterS):
    """Minimizes the reverse step loss plus the weighted s_0 loss over a token corpus

    Labels are replaced by the empty label with probability ``label_dropout``
    so the same network also learns the unconditional predictor used by
    classifier-free guidance. Only weight matrices receive weight decay.
    """

    def __init__(
        self,
        denoiser: Denoiser,
        schedule: DiffusionSchedule,
        config: TrainingConfig,
        seed: int = 0,
        loop: OptionalLoop = None,
    ) -> None:
        super().__init__(loop=Helper.ensure_loop(loop))
        if config.loss_main not in LOSS_MAINS:
            raise ValueError(f"unknown main loss {config.loss_main!r}")
        if schedule.K != denoiser.config.codebook_size:
            raise ShapeError(f"schedule K={schedule.K} != denoiser K={denoiser.config.codebook_size}")
        if schedule.T != denoiser.config.steps:
            raise ShapeError(f"schedule T={schedule.T} != denoiser T={denoiser.config.steps}")
        self.denoiser: Denoiser = denoiser
        self.schedule: DiffusionSchedule = schedule
        self.config: TrainingConfig = config
        self.seed: int = seed
        self.loss_curve: List[float] = []
        self.epoch_losses: List[float] = []
        self.optimizer: AdamW = AdamW(
            denoiser.params.parameters(),
            lr=config.lr,
            weight_decay=config.weight_decay,
            decay=denoiser.params.decay_mask(),
        )
        self.decay: StepDecay = StepDecay(self.optimizer, config.lr_decay, config.lr_decay_every)

    def _labels(self, maps: Sequence[TokenMap]) -> IntArray:
        cfg = self.denoiser.config
        if cfg.condition_mode == "none":
            return np.full(len(maps), cfg.empty_label, dtype=np.int64)
        labels = np.array(
            [cfg.empty_label if m.class_label is None else m.class_label for m in maps],
            dtype=np.int64,
        )
        if labels.max() >= cfg.num_classes:
            raise ValueError(f"label {labels.max()} needs num_classes > {labels.max()}")
        return labels

    def step(
        self,
        s0: IntArray,
        labels: IntArray,
        rng: np.random.Generator,
        conditions: Optional[IntArray] = None,
    ) -> Dict[str, float]:
        """One optimizer update on a batch; returns the loss parts"""
        cfg = self.config
        dropped = drop_labels(labels, cfg.label_dropout, self.denoiser.config.empty_label, rng)

        def _denoise(st: IntArray, ts: IntArray) -> ad.Tensor:
            return self.denoiser(st, ts, dropped, conditions)

        loss, parts = training_loss(s0, _denoise, self.schedule, cfg.aux_weight, rng, cfg.loss_main)
        if not np.isfinite(parts["loss"]):
            return parts
        self.optimizer.zero_grad()
        ad.backward(loss)
        norm = global_grad_norm(self.optimizer.params)
        if not np.isfinite(norm):
            logger.warning("non-finite gradient norm, update skipped")
            return dict(parts, grad_norm=norm)
        self.optimizer.step()
        return dict(parts, grad_norm=norm)

    def train(
        self,
        token_maps: Sequence[TokenMap],
        conditions: Optional[Sequence[IntArray]] = None,
        progress: bool = True,
    ) -> List[float]:
        """Run ``config.steps`` updates and return the per step loss curve

        :param token_maps: Clean, mask free training maps
        :param conditions: Optional condition token sequences, one per map,
            for the token-sequence condition mode
        """
        cfg = self.config
        if not token_maps:
            raise ValueError("no training token maps")
        K = self.schedule.K
        s0_all = np.stack([m.indices for m in token_maps])
        if s0_all.max() >= K:
            raise ValueError("training maps must not contain [MASK] or out of range indices")
        labels_all = self._labels(token_maps)
        cond_all = None if conditions is None else np.stack([np.asarray(c, dtype=np.int64) for c in conditions])
        rng = Helper.rng(Helper.derive_seed(self.seed, "train-diffusion"))
        size = min(cfg.batch_size, len(token_maps))
        last_finite: Optional[float] = None
        epoch_sum, epoch_count, epoch = 0.0, 0, 0
        logger.info("training %s for %d steps on %d maps", self.denoiser, cfg.steps, len(token_maps))
        self.emit(Events.Trainer.EpochStart, epoch)
        for step in Helper.progress(range(cfg.steps), "train-diffusion", total=cfg.steps, disable=not progress):
            batch = rng.choice(len(token_maps), size=size, replace=False)
            cond = None if cond_all is None else cond_all[batch]
            parts = self.step(s0_all[batch], labels_all[batch], rng, cond)
            loss = parts["loss"]
            if not np.isfinite(loss):
                self.emit(Events.Trainer.Diverged, step, loss)
                raise TrainingDivergedError.AtStep(step, loss, last_finite)
            last_finite = loss
            self.loss_curve.append(loss)
            self.emit(Events.Trainer.Step, step, parts)
            if cfg.log_every and step % cfg.log_every == 0:
                logger.debug("step %d loss %.5f main %.5f aux %.5f", step, loss, parts["main"], parts["aux"])
            epoch_sum += loss
            epoch_count += 1
            if epoch_count == cfg.steps_per_epoch or step == cfg.steps - 1:
                mean = epoch_sum / epoch_count
                self.epoch_losses.append(mean)
                logger.info("epoch %d mean loss %.5f lr %.3e", epoch, mean, self.optimizer.lr)
                self.emit(Events.Trainer.EpochEnd, epoch, mean)
                self.decay.epoch_end(epoch)
                epoch, epoch_sum, epoch_count = epoch + 1, 0.0, 0
                if step != cfg.steps - 1:
                    self.emit(Events.Trainer.EpochStart, epoch)
        return self.loss_curve

    def save(self, directory: Union[str, Path]) -> Path:
        root = save_denoiser(directory, self.denoiser)
        lines = ["step\tloss"] + [f"{i}\t{v!r}" for i, v in enumerate(self.loss_curve)]
        (root / "loss.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        self.emit(Events.Trainer.Checkpoint, root)
        return root

    def summary(self) -> Dict[str, Any]:
        if not self.loss_curve:
            return dict(steps=0)
        return dict(
            steps=len(self.loss_curve),
            first=smoothed_loss(self.loss_curve, tail=False),
            last=smoothed_loss(self.loss_curve),
            baseline=float(np.log(self.schedule.K)),
        )

    def __str__(self) -> str:
        return f"DenoiserTrainer({self.denoiser}, steps={len(self.loss_curve)})"

    def __repr__(self) -> str:
        return self.__str__()
