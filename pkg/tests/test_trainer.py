import numpy as np
import pytest
from grappa import should

from partdiff.autodiff import Tensor
from partdiff.config import TrainingConfig
from partdiff.denoiser import Denoiser, save_denoiser
from partdiff.discrete_diffusion import build_schedule, log_onehot, posterior_entropy_floor, training_loss
from partdiff.errors import ShapeError, TrainingDivergedError
from partdiff.events import Events
from partdiff.helper import Helper
from partdiff.patch_codec import PatchSpec, TokenMap
from partdiff.trainer import DenoiserTrainer, smoothed_loss
from .utils import TestUtil


def corpus(count: int = 4, seed: int = 0):
    rng = Helper.rng(seed)
    spec = PatchSpec((4, 4, 4), 2)
    return [TokenMap(rng.integers(0, 5, size=8), spec, i % 2) for i in range(count)]


class TestSmoothedLoss:
    def test_head_and_tail(self):
        curve = [float(v) for v in range(20)]
        smoothed_loss(curve) | should.be.equal.to(18.5)
        smoothed_loss(curve, tail=False) | should.be.equal.to(0.5)
        smoothed_loss([3.0]) | should.be.equal.to(3.0)

    def test_empty_curve(self):
        with pytest.raises(ValueError):
            smoothed_loss([])


class TestDenoiserTrainer:
    def test_emits_progress(self, denoiser, schedule, tiny_training_config, ee_helper):
        trainer = DenoiserTrainer(denoiser, schedule, tiny_training_config, seed=1)
        ee_helper.record(
            trainer, Events.Trainer.EpochStart, Events.Trainer.Step, Events.Trainer.EpochEnd
        )
        curve = trainer.train(corpus(), progress=False)
        curve | should.have.length.of(6)
        all(np.isfinite(curve)) | should.be.true
        ee_helper.seen[Events.Trainer.Step] | should.have.length.of(6)
        [args[0] for args in ee_helper.seen[Events.Trainer.EpochStart]] | should.be.equal.to([0, 1])
        [args[0] for args in ee_helper.seen[Events.Trainer.EpochEnd]] | should.be.equal.to([0, 1])
        trainer.epoch_losses | should.have.length.of(2)
        trainer.optimizer.steps_taken | should.be.equal.to(6)

    def test_same_seed_same_curve(self, schedule, tiny_training_config):
        curves = []
        for _ in range(2):
            denoiser = Denoiser(TestUtil.denoiser_config(), seed=11)
            trainer = DenoiserTrainer(denoiser, schedule, tiny_training_config, seed=3)
            curves.append(trainer.train(corpus(), progress=False))
        curves[0] | should.be.equal.to(curves[1])

    def test_training_moves_the_parameters(self, denoiser, schedule, tiny_training_config):
        before = denoiser.params["out.w"].data.copy()
        DenoiserTrainer(denoiser, schedule, tiny_training_config).train(corpus(), progress=False)
        np.array_equal(before, denoiser.params["out.w"].data) | should.be.false

    def test_rejects_mismatched_schedules(self, denoiser):
        config = TrainingConfig()
        with pytest.raises(ShapeError) as cm:
            DenoiserTrainer(denoiser, build_schedule(4, 6), config)
        str(cm.value) | should.contain("K=6")
        with pytest.raises(ShapeError):
            DenoiserTrainer(denoiser, build_schedule(5, 5), config)

    def test_rejects_unknown_main_loss(self, denoiser, schedule):
        with pytest.raises(ValueError):
            DenoiserTrainer(denoiser, schedule, TrainingConfig(loss_main="mean"))

    def test_rejects_masked_maps(self, denoiser, schedule, tiny_training_config):
        maps = corpus()
        maps[1].indices[0] = 5
        with pytest.raises(ValueError):
            DenoiserTrainer(denoiser, schedule, tiny_training_config).train(maps, progress=False)

    def test_divergence_is_reported(self, denoiser, schedule, tiny_training_config, ee_helper):
        denoiser.params["out.w"].data[:] = np.nan
        trainer = DenoiserTrainer(denoiser, schedule, tiny_training_config)
        ee_helper.record(trainer, Events.Trainer.Diverged)
        with pytest.raises(TrainingDivergedError) as cm:
            trainer.train(corpus(), progress=False)
        str(cm.value) | should.contain("at step 0")
        ee_helper.seen[Events.Trainer.Diverged] | should.have.length.of(1)

    def test_save_writes_the_loss_curve(self, denoiser, schedule, tiny_training_config, run_dir, ee_helper):
        trainer = DenoiserTrainer(denoiser, schedule, tiny_training_config)
        ee_helper.record(trainer, Events.Trainer.Checkpoint)
        trainer.train(corpus(), progress=False)
        root = trainer.save(run_dir / "model")
        lines = (root / "loss.tsv").read_text().strip().split("\n")
        lines[0] | should.be.equal.to("step\tloss")
        lines | should.have.length.of(7)
        (root / "denoiser.ckpt").exists() | should.be.true
        ee_helper.seen[Events.Trainer.Checkpoint] | should.have.length.of(1)

    def test_summary(self, denoiser, schedule, tiny_training_config):
        trainer = DenoiserTrainer(denoiser, schedule, tiny_training_config)
        trainer.summary() | should.be.equal.to(dict(steps=0))
        trainer.train(corpus(), progress=False)
        summary = trainer.summary()
        summary["steps"] | should.be.equal.to(6)
        abs(summary["baseline"] - np.log(5)) | should.be.below(1e-12)


class TestOverfit:
    """One map, one label: training should approach the posterior entropy floor"""

    @pytest.fixture(scope="class")
    def fitted(self):
        schedule = build_schedule(4, 5)
        target = TokenMap(np.array([0, 1, 4, 2, 2, 3, 0, 1]), PatchSpec((4, 4, 4), 2), 1)
        config = TrainingConfig(
            batch_size=1,
            steps=600,
            steps_per_epoch=600,
            lr=0.02,
            weight_decay=0.0,
            aux_weight=1.0,
            label_dropout=0.0,
            loss_main="expected",
        )
        denoiser = Denoiser(TestUtil.denoiser_config(), seed=11)
        trainer = DenoiserTrainer(denoiser, schedule, config, seed=5)
        trainer.train([target], progress=False)
        return trainer, target

    def test_loss_falls(self, fitted):
        trainer, _ = fitted
        summary = trainer.summary()
        summary["last"] | should.be.below(summary["first"])

    def test_reaches_the_entropy_floor(self, fitted):
        trainer, target = fitted
        schedule = trainer.schedule
        copies = 400
        s0 = np.tile(target.indices, (copies, 1))
        t = np.tile(np.arange(1, schedule.T + 1), copies // schedule.T)
        labels = np.full(copies, 1)
        learned = lambda st, ts: trainer.denoiser(st, ts, labels)
        oracle = lambda st, ts: Tensor(log_onehot(s0, schedule.K))
        # same rng seed, so both see the same s_t draws
        _, fit = training_loss(s0, learned, schedule, rng=Helper.rng(9), main="expected", t=t)
        _, best = training_loss(s0, oracle, schedule, rng=Helper.rng(9), main="expected", t=t)
        floor = posterior_entropy_floor(target, schedule)
        abs(best["main"] - floor) | should.be.below(0.05)
        fit["main"] | should.be.below_or_equal(1.05 * best["main"])


class TestCheckpointDeterminism:
    def test_same_seed_same_checkpoint_bytes(self, schedule, tiny_training_config, tmp_path):
        saved = []
        for name in ("a", "b"):
            denoiser = Denoiser(TestUtil.denoiser_config(), seed=11)
            DenoiserTrainer(denoiser, schedule, tiny_training_config, seed=3).train(corpus(), progress=False)
            saved.append((save_denoiser(tmp_path / name, denoiser) / "denoiser.ckpt").read_bytes())
        saved[0] | should.be.equal.to(saved[1])

    def test_different_seed_different_checkpoint(self, schedule, tiny_training_config, tmp_path):
        saved = []
        for seed in (3, 4):
            denoiser = Denoiser(TestUtil.denoiser_config(), seed=11)
            DenoiserTrainer(denoiser, schedule, tiny_training_config, seed=seed).train(corpus(), progress=False)
            saved.append((save_denoiser(tmp_path / str(seed), denoiser) / "denoiser.ckpt").read_bytes())
        saved[0] | should.not_be.equal.to(saved[1])
