import numpy as np
import pytest
from grappa import should

from partdiff import autodiff as ad
from partdiff.autodiff import Tensor
from partdiff.errors import CodebookError, ShapeError, UnresolvedMaskError
from partdiff.events import Events
from partdiff.helper import Helper
from partdiff.patch_codec import (
    Codebook,
    CodecTrainer,
    PatchSpec,
    TokenMap,
    assemble,
    codebook_usage,
    encode_patch,
    init_codebook_kmeans,
    partition,
    quantize,
    reconstruction_error,
    vqvae_loss,
)
from partdiff.shape_corpus import TsdfGrid
from .utils import TestUtil


class TestPatchSpec:
    def test_counts(self):
        spec = PatchSpec((8, 4, 4), 2)
        spec.patches_per_axis | should.be.equal.to((4, 2, 2))
        spec.count | should.be.equal.to(16)
        spec.volume | should.be.equal.to(8)

    def test_rejects_small_edges_and_ragged_dims(self):
        with pytest.raises(ShapeError):
            PatchSpec((4, 4, 4), 1)
        with pytest.raises(ShapeError) as cm:
            PatchSpec((6, 4, 4), 4)
        str(cm.value) | should.contain("not divisible")


class TestPartition:
    def test_assemble_inverts_partition(self):
        grid = TestUtil.random_grid((4, 4, 4), seed=2)
        spec = PatchSpec(grid.dims, 2)
        patches = partition(grid, spec)
        patches.shape | should.be.equal.to((8, 2, 2, 2))
        np.array_equal(assemble(patches, spec, grid.truncation).values, grid.values) | should.be.true

    def test_patches_are_in_row_major_order(self):
        values = np.zeros((4, 4, 4))
        for x in range(4):
            for y in range(4):
                for z in range(4):
                    values[x, y, z] = 0.01 * ((x // 2) * 4 + (y // 2) * 2 + z // 2)
        patches = partition(TsdfGrid(values), PatchSpec((4, 4, 4), 2))
        for n in range(8):
            np.all(patches[n] == 0.01 * n) | should.be.true

    def test_rejects_mismatched_grid(self):
        with pytest.raises(ShapeError):
            partition(TestUtil.random_grid((4, 4, 4)), PatchSpec((8, 4, 4), 2))


class TestQuantize:
    def test_entries_map_to_themselves(self):
        codebook = Codebook(Helper.rng(12).standard_normal((6, 3)))
        for k in range(codebook.size):
            index, entry = quantize(codebook.vectors[k], codebook)
            index | should.be.equal.to(k)
            np.array_equal(entry, codebook.vectors[k]) | should.be.true

    def test_ties_go_to_the_lowest_index(self):
        codebook = Codebook([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
        quantize(np.zeros(2), codebook)[0] | should.be.equal.to(0)
        duplicated = Codebook([[1.0, 1.0], [1.0, 1.0]])
        quantize(np.array([1.0, 1.0]), duplicated)[0] | should.be.equal.to(0)

    def test_batch_returns_arrays(self):
        codebook = Codebook([[0.0, 0.0], [10.0, 10.0]])
        idx, entries = quantize(np.array([[9.0, 9.0], [0.5, 0.0]]), codebook)
        idx.tolist() | should.be.equal.to([1, 0])
        entries.shape | should.be.equal.to((2, 2))

    def test_codebook_needs_two_finite_entries(self):
        with pytest.raises(CodebookError):
            Codebook([[1.0, 2.0]])
        with pytest.raises(CodebookError):
            Codebook([[1.0, np.inf], [0.0, 0.0]])


class TestKMeans:
    def test_objective_never_increases(self):
        latents = np.random.default_rng(5).standard_normal((60, 3))
        codebook, history = init_codebook_kmeans(latents, 6, 10, seed=1)
        codebook.size | should.be.equal.to(6)
        history | should.have.length.of(11)
        for before, after in zip(history, history[1:]):
            after | should.be.below_or_equal(before + 1e-12)

    def test_same_seed_same_codebook(self):
        latents = np.random.default_rng(8).standard_normal((40, 2))
        a, _ = init_codebook_kmeans(latents, 4, 5, seed=3)
        b, _ = init_codebook_kmeans(latents, 4, 5, seed=3)
        np.array_equal(a.vectors, b.vectors) | should.be.true

    def test_too_few_distinct_latents(self):
        latents = np.repeat(np.eye(3), 10, axis=0)
        with pytest.raises(CodebookError) as cm:
            init_codebook_kmeans(latents, 4, 5, seed=0)
        str(cm.value) | should.contain("distinct")


class TestVqvaeLoss:
    def test_straight_through_passes_the_gradient_to_z(self):
        z = TestUtil.leaf((3, 2), 0)
        zq = np.random.default_rng(1).standard_normal((3, 2))
        out = ad.straight_through(z, zq)
        np.array_equal(out.data, zq) | should.be.true
        upstream = np.random.default_rng(2).standard_normal((3, 2))
        ad.backward((out * upstream).sum())
        np.array_equal(z.grad, upstream) | should.be.true

    def test_parts_add_up(self, codec):
        patches = partition(TestUtil.random_grid(seed=4), codec.patch_spec)
        loss, parts = vqvae_loss(patches, codec.params, codec.codebook, beta=0.25)
        abs(loss.item() - (parts["recon"] + parts["vq"] + parts["commit"])) | should.be.below(1e-12)
        parts["indices"] | should.have.length.of(codec.patch_spec.count)

    def test_gradient_of_the_decoder(self, codec):
        patches = partition(TestUtil.random_grid(seed=6), codec.patch_spec)
        points = [codec.params["dec.w2"], codec.params["dec.b2"]]

        def f(*_: Tensor) -> Tensor:
            return vqvae_loss(patches, codec.params, codec.codebook)[0]

        ad.grad_check(f, points) | should.be.below_or_equal(1e-4)

    def test_codebook_gradient_only_from_the_vq_term(self, codec):
        patches = partition(TestUtil.random_grid(seed=7), codec.patch_spec)
        loss, parts = vqvae_loss(patches, codec.params, codec.codebook, beta=0.0)
        ad.backward(loss)
        unused = set(range(codec.codebook.size)) - set(parts["indices"].tolist())
        for k in unused:
            np.all(codec.codebook.entries.grad[k] == 0) | should.be.true

    def test_negative_beta(self, codec):
        with pytest.raises(ValueError):
            vqvae_loss(np.zeros((1, 8)), codec.params, codec.codebook, beta=-1.0)


class TestTokenize:
    def test_tokens_index_the_codebook(self, codec):
        tokens = codec.tokenize(TestUtil.random_grid(seed=1), class_label=2)
        len(tokens) | should.be.equal.to(8)
        tokens.class_label | should.be.equal.to(2)
        int(tokens.indices.max()) | should.be.below(codec.codebook.size)
        tokens.has_mask(codec.mask_index) | should.be.false

    def test_token_is_the_quantized_patch_latent(self, codec):
        grid = TestUtil.random_grid(seed=3)
        tokens = codec.tokenize(grid)
        patch = partition(grid, codec.patch_spec)[5]
        quantize(encode_patch(patch, codec.params), codec.codebook)[0] | should.be.equal.to(
            int(tokens.indices[5])
        )

    def test_detokenize_stays_within_truncation(self, codec):
        grid = codec.detokenize(codec.tokenize(TestUtil.random_grid(seed=9)))
        grid.dims | should.be.equal.to((4, 4, 4))
        np.abs(grid.values).max() | should.be.below_or_equal(codec.truncation)
        reconstruction_error([TestUtil.random_grid(seed=9)], codec) | should.be.above_or_equal(0.0)

    def test_detokenize_refuses_masks(self, codec):
        indices = np.zeros(8, dtype=np.int64)
        indices[3] = codec.mask_index
        with pytest.raises(UnresolvedMaskError):
            codec.detokenize(TokenMap(indices, codec.patch_spec))

    def test_token_map_length_must_match(self, codec):
        with pytest.raises(ShapeError):
            TokenMap(np.zeros(7), codec.patch_spec)


class TestUsage:
    def test_counts_utilization_and_perplexity(self):
        spec = PatchSpec((4, 4, 2), 2)
        maps = [TokenMap([0, 0, 1, 1], spec), TokenMap([0, 1, 4, 4], spec)]
        usage = codebook_usage(maps, 4)
        usage["counts"] | should.be.equal.to([3, 3, 0, 0])
        usage["utilization"] | should.be.equal.to(0.5)
        abs(usage["perplexity"] - 2.0) | should.be.below(1e-12)


class TestCodecTrainer:
    def test_trains_and_reports(self, tiny_codec_config, ee_helper):
        grids = [TestUtil.random_grid((8, 8, 8), seed=s) for s in range(3)]
        trainer = CodecTrainer(tiny_codec_config, PatchSpec((8, 8, 8), 4), 0.2, seed=4)
        ee_helper.record(trainer, Events.Codec.KMeansIteration, Events.Codec.Epoch)
        codec = trainer.train(grids, progress=False)
        codec.codebook.size | should.be.equal.to(4)
        codec.codebook.dim | should.be.equal.to(4)
        ee_helper.seen[Events.Codec.KMeansIteration] | should.have.length.of(6)
        stages = [args[0] for args in ee_helper.seen[Events.Codec.Epoch]]
        stages | should.be.equal.to(["warmup"] * 3 + ["joint"] * 3)
        all(np.isfinite(v) for entry in trainer.history for v in entry.values()) | should.be.true
        tokens = codec.tokenize(grids[0])
        len(tokens) | should.be.equal.to(8)

    def test_same_seed_same_codec(self, tiny_codec_config):
        grids = [TestUtil.random_grid((8, 8, 8), seed=s) for s in range(2)]
        spec = PatchSpec((8, 8, 8), 4)
        a = CodecTrainer(tiny_codec_config, spec, seed=1).train(grids, progress=False)
        b = CodecTrainer(tiny_codec_config, spec, seed=1).train(grids, progress=False)
        np.array_equal(a.codebook.vectors, b.codebook.vectors) | should.be.true
