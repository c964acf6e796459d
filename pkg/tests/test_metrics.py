import numpy as np
import pytest
from grappa import should

from partdiff.errors import EmptySurfaceError, ShapeError
from partdiff.helper import Helper
from partdiff.metrics import (
    MetricReport,
    band_power,
    chamfer,
    dct_psd,
    emd,
    evaluate_completion,
    evaluate_generation,
    mean_top_band_power,
    mmd_amd,
    one_nna,
    pairwise,
    read_reports,
    tmd,
    uhd,
    write_reports,
)
from partdiff.shape_corpus import TsdfGrid, make_corpus, sample_surface_points

ORIGIN = np.zeros((1, 3))


def point(x: float, y: float = 0.0, z: float = 0.0) -> np.ndarray:
    return np.array([[x, y, z]])


def cloud(seed: int, n: int = 12, scale: float = 1.0) -> np.ndarray:
    return Helper.rng(seed).standard_normal((n, 3)) * scale


class TestChamfer:
    def test_unit_offset(self):
        chamfer(ORIGIN, point(1.0)) | should.be.equal.to(2.0)

    def test_identity_and_symmetry(self):
        a, b = cloud(1), cloud(2, n=7)
        chamfer(a, a) | should.be.equal.to(0.0)
        chamfer(a, b) | should.be.equal.to(chamfer(b, a))

    def test_empty_set(self):
        with pytest.raises(ValueError):
            chamfer(np.zeros((0, 3)), ORIGIN)


class TestEmd:
    def test_each_point_moves_one(self):
        x = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        y = np.array([[1.0, 0, 0], [3.0, 0, 0]])
        abs(emd(x, y) - 1.0) | should.be.below(1e-12)

    def test_permutation_costs_nothing(self):
        x = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        emd(x, x[::-1]) | should.be.equal.to(0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_dominates_the_nearest_neighbour_bound(self, seed):
        a, b = cloud(seed), cloud(seed + 100)
        nearest = np.linalg.norm(a[:, None] - b[None], axis=-1).min(axis=1).mean()
        emd(a, b) | should.be.above_or_equal(nearest - 1e-12)

    def test_size_guards(self):
        with pytest.raises(ValueError):
            emd(cloud(0, 3), cloud(1, 4))
        with pytest.raises(ValueError):
            emd(cloud(0, 513), cloud(1, 513))


class TestOneNna:
    def test_separated_clusters(self):
        generated = [cloud(s, scale=0.01) for s in range(3)]
        reference = [cloud(s + 10, scale=0.01) + 10.0 for s in range(3)]
        one_nna(generated, reference) | should.be.equal.to(1.0)
        one_nna(reference, generated) | should.be.equal.to(1.0)
        one_nna(generated, reference, kind="EMD") | should.be.equal.to(1.0)

    def test_exchangeable_populations_score_one_half(self):
        scores = []
        for repeat in range(50):
            rng = Helper.rng(Helper.derive_seed(5, "nna", repeat))
            sets = [rng.uniform(-1, 1, size=(4, 3)) for _ in range(80)]
            scores.append(one_nna(sets[:40], sets[40:]))
        stderr = np.std(scores, ddof=1) / np.sqrt(len(scores))
        abs(np.mean(scores) - 0.5) | should.be.below_or_equal(3 * stderr)

    def test_needs_two_sets_per_population(self):
        with pytest.raises(ValueError):
            one_nna([ORIGIN], [point(1.0), point(2.0)])

    def test_thread_count_does_not_change_distances(self):
        sets = [cloud(s, n=5) for s in range(5)]
        np.array_equal(pairwise(sets, threads=1), pairwise(sets, threads=3)) | should.be.true

    def test_unknown_distance(self):
        with pytest.raises(ValueError):
            pairwise([ORIGIN, ORIGIN], kind="F-score")


class TestCompletionMetrics:
    def test_mmd_and_amd(self):
        group = [point(np.sqrt(0.1)), point(np.sqrt(0.2))]
        mmd, amd = mmd_amd([group], [ORIGIN])
        abs(mmd - 0.2) | should.be.below(1e-12)
        abs(amd - 0.3) | should.be.below(1e-12)

    def test_single_completion_gives_equal_mmd_and_amd(self):
        mmd, amd = mmd_amd([[cloud(1)]], [cloud(2)])
        mmd | should.be.equal.to(amd)

    def test_tmd(self):
        a = ORIGIN
        b = point(np.sqrt(0.1))
        c = point(np.sqrt(0.1), np.sqrt(0.2))
        abs(tmd([a, b, c]) - 0.4) | should.be.below(1e-12)
        abs(tmd([a, point(np.sqrt(0.3))]) - 0.6) | should.be.below(1e-12)
        tmd([b, b, b]) | should.be.equal.to(0.0)
        with pytest.raises(ValueError):
            tmd([a])

    def test_uhd(self):
        uhd(ORIGIN, [point(1.0)]) | should.be.equal.to(1.0)
        partial = cloud(3, n=6)
        uhd(partial, [np.concatenate([partial, cloud(4)])]) | should.be.equal.to(0.0)

    def test_uhd_never_grows_with_a_superset(self):
        partial, completion = cloud(5, n=6), cloud(6)
        bigger = np.concatenate([completion, cloud(7) + 50.0])
        uhd(partial, [bigger]) | should.be.below_or_equal(uhd(partial, [completion]))


def impulse_power(n: int, at: int) -> np.ndarray:
    """Closed form DCT-II energy of a unit impulse at (at, at, at), binned like dct_psd"""
    k = np.arange(n)
    coef = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * at + 1) / (2 * n))
    coef[0] = np.sqrt(1.0 / n)
    energy = np.einsum("i,j,k->ijk", coef ** 2, coef ** 2, coef ** 2)
    i, j, l = np.meshgrid(k, k, k, indexing="ij")
    radius = np.sqrt(i ** 2 + j ** 2 + l ** 2)
    band = np.where(radius > 0, np.floor(np.log2(np.where(radius > 0, radius, 1.0))) + 1, 0).astype(int)
    return np.bincount(band.reshape(-1), weights=energy.reshape(-1))


class TestSpectrum:
    @pytest.mark.parametrize("seed", range(3))
    def test_parseval(self, seed):
        values = Helper.rng(seed).uniform(-0.2, 0.2, size=(8, 8, 8))
        dct_psd(values).parseval_error() | should.be.below_or_equal(1e-9)

    def test_constant_grid_is_all_dc(self):
        psd = dct_psd(np.full((8, 8, 8), 0.1))
        abs(psd.power[0] - psd.total) | should.be.below(1e-15)
        psd.power[1:].max() | should.be.below(1e-20)

    @pytest.mark.parametrize("at", [0, 3])
    def test_impulse(self, at):
        values = np.zeros((8, 8, 8))
        values[at, at, at] = 1.0
        psd = dct_psd(values)
        abs(psd.total - 1.0) | should.be.below(1e-12)
        abs(psd.power[0] - 1.0 / 512) | should.be.below(1e-15)
        np.abs(psd.power - impulse_power(8, at)).max() | should.be.below(1e-12)

    def test_bands_are_octaves(self):
        psd = dct_psd(np.zeros((8, 8, 8)))
        # radii reach sqrt(3) * 7, so octaves 0..4 are populated
        psd.bands | should.be.equal.to(5)
        int(psd.counts.sum()) | should.be.equal.to(512)
        psd.counts[0] | should.be.equal.to(1)

    def test_top_band_power(self):
        rough = Helper.rng(1).uniform(-0.2, 0.2, size=(8, 8, 8))
        smooth = np.full((8, 8, 8), 0.1)
        band_power(dct_psd(rough)) | should.be.above(band_power(dct_psd(smooth)))
        mean_top_band_power([rough, rough]) | should.be.equal.to(band_power(dct_psd(rough)))

    def test_non_cubic_grid(self):
        with pytest.raises(ShapeError):
            dct_psd(np.zeros((8, 8, 4)))


class TestReports:
    def test_write_and_read(self, tmp_path):
        reports = [
            MetricReport("1-NNA-CD", 0.625, (4, 4), "CD", dict(points=64)),
            MetricReport("MMD", 0.0125, (2, 3)),
        ]
        tsv, table = write_reports(tmp_path / "eval" / "metrics.tsv", reports)
        lines = tsv.read_text().strip().split("\n")
        lines[0] | should.be.equal.to("1-NNA-CD\t0.625\tdistance=CD,points=64,sizes=4x4")
        table.suffix | should.be.equal.to(".json")
        back = read_reports(tsv)
        [r.to_dict() for r in back] | should.be.equal.to([r.to_dict() for r in reports])


class TestEvaluation:
    @pytest.fixture(scope="class")
    def shapes(self):
        return [grid for grid, _ in make_corpus(6, 3, (8, 8, 8), seed=4, progress=False)]

    def test_generation_reports(self, shapes):
        reports = evaluate_generation(shapes[:3], shapes[3:], points=16, seed=1)
        [r.name for r in reports] | should.be.equal.to(
            ["1-NNA-CD", "1-NNA-EMD", "top-band-power-generated", "top-band-power-reference"]
        )
        for r in reports[:2]:
            r.value | should.be.above_or_equal(0.0)
            r.value | should.be.below_or_equal(1.0)
            r.sizes | should.be.equal.to((3, 3))

    def test_generation_is_seeded(self, shapes):
        a = evaluate_generation(shapes[:3], shapes[3:], points=16, seed=2, distances=("CD",))
        b = evaluate_generation(shapes[:3], shapes[3:], points=16, seed=2, distances=("CD",), threads=2)
        [r.value for r in a] | should.be.equal.to([r.value for r in b])

    def test_completion_reports(self, shapes):
        partials = [np.asarray(sample_surface_points(g, 16, seed=0)) for g in shapes[:2]]
        groups = [[shapes[0], shapes[3]], [shapes[1], shapes[4]]]
        reports = evaluate_completion(groups, shapes[:2], partials, points=16, seed=3)
        [r.name for r in reports] | should.be.equal.to(["MMD", "AMD", "TMD", "UHD"])
        reports[0].value | should.be.below_or_equal(reports[1].value)
        all(r.value >= 0 for r in reports) | should.be.true

    def test_generation_skips_grids_without_a_surface(self, shapes):
        blank = TsdfGrid(np.full((8, 8, 8), 0.2))
        reports = evaluate_generation(shapes[:3] + [blank], shapes[3:], points=16, seed=1, distances=("CD",))
        reports[0].sizes | should.be.equal.to((3, 3))
        reports[0].params["skipped"] | should.be.equal.to(1)
        reports[0].line() | should.contain("skipped=1")
        reports[1].sizes | should.be.equal.to((4,))
        clean = evaluate_generation(shapes[:3], shapes[3:], points=16, seed=1, distances=("CD",))
        clean[0].params["skipped"] | should.be.equal.to(0)

    def test_generation_needs_two_surfaces(self, shapes):
        blank = TsdfGrid(np.full((8, 8, 8), 0.2))
        with pytest.raises(EmptySurfaceError):
            evaluate_generation([shapes[0], blank, blank], shapes[3:], points=16, seed=1)

    def test_completion_skips_grids_without_a_surface(self, shapes):
        blank = TsdfGrid(np.full((8, 8, 8), 0.2))
        partials = [np.asarray(sample_surface_points(g, 16, seed=0)) for g in shapes[:3]]
        groups = [[shapes[0], blank, shapes[3]], [shapes[1], shapes[4]], [blank]]
        reports = evaluate_completion(groups, shapes[:3], partials, points=16, seed=3)
        [r.name for r in reports] | should.be.equal.to(["MMD", "AMD", "TMD", "UHD"])
        for r in reports:
            r.params["skipped"] | should.be.equal.to(2)
            r.sizes | should.be.equal.to((2, 2))
            r.value | should.be.above_or_equal(0.0)
        with pytest.raises(EmptySurfaceError):
            evaluate_completion([[blank]], shapes[:1], partials[:1], points=16, seed=3)
