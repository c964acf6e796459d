"""Patch partition, vector quantized per-patch codec and the token map type."""
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pyee2 import EventEmitterS
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus

from . import autodiff as ad
from ._typings import FloatArray, IntArray, OptionalLoop, Shape3, SlotsT
from .autodiff import Tensor
from .config import CodecConfig
from .errors import CodebookError, ShapeError, UnresolvedMaskError
from .events import Events
from .helper import Helper
from .optim import AdamW, StepDecay
from .shape_corpus import TsdfGrid

__all__ = [
    "Codebook",
    "CodecParams",
    "CodecTrainer",
    "PatchCodec",
    "PatchSpec",
    "TokenMap",
    "assemble",
    "codebook_usage",
    "decode",
    "detokenize",
    "encode",
    "encode_patch",
    "init_codebook_kmeans",
    "partition",
    "quantize",
    "reconstruction_error",
    "tokenize",
    "vqvae_loss",
]

logger = logging.getLogger(__name__)


class PatchSpec:
    __slots__: SlotsT = ["__weakref__", "dims", "edge"]

    def __init__(self, dims: Sequence[int], edge: int) -> None:
        if edge < 2:
            raise ShapeError(f"patch edge must be at least 2, got {edge}")
        h, w, d = (int(x) for x in dims)
        if h % edge or w % edge or d % edge:
            raise ShapeError(f"grid dims {(h, w, d)} are not divisible by patch edge {edge}")
        self.dims: Shape3 = (h, w, d)
        self.edge: int = int(edge)

    @classmethod
    def from_grid(cls, patches_per_axis: Sequence[int], edge: int) -> "PatchSpec":
        return cls([int(p) * edge for p in patches_per_axis], edge)

    @property
    def patches_per_axis(self) -> Shape3:
        a, b, c = (extent // self.edge for extent in self.dims)
        return a, b, c

    @property
    def count(self) -> int:
        a, b, c = self.patches_per_axis
        return a * b * c

    @property
    def volume(self) -> int:
        return self.edge ** 3

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, PatchSpec):
            return NotImplemented
        return self.dims == other.dims and self.edge == other.edge

    def __str__(self) -> str:
        return f"PatchSpec(dims={self.dims}, edge={self.edge}, patches_per_axis={self.patches_per_axis})"

    def __repr__(self) -> str:
        return self.__str__()


class TokenMap:
    """N codebook indices in row-major patch order; index K stands for [MASK]"""

    __slots__: SlotsT = ["__weakref__", "indices", "patch_spec", "class_label"]

    def __init__(
        self,
        indices: Any,
        patch_spec: PatchSpec,
        class_label: Optional[int] = None,
    ) -> None:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size != patch_spec.count:
            raise ShapeError(f"token map holds {idx.size} indices, {patch_spec} needs {patch_spec.count}")
        if idx.size and idx.min() < 0:
            raise ValueError("token indices must be non negative")
        self.indices: IntArray = idx
        self.patch_spec: PatchSpec = patch_spec
        self.class_label: Optional[int] = class_label

    def __len__(self) -> int:
        return int(self.indices.size)

    def has_mask(self, mask_index: int) -> bool:
        return bool(np.any(self.indices == mask_index))

    def copy(self, indices: Optional[IntArray] = None) -> "TokenMap":
        return TokenMap(
            self.indices.copy() if indices is None else indices, self.patch_spec, self.class_label
        )

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, TokenMap):
            return NotImplemented
        return (
            self.patch_spec == other.patch_spec
            and self.class_label == other.class_label
            and np.array_equal(self.indices, other.indices)
        )

    def __str__(self) -> str:
        return f"TokenMap(N={len(self)}, grid={self.patch_spec.patches_per_axis}, class_label={self.class_label})"

    def __repr__(self) -> str:
        return self.__str__()


class Codebook:
    __slots__: SlotsT = ["__weakref__", "entries"]

    def __init__(self, entries: Any) -> None:
        table = entries if isinstance(entries, Tensor) else Tensor(entries, requires_grad=True)
        if table.ndim != 2 or table.shape[0] < 2:
            raise CodebookError(f"codebook needs at least 2 entries, got shape {table.shape}")
        if not np.all(np.isfinite(table.data)):
            raise CodebookError("codebook entries must be finite")
        table.requires_grad = True
        table.name = "codebook"
        self.entries: Tensor = table

    @property
    def size(self) -> int:
        return int(self.entries.shape[0])

    @property
    def dim(self) -> int:
        return int(self.entries.shape[1])

    @property
    def mask_index(self) -> int:
        return self.size

    @property
    def vectors(self) -> FloatArray:
        return self.entries.data

    def __str__(self) -> str:
        return f"Codebook(K={self.size}, n_z={self.dim})"

    def __repr__(self) -> str:
        return self.__str__()


class CodecParams:
    """Two layer perceptron encoder (P -> 2n_z -> n_z) and decoder (n_z -> 2n_z -> P)"""

    __slots__: SlotsT = ["__weakref__", "edge", "latent_dim", "truncation", "tensors"]

    NAMES: Tuple[str, ...] = (
        "enc.w1",
        "enc.b1",
        "enc.w2",
        "enc.b2",
        "dec.w1",
        "dec.b1",
        "dec.w2",
        "dec.b2",
    )

    def __init__(
        self,
        edge: int,
        latent_dim: int,
        truncation: float = 0.2,
        seed: int = 0,
        zero_final: bool = False,
        tensors: Optional[Dict[str, Tensor]] = None,
    ) -> None:
        self.edge: int = int(edge)
        self.latent_dim: int = int(latent_dim)
        self.truncation: float = float(truncation)
        p, h, z = self.edge ** 3, 2 * self.latent_dim, self.latent_dim
        if tensors is None:
            rng = Helper.rng(seed)

            def _w(fan_in: int, fan_out: int) -> FloatArray:
                return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

            tensors = {
                "enc.w1": Tensor(_w(p, h)),
                "enc.b1": Tensor(np.zeros(h)),
                "enc.w2": Tensor(np.zeros((h, z)) if zero_final else _w(h, z)),
                "enc.b2": Tensor(np.zeros(z)),
                "dec.w1": Tensor(_w(z, h)),
                "dec.b1": Tensor(np.zeros(h)),
                "dec.w2": Tensor(_w(h, p)),
                "dec.b2": Tensor(np.zeros(p)),
            }
        expected = {"enc.w1": (p, h), "enc.w2": (h, z), "dec.w1": (z, h), "dec.w2": (h, p)}
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name} has shape {tensors[name].shape}, expected {shape}")
        for name, tensor in tensors.items():
            tensor.requires_grad = True
            tensor.name = name
        self.tensors: Dict[str, Tensor] = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> List[Tensor]:
        return [self.tensors[n] for n in self.NAMES]

    def __str__(self) -> str:
        return f"CodecParams(edge={self.edge}, n_z={self.latent_dim}, truncation={self.truncation})"

    def __repr__(self) -> str:
        return self.__str__()


def partition(grid: TsdfGrid, spec: PatchSpec) -> FloatArray:
    """(N, e, e, e) patches in row-major patch order"""
    if grid.dims != spec.dims:
        raise ShapeError(f"{grid} does not match {spec}")
    e = spec.edge
    px, py, pz = spec.patches_per_axis
    blocks = grid.values.reshape(px, e, py, e, pz, e).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(spec.count, e, e, e).copy()


def assemble(patches: FloatArray, spec: PatchSpec, truncation: float) -> TsdfGrid:
    e = spec.edge
    px, py, pz = spec.patches_per_axis
    blocks = np.asarray(patches, dtype=np.float64).reshape(px, py, pz, e, e, e)
    values = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(spec.dims)
    return TsdfGrid(values, truncation)


def encode(patches: Any, params: CodecParams) -> Tensor:
    """Encode (B, P) raw patch values scaled by 1 / truncation into (B, n_z) latents"""
    x = ad.as_tensor(np.asarray(patches, dtype=np.float64).reshape(-1, params.edge ** 3) / params.truncation)
    h = ad.gelu(x @ params["enc.w1"] + params["enc.b1"])
    return h @ params["enc.w2"] + params["enc.b2"]


def decode(latents: Any, params: CodecParams) -> Tensor:
    """Decode (B, n_z) latents into (B, P) patch values in truncation units"""
    h = ad.gelu(ad.as_tensor(latents) @ params["dec.w1"] + params["dec.b1"])
    return h @ params["dec.w2"] + params["dec.b2"]


def encode_patch(patch: Any, params: CodecParams) -> FloatArray:
    return encode(np.asarray(patch).reshape(1, -1), params).data[0]


def quantize(z: Any, codebook: Codebook) -> Tuple[Any, FloatArray]:
    """Nearest entry by Euclidean distance, lowest index on ties

    :param z: A latent vector (n_z,) or a batch (B, n_z)
    :return: (index, entry) for a vector or (indices, entries) for a batch
    """
    zz = np.asarray(z, dtype=np.float64)
    single = zz.ndim == 1
    dist = cdist(np.atleast_2d(zz), codebook.vectors, metric="sqeuclidean")
    idx = np.argmin(dist, axis=1)
    entries = codebook.vectors[idx]
    if single:
        return int(idx[0]), entries[0].copy()
    return idx, entries


def init_codebook_kmeans(
    latents: Any, K: int, iters: int, seed: int
) -> Tuple[Codebook, List[float]]:
    """k-means++ seeding followed by ``iters`` Lloyd iterations

    Empty clusters keep their previous centroid.

    :return: The codebook and the mean squared quantization error before every
        iteration and after the last one
    """
    x = np.asarray(latents, dtype=np.float64)
    distinct = np.unique(x, axis=0).shape[0]
    if distinct < K:
        raise CodebookError(f"k-means needs {K} distinct latents, only {distinct} given")
    centers, _ = kmeans_plusplus(x, n_clusters=K, random_state=int(seed % (2 ** 32)))
    centers = centers.astype(np.float64)
    history: List[float] = []
    for it in range(iters + 1):
        dist = cdist(x, centers, metric="sqeuclidean")
        assign = np.argmin(dist, axis=1)
        history.append(float(dist[np.arange(x.shape[0]), assign].mean()))
        if it == iters:
            break
        for k in range(K):
            members = x[assign == k]
            if members.shape[0]:
                centers[k] = members.mean(axis=0)
        logger.debug("k-means iteration %d objective %.6f", it, history[-1])
    return Codebook(centers), history


def vqvae_loss(
    patches: Any,
    params: CodecParams,
    codebook: Codebook,
    beta: float = 0.25,
) -> Tuple[Tensor, Dict[str, Any]]:
    """Reconstruction + codebook + commitment loss with the straight-through estimator

    recon is the mean squared error in truncation units, the codebook term is
    mean((sg[z] - z_q)²) and the commitment term beta * mean((z - sg[z_q])²).
    """
    if beta < 0:
        raise ValueError(f"commitment weight must be non negative: {beta}")
    x = np.asarray(patches, dtype=np.float64).reshape(-1, params.edge ** 3)
    target = x / params.truncation
    z = encode(x, params)
    idx, _ = quantize(z.data, codebook)
    zq = ad.embedding(codebook.entries, idx)
    recon = decode(ad.straight_through(z, zq), params)
    diff = recon - target
    l_recon = (diff * diff).mean()
    vq_diff = ad.stop_gradient(z) - zq
    l_vq = (vq_diff * vq_diff).mean()
    commit_diff = z - ad.stop_gradient(zq)
    l_commit = (commit_diff * commit_diff).mean() * beta
    loss = l_recon + l_vq + l_commit
    parts = dict(
        recon=l_recon.item(), vq=l_vq.item(), commit=l_commit.item(), indices=idx
    )
    return loss, parts


class PatchCodec:
    """A trained codec: patch geometry, network parameters and codebook"""

    __slots__: SlotsT = ["__weakref__", "patch_spec", "params", "codebook"]

    def __init__(self, patch_spec: PatchSpec, params: CodecParams, codebook: Codebook) -> None:
        if params.edge != patch_spec.edge:
            raise ShapeError(f"{params} does not match {patch_spec}")
        if params.latent_dim != codebook.dim:
            raise ShapeError(f"{params} does not match {codebook}")
        self.patch_spec: PatchSpec = patch_spec
        self.params: CodecParams = params
        self.codebook: Codebook = codebook

    @property
    def mask_index(self) -> int:
        return self.codebook.mask_index

    @property
    def truncation(self) -> float:
        return self.params.truncation

    def tokenize(self, grid: TsdfGrid, class_label: Optional[int] = None) -> TokenMap:
        return tokenize(grid, self.params, self.codebook, self.patch_spec, class_label)

    def detokenize(self, tokens: TokenMap) -> TsdfGrid:
        return detokenize(tokens, self.params, self.codebook)

    def __str__(self) -> str:
        return f"PatchCodec({self.patch_spec}, {self.params}, {self.codebook})"

    def __repr__(self) -> str:
        return self.__str__()


def tokenize(
    grid: TsdfGrid,
    params: CodecParams,
    codebook: Codebook,
    spec: Optional[PatchSpec] = None,
    class_label: Optional[int] = None,
) -> TokenMap:
    spec = spec or PatchSpec(grid.dims, params.edge)
    patches = partition(grid, spec)
    idx, _ = quantize(encode(patches.reshape(spec.count, -1), params).data, codebook)
    return TokenMap(idx, spec, class_label)


def detokenize(tokens: TokenMap, params: CodecParams, codebook: Codebook) -> TsdfGrid:
    if tokens.has_mask(codebook.mask_index) or tokens.indices.max() > codebook.mask_index:
        raise UnresolvedMaskError(f"{tokens} still contains [MASK] tokens")
    decoded = decode(codebook.vectors[tokens.indices], params).data * params.truncation
    decoded = np.clip(decoded, -params.truncation, params.truncation)
    return assemble(decoded, tokens.patch_spec, params.truncation)


def reconstruction_error(grids: Sequence[TsdfGrid], codec: PatchCodec) -> float:
    """Mean absolute per voxel error of detokenize(tokenize(grid))"""
    errors = [
        float(np.abs(codec.detokenize(codec.tokenize(g)).values - g.values).mean())
        for g in grids
    ]
    return float(np.mean(errors)) if errors else 0.0


def codebook_usage(token_maps: Sequence[TokenMap], K: int) -> Dict[str, Any]:
    """Entry counts, fraction of entries in use and perplexity of the usage histogram"""
    counts = np.zeros(K, dtype=np.int64)
    for tm in token_maps:
        real = tm.indices[tm.indices < K]
        counts += np.bincount(real, minlength=K)[:K]
    total = counts.sum()
    probs = counts / total if total else np.zeros(K)
    nz = probs[probs > 0]
    perplexity = float(np.exp(-(nz * np.log(nz)).sum())) if nz.size else 0.0
    used = int((counts > 0).sum())
    if used < K:
        logger.warning("%d of %d codebook entries are never used", K - used, K)
    return dict(counts=counts.tolist(), utilization=used / K, perplexity=perplexity)


class CodecTrainer(EventEmitterS):
    """Trains a PatchCodec: reconstruction warmup, k-means codebook init, joint VQ training"""

    def __init__(
        self,
        config: CodecConfig,
        patch_spec: PatchSpec,
        truncation: float = 0.2,
        seed: int = 0,
        loop: OptionalLoop = None,
    ) -> None:
        super().__init__(loop=Helper.ensure_loop(loop))
        self.config: CodecConfig = config
        self.patch_spec: PatchSpec = patch_spec
        self.truncation: float = truncation
        self.seed: int = seed
        self.history: List[Dict[str, float]] = []

    def _batches(self, rng: np.random.Generator, count: int) -> List[IntArray]:
        order = rng.permutation(count)
        size = max(1, self.config.batch_size)
        return [order[i : i + size] for i in range(0, count, size)]

    def train(self, grids: Sequence[TsdfGrid], progress: bool = True) -> PatchCodec:
        cfg = self.config
        patches = np.concatenate([partition(g, self.patch_spec) for g in grids], axis=0)
        patches = patches.reshape(patches.shape[0], -1)
        unique = np.unique(patches, axis=0)
        logger.info("codec training on %d patches (%d distinct)", patches.shape[0], unique.shape[0])
        params = CodecParams(
            self.patch_spec.edge,
            cfg.latent_dim,
            self.truncation,
            seed=Helper.derive_seed(self.seed, "codec-init"),
        )
        rng = Helper.rng(Helper.derive_seed(self.seed, "codec-batches"))
        optimizer = AdamW(params.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        decay = StepDecay(optimizer, cfg.lr_decay, cfg.lr_decay_every)

        for epoch in Helper.progress(range(cfg.warmup_epochs), "codec warmup", disable=not progress):
            losses = []
            for batch in self._batches(rng, unique.shape[0]):
                x = unique[batch]
                recon = decode(encode(x, params), params)
                diff = recon - x / self.truncation
                loss = (diff * diff).mean()
                optimizer.zero_grad()
                ad.backward(loss)
                optimizer.step()
                losses.append(loss.item())
            decay.epoch_end(epoch)
            self._record("warmup", epoch, dict(recon=float(np.mean(losses))))

        latents = encode(unique, params).data
        codebook, objective = init_codebook_kmeans(
            latents, cfg.codebook_size, cfg.kmeans_iters, Helper.derive_seed(self.seed, "kmeans")
        )
        for it, value in enumerate(objective):
            self.emit(Events.Codec.KMeansIteration, it, value)

        optimizer = AdamW(
            params.parameters() + [codebook.entries],
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
        )
        decay = StepDecay(optimizer, cfg.lr_decay, cfg.lr_decay_every)
        for epoch in Helper.progress(range(cfg.epochs), "codec", disable=not progress):
            sums: Dict[str, List[float]] = dict(loss=[], recon=[], vq=[], commit=[])
            for batch in self._batches(rng, patches.shape[0]):
                loss, parts = vqvae_loss(patches[batch], params, codebook, cfg.commitment)
                optimizer.zero_grad()
                ad.backward(loss)
                optimizer.step()
                sums["loss"].append(loss.item())
                for key in ("recon", "vq", "commit"):
                    sums[key].append(parts[key])
            decay.epoch_end(epoch)
            self._record("joint", epoch, {k: float(np.mean(v)) for k, v in sums.items()})
        return PatchCodec(self.patch_spec, params, codebook)

    def _record(self, stage: str, epoch: int, values: Dict[str, float]) -> None:
        entry = dict(values, epoch=float(epoch))
        self.history.append(entry)
        logger.info("codec %s epoch %d %s", stage, epoch, values)
        self.emit(Events.Codec.Epoch, stage, epoch, values)
