"""Binary artifact formats and the on-disk layout of a run directory.

Every file starts with a 5-byte magic. Integers and floats are little-endian;
volume and weight payloads are stored as float32.

=======  ===============================================================
TSDF1    u32 H, W, D; f32 truncation; H*W*D f32 values, x fastest
CDBK1    u32 K, n_z; K*n_z f32 entries, row-major
TOKM1    u32 patches per axis (3); u32 K; i32 class label (-1 = none);
         N u32 indices
CKPT1    u32 tensor count; per tensor: u16 name length, name (utf-8),
         u8 rank, rank * u32 extents, f32 values row-major
=======  ===============================================================
"""
import logging
import os
import platform
import struct
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import psutil
import ujson

from ._typings import FloatArray, SlotsT
from .autodiff import Tensor
from .errors import FormatError, MissingArtifactError
from .patch_codec import Codebook, CodecParams, PatchCodec, PatchSpec, TokenMap
from .shape_corpus import TsdfGrid

__all__ = [
    "ArtifactLayout",
    "CDBK_MAGIC",
    "CKPT_MAGIC",
    "TOKM_MAGIC",
    "TSDF_MAGIC",
    "read_checkpoint",
    "read_codebook",
    "read_codec",
    "read_corpus",
    "read_sidecar",
    "read_tokens",
    "read_tsdf",
    "write_checkpoint",
    "write_codebook",
    "write_codec",
    "write_corpus",
    "write_manifest",
    "write_sidecar",
    "write_tokens",
    "write_tsdf",
]

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TSDF_MAGIC: bytes = b"TSDF1"
CDBK_MAGIC: bytes = b"CDBK1"
TOKM_MAGIC: bytes = b"TOKM1"
CKPT_MAGIC: bytes = b"CKPT1"


class _Reader:
    """Sequential little-endian reader over the bytes of one file"""

    __slots__: SlotsT = ["__weakref__", "path", "data", "offset", "magic"]

    def __init__(self, path: PathLike, magic: bytes) -> None:
        self.path: Path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(str(self.path))
        self.data: bytes = self.path.read_bytes()
        self.magic: bytes = magic
        found = self.data[: len(magic)]
        if found != magic:
            raise FormatError.BadMagic(self.path, magic, found)
        self.offset: int = len(magic)

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise FormatError.Truncated(self.path, self.magic)
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype, count=count)

    def finish(self) -> None:
        if self.offset != len(self.data):
            logger.warning("%s: %d trailing bytes ignored", self.path, len(self.data) - self.offset)


def _write(path: PathLike, *chunks: bytes) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(b"".join(chunks))
    return target


def write_tsdf(path: PathLike, grid: TsdfGrid) -> Path:
    h, w, d = grid.dims
    header = TSDF_MAGIC + struct.pack("<3If", h, w, d, grid.truncation)
    payload = grid.values.ravel(order="F").astype("<f4").tobytes()
    return _write(path, header, payload)


def read_tsdf(path: PathLike) -> TsdfGrid:
    reader = _Reader(path, TSDF_MAGIC)
    h, w, d, truncation = reader.unpack("<3If")
    values = reader.array("<f4", h * w * d).astype(np.float64).reshape((h, w, d), order="F")
    reader.finish()
    truncation = float(truncation)
    return TsdfGrid(np.clip(values, -truncation, truncation), truncation)


def write_codebook(path: PathLike, codebook: Codebook) -> Path:
    header = CDBK_MAGIC + struct.pack("<2I", codebook.size, codebook.dim)
    return _write(path, header, codebook.vectors.astype("<f4").tobytes())


def read_codebook(path: PathLike) -> Codebook:
    reader = _Reader(path, CDBK_MAGIC)
    k, n_z = reader.unpack("<2I")
    entries = reader.array("<f4", k * n_z).astype(np.float64).reshape(k, n_z)
    reader.finish()
    return Codebook(entries)


def write_tokens(path: PathLike, tokens: TokenMap, K: int) -> Path:
    if tokens.indices.max() > K:
        raise ValueError(f"{tokens} holds indices above the mask index {K}")
    label = -1 if tokens.class_label is None else int(tokens.class_label)
    header = TOKM_MAGIC + struct.pack("<3IIi", *tokens.patch_spec.patches_per_axis, K, label)
    return _write(path, header, tokens.indices.astype("<u4").tobytes())


def read_tokens(path: PathLike, edge: int) -> Tuple[TokenMap, int]:
    """Read a token map; the patch edge is not stored and comes from the run geometry

    :return: The token map and the codebook size K it was written against
    """
    reader = _Reader(path, TOKM_MAGIC)
    px, py, pz, k, label = reader.unpack("<3IIi")
    indices = reader.array("<u4", px * py * pz).astype(np.int64)
    reader.finish()
    spec = PatchSpec.from_grid((px, py, pz), edge)
    return TokenMap(indices, spec, None if label < 0 else label), int(k)


def write_checkpoint(path: PathLike, tensors: Dict[str, FloatArray]) -> Path:
    chunks = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(value)
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    return _write(path, *chunks)


def read_checkpoint(path: PathLike) -> Dict[str, FloatArray]:
    reader = _Reader(path, CKPT_MAGIC)
    (count,) = reader.unpack("<I")
    tensors: Dict[str, FloatArray] = {}
    for _ in range(count):
        (length,) = reader.unpack("<H")
        name = reader.take(length).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = reader.array("<f4", size).astype(np.float64).reshape(shape)
    reader.finish()
    return tensors


def write_sidecar(path: PathLike, fields: Dict[str, Any]) -> Path:
    text = ujson.dumps(fields, sort_keys=True, indent=2) + "\n"
    return _write(path, text.encode("utf-8"))


def read_sidecar(path: PathLike) -> Dict[str, Any]:
    target = Path(path)
    if not target.exists():
        raise FileNotFoundError(str(target))
    return ujson.loads(target.read_text(encoding="utf-8"))


def write_codec(directory: PathLike, codec: PatchCodec) -> None:
    """codec.ckpt (CKPT1 weights), codebook.cdbk (CDBK1) and codec.json"""
    root = Path(directory)
    write_checkpoint(root / "codec.ckpt", {n: t.data for n, t in codec.params.tensors.items()})
    write_codebook(root / "codebook.cdbk", codec.codebook)
    write_sidecar(
        root / "codec.json",
        dict(
            dims=list(codec.patch_spec.dims),
            edge=codec.patch_spec.edge,
            latent_dim=codec.params.latent_dim,
            truncation=codec.params.truncation,
        ),
    )


def read_codec(directory: PathLike) -> PatchCodec:
    root = Path(directory)
    meta = read_sidecar(root / "codec.json")
    weights = read_checkpoint(root / "codec.ckpt")
    params = CodecParams(
        meta["edge"],
        meta["latent_dim"],
        meta["truncation"],
        tensors={name: Tensor(value) for name, value in weights.items()},
    )
    return PatchCodec(PatchSpec(meta["dims"], meta["edge"]), params, read_codebook(root / "codebook.cdbk"))


def write_corpus(directory: PathLike, corpus: Sequence[Tuple[TsdfGrid, int]]) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["file\tlabel"]
    for i, (grid, label) in enumerate(corpus):
        name = f"shape_{i:05d}.tsdf"
        write_tsdf(root / name, grid)
        lines.append(f"{name}\t{label}")
    (root / "labels.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("wrote %d shapes to %s", len(corpus), root)
    return root


def read_corpus(directory: PathLike) -> List[Tuple[TsdfGrid, int]]:
    root = Path(directory)
    labels = root / "labels.tsv"
    if not labels.exists():
        raise FileNotFoundError(str(labels))
    corpus = []
    for line in labels.read_text(encoding="utf-8").splitlines()[1:]:
        if not line.strip():
            continue
        name, label = line.split("\t")
        corpus.append((read_tsdf(root / name), int(label)))
    return corpus


def _host_facts() -> Dict[str, Any]:
    return dict(
        python=platform.python_version(),
        numpy=np.__version__,
        platform=platform.platform(),
        cpus=psutil.cpu_count(logical=True),
        memory=psutil.virtual_memory().total,
    )


def write_manifest(
    path: PathLike,
    command: str,
    config_hash: str,
    seed: int,
    started: float,
    outputs: Optional[Sequence[PathLike]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    from . import __version__

    manifest = dict(
        command=command,
        config_hash=config_hash,
        seed=int(seed),
        wall_time=round(time.time() - started, 3),
        versions=dict(partdiff=__version__, **_host_facts()),
        outputs=[os.fspath(o) for o in outputs or ()],
    )
    if extra:
        manifest.update(extra)
    return write_sidecar(path, manifest)


class ArtifactLayout:
    """Fixed paths of every artifact under one run directory

    Manifests live apart from the data directories so that re-running a
    command reproduces its data directory byte for byte.
    """

    __slots__: SlotsT = ["__weakref__", "root"]

    PRODUCERS: Dict[str, str] = {
        "corpus": "gen-corpus",
        "codec": "train-vq",
        "tokens": "tokenize",
        "model": "train-diffusion",
        "samples": "sample",
    }

    def __init__(self, root: PathLike) -> None:
        self.root: Path = Path(root)

    @property
    def corpus(self) -> Path:
        return self.root / "corpus"

    @property
    def codec(self) -> Path:
        return self.root / "codec"

    @property
    def tokens(self) -> Path:
        return self.root / "tokens"

    @property
    def model(self) -> Path:
        return self.root / "model"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    @property
    def manifests(self) -> Path:
        return self.root / "manifests"

    def output(self, name: str) -> Path:
        return self.root / name

    def manifest(self, command: str) -> Path:
        return self.manifests / f"{command}.json"

    def require(self, artifact: str) -> Path:
        """The artifact directory, or MissingArtifactError naming the producing command"""
        path: Path = getattr(self, artifact)
        if not path.exists() or not any(path.iterdir()):
            raise MissingArtifactError.For(path, self.PRODUCERS[artifact])
        return path

    def __str__(self) -> str:
        return f"ArtifactLayout(root={self.root})"

    def __repr__(self) -> str:
        return self.__str__()
