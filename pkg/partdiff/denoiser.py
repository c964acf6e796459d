"""Transformer denoiser estimating log p(s0_hat | s_t, label).

Layout: token + factorized 3-d position embedding, ordinary blocks, cascaded
multi-frequency fusion (MFM) layers, a final block, then a linear read-out
to K log-probabilities per position. Timestep and label reach every block
through AdaLayerNorm shift and scale.
"""
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from ._typings import FloatArray, IntArray, SlotsT
from .autodiff import Tensor
from .config import DenoiserConfig
from .errors import ShapeError
from .formats import read_checkpoint, read_sidecar, write_checkpoint, write_sidecar
from .helper import Helper

__all__ = [
    "CONDITION_MODES",
    "Denoiser",
    "DenoiserParams",
    "MFM_FUSIONS",
    "MfmState",
    "attention",
    "drop_labels",
    "load_denoiser",
    "save_denoiser",
    "timestep_embedding",
]

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CONDITION_MODES = ("none", "class", "token-sequence")
MFM_FUSIONS = ("residual-add", "cross-attention")


def timestep_embedding(t: Any, channels: int, max_period: float = 10000.0) -> FloatArray:
    """Sinusoidal embedding of integer timesteps, (B,) -> (B, channels)"""
    ts = np.asarray(t, dtype=np.float64).reshape(-1)
    half = channels // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    args = ts[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if channels % 2:
        emb = np.concatenate([emb, np.zeros((ts.size, 1))], axis=-1)
    return emb


def drop_labels(labels: IntArray, p: float, empty_label: int, rng: np.random.Generator) -> IntArray:
    """Replace each label by the empty label with probability p"""
    out = np.asarray(labels, dtype=np.int64).copy()
    if p <= 0:
        return out
    drop = rng.random(out.shape) < p
    out[drop] = empty_label
    return out


class DenoiserParams:
    """Named parameter tensors with their weight decay bucket"""

    __slots__: SlotsT = ["__weakref__", "tensors", "decay", "_rng", "_scale"]

    def __init__(self, seed: int = 0, scale: float = 0.02) -> None:
        self.tensors: Dict[str, Tensor] = {}
        self.decay: Dict[str, bool] = {}
        self._rng: np.random.Generator = Helper.rng(seed)
        self._scale: float = scale

    def add(self, name: str, shape: Tuple[int, ...], init: str = "normal", decay: bool = True) -> Tensor:
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            data = self._rng.standard_normal(shape) * self._scale
        tensor = Tensor(data, requires_grad=True, name=name)
        self.tensors[name] = tensor
        self.decay[name] = decay
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> List[str]:
        return list(self.tensors)

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    def decay_mask(self) -> List[bool]:
        return [self.decay[n] for n in self.tensors]

    def state(self) -> Dict[str, FloatArray]:
        return {n: t.data for n, t in self.tensors.items()}

    def load_state(self, state: Dict[str, FloatArray]) -> None:
        missing = set(self.tensors) - set(state)
        unexpected = set(state) - set(self.tensors)
        if missing or unexpected:
            raise ShapeError(f"checkpoint mismatch, missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, value in state.items():
            if tuple(value.shape) != self.tensors[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != {self.tensors[name].shape}")
            self.tensors[name].data = np.array(value, dtype=self.tensors[name].data.dtype)

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


class MfmState:
    """High frequency per-token branch x and low frequency pooled branch y"""

    __slots__: SlotsT = ["__weakref__", "x", "y"]

    def __init__(self, x: Tensor, y: Optional[Tensor] = None) -> None:
        self.x: Tensor = x
        self.y: Optional[Tensor] = y

    def __str__(self) -> str:
        return f"MfmState(x={self.x.shape}, y={None if self.y is None else self.y.shape})"

    def __repr__(self) -> str:
        return self.__str__()


def attention(
    xq: Tensor,
    xkv: Tensor,
    params: DenoiserParams,
    prefix: str,
    heads: int,
) -> Tuple[Tensor, FloatArray]:
    """Multi-head scaled dot product attention with output projection

    :return: The projected output (B, Nq, C) and the attention weights (B, H, Nq, Nk)
    """
    b, nq, c = xq.shape
    nk = xkv.shape[1]
    if c % heads:
        raise ShapeError(f"channels {c} are not divisible by {heads} heads")
    d = c // heads
    q = (xq @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"]).reshape(b, nq, heads, d).transpose(0, 2, 1, 3)
    k = (xkv @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"]).reshape(b, nk, heads, d).transpose(0, 2, 1, 3)
    v = (xkv @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"]).reshape(b, nk, heads, d).transpose(0, 2, 1, 3)
    weights = ad.softmax((q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d)), axis=-1)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, nq, c)
    return out @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"], weights.data


class Denoiser:
    """p(s0_hat | s_t, y) over the K codebook entries"""

    __slots__: SlotsT = ["__weakref__", "config", "params", "zero_residual"]

    def __init__(self, config: DenoiserConfig, seed: int = 0, zero_residual: bool = False) -> None:
        if config.condition_mode not in CONDITION_MODES:
            raise ShapeError(f"unknown condition mode {config.condition_mode!r}")
        if config.mfm_fusion not in MFM_FUSIONS:
            raise ShapeError(f"unknown MFM fusion {config.mfm_fusion!r}")
        if config.channels % config.heads:
            raise ShapeError(f"channels {config.channels} are not divisible by {config.heads} heads")
        if config.mfm_layers and any(axis % config.pool for axis in config.grid):
            raise ShapeError(f"MFM pool {config.pool} does not divide the patch grid {config.grid}")
        if config.num_classes < 1:
            raise ShapeError("num_classes must count at least the empty label")
        self.config: DenoiserConfig = config
        self.zero_residual: bool = zero_residual
        self.params: DenoiserParams = DenoiserParams(seed, config.init_scale)
        self._build()

    def _build(self) -> None:
        cfg, p = self.config, self.params
        C, K = cfg.channels, cfg.codebook_size
        residual_init = "zeros" if self.zero_residual else "normal"
        p.add("tok_emb", (K + 1, C), decay=False)
        for axis, extent in zip("xyz", cfg.grid):
            p.add(f"pos_{axis}", (extent, C), decay=False)
        p.add("label_emb", (cfg.num_classes, C), decay=False)
        if cfg.condition_mode == "token-sequence":
            p.add("ctx_emb", (K + 1, C), decay=False)
            p.add("ctx_pos", (cfg.tokens, C), decay=False)

        def adaln(prefix: str) -> None:
            p.add(f"{prefix}.w", (C, 2 * C), "zeros")
            p.add(f"{prefix}.b", (2 * C,), "zeros", decay=False)

        def attn(prefix: str) -> None:
            for name in ("q", "k", "v"):
                p.add(f"{prefix}.w{name}", (C, C))
                p.add(f"{prefix}.b{name}", (C,), "zeros", decay=False)
            p.add(f"{prefix}.wo", (C, C), residual_init)
            p.add(f"{prefix}.bo", (C,), "zeros", decay=False)

        def mlp(prefix: str) -> None:
            hidden = cfg.mlp_ratio * C
            p.add(f"{prefix}.w1", (C, hidden))
            p.add(f"{prefix}.b1", (hidden,), "zeros", decay=False)
            p.add(f"{prefix}.w2", (hidden, C), residual_init)
            p.add(f"{prefix}.b2", (C,), "zeros", decay=False)

        def norm(prefix: str) -> None:
            p.add(f"{prefix}.g", (C,), "ones", decay=False)
            p.add(f"{prefix}.b", (C,), "zeros", decay=False)

        def ordinary(prefix: str, cross: bool) -> None:
            adaln(f"{prefix}.ada1")
            attn(f"{prefix}.attn")
            if cross:
                norm(f"{prefix}.ca_norm")
                attn(f"{prefix}.ca")
            adaln(f"{prefix}.ada2")
            mlp(f"{prefix}.mlp")

        cross = cfg.condition_mode == "token-sequence"
        for i in range(cfg.ordinary_blocks):
            ordinary(f"block{i}", cross)
        for i in range(cfg.mfm_layers):
            prefix = f"mfm{i}"
            adaln(f"{prefix}.ada_h")
            attn(f"{prefix}.attn_h")
            if cfg.mfm_dual_attention:
                adaln(f"{prefix}.ada_l")
                attn(f"{prefix}.attn_l")
            branches = ("h", "l") if cfg.mfm_dual_fusion else ("h",)
            for branch in branches:
                norm(f"{prefix}.fuse_{branch}_norm")
                if cfg.mfm_fusion == "residual-add":
                    mlp(f"{prefix}.fuse_{branch}")
                else:
                    attn(f"{prefix}.fuse_{branch}")
            for branch in ("h", "l"):
                adaln(f"{prefix}.ada_mlp_{branch}")
                mlp(f"{prefix}.mlp_{branch}")
        ordinary("final", False)
        adaln("out_ada")
        p.add("out.w", (C, K))
        p.add("out.b", (K,), "zeros", decay=False)
        logger.debug("denoiser with %d parameters", p.count())

    # building blocks

    def _adaln(self, x: Tensor, cond: Tensor, prefix: str) -> Tensor:
        C = self.config.channels
        mod = ad.silu(cond) @ self.params[f"{prefix}.w"] + self.params[f"{prefix}.b"]
        b = mod.shape[0]
        shift = mod[:, :C].reshape(b, 1, C)
        scale = mod[:, C:].reshape(b, 1, C)
        return ad.layer_norm(x) * (scale + 1.0) + shift

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = ad.gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
        return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _attn(self, xq: Tensor, xkv: Tensor, prefix: str) -> Tensor:
        out, _ = attention(xq, xkv, self.params, prefix, self.config.heads)
        return out

    def embed(
        self,
        tokens: Any,
        t: Any,
        labels: Optional[Any] = None,
        use_positions: bool = True,
    ) -> Tuple[Tensor, Tensor]:
        """Token plus position features (B, N, C) and the AdaLayerNorm condition (B, C)"""
        cfg = self.config
        s = np.asarray(tokens, dtype=np.int64)
        if s.ndim == 1:
            s = s[None]
        b, n = s.shape
        if n != cfg.tokens:
            raise ShapeError(f"expected {cfg.tokens} tokens, got {n}")
        if s.min() < 0 or s.max() > cfg.codebook_size:
            raise ValueError(f"token indices must lie in [0, {cfg.codebook_size}]")
        ts = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (b,))
        if ts.min() < 1 or ts.max() > cfg.steps:
            raise ValueError(f"timesteps must lie in [1, {cfg.steps}]")
        if labels is None or cfg.condition_mode == "none":
            lab = np.full(b, cfg.empty_label, dtype=np.int64)
        else:
            lab = np.broadcast_to(np.asarray(labels, dtype=np.int64).reshape(-1), (b,))
        if lab.min() < 0 or lab.max() >= cfg.num_classes:
            raise ValueError(f"labels must lie in [0, {cfg.num_classes})")
        p = self.params
        x = ad.embedding(p["tok_emb"], s)
        if use_positions:
            px, py, pz = cfg.grid
            pos = (
                p["pos_x"].reshape(px, 1, 1, cfg.channels)
                + p["pos_y"].reshape(1, py, 1, cfg.channels)
                + p["pos_z"].reshape(1, 1, pz, cfg.channels)
            )
            x = x + pos.reshape(1, n, cfg.channels)
        cond = ad.embedding(p["label_emb"], lab) + timestep_embedding(ts, cfg.channels)
        return x, cond

    def embed_condition(self, condition: Any) -> Optional[Tensor]:
        if condition is None or self.config.condition_mode != "token-sequence":
            return None
        c = np.asarray(condition, dtype=np.int64)
        if c.ndim == 1:
            c = c[None]
        if c.shape[1] == 0:
            return None
        if c.shape[1] > self.config.tokens:
            raise ShapeError(f"condition sequence longer than {self.config.tokens}")
        pos = self.params["ctx_pos"][: c.shape[1]]
        return ad.embedding(self.params["ctx_emb"], c) + pos

    def ordinary_block(
        self, x: Tensor, cond: Tensor, prefix: str, context: Optional[Tensor] = None
    ) -> Tensor:
        h = self._adaln(x, cond, f"{prefix}.ada1")
        x = x + self._attn(h, h, f"{prefix}.attn")
        if context is not None and f"{prefix}.ca.wq" in self.params:
            x = self.cross_attention_block(x, context, prefix)
        return x + self._mlp(self._adaln(x, cond, f"{prefix}.ada2"), f"{prefix}.mlp")

    def cross_attention_block(self, x: Tensor, context: Optional[Tensor], prefix: str) -> Tensor:
        """Queries from shape features, keys and values from condition tokens"""
        if context is None or context.shape[1] == 0:
            return x
        return x + self._attn(self._norm(x, f"{prefix}.ca_norm"), context, f"{prefix}.ca")

    def mfm_layer(self, state: MfmState, cond: Tensor, index: int) -> MfmState:
        cfg = self.config
        prefix = f"mfm{index}"
        x = state.x
        y = state.y if state.y is not None else ad.mean_pool3d(x, cfg.grid, cfg.pool)

        h = self._adaln(x, cond, f"{prefix}.ada_h")
        x = x + self._attn(h, h, f"{prefix}.attn_h")
        if cfg.mfm_dual_attention:
            hl = self._adaln(y, cond, f"{prefix}.ada_l")
            y = y + self._attn(hl, hl, f"{prefix}.attn_l")

        if cfg.mfm_fusion == "residual-add":
            aligned = ad.upsample3d(y, cfg.grid, cfg.pool)
            x_new = x + self._mlp(self._norm(x + aligned, f"{prefix}.fuse_h_norm"), f"{prefix}.fuse_h")
            if cfg.mfm_dual_fusion:
                pooled = ad.mean_pool3d(x, cfg.grid, cfg.pool)
                y = y + self._mlp(self._norm(y + pooled, f"{prefix}.fuse_l_norm"), f"{prefix}.fuse_l")
        else:
            x_new = x + self._attn(self._norm(x, f"{prefix}.fuse_h_norm"), y, f"{prefix}.fuse_h")
            if cfg.mfm_dual_fusion:
                y = y + self._attn(self._norm(y, f"{prefix}.fuse_l_norm"), x, f"{prefix}.fuse_l")
        x = x_new

        x = x + self._mlp(self._adaln(x, cond, f"{prefix}.ada_mlp_h"), f"{prefix}.mlp_h")
        y = y + self._mlp(self._adaln(y, cond, f"{prefix}.ada_mlp_l"), f"{prefix}.mlp_l")
        return MfmState(x, y)

    def forward(
        self,
        tokens: Any,
        t: Any,
        labels: Optional[Any] = None,
        condition: Optional[Any] = None,
    ) -> Tensor:
        """(B, N, K) log-probabilities of the clean tokens"""
        x, cond = self.embed(tokens, t, labels)
        context = self.embed_condition(condition)
        for i in range(self.config.ordinary_blocks):
            x = self.ordinary_block(x, cond, f"block{i}", context)
        if self.config.mfm_layers:
            state = MfmState(x)
            for i in range(self.config.mfm_layers):
                state = self.mfm_layer(state, cond, i)
            x = state.x
        x = self.ordinary_block(x, cond, "final")
        h = self._adaln(x, cond, "out_ada")
        return ad.log_softmax(h @ self.params["out.w"] + self.params["out.b"], axis=-1)

    __call__ = forward

    def log_probs(
        self,
        tokens: Any,
        t: int,
        labels: Optional[Any] = None,
        condition: Optional[Any] = None,
    ) -> FloatArray:
        """Forward without recording gradients; (N, K) for a single map"""
        s = np.asarray(tokens, dtype=np.int64)
        out = self.forward(s, t, labels, condition).data
        return out[0] if s.ndim == 1 else out

    def __str__(self) -> str:
        return f"Denoiser(C={self.config.channels}, blocks={self.config.ordinary_blocks}, mfm={self.config.mfm_layers}, params={self.params.count()})"

    def __repr__(self) -> str:
        return self.__str__()


def save_denoiser(directory: PathLike, denoiser: Denoiser) -> Path:
    """denoiser.ckpt (CKPT1) plus the denoiser.json sidecar of config fields"""
    root = Path(directory)
    write_checkpoint(root / "denoiser.ckpt", denoiser.params.state())
    fields = {k: list(v) if isinstance(v, tuple) else v for k, v in denoiser.config.to_dict().items()}
    write_sidecar(root / "denoiser.json", fields)
    logger.info("saved %s to %s", denoiser, root)
    return root


def load_denoiser(directory: PathLike) -> Denoiser:
    root = Path(directory)
    config = DenoiserConfig(**read_sidecar(root / "denoiser.json"))
    denoiser = Denoiser(config)
    denoiser.params.load_state(read_checkpoint(root / "denoiser.ckpt"))
    return denoiser
