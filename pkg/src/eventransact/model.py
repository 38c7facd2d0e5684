"""Video Transformer Network: a per-frame image transformer ``spatial``,
a sliding-window temporal transformer with a global CLS token ``temporal``,
a linear classification ``head`` and an MLP ``projector`` feeding the
contrastive loss."""

from __future__ import annotations

import io
import json
import struct
import zipfile
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "ModelConfig",
    "VTN",
    "windowed_attention",
    "spatial_encode",
    "temporal_encode",
    "classify",
    "project",
    "forward",
    "count_params",
    "save_model",
    "load_model",
    "write_tensors",
    "read_tensors",
]


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    in_channels: int = 2
    embed_dim: int = 768
    spatial_depth: int = 12
    spatial_heads: int = 12
    temporal_layers: int = 3
    temporal_heads: int = 8
    attention_window: int = 8
    clip_len: int = 16
    num_classes: int = 11
    proj_hidden: int = 768
    proj_dim: int = 128
    mlp_ratio: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        for heads in (self.spatial_heads, self.temporal_heads):
            if heads < 1 or self.embed_dim % heads:
                raise ValueError(f"embed_dim {self.embed_dim} not divisible by {heads} heads")
        if self.attention_window < 1:
            raise ValueError("attention_window must be >= 1")
        if self.proj_dim < 1 or self.proj_hidden < 1:
            raise ValueError("projection sizes must be >= 1")
        if self.clip_len < 1 or self.num_classes < 1:
            raise ValueError("clip_len and num_classes must be >= 1")
        if self.spatial_depth < 0 or self.temporal_layers < 0:
            raise ValueError("depths must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)


# -- attention ---------------------------------------------------------------


def windowed_attention(q, k, v, window: int, dropout: nn.Module | None = None):
    """Sliding-window attention where position 0 is a global token.

    ``q, k, v`` are ``(B, H, L, Dh)``. Token 0 attends to every position and
    every position attends to token 0; token ``t >= 1`` additionally attends to
    tokens ``t'`` with ``|t - t'| <= window``. Keys are gathered per query band
    so cost is ``O(L * window)``.
    """
    B, H, L, Dh = q.shape
    scale = Dh**-0.5
    drop = dropout if dropout is not None else (lambda a: a)

    g_attn = drop(torch.softmax(q[:, :, :1] @ k.transpose(-1, -2) * scale, dim=-1))
    g_out = g_attn @ v
    n = L - 1
    if n == 0:
        return g_out
    w = min(window, n - 1)
    qs = q[:, :, 1:]
    kw = F.pad(k[:, :, 1:], (0, 0, w, w)).unfold(2, 2 * w + 1, 1)  # (B,H,n,Dh,2w+1)
    vw = F.pad(v[:, :, 1:], (0, 0, w, w)).unfold(2, 2 * w + 1, 1)
    local = torch.einsum("bhnd,bhndw->bhnw", qs, kw) * scale
    pos = torch.arange(n, device=q.device)[:, None] + torch.arange(-w, w + 1, device=q.device)
    local = local.masked_fill(~((pos >= 0) & (pos < n)), float("-inf"))
    to_cls = (qs * k[:, :, :1]).sum(-1, keepdim=True) * scale
    attn = drop(torch.softmax(torch.cat([to_cls, local], dim=-1), dim=-1))
    out = attn[..., :1] * v[:, :, :1] + torch.einsum("bhnw,bhndw->bhnd", attn[..., 1:], vw)
    return torch.cat([g_out, out], dim=2)


class SelfAttention(nn.Module):
    def __init__(self, dim, heads, dropout=0.0):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)

    def forward(self, x, window=None):
        B, L, D = x.shape
        q, k, v = self.qkv(x).reshape(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        if window is None:
            attn = torch.softmax(q @ k.transpose(-1, -2) * (D // self.heads) ** -0.5, dim=-1)
            out = self.attn_drop(attn) @ v
        else:
            out = windowed_attention(q, k, v, window, self.attn_drop)
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio=4, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x, window=None):
        x = x + self.drop(self.attn(self.norm1(x), window))
        return x + self.drop(self.mlp(self.norm2(x)))


# -- encoders ----------------------------------------------------------------


class SpatialEncoder(nn.Module):
    """Image transformer applied to each frame independently; the spatial CLS
    token's final state is the frame embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, p = cfg.embed_dim, cfg.patch_size
        self.patch_size = p
        self.grid = cfg.image_size // p
        self.patch_embed = nn.Linear(p * p * cfg.in_channels, d)
        self.cls_token = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches + 1, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.spatial_heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.spatial_depth)
        )
        self.norm = nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)

    def patchify(self, frames):
        N, S, _, C = frames.shape
        g, p = self.grid, self.patch_size
        x = frames.reshape(N, g, p, g, p, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(N, g * g, p * p * C)

    def forward(self, frames):
        """``(N, S, S, C)`` frames -> ``(N, d)`` embeddings."""
        x = self.patch_embed(self.patchify(frames))
        cls = self.cls_token.expand(x.shape[0], 1, -1)
        x = self.drop(torch.cat([cls, x], dim=1) + self.pos_embed)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[:, 0]


class TemporalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.window = cfg.attention_window
        self.cls_token = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.clip_len + 1, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.temporal_heads, cfg.mlp_ratio, cfg.dropout)
            for _ in range(cfg.temporal_layers)
        )

    def tokens(self, emb):
        n = emb.shape[1]
        if n + 1 > self.pos_embed.shape[0]:
            raise ValueError(f"sequence of {n} frames exceeds positional table {self.pos_embed.shape[0]}")
        cls = (self.cls_token + self.pos_embed[0]).expand(emb.shape[0], 1, -1)
        return torch.cat([cls, emb + self.pos_embed[1 : n + 1]], dim=1)

    def forward(self, emb):
        """``(B, n, d)`` frame embeddings -> ``(B, d)`` CLS output."""
        x = self.tokens(emb)
        for blk in self.blocks:
            x = blk(x, window=self.window)
        return x[:, 0]


class VTN(nn.Module):
    def __init__(self, config: ModelConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.spatial = SpatialEncoder(config)
        self.temporal = TemporalEncoder(config)
        self.head = nn.Linear(d, config.num_classes)
        self.projector = nn.Sequential(
            nn.Linear(d, config.proj_hidden), nn.GELU(), nn.Linear(config.proj_hidden, config.proj_dim)
        )
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int | None = None):
        """Truncated normal (std 0.02, cut at 2 std) weights, zero biases, zero
        CLS tokens and temporal positions."""
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
                    nn.init.zeros_(m.bias)
                elif isinstance(m, nn.LayerNorm):
                    nn.init.ones_(m.weight)
                    nn.init.zeros_(m.bias)
            nn.init.trunc_normal_(self.spatial.pos_embed, std=0.02, a=-0.04, b=0.04)
            for p in (self.spatial.cls_token, self.temporal.cls_token, self.temporal.pos_embed):
                nn.init.zeros_(p)

    def _as_batch(self, clips):
        x = torch.as_tensor(clips, dtype=self.head.weight.dtype, device=self.head.weight.device)
        if x.dim() == 4:
            x = x.unsqueeze(0)
        cfg = self.config
        S, C = cfg.image_size, cfg.in_channels
        if x.dim() != 5 or tuple(x.shape[2:]) != (S, S, C):
            raise ValueError(f"expected clips of shape (B, n, {S}, {S}, {C}), got {tuple(x.shape)}")
        return x

    def embed(self, clips):
        """``(B, n, S, S, C)`` -> ``(B, n, d)`` per-frame spatial embeddings."""
        x = self._as_batch(clips)
        B, n = x.shape[:2]
        return self.spatial(x.reshape(B * n, *x.shape[2:])).reshape(B, n, -1)

    def logits(self, clips):
        return self.head(self.temporal(self.embed(clips)))

    def forward(self, view1, view2=None):
        """Logits of ``view1``; in training mode with ``view2`` given, also the
        per-frame projections of both views."""
        if not self.training or view2 is None:
            return {"logits": self.logits(view1)}
        x1, x2 = self._as_batch(view1), self._as_batch(view2)
        if x1.shape != x2.shape:
            raise ValueError(f"view shapes differ: {tuple(x1.shape)} vs {tuple(x2.shape)}")
        B = x1.shape[0]
        emb = self.embed(torch.cat([x1, x2]))
        e1, e2 = emb[:B], emb[B:]
        return {
            "logits": self.head(self.temporal(e1)),
            "proj1": self.projector(e1),
            "proj2": self.projector(e2),
        }


# -- functional surface ------------------------------------------------------


def _clip_tensor(model: VTN, clip):
    if hasattr(clip, "to_array"):
        clip = clip.to_array()
    return model._as_batch(clip)


def spatial_encode(model: VTN, clip):
    """Frame embeddings ``(n, d)`` of one clip (``(B, n, d)`` for a batch)."""
    batched = not hasattr(clip, "to_array") and np.ndim(clip) == 5
    out = model.embed(_clip_tensor(model, clip))
    return out if batched else out[0]


def temporal_encode(model: VTN, embeddings):
    emb = torch.as_tensor(embeddings, dtype=model.head.weight.dtype)
    single = emb.dim() == 2
    if emb.shape[-1] != model.config.embed_dim:
        raise ValueError(f"embedding dim {emb.shape[-1]} != {model.config.embed_dim}")
    out = model.temporal(emb[None] if single else emb)
    return out[0] if single else out


def classify(model: VTN, cls_output):
    return model.head(torch.as_tensor(cls_output, dtype=model.head.weight.dtype))


def project(model: VTN, embeddings):
    return model.projector(torch.as_tensor(embeddings, dtype=model.head.weight.dtype))


def forward(model: VTN, view1, view2=None, mode: str = "train") -> dict:
    """Run the model in ``mode`` ("train" enables dropout and projections).
    The model's previous train/eval state is restored afterwards."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and view2 is None:
        raise ValueError("train mode needs two views")
    single = hasattr(view1, "to_array") or np.ndim(view1) == 4
    was_training = model.training
    model.train(mode == "train")
    try:
        out = model(_clip_tensor(model, view1), None if view2 is None else _clip_tensor(model, view2))
    finally:
        model.train(was_training)
    return {k: v[0] for k, v in out.items()} if single else out


def _block_params(d, r):
    return (4 + 2 * r) * d * d + (9 + r) * d


def count_params(config: ModelConfig, part: str | None = None) -> int:
    """Exact number of learnable scalars, overall or for one of
    ``spatial``, ``temporal``, ``classify``, ``project``."""
    d, r, p = config.embed_dim, config.mlp_ratio, config.patch_size
    parts = {
        "spatial": p * p * config.in_channels * d
        + d
        + d
        + (config.num_patches + 1) * d
        + config.spatial_depth * _block_params(d, r)
        + 2 * d,
        "temporal": d + (config.clip_len + 1) * d + config.temporal_layers * _block_params(d, r),
        "classify": d * config.num_classes + config.num_classes,
        "project": d * config.proj_hidden + config.proj_hidden + config.proj_hidden * config.proj_dim + config.proj_dim,
    }
    if part is None:
        return sum(parts.values())
    if part not in parts:
        raise ValueError(f"unknown part {part!r}")
    return parts[part]


# -- checkpoint archive ------------------------------------------------------
#
# params.bin is a sequence of records, all integers little-endian:
#   u32 name_len | name (utf-8) | u8 dtype code | u8 ndim | ndim x u64 dim | raw data

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


def write_tensors(tensors: dict) -> bytes:
    buf = io.BytesIO()
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.kind in "fi" else arr.dtype
        if dt not in _CODES:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def read_tensors(data: bytes) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    while pos < len(data):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + size > len(data):
            raise ValueError(f"truncated tensor {name!r}")
        out[name] = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += size
    return out


def save_model(model: VTN, path, extra: dict[str, bytes] | None = None) -> None:
    """Zip archive with ``config.json`` and ``params.bin`` (plus ``extra`` members)."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("config.json", json.dumps(asdict(model.config), indent=2))
        zf.writestr("params.bin", write_tensors(model.state_dict()))
        for name, payload in (extra or {}).items():
            zf.writestr(name, payload)


def load_model(path) -> VTN:
    with zipfile.ZipFile(path) as zf:
        config = ModelConfig.from_dict(json.loads(zf.read("config.json")))
        tensors = read_tensors(zf.read("params.bin"))
    return model_from_tensors(config, tensors)


def model_from_tensors(config: ModelConfig, tensors: dict[str, np.ndarray]) -> VTN:
    model = VTN(config)
    state = model.state_dict()
    missing = set(state) - set(tensors)
    unexpected = set(tensors) - set(state)
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    for name, arr in tensors.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != config shape {tuple(state[name].shape)}")
    dtype = next(iter(tensors.values())).dtype
    if dtype == np.float64:
        model = model.double()
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return model
