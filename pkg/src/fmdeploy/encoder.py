"""Lightweight pixel-timeseries transformer and its multiply-accumulate budget.

Tokens: one per (dynamic band group, timestep), one per static group and an
optional location token. A dynamic token is ``W @ [values * observed, missing]
+ b``: the weight columns on the missing indicators are the learned mask
embedding, so a fully masked token never sees its payload. Month-of-year and
timestep sinusoids are added to dynamic tokens, a learned group embedding to
every token. Pre-norm transformer blocks, final LayerNorm, mean pool over the
valid tokens.

MAC accounting counts every matrix product of the forward pass (linear layers,
``Q K^T`` and ``A V``); element-wise work (norms, softmax, GELU, additions) is
not counted. With ``N = T * G_dyn + G_static + loc`` tokens::

    tokenizer = T * sum_g(2 * n_g * d) + sum_s(n_s * d) + loc * 3 * d
    per block = N * (3d^2 + d^2 + 2 * r * d^2) + 2 * N^2 * d
    head      = n_out * d
"""
from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from fmdeploy.data import DEFAULT_SCHEMA, BandSchema, NormStats, SampleArrays

ARTIFACT_FORMAT = "fmdeploy.encoder/1"
INFERENCE_CHUNK = 64
MIN_TIMESTEPS = 4


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 8
    mlp_ratio: int = 4
    max_timesteps: int = 24
    dropout: float = 0.1
    use_location: bool = True
    schema: BandSchema = field(default=DEFAULT_SCHEMA)

    def validate(self) -> None:
        if self.embed_dim < 1 or self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")
        if self.max_timesteps < MIN_TIMESTEPS:
            raise ValueError(f"max_timesteps must be >= {MIN_TIMESTEPS}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    def n_tokens(self, timesteps: int) -> int:
        s = self.schema
        return timesteps * len(s.dynamic_groups) + len(s.static_groups) + int(self.use_location)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = self.schema.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        if "schema" in d:
            d["schema"] = BandSchema.from_dict(d["schema"])
        return cls(**d)


def dense_macs(tokens: int, d_in: int, d_out: int) -> int:
    """MACs of one linear layer applied to ``tokens`` vectors."""
    return tokens * d_in * d_out


def count_macs(config: EncoderConfig, timesteps: int, head_outputs: int = 0) -> int:
    """Forward-pass multiply-accumulates for one pixel with ``timesteps`` steps."""
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    d, r, s = config.embed_dim, config.mlp_ratio, config.schema
    n = config.n_tokens(timesteps)
    tok = sum(dense_macs(timesteps, 2 * len(g.bands), d) for g in s.dynamic_groups)
    tok += sum(dense_macs(1, len(g.bands), d) for g in s.static_groups)
    tok += dense_macs(1, 3, d) if config.use_location else 0
    block = dense_macs(n, d, 3 * d) + dense_macs(n, d, d) + 2 * dense_macs(n, d, r * d) + 2 * n * n * d
    return tok + config.depth * block + dense_macs(1, d, head_outputs)


def count_parameters(config: EncoderConfig) -> int:
    """Closed-form trainable parameter count of :func:`build_encoder` output."""
    d, r, s = config.embed_dim, config.mlp_ratio, config.schema
    tok = sum(2 * len(g.bands) * d + d for g in s.dynamic_groups)
    tok += sum(len(g.bands) * d + d for g in s.static_groups)
    if config.use_location:
        tok += 3 * d + d
    n_group_emb = len(s.groups) + int(config.use_location)
    block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (r * d * d + r * d) + (r * d * d + d)
    return tok + n_group_emb * d + config.depth * block + 2 * d


def _sinusoid(n_pos: int, dim: int, period: float | None = None) -> torch.Tensor:
    pos = torch.arange(n_pos, dtype=torch.float64)[:, None]
    i = torch.arange(dim // 2, dtype=torch.float64)[None, :]
    if period is None:
        freq = 1.0 / (10000.0 ** (2 * i / dim))
    else:
        freq = 2 * math.pi * (i + 1) / period  # harmonics of the yearly cycle
    ang = pos * freq
    out = torch.zeros(n_pos, dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(ang)
    out[:, 1::2] = torch.cos(ang)[:, : (dim - dim // 2)]
    return out.float()


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = torch.softmax((q * self.scale) @ k.transpose(-2, -1), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)
        self.act = nn.GELU()
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.fc2(self.drop(self.act(self.fc1(self.norm2(x))))))


class PixelEncoder(nn.Module):
    """Transformer over per-timestep band-group tokens of a single pixel."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        self.norm_stats: NormStats | None = None
        d, s = config.embed_dim, config.schema
        self.dyn_slices = s.group_slices("dynamic")
        self.static_slices = s.group_slices("static")
        self.tokenizers = nn.ModuleDict({g.name: nn.Linear(2 * len(g.bands), d) for g in s.dynamic_groups})
        self.static_tokenizers = nn.ModuleDict({g.name: nn.Linear(len(g.bands), d) for g in s.static_groups})
        self.location = nn.Linear(3, d) if config.use_location else None
        self.group_embed = nn.Parameter(torch.zeros(len(s.groups) + int(config.use_location), d))
        self.register_buffer("pos_enc", _sinusoid(config.max_timesteps, d), persistent=False)
        self.register_buffer("month_enc", _sinusoid(12, d, period=12.0), persistent=False)
        self.blocks = nn.ModuleList(
            Block(d, config.num_heads, config.mlp_ratio, config.dropout) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(d)
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            nn.init.trunc_normal_(self.group_embed, std=0.02, a=-0.04, b=0.04, generator=gen)
            for mod in self.modules():
                if isinstance(mod, nn.Linear):
                    nn.init.trunc_normal_(mod.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
                    nn.init.zeros_(mod.bias)
                elif isinstance(mod, nn.LayerNorm):
                    nn.init.ones_(mod.weight)
                    nn.init.zeros_(mod.bias)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def tokens(
        self,
        dynamic: torch.Tensor,
        mask: torch.Tensor,
        static: torch.Tensor,
        months: torch.Tensor,
        latlon: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Embedded input tokens ``[B, N, d]`` and their validity ``[B, N]``."""
        b, t, _ = dynamic.shape
        if not MIN_TIMESTEPS <= t <= self.config.max_timesteps:
            raise ValueError(f"timestep count {t} outside [{MIN_TIMESTEPS}, {self.config.max_timesteps}]")
        dtype = self.group_embed.dtype
        time_enc = self.pos_enc[:t].to(dtype)[None] + self.month_enc.to(dtype)[months]
        toks, valid, gi = [], [], 0
        for name, sl in self.dyn_slices.items():
            m = mask[..., sl]
            x = torch.where(m, dynamic[..., sl], torch.zeros((), dtype=dtype)).to(dtype)
            feats = torch.cat([x, (~m).to(dtype)], dim=-1)
            toks.append(self.tokenizers[name](feats) + time_enc + self.group_embed[gi])
            valid.append(m.any(dim=-1))
            gi += 1
        for name, sl in self.static_slices.items():
            toks.append((self.static_tokenizers[name](static[:, sl].to(dtype)) + self.group_embed[gi])[:, None])
            valid.append(torch.ones(b, 1, dtype=torch.bool))
            gi += 1
        if self.location is not None:
            if latlon is None:
                raise ValueError("encoder configured with a location token needs lat/lon")
            toks.append((self.location(latlon_features(latlon).to(dtype)) + self.group_embed[gi])[:, None])
            valid.append(torch.ones(b, 1, dtype=torch.bool))
        return torch.cat(toks, dim=1), torch.cat(valid, dim=1)

    def forward_tokens(self, dynamic, mask, static, months, latlon=None) -> tuple[torch.Tensor, torch.Tensor]:
        x, valid = self.tokens(dynamic, mask, static, months, latlon)
        n_dyn = dynamic.shape[1] * len(self.dyn_slices)
        if not valid[:, :n_dyn].any(dim=1).all():
            raise ValueError("sample has no valid observation in any dynamic band group")
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x), valid

    def forward(self, dynamic, mask, static, months, latlon=None) -> torch.Tensor:
        x, valid = self.forward_tokens(dynamic, mask, static, months, latlon)
        w = valid.to(x.dtype)[..., None]
        return (x * w).sum(dim=1) / w.sum(dim=1)


def latlon_features(latlon: torch.Tensor) -> torch.Tensor:
    """Unit-sphere (x, y, z) of lat/lon degrees."""
    lat, lon = torch.deg2rad(latlon[..., 0]), torch.deg2rad(latlon[..., 1])
    return torch.stack([torch.cos(lat) * torch.cos(lon), torch.cos(lat) * torch.sin(lon), torch.sin(lat)], dim=-1)


def build_encoder(config: EncoderConfig | None = None, seed: int = 0) -> PixelEncoder:
    return PixelEncoder(config or EncoderConfig(), seed)


def as_tensors(arrays: SampleArrays, dtype=torch.float32) -> tuple[torch.Tensor, ...]:
    """Tensor copies of the stacked arrays (dataset arrays are read-only)."""
    return (
        torch.tensor(arrays.dynamic, dtype=dtype),
        torch.tensor(arrays.mask),
        torch.tensor(arrays.static, dtype=dtype),
        torch.tensor(arrays.months, dtype=torch.long),
        torch.tensor(arrays.latlon, dtype=dtype),
    )


def run_chunked(fn, arrays: SampleArrays, chunk: int = INFERENCE_CHUNK) -> np.ndarray:
    """Apply ``fn`` to fixed-size chunks, padding the last one by repeating its first row.

    Every sample is therefore evaluated inside a batch of exactly ``chunk`` rows,
    which keeps results bit-identical however the caller slices its input.
    """
    n = len(arrays)
    outs = []
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        pad = np.concatenate([idx, np.full(chunk - len(idx), idx[0])])
        with torch.no_grad():
            out = fn(*as_tensors(arrays.take(pad)))
        outs.append(out[: len(idx)].double().numpy())
    return np.concatenate(outs) if outs else np.zeros((0,))


def encode(model: PixelEncoder, arrays: SampleArrays, normalized: bool = False) -> np.ndarray:
    """Inference-mode embeddings ``[N, d]``; raw inputs are normalized with the model's stats."""
    if not normalized and model.norm_stats is not None:
        arrays = model.norm_stats.apply(arrays)
    was_training = model.training
    model.eval()
    try:
        out = run_chunked(model, arrays)
    finally:
        model.train(was_training)
    return out.reshape(len(arrays), model.embed_dim)


# --- artifact I/O --------------------------------------------------------------------


def state_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def encoder_meta(model: PixelEncoder) -> dict:
    return {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "norm_stats": None if model.norm_stats is None else model.norm_stats.to_dict(),
    }


def encoder_from_meta(meta: dict, params: dict[str, np.ndarray], prefix: str = "") -> PixelEncoder:
    model = PixelEncoder(EncoderConfig.from_dict(meta["config"]), meta["seed"])
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in params.items() if k.startswith(prefix)}
    model.load_state_dict(state)
    if meta.get("norm_stats") is not None:
        model.norm_stats = NormStats.from_dict(meta["norm_stats"])
    return model


def write_npz(path: str | Path, meta: dict, params: dict[str, np.ndarray]) -> None:
    """Container: ``__meta__`` (UTF-8 JSON bytes) plus one named array per parameter."""
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, __meta__=blob, **params)
    Path(path).write_bytes(buf.getvalue())


def read_npz(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        params = {k: z[k] for k in z.files if k != "__meta__"}
    return meta, params


def save_encoder(model: PixelEncoder, path: str | Path) -> None:
    write_npz(path, {"format": ARTIFACT_FORMAT, **encoder_meta(model)}, state_arrays(model))


def load_encoder(path: str | Path) -> PixelEncoder:
    meta, params = read_npz(path)
    if meta.get("format") != ARTIFACT_FORMAT:
        raise ValueError(f"{path}: not an encoder artifact (format={meta.get('format')!r})")
    return encoder_from_meta(meta, params)


def clone_encoder(model: PixelEncoder) -> PixelEncoder:
    return copy.deepcopy(model)
