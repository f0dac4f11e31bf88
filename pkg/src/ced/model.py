"""Conformer self-encoder + cross-subject transformer encoders + real/fake head.

Both speakers' turns go through one shared conformer branch. Cross-encoder 1
lets the leading turn's frames query the responding turn; cross-encoder 2 does
the reverse. Pooled cross outputs are the embeddings the entrainment distance
is computed on.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import TurnPair
from .errors import CheckpointError, ConfigError, InputTooShortError, NumericFailure

CHECKPOINT_MAGIC = b"CEDCKPT\x00"
CHECKPOINT_VERSION = 1
CROSS_LAYER_IDS = ("cross_encoder_1", "cross_encoder_2")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 768
    conformer_units: int = 352
    transformer_units: int = 64
    heads: int = 4
    conformer_layers: int = 1
    cross_layers: int = 1
    conv_kernel: int = 31
    dropout: float = 0.2
    max_frames: int = 512
    pooling: str = "mean"
    conformer_ff_units: int = 512
    cross_ff_units: int = 256
    head_units: int = 64
    share_cross: bool = False
    cross_positional: bool = True
    head_features: str = "compare"

    def __post_init__(self):
        for name in ("input_dim", "conformer_units", "transformer_units", "heads", "conformer_layers",
                     "cross_layers", "conv_kernel", "conformer_ff_units", "cross_ff_units", "head_units"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.conformer_units % self.heads:
            raise ConfigError(f"conformer_units ({self.conformer_units}) must be divisible by heads ({self.heads})")
        if self.transformer_units % self.heads:
            raise ConfigError(f"transformer_units ({self.transformer_units}) must be divisible by heads ({self.heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.max_frames < 2:
            raise ConfigError("max_frames must be >= 2")
        if self.head_features not in ("concat", "compare"):
            raise ConfigError(f"head_features must be 'concat' or 'compare', got {self.head_features!r}")
        if self.pooling not in ("mean", "first"):
            raise ConfigError(f"pooling must be 'mean' or 'first', got {self.pooling!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EmbeddingPair:
    z_lead: np.ndarray
    z_resp: np.ndarray
    pooled_lead: np.ndarray
    pooled_resp: np.ndarray


@dataclass
class AttentionRecord:
    layer_id: str
    weights: np.ndarray  # [heads x T_query x T_key]
    depth: int = 0


def sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encodings for (possibly negative) positions -> [len x dim]."""
    half = torch.arange(0, dim, 2, dtype=positions.dtype, device=positions.device)
    inv = torch.exp(-math.log(10000.0) * half / dim)
    ang = positions[:, None] * inv[None, :]
    out = torch.zeros(len(positions), dim, dtype=positions.dtype, device=positions.device)
    out[:, 0::2] = torch.sin(ang)
    out[:, 1::2] = torch.cos(ang[:, : dim // 2])
    return out


def _masked_softmax(scores: torch.Tensor, key_mask: torch.Tensor | None) -> torch.Tensor:
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    return torch.softmax(scores, dim=-1)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.h, self.dk = heads, d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.h, self.dk).transpose(1, 2)

    def _scores(self, q, k, query):
        return q @ k.transpose(-1, -2) / math.sqrt(self.dk)

    def forward(self, query, kv, key_mask=None):
        q, k, v = self._split(self.q(query)), self._split(self.k(kv)), self._split(self.v(kv))
        attn = _masked_softmax(self._scores(q, k, query), key_mask)
        ctx = (self.drop(attn) @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.out(ctx), attn


class RelPositionAttention(MultiHeadAttention):
    """Self-attention with Transformer-XL style relative position terms."""

    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__(d, heads, dropout)
        self.pos = nn.Linear(d, d, bias=False)
        self.bias_u = nn.Parameter(torch.zeros(heads, self.dk))
        self.bias_v = nn.Parameter(torch.zeros(heads, self.dk))
        nn.init.xavier_uniform_(self.bias_u)
        nn.init.xavier_uniform_(self.bias_v)

    def _scores(self, q, k, query):
        t = query.shape[1]
        # row m of rel holds relative offset (t - 1 - m)
        rel = torch.arange(t - 1, -t, -1, dtype=query.dtype, device=query.device)
        p = self.pos(sinusoid(rel, query.shape[-1])).view(2 * t - 1, self.h, self.dk).transpose(0, 1)
        content = (q + self.bias_u[None, :, None, :]) @ k.transpose(-1, -2)
        position = (q + self.bias_v[None, :, None, :]) @ p.transpose(-1, -2)[None]
        # query i, key j -> offset i - j -> row t - 1 - i + j
        idx = (t - 1 - torch.arange(t, device=query.device)[:, None] + torch.arange(t, device=query.device)[None, :])
        position = position.gather(-1, idx.expand(position.shape[0], self.h, t, t))
        return (content + position) / math.sqrt(self.dk)


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, dropout: float, act=nn.SiLU):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, hidden), act(), nn.Dropout(dropout), nn.Linear(hidden, d), nn.Dropout(dropout))

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    """Pointwise+GLU, depthwise conv, norm, SiLU, pointwise.

    LayerNorm replaces the usual BatchNorm so that a frame's output never
    depends on other sequences in the batch or on padding.
    """

    def __init__(self, d: int, kernel: int, dropout: float):
        super().__init__()
        self.norm_in = nn.LayerNorm(d)
        self.pw1 = nn.Linear(d, 2 * d)
        self.dw = nn.Conv1d(d, d, kernel, padding=kernel // 2, groups=d)
        self.norm_mid = nn.LayerNorm(d)
        self.pw2 = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        y = F.glu(self.pw1(self.norm_in(x)), dim=-1)
        if mask is not None:
            y = y.masked_fill(~mask[..., None], 0.0)
        y = self.dw(y.transpose(1, 2)).transpose(1, 2)
        y = self.pw2(F.silu(self.norm_mid(y)))
        return self.drop(y)


class ConformerBlock(nn.Module):
    def __init__(self, d: int, ff: int, heads: int, kernel: int, dropout: float):
        super().__init__()
        self.ff1_norm = nn.LayerNorm(d)
        self.ff1 = FeedForward(d, ff, dropout)
        self.att_norm = nn.LayerNorm(d)
        self.att = RelPositionAttention(d, heads, dropout)
        self.att_drop = nn.Dropout(dropout)
        self.conv = ConvModule(d, kernel, dropout)
        self.ff2_norm = nn.LayerNorm(d)
        self.ff2 = FeedForward(d, ff, dropout)
        self.out_norm = nn.LayerNorm(d)

    def forward(self, x, mask=None):
        x = x + 0.5 * self.ff1(self.ff1_norm(x))
        h = self.att_norm(x)
        a, _ = self.att(h, h, mask)
        x = x + self.att_drop(a)
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ff2(self.ff2_norm(x))
        return self.out_norm(x)


class CrossEncoderLayer(nn.Module):
    """Post-norm transformer layer whose attention reads another sequence."""

    def __init__(self, d: int, ff: int, heads: int, dropout: float):
        super().__init__()
        self.att = MultiHeadAttention(d, heads, dropout)
        self.att_drop = nn.Dropout(dropout)
        self.norm1 = nn.LayerNorm(d)
        self.ff = FeedForward(d, ff, dropout, act=nn.GELU)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x, memory, memory_mask=None):
        a, w = self.att(x, memory, memory_mask)
        x = self.norm1(x + self.att_drop(a))
        x = self.norm2(x + self.ff(x))
        return x, w


class CEDModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.input_dim, cfg.conformer_units)
        self.input_drop = nn.Dropout(cfg.dropout)
        self.conformer = nn.ModuleList(
            ConformerBlock(cfg.conformer_units, cfg.conformer_ff_units, cfg.heads, cfg.conv_kernel, cfg.dropout)
            for _ in range(cfg.conformer_layers)
        )
        self.bridge = nn.Linear(cfg.conformer_units, cfg.transformer_units)
        make = lambda: nn.ModuleList(  # noqa: E731
            CrossEncoderLayer(cfg.transformer_units, cfg.cross_ff_units, cfg.heads, cfg.dropout)
            for _ in range(cfg.cross_layers)
        )
        self.cross1 = make()
        self.cross2 = self.cross1 if cfg.share_cross else make()
        self.head = nn.Sequential(
            nn.Linear((2 if cfg.head_features == "concat" else 4) * cfg.transformer_units, cfg.head_units),
            nn.GELU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.head_units, 1),
        )

    def self_encode(self, x, mask=None):
        h = self.input_drop(self.input_proj(x))
        for block in self.conformer:
            h = block(h, mask)
        return h

    def _stream(self, h):
        z = self.bridge(h)
        if self.cfg.cross_positional:
            pos = torch.arange(z.shape[1], dtype=z.dtype, device=z.device)
            z = z + sinusoid(pos, z.shape[-1])[None]
        return z

    def cross_encode(self, h_lead, h_resp, lead_mask=None, resp_mask=None):
        """Returns (z_lead, z_resp, [(layer_id, depth, weights), ...])."""
        q_lead, q_resp = self._stream(h_lead), self._stream(h_resp)
        z_lead, z_resp, records = q_lead, q_resp, []
        for depth, layer in enumerate(self.cross1):
            z_lead, w = layer(z_lead, q_resp, resp_mask)
            records.append((CROSS_LAYER_IDS[0], depth, w))
        for depth, layer in enumerate(self.cross2):
            z_resp, w = layer(z_resp, q_lead, lead_mask)
            records.append((CROSS_LAYER_IDS[1], depth, w))
        return z_lead, z_resp, records

    def pool(self, z, mask=None):
        if self.cfg.pooling == "first":
            return z[:, 0]
        if mask is None:
            return z.mean(dim=1)
        m = mask[..., None].to(z.dtype)
        return torch.where(mask[..., None], z, torch.zeros_like(z)).sum(1) / m.sum(1)

    def embed(self, lead, resp, lead_mask=None, resp_mask=None):
        h_lead = self.self_encode(lead, lead_mask)
        h_resp = self.self_encode(resp, resp_mask)
        z_lead, z_resp, records = self.cross_encode(h_lead, h_resp, lead_mask, resp_mask)
        return z_lead, z_resp, self.pool(z_lead, lead_mask), self.pool(z_resp, resp_mask), records

    def head_input(self, p_lead, p_resp):
        if self.cfg.head_features == "concat":
            return torch.cat([p_lead, p_resp], dim=-1)
        return torch.cat([p_lead, p_resp, (p_lead - p_resp).abs(), p_lead * p_resp], dim=-1)

    def forward(self, lead, resp, lead_mask=None, resp_mask=None):
        _, _, p_lead, p_resp, _ = self.embed(lead, resp, lead_mask, resp_mask)
        return self.head(self.head_input(p_lead, p_resp)).squeeze(-1)


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> CEDModel:
    cfg = cfg or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CEDModel(cfg)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# -- pair preparation -----------------------------------------------------------


def _as_tensor(x, dtype=None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    return t.to(dtype or torch.get_default_dtype())


def truncate_pair(pair: TurnPair, max_frames: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the tail of the leading turn and the head of the responding turn."""
    return pair.leading.frames[-max_frames:], pair.responding.frames[:max_frames]


def pad_batch(seqs: Sequence[np.ndarray], dtype=None, min_len: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length [T x D] arrays into [B x Tmax x D] plus a validity mask."""
    tmax = max(max(len(s) for s in seqs), min_len)
    dim = seqs[0].shape[1]
    out = torch.zeros(len(seqs), tmax, dim, dtype=dtype or torch.get_default_dtype())
    mask = torch.zeros(len(seqs), tmax, dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = _as_tensor(s, out.dtype)
        mask[i, : len(s)] = True
    return out, mask


def collate_pairs(pairs: Sequence[TurnPair], max_frames: int, dtype=None):
    leads, resps = zip(*(truncate_pair(p, max_frames) for p in pairs))
    for seq in leads + resps:
        if len(seq) < 2:
            raise InputTooShortError(f"turn with {len(seq)} frames; at least 2 required")
    lead, lead_mask = pad_batch(leads, dtype)
    resp, resp_mask = pad_batch(resps, dtype)
    return lead, lead_mask, resp, resp_mask


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _check_finite(t: torch.Tensor, layer: str, mask=None):
    vals = t if mask is None else t[mask]
    if not torch.isfinite(vals).all():
        raise NumericFailure("non-finite activations", layer=layer)


# -- functional API ----------------------------------------------------------------


@torch.no_grad()
def self_encode(model: CEDModel, x, mask=None) -> torch.Tensor:
    """Encode one [T x D] sequence (or a [B x T x D] batch) with the conformer branch."""
    x = _as_tensor(x, _param_dtype(model))
    single = x.dim() == 2
    if single:
        x = x[None]
        mask = None if mask is None else _as_tensor(mask, torch.bool)[None]
    n_valid = x.shape[1] if mask is None else int(_as_tensor(mask, torch.bool).sum(-1).min())
    if n_valid < 2:
        raise InputTooShortError(f"self_encode needs >= 2 valid frames, got {n_valid}")
    h = model.self_encode(x, None if mask is None else _as_tensor(mask, torch.bool))
    return h[0] if single else h


@torch.no_grad()
def cross_encode(model: CEDModel, h_lead, h_resp, lead_mask=None, resp_mask=None, return_attention=False):
    """Cross-subject encoding of two already self-encoded sequences [T x conformer_units]."""
    dtype = _param_dtype(model)
    h_lead, h_resp = _as_tensor(h_lead, dtype), _as_tensor(h_resp, dtype)
    if h_lead.shape[-2] < 1 or h_resp.shape[-2] < 1:
        raise InputTooShortError("cross_encode needs non-empty sequences")
    single = h_lead.dim() == 2
    if single:
        h_lead, h_resp = h_lead[None], h_resp[None]
        lead_mask = None if lead_mask is None else _as_tensor(lead_mask, torch.bool)[None]
        resp_mask = None if resp_mask is None else _as_tensor(resp_mask, torch.bool)[None]
    z_lead, z_resp, recs = model.cross_encode(h_lead, h_resp, lead_mask, resp_mask)
    p_lead, p_resp = model.pool(z_lead, lead_mask), model.pool(z_resp, resp_mask)
    if single:
        n1 = z_lead.shape[1] if lead_mask is None else int(lead_mask.sum())
        n2 = z_resp.shape[1] if resp_mask is None else int(resp_mask.sum())
        emb = EmbeddingPair(z_lead[0, :n1].numpy(), z_resp[0, :n2].numpy(), p_lead[0].numpy(), p_resp[0].numpy())
        if not return_attention:
            return emb
        attn = []
        for layer_id, depth, w in recs:
            tq, tk = (n1, n2) if layer_id == CROSS_LAYER_IDS[0] else (n2, n1)
            attn.append(AttentionRecord(layer_id, w[0, :, :tq, :tk].numpy(), depth))
        return emb, attn
    emb = EmbeddingPair(z_lead.numpy(), z_resp.numpy(), p_lead.numpy(), p_resp.numpy())
    return (emb, recs) if return_attention else emb


@torch.no_grad()
def embed_pair(model: CEDModel, pair: TurnPair, return_attention=False):
    """Full forward of one pair to its cross-encoder embeddings (eval mode)."""
    model.eval()
    lead, resp = truncate_pair(pair, model.cfg.max_frames)
    if len(lead) < 2 or len(resp) < 2:
        raise InputTooShortError("both turns need >= 2 frames")
    h_lead = self_encode(model, lead)
    h_resp = self_encode(model, resp)
    return cross_encode(model, h_lead, h_resp, return_attention=return_attention)


@torch.no_grad()
def classify_pair(model: CEDModel, pair: TurnPair) -> float:
    """Real/fake logit for one pair, with per-stage finiteness checks."""
    model.eval()
    lead, lead_mask, resp, resp_mask = collate_pairs([pair], model.cfg.max_frames, _param_dtype(model))
    h_lead = model.self_encode(lead, lead_mask)
    h_resp = model.self_encode(resp, resp_mask)
    _check_finite(h_lead, "conformer")
    _check_finite(h_resp, "conformer")
    z_lead, z_resp, _ = model.cross_encode(h_lead, h_resp, lead_mask, resp_mask)
    _check_finite(z_lead, CROSS_LAYER_IDS[0])
    _check_finite(z_resp, CROSS_LAYER_IDS[1])
    logit = model.head(model.head_input(model.pool(z_lead, lead_mask), model.pool(z_resp, resp_mask)))
    _check_finite(logit, "head")
    return float(logit.reshape(()))


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, model: CEDModel, extra: dict | None = None) -> Path:
    """Single-file checkpoint: magic, u32 header length, JSON header, LE tensor blob.

    Written to a temporary file and renamed into place.
    """
    path = Path(path)
    state = model.state_dict()
    tensors, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        b = np.ascontiguousarray(arr).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "byte_order": "little",
        "config": dataclasses.asdict(model.cfg),
        "tensors": tensors,
        "extra": extra or {},
    }, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", raw[pos: pos + 4])
    header = json.loads(raw[pos + 4: pos + 4 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    base = pos + 4 + hlen
    arrays = {}
    for t in header["tensors"]:
        buf = raw[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(buf, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    return header, arrays


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[CEDModel, dict]:
    """Rebuild the model from a checkpoint; rejects config or shape mismatches."""
    header, arrays = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except ConfigError as e:
        raise CheckpointError(f"bad config in checkpoint: {e}") from None
    if expected_config is not None and expected_config != cfg:
        raise CheckpointError("checkpoint config does not match the requested model config")
    model = build_model(cfg)
    load_weights(model, arrays)
    model.eval()
    return model, header.get("extra", {})


def load_weights(model: CEDModel, arrays: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    missing = set(state) - set(arrays)
    unexpected = set(arrays) - set(state)
    if missing or unexpected:
        raise CheckpointError(f"tensor name mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    for name, t in state.items():
        if tuple(arrays[name].shape) != tuple(t.shape):
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {arrays[name].shape}, model {tuple(t.shape)}")
    model.load_state_dict({k: torch.from_numpy(np.asarray(v, dtype=v.dtype.newbyteorder("="))) for k, v in arrays.items()})
