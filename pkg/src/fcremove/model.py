"""Denoising U-Net shared by teacher and student, with the latent codec and condition encoder.

The network consumes ``concat(z_t, mask, z_ref)`` (2C+1 channels), a timestep and
a set of condition tokens. Every cross-attention layer reports its
head-averaged attention probabilities so that localisation losses and token
caching can read the visual-token column.

Cacheable sites are the spatial-transformer blocks named ``down.1``,
``down.2``, ``mid``, ``up.0`` and ``up.1``. A forward pass can optionally
capture their outputs or run them in pruned mode (see ``BlockControl``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .scheduler import NoiseSchedule, Timestep, make_schedule
from .synthgen import Scene

CACHE_SITES = ("down.1", "down.2", "mid", "up.0", "up.1")
VISUAL_TOKEN = 0


class NumericFault(FloatingPointError):
    """Non-finite values appeared in activations or losses."""


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 3
    latent_size: int = 32
    widths: tuple[int, int, int] = (32, 64, 128)
    d_model: int = 64
    heads: int = 4
    ff_mult: int = 4
    time_dim: int = 128
    cond_tokens: int = 4
    cond_dim: int = 64
    cond_crop: int = 16
    norm_groups: int = 8
    # Output head. "eps" emits the noise directly; "x0" emits the clean latent and
    # "v" emits v = sqrt(abar) eps - sqrt(1 - abar) x0. Both are converted to eps
    # with the schedule below, so callers always receive eps_hat.
    prediction: str = "x0"
    schedule: str = "linear"
    total_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.prediction not in ("eps", "x0", "v"):
            raise ValueError(f"unknown prediction {self.prediction!r}")
        if self.latent_size % 4:
            raise ValueError("latent_size must be divisible by 4")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels + 1

    def site_grid(self, site: str) -> int:
        """Side length of the token grid at a cache site."""
        if site not in CACHE_SITES:
            raise KeyError(f"unknown layer id {site!r}")
        return self.latent_size // 2 if site in ("down.1", "up.1") else self.latent_size // 4

    def site_channels(self, site: str) -> int:
        w0, w1, w2 = self.widths
        if site not in CACHE_SITES:
            raise KeyError(f"unknown layer id {site!r}")
        return w1 if site in ("down.1", "up.1") else w2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Latent codec


class LatentCodec(nn.Module):
    """Identity codec (exact) or a small learned conv autoencoder at factor 1."""

    def __init__(self, mode: str = "identity", channels: int = 3, image_size: int = 32, hidden: int = 32):
        super().__init__()
        if mode not in ("identity", "learned"):
            raise ValueError(f"unknown codec mode {mode!r}")
        self.mode = mode
        self.channels = channels if mode == "learned" else 3
        self.factor = 1
        self.image_size = image_size
        if mode == "learned":
            self.enc = nn.Sequential(
                nn.Conv2d(3, hidden, 3, padding=1), nn.SiLU(), nn.Conv2d(hidden, channels, 3, padding=1)
            )
            self.dec = nn.Sequential(
                nn.Conv2d(channels, hidden, 3, padding=1), nn.SiLU(), nn.Conv2d(hidden, 3, 3, padding=1)
            )

    @property
    def value_range(self) -> Optional[tuple[float, float]]:
        """Known latent range (images live in [0, 1]); None for a learned latent."""
        return (0.0, 1.0) if self.mode == "identity" else None

    def _check(self, x: torch.Tensor, c: int) -> None:
        want = self.image_size // self.factor if c == self.channels else self.image_size
        if x.dim() != 4 or x.shape[1] != c or x.shape[-2:] != (want, want):
            raise ValueError(f"expected B x {c} x {want} x {want}, got {tuple(x.shape)}")

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        self._check(image, 3)
        if self.mode == "identity":
            return image
        return self.enc(image)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        self._check(latent, self.channels)
        if self.mode == "identity":
            return latent
        return self.dec(latent)


# ---------------------------------------------------------------------------
# Inputs


@dataclass
class ModelInput:
    z_t: torch.Tensor
    mask: torch.Tensor
    z_ref: torch.Tensor

    @property
    def tensor(self) -> torch.Tensor:
        return torch.cat([self.z_t, self.mask, self.z_ref], dim=1)


def assemble_input(z_t: torch.Tensor, m_latent: torch.Tensor, z_ref: torch.Tensor) -> ModelInput:
    """Channel order is (z_t, mask, z_ref)."""
    if z_t.shape != z_ref.shape:
        raise ValueError(f"z_t {tuple(z_t.shape)} and z_ref {tuple(z_ref.shape)} differ")
    if m_latent.dim() != 4 or m_latent.shape[1] != 1 or m_latent.shape[-2:] != z_t.shape[-2:]:
        raise ValueError(f"mask must be B x 1 x {z_t.shape[-2]} x {z_t.shape[-1]}, got {tuple(m_latent.shape)}")
    if m_latent.shape[0] != z_t.shape[0]:
        raise ValueError("batch size mismatch between mask and latents")
    if not torch.all((m_latent == 0) | (m_latent == 1)):
        raise ValueError("mask channel must be binary")
    return ModelInput(z_t, m_latent.to(z_t.dtype), z_ref)


def mask_to_latent(mask: torch.Tensor, factor: int = 1) -> torch.Tensor:
    """Binary B x 1 x H x W mask to the latent grid (max-pool: any covered pixel counts)."""
    if factor == 1:
        return mask
    return F.max_pool2d(mask, factor)


def mask_to_tokens(mask: torch.Tensor, grid: int) -> torch.Tensor:
    """Binary B x 1 x H x W mask to a B x grid*grid boolean token mask by max-pooling."""
    h = mask.shape[-1]
    if h % grid:
        raise ValueError(f"mask size {h} not divisible by token grid {grid}")
    pooled = F.max_pool2d(mask.float(), h // grid) if h != grid else mask.float()
    return pooled.flatten(1) > 0.5


def scenes_to_tensors(scenes: list[Scene], dtype=torch.float32) -> dict[str, torch.Tensor]:
    image = torch.from_numpy(np.stack([s.image for s in scenes])).permute(0, 3, 1, 2).to(dtype)
    gt = torch.from_numpy(np.stack([s.gt_background for s in scenes])).permute(0, 3, 1, 2).to(dtype)
    m_obj = torch.from_numpy(np.stack([s.m_obj for s in scenes]))[:, None].to(dtype)
    m_eff = torch.from_numpy(np.stack([s.m_obj_eff for s in scenes]))[:, None].to(dtype)
    return {"image": image.contiguous(), "gt": gt.contiguous(), "m_obj": m_obj, "m_eff": m_eff}


# ---------------------------------------------------------------------------
# Condition encoder


def crop_objects(image: torch.Tensor, m_obj: torch.Tensor, size: int) -> torch.Tensor:
    """Resample each object's bounding box (image * mask, mask) to ``size`` x ``size``."""
    b, _, h, w = image.shape
    thetas = []
    for i in range(b):
        ys, xs = torch.nonzero(m_obj[i, 0] > 0.5, as_tuple=True)
        if ys.numel() == 0:
            raise ValueError(f"empty object mask in batch element {i}")
        y0, y1 = int(ys.min()), int(ys.max()) + 1
        x0, x1 = int(xs.min()), int(xs.max()) + 1
        # normalized [-1, 1] coordinates, align_corners=False convention
        sx, sy = (x1 - x0) / w, (y1 - y0) / h
        tx, ty = (x0 + x1) / w - 1.0, (y0 + y1) / h - 1.0
        thetas.append([[sx, 0.0, tx], [0.0, sy, ty]])
    theta = torch.tensor(thetas, dtype=image.dtype)
    src = torch.cat([image * m_obj, m_obj], dim=1)
    grid = F.affine_grid(theta, [b, 4, size, size], align_corners=False)
    return F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


class ConditionEncoder(nn.Module):
    """Object crop -> K_c condition tokens. Token 0 is the visual token."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        s = cfg.cond_crop // 4
        self.net = nn.Sequential(
            nn.Conv2d(4, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Flatten(),
            nn.Linear(64 * s * s, cfg.cond_tokens * cfg.cond_dim),
        )
        self.pos = nn.Parameter(torch.randn(cfg.cond_tokens, cfg.cond_dim) * 0.02)
        self.norm = nn.LayerNorm(cfg.cond_dim)

    def forward(self, image: torch.Tensor, m_obj: torch.Tensor) -> torch.Tensor:
        crop = crop_objects(image, m_obj, self.cfg.cond_crop)
        tokens = self.net(crop).view(-1, self.cfg.cond_tokens, self.cfg.cond_dim)
        return self.norm(tokens + self.pos)


# ---------------------------------------------------------------------------
# Building blocks


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def attention_probs(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) over the last axis; q: ... x Nq x d, k: ... x Nk x d."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    return torch.softmax((q @ k.transpose(-1, -2)) * scale, dim=-1)


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.view(b, n, heads, d // heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, context_dim: Optional[int] = None):
        super().__init__()
        self.heads = heads
        ctx = d if context_dim is None else context_dim
        self.to_q = nn.Linear(d, d, bias=False)
        self.to_k = nn.Linear(ctx, d, bias=False)
        self.to_v = nn.Linear(ctx, d, bias=False)
        self.to_out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None):
        ctx = x if context is None else context
        q = split_heads(self.to_q(x), self.heads)
        k = split_heads(self.to_k(ctx), self.heads)
        v = split_heads(self.to_v(ctx), self.heads)
        probs = attention_probs(q, k)
        return self.to_out(merge_heads(probs @ v)), probs


@dataclass
class BlockControl:
    """Per-call instrumentation of the cacheable transformer blocks.

    ``capture``: sites whose block output tokens (B x N x C) are stored in ``outputs``.
    ``pruned``: site -> (foreground bool B x N, cached output B x N x C, cached
    cross-attention map B x N x K_c). Background rows are taken from the caches
    and never recomputed.
    """

    capture: frozenset = frozenset()
    pruned: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)


class SpatialTransformer(nn.Module):
    """GroupNorm -> proj_in -> self-attn -> cross-attn -> feed-forward -> proj_out, residual."""

    def __init__(self, channels: int, cfg: UNetConfig):
        super().__init__()
        d = cfg.d_model
        self.channels = channels
        self.d = d
        self.heads = cfg.heads
        self.norm_in = nn.GroupNorm(cfg.norm_groups, channels)
        self.proj_in = nn.Linear(channels, d)
        self.ln1 = nn.LayerNorm(d)
        self.attn1 = Attention(d, cfg.heads)
        self.ln2 = nn.LayerNorm(d)
        self.attn2 = Attention(d, cfg.heads, context_dim=cfg.cond_dim)
        self.ln3 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, d * cfg.ff_mult), nn.GELU(), nn.Linear(d * cfg.ff_mult, d))
        self.proj_out = nn.Linear(d, channels)

    def tokens_in(self, x_tok: torch.Tensor) -> torch.Tensor:
        """GroupNorm over B x N x C tokens (statistics span every token)."""
        return self.norm_in(x_tok.transpose(1, 2)).transpose(1, 2)

    def forward_tokens(self, x_tok: torch.Tensor, cond: torch.Tensor):
        """Dense block on B x N x C tokens; returns (output tokens, head-averaged cross-attention map)."""
        h = self.proj_in(self.tokens_in(x_tok))
        a, _ = self.attn1(self.ln1(h))
        h = h + a
        a, probs = self.attn2(self.ln2(h), cond)
        h = h + a
        h = h + self.ff(self.ln3(h))
        return x_tok + self.proj_out(h), probs.mean(dim=1)

    def forward_pruned(self, x_tok: torch.Tensor, cond: torch.Tensor, fg: torch.Tensor,
                       cache: torch.Tensor, map_cache: torch.Tensor):
        """Foreground rows computed against full-image keys/values; background rows copied from cache.

        Background tokens still contribute keys and values but emit no query and
        skip every later sublayer. Loops over the batch because foreground counts differ.
        """
        h_all = self.proj_in(self.tokens_in(x_tok))
        hn = self.ln1(h_all)
        outs, maps = [], []
        for i in range(x_tok.shape[0]):
            idx = torch.nonzero(fg[i], as_tuple=True)[0]
            out = cache[i].clone()
            amap = map_cache[i].clone()
            if idx.numel():
                k = split_heads(self.attn1.to_k(hn[i : i + 1]), self.heads)
                v = split_heads(self.attn1.to_v(hn[i : i + 1]), self.heads)
                q = split_heads(self.attn1.to_q(hn[i : i + 1, idx]), self.heads)
                h = h_all[i : i + 1, idx] + self.attn1.to_out(merge_heads(attention_probs(q, k) @ v))
                a, probs = self.attn2(self.ln2(h), cond[i : i + 1])
                h = h + a
                h = h + self.ff(self.ln3(h))
                out[idx] = x_tok[i, idx] + self.proj_out(h)[0]
                amap[idx] = probs.mean(dim=1)[0]
            outs.append(out)
            maps.append(amap)
        return torch.stack(outs), torch.stack(maps)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, site: str, record: "AttentionRecord",
                control: Optional[BlockControl]) -> torch.Tensor:
        b, c, hh, ww = x.shape
        x_tok = x.flatten(2).transpose(1, 2)
        if control is not None and site in control.pruned:
            fg, cache, map_cache = control.pruned[site]
            out, amap = self.forward_pruned(x_tok, cond, fg, cache, map_cache)
        else:
            out, amap = self.forward_tokens(x_tok, cond)
        record.cross[site] = amap
        record.self_meta[site] = (hh * ww, self.d)
        if control is not None and site in control.capture:
            control.outputs[site] = out
        return out.transpose(1, 2).reshape(b, c, hh, ww)


class Downsample(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


@dataclass
class AttentionRecord:
    """Cross-attention maps (site -> B x N x K_c, head-averaged) and self-attention metadata."""

    cross: dict = field(default_factory=dict)
    self_meta: dict = field(default_factory=dict)

    def visual_column(self, site: str) -> torch.Tensor:
        if site not in self.cross:
            raise KeyError(f"no cross-attention map recorded for layer id {site!r}")
        return self.cross[site][..., VISUAL_TOKEN]


class Encoder(nn.Module):
    """conv_in, time embedding, down path and mid block. Shared layout with the discriminator."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        w0, w1, w2 = cfg.widths
        g, td = cfg.norm_groups, cfg.time_dim
        self.cfg = cfg
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(cfg.in_channels, w0, 3, padding=1)
        self.down0 = ResBlock(w0, w0, td, g)
        self.down0_ds = Downsample(w0)
        self.down1_res = ResBlock(w0, w1, td, g)
        self.down1_attn = SpatialTransformer(w1, cfg)
        self.down1_ds = Downsample(w1)
        self.down2_res = ResBlock(w1, w2, td, g)
        self.down2_attn = SpatialTransformer(w2, cfg)
        self.mid_res1 = ResBlock(w2, w2, td, g)
        self.mid_attn = SpatialTransformer(w2, cfg)
        self.mid_res2 = ResBlock(w2, w2, td, g)

    def embed_time(self, t: torch.Tensor, dtype) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(dtype))

    def forward(self, x, temb, cond, record, control=None):
        h0 = self.down0(self.conv_in(x), temb)
        h = self.down1_res(self.down0_ds(h0), temb)
        h1 = self.down1_attn(h, cond, "down.1", record, control)
        h = self.down2_res(self.down1_ds(h1), temb)
        h2 = self.down2_attn(h, cond, "down.2", record, control)
        h = self.mid_res1(h2, temb)
        h = self.mid_attn(h, cond, "mid", record, control)
        h = self.mid_res2(h, temb)
        return h, (h0, h1, h2)


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig = UNetConfig()):
        super().__init__()
        w0, w1, w2 = cfg.widths
        g, td = cfg.norm_groups, cfg.time_dim
        self.cfg = cfg
        self.cond_encoder = ConditionEncoder(cfg)
        self.encoder = Encoder(cfg)
        self.up0_res = ResBlock(w2 + w2, w2, td, g)
        self.up0_attn = SpatialTransformer(w2, cfg)
        self.up0_us = Upsample(w2)
        self.up1_res = ResBlock(w2 + w1, w1, td, g)
        self.up1_attn = SpatialTransformer(w1, cfg)
        self.up1_us = Upsample(w1)
        self.up2_res = ResBlock(w1 + w0, w0, td, g)
        self.norm_out = nn.GroupNorm(g, w0)
        self.conv_out = nn.Conv2d(w0, cfg.latent_channels, 3, padding=1)
        if cfg.prediction != "eps":
            sched = make_schedule(cfg.schedule, cfg.total_steps, cfg.beta_start, cfg.beta_end)
            self.register_buffer("alpha_bars", torch.tensor(sched.alpha_bars, dtype=torch.float64), persistent=False)

    def embed_condition(self, image: torch.Tensor, m_obj: torch.Tensor) -> torch.Tensor:
        return self.cond_encoder(image, m_obj)

    def forward(self, z_in: torch.Tensor, t: torch.Tensor, cond: torch.Tensor,
                control: Optional[BlockControl] = None):
        cfg = self.cfg
        if z_in.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {z_in.shape[1]}")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and z_in.shape[0] > 1:
            t = t.expand(z_in.shape[0])
        record = AttentionRecord()
        temb = self.encoder.embed_time(t, z_in.dtype)
        h, (h0, h1, h2) = self.encoder(z_in, temb, cond, record, control)
        h = self.up0_res(torch.cat([h, h2], dim=1), temb)
        h = self.up0_attn(h, cond, "up.0", record, control)
        h = self.up1_res(torch.cat([self.up0_us(h), h1], dim=1), temb)
        h = self.up1_attn(h, cond, "up.1", record, control)
        h = self.up2_res(torch.cat([self.up1_us(h), h0], dim=1), temb)
        out = self.conv_out(F.silu(self.norm_out(h)))
        if cfg.prediction == "eps":
            return out, record
        abar = self.alpha_bars[t.long()].to(out.dtype).view(-1, 1, 1, 1)
        z_t = z_in[:, :cfg.latent_channels]
        if cfg.prediction == "x0":
            return (z_t - abar.sqrt() * out) / (1.0 - abar).sqrt(), record
        return (1.0 - abar).sqrt() * z_t + abar.sqrt() * out, record


def embed_condition(model: UNet, scene: Scene, dtype=torch.float32) -> torch.Tensor:
    """Condition tokens (K_c x d_c) for a single scene."""
    if not scene.m_obj.any():
        raise ValueError(f"scene {scene.seed}: empty object mask")
    t = scenes_to_tensors([scene], dtype)
    return model.embed_condition(t["image"], t["m_obj"])[0]


def denoise(model: UNet, inp: ModelInput, t: Timestep, cond: torch.Tensor,
            control: Optional[BlockControl] = None, check_finite: bool = True):
    """eps_hat = G(concat(z_t, M, z_ref), t, c) plus the attention record."""
    if cond.dim() == 2:
        cond = cond.unsqueeze(0).expand(inp.z_t.shape[0], -1, -1)
    eps, record = model(inp.tensor, t, cond, control)
    if check_finite and not torch.isfinite(eps).all():
        raise NumericFault("non-finite values in predicted noise")
    return eps, record


def predict_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, t: Timestep, sched: NoiseSchedule) -> torch.Tensor:
    """(z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
    abar = sched.alpha_bar(t, like=z_t)
    if torch.any(abar <= 0):
        raise ValueError("alpha_bar is zero; x0 is undefined")
    return (z_t - (1.0 - abar).sqrt() * eps_hat) / abar.sqrt()
