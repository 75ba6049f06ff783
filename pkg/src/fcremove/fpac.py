"""Foreground-prioritized token caching for the final denoising step.

At the cached step, each configured transformer block recomputes only the
tokens flagged as foreground. Those tokens query the full key/value set.
Background tokens are copied verbatim from the block outputs recorded one step
earlier. The foreground set comes from thresholding the visual-token
cross-attention column and is always a superset of the (dilated) user mask.
After decoding, the prediction is blended with the original image using the
max-normalized final attention map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .flops import FlopsReport, count_run
from .model import (
    CACHE_SITES,
    AttentionRecord,
    BlockControl,
    LatentCodec,
    SpatialTransformer,
    UNet,
    assemble_input,
    attention_probs,
    denoise,
    mask_to_latent,
    mask_to_tokens,
    scenes_to_tensors,
)
from .sampling import initial_noise
from .scheduler import NoiseSchedule, TimestepPlan, ddim_step
from .synthgen import Scene


class CacheError(RuntimeError):
    """A cache entry was consumed too early, was invalid, or did not match."""


# ---------------------------------------------------------------------------
# Token masks


@dataclass(frozen=True)
class TokenMask:
    bits: torch.Tensor  # length-N bool

    def __post_init__(self):
        if self.bits.dim() != 1 or self.bits.dtype != torch.bool:
            raise ValueError("TokenMask bits must be a 1-D bool tensor")

    @property
    def n_tokens(self) -> int:
        return self.bits.numel()

    @property
    def n_foreground(self) -> int:
        return int(self.bits.sum())

    @property
    def fraction(self) -> float:
        return self.n_foreground / self.n_tokens

    @classmethod
    def full(cls, n: int) -> "TokenMask":
        return cls(torch.ones(n, dtype=torch.bool))

    @classmethod
    def empty(cls, n: int) -> "TokenMask":
        return cls(torch.zeros(n, dtype=torch.bool))


POLICIES = ("quantile", "all-foreground", "all-background")


@dataclass(frozen=True)
class MaskPolicy:
    """How the foreground set is chosen.

    ``quantile`` keeps the top ``ceil((1 - q) N)`` attention values plus the user
    mask dilated by ``radius`` tokens. The other two modes are diagnostics.
    ``all-background`` still forces the user mask to foreground.
    """

    kind: str = "quantile"
    q: float = 0.85
    radius: int = 1

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown mask policy {self.kind!r}")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"quantile q={self.q} outside [0, 1]")
        if self.radius < 0:
            raise ValueError("dilation radius must be >= 0")


def quantile_count(n: int, q: float) -> int:
    """Number of tokens at or above the q-quantile: ceil((1 - q) n), robust to float noise."""
    return math.ceil(round((1.0 - q) * n, 9))


def _grid_side(n: int) -> int:
    g = math.isqrt(n)
    if g * g != n:
        raise ValueError(f"token count {n} is not a square grid")
    return g


def dilate_tokens(bits: torch.Tensor, radius: int) -> torch.Tensor:
    """Chebyshev dilation of a square-grid token mask."""
    if radius == 0 or not bits.any():
        return bits.clone()
    g = _grid_side(bits.numel())
    grid = bits.reshape(1, 1, g, g).float()
    out = F.max_pool2d(grid, 2 * radius + 1, stride=1, padding=radius)
    return out.flatten() > 0.5


def quantile_select(a: torch.Tensor, q: float) -> torch.Tensor:
    """Top ``quantile_count`` entries of ``a`` by value, lowest index first among ties.

    Ties at the selection threshold are only filled when the threshold is above
    the global minimum. A threshold that lands on the floor of a non-constant
    map carries no foreground evidence, so those floor tokens stay background.
    """
    n = a.numel()
    k = quantile_count(n, q)
    sel = torch.zeros(n, dtype=torch.bool)
    if k == 0:
        return sel
    # stable descending sort: equal values keep ascending index order
    order = torch.sort(-a.double(), stable=True).indices
    top = order[:k]
    sel[top] = True
    lo, hi = a.min(), a.max()
    if hi > lo:
        theta = a[order[k - 1]]
        if theta == lo:
            sel &= a > lo
    return sel


def derive_token_mask(a_column: torch.Tensor, user_mask_tokens: torch.Tensor,
                      policy: MaskPolicy = MaskPolicy()) -> TokenMask:
    """Foreground = quantile selection on the attention column OR dilated user mask."""
    a = torch.as_tensor(a_column).detach().flatten()
    if a.numel() == 0:
        raise ValueError("empty attention column")
    user = torch.as_tensor(user_mask_tokens).flatten().bool()
    if user.numel() != a.numel():
        raise ValueError(f"user mask has {user.numel()} tokens, attention column has {a.numel()}")
    if policy.kind == "all-foreground":
        return TokenMask.full(a.numel())
    bits = dilate_tokens(user, policy.radius)
    if policy.kind == "quantile":
        bits |= quantile_select(a, policy.q)
    return TokenMask(bits)


def pool_token_mask(mask: TokenMask, grid: int) -> TokenMask:
    """Coarsen a square-grid mask by max-pooling (a coarse token is background only if all children are)."""
    g = _grid_side(mask.n_tokens)
    if g == grid:
        return mask
    if g % grid:
        raise ValueError(f"cannot pool a {g}x{g} token grid to {grid}x{grid}")
    pooled = F.max_pool2d(mask.bits.reshape(1, 1, g, g).float(), g // grid)
    return TokenMask(pooled.flatten() > 0.5)


# ---------------------------------------------------------------------------
# Cache


@dataclass
class CacheEntry:
    tokens: torch.Tensor  # N x C
    attn_map: Optional[torch.Tensor]  # N x K_c
    step: int
    valid: bool = True


class LayerCache:
    """Per-layer token features recorded at one step for consumption at a later one."""

    def __init__(self):
        self.entries: dict[str, CacheEntry] = {}

    def put(self, layer: str, tokens: torch.Tensor, step: int, attn_map: Optional[torch.Tensor] = None) -> None:
        self.entries[layer] = CacheEntry(tokens.detach().clone(), None if attn_map is None else attn_map.detach().clone(),
                                         step, True)

    def invalidate(self, layer: Optional[str] = None) -> None:
        for name, entry in self.entries.items():
            if layer is None or name == layer:
                entry.valid = False

    def get(self, layer: str, step: int) -> CacheEntry:
        try:
            entry = self.entries[layer]
        except KeyError:
            raise CacheError(f"no cache entry for layer {layer!r}") from None
        if not entry.valid:
            raise CacheError(f"cache entry for layer {layer!r} is invalid")
        if step <= entry.step:
            raise CacheError(f"layer {layer!r} cached at step {entry.step} cannot be consumed at step {step}")
        return entry

    def __contains__(self, layer: str) -> bool:
        return layer in self.entries


# ---------------------------------------------------------------------------
# Asymmetric attention and block forward


def _as_bits(mask, n: int) -> torch.Tensor:
    bits = mask.bits if isinstance(mask, TokenMask) else torch.as_tensor(mask).bool().flatten()
    if bits.numel() != n:
        raise ValueError(f"mask has {bits.numel()} entries, expected {n}")
    return bits


def asymmetric_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask,
                         cache_rows: Optional[torch.Tensor], cache_valid: bool = True) -> torch.Tensor:
    """Single-head attention where only foreground rows emit queries.

    q, k, v are N x d. Background rows of the output are the cache rows, copied
    bitwise. Background queries are never multiplied.
    """
    n = q.shape[0]
    bits = _as_bits(mask, n)
    fg = torch.nonzero(bits, as_tuple=True)[0]
    has_bg = fg.numel() < n
    if has_bg and (cache_rows is None or not cache_valid):
        raise CacheError("background tokens present but the cache is missing or invalid")
    if has_bg:
        if cache_rows.shape != (n, v.shape[1]):
            raise ValueError(f"cache rows {tuple(cache_rows.shape)} do not match output {(n, v.shape[1])}")
        out = cache_rows.clone()
    else:
        out = q.new_empty(n, v.shape[1])
    if fg.numel():
        out[fg] = attention_probs(q[fg], k) @ v
    return out


def asymmetric_block_forward(tokens: torch.Tensor, mask, layer: SpatialTransformer, cache: Optional[CacheEntry],
                             cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Run a transformer block on N x C tokens with background rows carried from ``cache``.

    Returns (output tokens, cross-attention map). Foreground rows go through
    self-attention against all tokens, cross-attention and the feed-forward
    sublayer. Background rows skip the block.
    """
    n, c = tokens.shape
    bits = _as_bits(mask, n)
    if bool((~bits).any()) and (cache is None or not cache.valid):
        raise CacheError("background tokens present but the cache is missing or invalid")
    kc = cond.shape[-2]
    if cache is None:
        cache_tokens = tokens.new_zeros(n, c)
        cache_map = tokens.new_zeros(n, kc)
    else:
        cache_tokens = cache.tokens
        cache_map = cache.attn_map if cache.attn_map is not None else tokens.new_zeros(n, kc)
    cond_b = cond if cond.dim() == 3 else cond.unsqueeze(0)
    out, amap = layer.forward_pruned(tokens.unsqueeze(0), cond_b, bits.unsqueeze(0), cache_tokens.unsqueeze(0),
                                     cache_map.unsqueeze(0))
    return out[0], amap[0]


# ---------------------------------------------------------------------------
# Fusion


@dataclass(frozen=True)
class FusionWeights:
    alpha: torch.Tensor

    def __post_init__(self):
        if self.alpha.numel() and (self.alpha.min() < 0 or self.alpha.max() > 1):
            raise ValueError("fusion weights must lie in [0, 1]")


def derive_fusion_weights(a_final: torch.Tensor) -> FusionWeights:
    """alpha = clamp(A / max A, 0, 1); an all-zero map gives alpha = 0."""
    a = torch.as_tensor(a_final).detach()
    peak = a.max() if a.numel() else a.new_zeros(())
    if peak <= 0:
        return FusionWeights(torch.zeros_like(a))
    return FusionWeights((a / peak).clamp(0.0, 1.0))


def upsample_weights(weights: FusionWeights, size: int) -> torch.Tensor:
    """Length-N square-grid weights to a size x size map by nearest-neighbour upsampling."""
    g = _grid_side(weights.alpha.numel())
    grid = weights.alpha.reshape(1, 1, g, g)
    if g == size:
        return grid[0, 0]
    return F.interpolate(grid, size=(size, size), mode="nearest")[0, 0]


def fuse_final(f_pred: torch.Tensor, f_orig: torch.Tensor, alpha) -> torch.Tensor:
    """alpha * F_pred + (1 - alpha) * F_orig, alpha broadcast over the channel axis.

    Tensors are C x H x W (or B x C x H x W); alpha is H x W, B x H x W or broadcastable.
    """
    a = alpha.alpha if isinstance(alpha, FusionWeights) else torch.as_tensor(alpha)
    if f_pred.shape != f_orig.shape:
        raise ValueError(f"shape mismatch {tuple(f_pred.shape)} vs {tuple(f_orig.shape)}")
    if a.numel() and (a.min() < 0 or a.max() > 1):
        raise ValueError("fusion weights must lie in [0, 1]")
    a = a.to(f_pred.dtype)
    if a.dim() == f_pred.dim() - 1:
        a = a.unsqueeze(-3)
    return a * f_pred + (1.0 - a) * f_orig


# ---------------------------------------------------------------------------
# Cached inference


@dataclass(frozen=True)
class CacheConfig:
    """Which layers are cached, at which step (1-based; None = last), and how masks are drawn."""

    layers: tuple[str, ...] = CACHE_SITES
    step: Optional[int] = None
    policy: MaskPolicy = MaskPolicy()
    map_site: str = "down.1"

    def __post_init__(self):
        unknown = [s for s in self.layers if s not in CACHE_SITES]
        if unknown:
            raise ValueError(f"unknown cache layer ids {unknown}")
        if len(set(self.layers)) != len(self.layers):
            raise ValueError("duplicate cache layer ids")
        if self.map_site not in CACHE_SITES:
            raise ValueError(f"unknown map site {self.map_site!r}")

    @property
    def enabled(self) -> bool:
        return bool(self.layers)

    def cached_step(self, plan: TimestepPlan) -> int:
        step = plan.n_steps if self.step is None else self.step
        if not 1 <= step <= plan.n_steps:
            raise ValueError(f"cached step {step} is not in a {plan.n_steps}-step plan")
        if self.enabled and step < 2:
            raise ValueError("caching needs at least one full step before the cached step")
        return step


@dataclass
class CachedRun:
    image: torch.Tensor  # 3 x H x W, fused
    prediction: torch.Tensor  # 3 x H x W, decoded before fusion
    alpha: torch.Tensor  # H x W
    history: list[AttentionRecord]
    token_masks: list[TokenMask]  # per step, on the map-site grid
    cached_masks: dict[str, TokenMask]
    flops: FlopsReport
    exact: dict[str, bool] = field(default_factory=dict)


@torch.no_grad()
def run_cached_inference(model: UNet, scene: Scene, plan: TimestepPlan, cache_cfg: CacheConfig,
                         sched: NoiseSchedule, codec: Optional[LatentCodec] = None, root_seed: int = 0,
                         fuse: bool = True, verify: bool = True, clip_x0: bool = True) -> CachedRun:
    """Few-step removal on one scene, with optional final-step token caching.

    Steps before the cached step run densely. The step before it records block
    outputs and maps at every configured layer. At the cached step the token mask
    comes from that step's map column. ``verify`` checks that background outputs
    equal the cache bitwise and raises CacheError otherwise. ``clip_x0`` is
    passed through to the DDIM update as in ``ddim_sample``.
    """
    cfg = model.cfg
    if not cache_cfg.enabled and plan.n_steps < 1:
        raise ValueError("empty plan")
    if cache_cfg.enabled and plan.n_steps < 2:
        raise ValueError("caching needs a plan with at least two steps")
    k_step = cache_cfg.cached_step(plan) if cache_cfg.enabled else None
    codec = codec or LatentCodec("identity", image_size=cfg.latent_size)

    t = scenes_to_tensors([scene])
    z_ref = codec.encode(t["image"])
    m = mask_to_latent(t["m_obj"], codec.factor)
    cond = model.embed_condition(t["image"], t["m_obj"])
    z = initial_noise([scene.seed], tuple(z_ref.shape[1:]), root_seed)

    map_grid = cfg.site_grid(cache_cfg.map_site)
    user_tokens = mask_to_tokens(t["m_obj"], map_grid)[0]
    cache = LayerCache()
    history: list[AttentionRecord] = []
    token_masks: list[TokenMask] = []
    cached_masks: dict[str, TokenMask] = {}
    trace: dict[int, dict[str, int]] = {}
    exact: dict[str, bool] = {}

    for i, tau in enumerate(plan.taus):
        step = i + 1
        control = None
        if k_step is not None and step == k_step - 1:
            control = BlockControl(capture=frozenset(cache_cfg.layers))
        elif k_step is not None and step == k_step:
            fine = derive_token_mask(history[-1].visual_column(cache_cfg.map_site)[0], user_tokens, cache_cfg.policy)
            pruned = {}
            for layer in cache_cfg.layers:
                lm = pool_token_mask(fine, cfg.site_grid(layer))
                entry = cache.get(layer, step)
                pruned[layer] = (lm.bits[None], entry.tokens[None], entry.attn_map[None])
                cached_masks[layer] = lm
            control = BlockControl(capture=frozenset(cache_cfg.layers), pruned=pruned)
            trace[step] = {layer: cached_masks[layer].n_foreground for layer in cache_cfg.layers}
        eps, rec = denoise(model, assemble_input(z, m, z_ref), torch.full((1,), tau), cond, control)
        history.append(rec)
        token_masks.append(derive_token_mask(rec.visual_column(cache_cfg.map_site)[0], user_tokens, cache_cfg.policy))
        if control is not None and not control.pruned:
            for layer in cache_cfg.layers:
                cache.put(layer, control.outputs[layer][0], step, rec.cross[layer][0])
        elif control is not None:
            for layer in cache_cfg.layers:
                bg = ~cached_masks[layer].bits
                out = control.outputs[layer][0]
                same = torch.equal(out[bg], cache.entries[layer].tokens[bg])
                exact[layer] = same
                if verify and not same:
                    raise CacheError(f"background outputs at {layer!r} differ from the cache")
            cache.invalidate()
        z = ddim_step(z, eps, tau, plan.prev(i), sched, codec.value_range if clip_x0 else None)

    pred = codec.decode(z).clamp(0.0, 1.0)[0]
    weights = derive_fusion_weights(history[-1].visual_column(cache_cfg.map_site)[0])
    alpha = upsample_weights(weights, pred.shape[-1])
    image = fuse_final(pred, t["image"][0], alpha) if fuse else pred
    return CachedRun(image=image, prediction=pred, alpha=alpha, history=history, token_masks=token_masks,
                     cached_masks=cached_masks, flops=count_run(cfg, plan, trace), exact=exact)
