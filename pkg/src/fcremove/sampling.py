"""Plain (uncached) few-step DDIM sampling for removal, batched over scenes."""

from __future__ import annotations

import torch

from .model import LatentCodec, UNet, assemble_input, denoise, mask_to_latent, scenes_to_tensors
from .scheduler import NoiseSchedule, TimestepPlan, ddim_step
from .synthgen import Scene


def initial_noise(seeds: list[int], shape: tuple[int, ...], root_seed: int = 0, dtype=torch.float32) -> torch.Tensor:
    """Per-scene starting noise, independent of batch composition."""
    out = []
    for s in seeds:
        g = torch.Generator().manual_seed((root_seed * 1_000_003 + int(s)) % (2**63 - 1))
        out.append(torch.randn(shape, generator=g, dtype=torch.float64).to(dtype))
    return torch.stack(out)


@torch.no_grad()
def ddim_sample(
    model: UNet,
    scenes: list[Scene],
    plan: TimestepPlan,
    sched: NoiseSchedule,
    codec: LatentCodec | None = None,
    root_seed: int = 0,
    batch_size: int = 16,
    clip_x0: bool = True,
) -> torch.Tensor:
    """Removal results (B x 3 x H x W, clipped to [0, 1]) conditioned on M_obj.

    With ``clip_x0`` each step's x0 estimate is clamped to the codec's value
    range (when it has one) before re-noising.
    """
    codec = codec or LatentCodec("identity", image_size=model.cfg.latent_size)
    clip = codec.value_range if clip_x0 else None
    outs = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start : start + batch_size]
        t = scenes_to_tensors(chunk)
        z_ref = codec.encode(t["image"])
        m = mask_to_latent(t["m_obj"], codec.factor)
        cond = model.embed_condition(t["image"], t["m_obj"])
        z = initial_noise([s.seed for s in chunk], tuple(z_ref.shape[1:]), root_seed)
        for i, tau in enumerate(plan.taus):
            eps, _ = denoise(model, assemble_input(z, m, z_ref), torch.full((len(chunk),), tau), cond)
            z = ddim_step(z, eps, tau, plan.prev(i), sched, clip)
        outs.append(codec.decode(z).clamp(0.0, 1.0))
    return torch.cat(outs)
