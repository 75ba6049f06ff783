"""Region-aware adversarial distillation and teacher training.

The student (generator) always sees the tight object mask M_obj in its mask
channel; every discriminator call sees the object+effect mask M_obj+eff.
Adversarial losses use the hinge form on both sides.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .model import (
    Encoder, LatentCodec, ModelInput, NumericFault, UNet, UNetConfig, assemble_input, denoise,
    mask_to_latent, mask_to_tokens, predict_x0, scenes_to_tensors,
)
from .scheduler import NoiseSchedule, TimestepPlan, forward_diffuse
from .synthgen import Scene

log = logging.getLogger(__name__)

Probe = Callable[[str, ModelInput], None]


@dataclass(frozen=True)
class LossWeights:
    lambda_diff: float = 1.0
    lambda_lpips: float = 5.0
    lambda_gan: float = 0.5
    lambda_mask: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0.0:
                raise ValueError(f"{k} must be non-negative, got {v}")


# ---------------------------------------------------------------------------
# Discriminator


class Discriminator(nn.Module):
    """Teacher encoder stages with one conv head per feature level; one realness score per sample."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        w0, w1, w2 = cfg.widths
        self.heads = nn.ModuleList(
            nn.Sequential(nn.GroupNorm(cfg.norm_groups, c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1),
                          nn.SiLU(), nn.Conv2d(c, 1, 1))
            for c in (w0, w1, w2, w2)
        )

    @classmethod
    def from_teacher(cls, teacher: UNet) -> "Discriminator":
        d = cls(teacher.cfg)
        d.encoder.load_state_dict(teacher.encoder.state_dict())
        return d

    def forward(self, z_in: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        from .model import AttentionRecord

        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and z_in.shape[0] > 1:
            t = t.expand(z_in.shape[0])
        temb = self.encoder.embed_time(t, z_in.dtype)
        mid, (h0, h1, h2) = self.encoder(z_in, temb, cond, AttentionRecord())
        feats = (h0, h1, h2, mid)
        return sum(head(f).mean(dim=(1, 2, 3)) for head, f in zip(self.heads, feats))


def discriminator_score(z: torch.Tensor, z_ref: torch.Tensor, mask: torch.Tensor, t, D: Discriminator,
                        cond: torch.Tensor, probe: Optional[Probe] = None) -> torch.Tensor:
    """Realness score per sample for D(z, z_ref, mask, t)."""
    inp = assemble_input(z, mask, z_ref)
    if probe is not None:
        probe("discriminator", inp)
    return D(inp.tensor, t, cond)


def disc_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    if real_scores.shape != fake_scores.shape:
        raise ValueError(f"score shapes differ: {tuple(real_scores.shape)} vs {tuple(fake_scores.shape)}")
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def gen_loss(z_pred: torch.Tensor, z_gt: torch.Tensor, fake_scores: torch.Tensor,
             lpips_fn: Optional[Callable], weights: LossWeights,
             codec: Optional[LatentCodec] = None) -> tuple[torch.Tensor, dict]:
    """Weighted perceptual + latent L2 (mean over elements) + hinge generator term.

    The breakdown holds the unweighted terms; ``lpips_disabled`` is set when no
    perceptual function is supplied, in which case that term is exactly zero.
    """
    if z_pred.shape != z_gt.shape:
        raise ValueError(f"z_pred {tuple(z_pred.shape)} vs z_gt {tuple(z_gt.shape)}")
    if lpips_fn is None:
        lp = z_pred.new_zeros(())
    else:
        dec = codec.decode if codec is not None else (lambda z: z)
        lp = lpips_fn(dec(z_pred), dec(z_gt))
    diff = (z_pred - z_gt).square().mean()
    gan = (-fake_scores).mean()
    total = weights.lambda_lpips * lp + weights.lambda_diff * diff + weights.lambda_gan * gan
    return total, {"lpips": lp, "diff": diff, "gan": gan, "lpips_disabled": lpips_fn is None}


def mask_loss(A: torch.Tensor, m_fg: torch.Tensor) -> torch.Tensor:
    """mean(a over background tokens) - mean(a over foreground tokens), a = visual-token column.

    ``A`` is N x K_c (or B x N x K_c); ``m_fg`` is N (or B x N) binary. Batched
    input averages the per-sample values.
    """
    a = A[..., 0]
    m = m_fg.to(torch.bool)
    if a.shape != m.shape:
        raise ValueError(f"attention column {tuple(a.shape)} vs token mask {tuple(m.shape)}")
    if a.dim() == 1:
        a, m = a[None], m[None]
    n_fg = m.sum(dim=-1)
    n_bg = (~m).sum(dim=-1)
    if torch.any(n_fg == 0) or torch.any(n_bg == 0):
        raise ValueError("mask_loss needs at least one foreground and one background token per sample")
    mf = m.to(a.dtype)
    fg_mean = (a * mf).sum(dim=-1) / n_fg.to(a.dtype)
    bg_mean = (a * (1.0 - mf)).sum(dim=-1) / n_bg.to(a.dtype)
    return (bg_mean - fg_mean).mean()


# ---------------------------------------------------------------------------
# Batches


@dataclass
class Batch:
    seeds: list
    image: torch.Tensor
    gt: torch.Tensor
    m_obj: torch.Tensor
    m_eff: torch.Tensor

    @classmethod
    def from_scenes(cls, scenes: list[Scene], dtype=torch.float32) -> "Batch":
        t = scenes_to_tensors(scenes, dtype)
        return cls([s.seed for s in scenes], t["image"], t["gt"], t["m_obj"], t["m_eff"])

    def take(self, idx: torch.Tensor) -> "Batch":
        return Batch([self.seeds[i] for i in idx.tolist()], self.image[idx], self.gt[idx],
                     self.m_obj[idx], self.m_eff[idx])

    def __len__(self):
        return self.image.shape[0]


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise NumericFault(f"non-finite {name}: {value}")


# ---------------------------------------------------------------------------
# Teacher


@dataclass(frozen=True)
class TeacherConfig:
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.0
    lambda_mask: float = 0.1
    map_site: str = "down.1"
    grad_clip: float = 1.0
    seed: int = 0


@dataclass
class TeacherState:
    model: UNet
    opt: torch.optim.Optimizer
    rng: torch.Generator
    iteration: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, cfg: UNetConfig, tcfg: TeacherConfig) -> "TeacherState":
        torch.manual_seed(tcfg.seed)
        model = UNet(cfg)
        opt = torch.optim.AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
        rng = torch.Generator().manual_seed(tcfg.seed)
        return cls(model, opt, rng)

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        arrays = ckpt.module_arrays(self.model, "model")
        opt_arrays, groups = ckpt.optimizer_arrays(self.opt, "opt")
        arrays.update(opt_arrays)
        arrays["rng"] = ckpt.generator_array(self.rng)
        meta = {"kind": "teacher", "unet": self.model.cfg.to_dict(), "codec": "identity",
                "iteration": self.iteration, "history": self.history, "opt_groups": groups}
        meta.update(extra_meta or {})
        ckpt.save_container(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "TeacherState":
        arrays, meta = ckpt.load_container(path)
        if meta.get("kind") != "teacher":
            raise ckpt.CheckpointError(f"{path}: expected a teacher checkpoint, found {meta.get('kind')!r}")
        model = UNet(UNetConfig.from_dict(meta["unet"]))
        ckpt.load_module_arrays(model, arrays, "model")
        opt = torch.optim.AdamW(model.parameters())
        ckpt.load_optimizer_arrays(opt, arrays, meta["opt_groups"], "opt")
        rng = torch.Generator()
        ckpt.restore_generator(rng, arrays["rng"])
        return cls(model, opt, rng, meta["iteration"], meta["history"])


def teacher_step(batch: Batch, state: TeacherState, sched: NoiseSchedule, tcfg: TeacherConfig) -> dict:
    """One epsilon-prediction step with the localisation (mask) loss on M_obj+eff tokens."""
    model, g = state.model, state.rng
    b = len(batch)
    t = torch.randint(0, sched.total_steps, (b,), generator=g)
    eps = torch.randn(batch.gt.shape, generator=g, dtype=batch.gt.dtype)
    z0, z_ref = batch.gt, batch.image
    z_t = forward_diffuse(z0, t, eps, sched)
    cond = model.embed_condition(batch.image, batch.m_obj)
    eps_hat, rec = denoise(model, assemble_input(z_t, batch.m_obj, z_ref), t, cond)
    l_eps = (eps_hat - eps).square().mean()
    grid = model.cfg.site_grid(tcfg.map_site)
    l_mask = mask_loss(rec.cross[tcfg.map_site], mask_to_tokens(batch.m_eff, grid))
    loss = l_eps + tcfg.lambda_mask * l_mask
    _check_finite("teacher loss", loss)
    state.opt.zero_grad(set_to_none=True)
    loss.backward()
    if tcfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
    state.opt.step()
    state.iteration += 1
    metrics = {"iter": state.iteration, "loss": float(loss.detach()), "eps": float(l_eps.detach()),
               "mask": float(l_mask.detach())}
    state.history.append(metrics)
    return metrics


def train_teacher(corpus: list[Scene], cfg: UNetConfig, sched: NoiseSchedule, tcfg: TeacherConfig,
                  state: Optional[TeacherState] = None, until: Optional[int] = None,
                  on_step: Optional[Callable[[dict], None]] = None,
                  dump_path: Optional[str] = None) -> TeacherState:
    """Run teacher iterations up to ``until`` (default ``tcfg.iterations``), resuming ``state`` if given."""
    state = state or TeacherState.create(cfg, tcfg)
    data = Batch.from_scenes(corpus)
    stop = tcfg.iterations if until is None else until
    state.model.train()
    while state.iteration < stop:
        idx = torch.randint(0, len(data), (tcfg.batch_size,), generator=state.rng)
        try:
            m = teacher_step(data.take(idx), state, sched, tcfg)
        except NumericFault:
            if dump_path:
                state.save(dump_path)
                log.error("teacher diverged at iteration %d; state dumped to %s", state.iteration, dump_path)
            raise
        if on_step:
            on_step(m)
    state.model.eval()
    return state


# ---------------------------------------------------------------------------
# Distillation


@dataclass(frozen=True)
class DistillConfig:
    iterations: int = 300
    batch_size: int = 8
    lr_g: float = 1e-5
    lr_d: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    map_site: str = "down.1"
    perceptual: str = "pyramid"
    grad_clip: float = 1.0
    seed: int = 0


@dataclass
class DistillState:
    student: UNet
    disc: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: torch.Generator
    iteration: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def from_teacher(cls, teacher: UNet, dcfg: DistillConfig) -> "DistillState":
        student = copy.deepcopy(teacher)
        torch.manual_seed(dcfg.seed)
        disc = Discriminator.from_teacher(teacher)
        opt_g = torch.optim.AdamW(student.parameters(), lr=dcfg.lr_g, betas=dcfg.betas,
                                  weight_decay=dcfg.weight_decay)
        opt_d = torch.optim.AdamW(disc.parameters(), lr=dcfg.lr_d, betas=dcfg.betas,
                                  weight_decay=dcfg.weight_decay)
        return cls(student, disc, opt_g, opt_d, torch.Generator().manual_seed(dcfg.seed))

    def to_container(self) -> tuple[dict, dict]:
        arrays = ckpt.module_arrays(self.student, "student")
        arrays.update(ckpt.module_arrays(self.disc, "disc"))
        ga, gg = ckpt.optimizer_arrays(self.opt_g, "opt_g")
        da, dg = ckpt.optimizer_arrays(self.opt_d, "opt_d")
        arrays.update(ga)
        arrays.update(da)
        arrays["rng"] = ckpt.generator_array(self.rng)
        meta = {"kind": "distill", "unet": self.student.cfg.to_dict(), "codec": "identity",
                "iteration": self.iteration, "history": self.history,
                "opt_g_groups": gg, "opt_d_groups": dg}
        return arrays, meta

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        arrays, meta = self.to_container()
        meta.update(extra_meta or {})
        ckpt.save_container(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "DistillState":
        arrays, meta = ckpt.load_container(path)
        if meta.get("kind") != "distill":
            raise ckpt.CheckpointError(f"{path}: expected a distill checkpoint, found {meta.get('kind')!r}")
        cfg = UNetConfig.from_dict(meta["unet"])
        student, disc = UNet(cfg), Discriminator(cfg)
        ckpt.load_module_arrays(student, arrays, "student")
        ckpt.load_module_arrays(disc, arrays, "disc")
        opt_g = torch.optim.AdamW(student.parameters())
        opt_d = torch.optim.AdamW(disc.parameters())
        ckpt.load_optimizer_arrays(opt_g, arrays, meta["opt_g_groups"], "opt_g")
        ckpt.load_optimizer_arrays(opt_d, arrays, meta["opt_d_groups"], "opt_d")
        rng = torch.Generator()
        ckpt.restore_generator(rng, arrays["rng"])
        return cls(student, disc, opt_g, opt_d, rng, meta["iteration"], meta["history"])


def distill_step(batch: Batch, state: DistillState, sched: NoiseSchedule, plan: TimestepPlan,
                 weights: LossWeights, dcfg: DistillConfig = DistillConfig(),
                 lpips_fn: Optional[Callable] = None, probe: Optional[Probe] = None) -> dict:
    """One alternating discriminator / generator update.

    (a) noise z_gt to a plan timestep, one student call on M_obj -> x0 estimate;
    (b) hinge update of D on (z_gt, detached z_pred) under M_obj+eff;
    (c) generator update on the weighted losses plus the mask loss.
    """
    G, D, g = state.student, state.disc, state.rng
    b = len(batch)
    taus = torch.tensor(plan.taus, dtype=torch.long)
    t = taus[torch.randint(0, len(taus), (b,), generator=g)]
    eps = torch.randn(batch.gt.shape, generator=g, dtype=batch.gt.dtype)
    z_gt, z_ref = batch.gt, batch.image
    z_t = forward_diffuse(z_gt, t, eps, sched)

    cond = G.embed_condition(batch.image, batch.m_obj)
    g_inp = assemble_input(z_t, batch.m_obj, z_ref)
    if probe is not None:
        probe("generator", g_inp)
    eps_hat, rec = denoise(G, g_inp, t, cond)
    z_pred = predict_x0(z_t, eps_hat, t, sched)
    cond_d = cond.detach()

    # (b) discriminator
    D.requires_grad_(True)
    real = discriminator_score(z_gt, z_ref, batch.m_eff, t, D, cond_d, probe)
    fake = discriminator_score(z_pred.detach(), z_ref, batch.m_eff, t, D, cond_d, probe)
    l_d = disc_loss(real, fake)
    _check_finite("discriminator loss", l_d)
    state.opt_d.zero_grad(set_to_none=True)
    l_d.backward()
    if dcfg.grad_clip:
        nn.utils.clip_grad_norm_(D.parameters(), dcfg.grad_clip)
    state.opt_d.step()

    # (c) generator
    D.requires_grad_(False)
    fake_g = discriminator_score(z_pred, z_ref, batch.m_eff, t, D, cond_d, probe)
    l_g, terms = gen_loss(z_pred, z_gt, fake_g, lpips_fn, weights)
    grid = G.cfg.site_grid(dcfg.map_site)
    l_mask = mask_loss(rec.cross[dcfg.map_site], mask_to_tokens(batch.m_eff, grid))
    total = l_g + weights.lambda_mask * l_mask
    _check_finite("generator loss", total)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    if dcfg.grad_clip:
        # x0 errors at the noisiest plan step are amplified ~sqrt((1 - abar) / abar); keep those batches bounded
        nn.utils.clip_grad_norm_(G.parameters(), dcfg.grad_clip)
    state.opt_g.step()
    D.requires_grad_(True)

    state.iteration += 1
    metrics = {
        "iter": state.iteration,
        "loss_d": float(l_d.detach()), "d_real": float(real.mean().detach()),
        "d_fake": float(fake.mean().detach()), "lpips": float(terms["lpips"].detach()),
        "diff": float(terms["diff"].detach()), "gan": float(terms["gan"].detach()),
        "mask": float(l_mask.detach()), "loss_g": float(l_g.detach()), "total": float(total.detach()),
        "lpips_disabled": bool(terms["lpips_disabled"]),
    }
    state.history.append(metrics)
    return metrics


def distill(corpus: list[Scene], state: DistillState, sched: NoiseSchedule, plan: TimestepPlan,
            weights: LossWeights, dcfg: DistillConfig, until: Optional[int] = None,
            lpips_fn: Optional[Callable] = None, probe: Optional[Probe] = None,
            on_step: Optional[Callable[[dict], None]] = None) -> DistillState:
    data = Batch.from_scenes(corpus)
    stop = dcfg.iterations if until is None else until
    state.student.train()
    state.disc.train()
    while state.iteration < stop:
        idx = torch.randint(0, len(data), (dcfg.batch_size,), generator=state.rng)
        m = distill_step(data.take(idx), state, sched, plan, weights, dcfg, lpips_fn, probe)
        if on_step:
            on_step(m)
    state.student.eval()
    state.disc.eval()
    return state


def load_generator(path) -> UNet:
    """Denoiser weights from a teacher or distill checkpoint."""
    arrays, meta = ckpt.load_container(path)
    kind = meta.get("kind")
    prefix = {"teacher": "model", "distill": "student"}.get(kind)
    if prefix is None:
        raise ckpt.CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    model = UNet(UNetConfig.from_dict(meta["unet"]))
    ckpt.load_module_arrays(model, arrays, prefix)
    model.eval()
    return model
