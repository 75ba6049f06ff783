"""Analytic FLOPs accounting for the denoising U-Net.

Convention: a multiply-accumulate is 2 FLOPs, softmax is 3 per logit,
normalization and activation layers are 4 per element, and bias or residual
additions are 1 per element. Nearest upsampling, concatenation and the
sinusoidal timestep features are free. The condition encoder runs once per
scene, outside the denoising loop, and is not counted.

Transformer blocks split into a token-shared part and a per-query part. The
shared part covers input norm, input projection, the first LayerNorm, the
self-attention key/value projections and the cross-attention key/value
projections of the condition tokens. It always covers all N tokens, since
background tokens still provide keys and values. Everything else is linear in
the number of foreground tokens N_f.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional

from .model import CACHE_SITES, UNetConfig
from .scheduler import TimestepPlan

SHARED = "shared"


class TraceMismatch(ValueError):
    """A cache trace names a step, layer or token count the model/plan cannot have."""


# ---------------------------------------------------------------------------
# Primitive counts


def count_attention(n_tokens: int, n_fg: int, d: int, heads: int = 1, n_keys: Optional[int] = None) -> int:
    """Scores, softmax and value mixing for ``n_fg`` queries against ``n_keys`` keys (default N).

    Per head with head width d/heads: 2*N_f*N*dh + 3*N_f*N + 2*N_f*N*dh.
    """
    if not 0 <= n_fg <= n_tokens:
        raise ValueError(f"foreground count {n_fg} outside [0, {n_tokens}]")
    if d % heads:
        raise ValueError("d must be divisible by heads")
    keys = n_tokens if n_keys is None else n_keys
    dh = d // heads
    return heads * (2 * n_fg * keys * dh + 3 * n_fg * keys + 2 * n_fg * keys * dh)


def count_linear(rows: int, din: int, dout: int, bias: bool = True) -> int:
    return 2 * rows * din * dout + (rows * dout if bias else 0)


def count_conv(cin: int, cout: int, kernel: int, h_out: int, w_out: int, bias: bool = True) -> int:
    return 2 * cin * cout * kernel * kernel * h_out * w_out + (cout * h_out * w_out if bias else 0)


def count_norm(elements: int) -> int:
    return 4 * elements


def count_act(elements: int) -> int:
    return 4 * elements


def count_add(elements: int) -> int:
    return elements


# ---------------------------------------------------------------------------
# Report


@dataclass(frozen=True)
class FlopsEntry:
    step: int
    layer: str
    part: str
    kind: str
    count: int


@dataclass
class FlopsReport:
    entries: list[FlopsEntry] = field(default_factory=list)
    n_steps: int = 0
    fg_fraction: dict = field(default_factory=dict)  # (step, layer) -> Fraction

    @property
    def total(self) -> int:
        return sum(e.count for e in self.entries)

    def per_step(self) -> "OrderedDict[int, int]":
        out: OrderedDict[int, int] = OrderedDict((s, 0) for s in range(1, self.n_steps + 1))
        for e in self.entries:
            out[e.step] += e.count
        return out

    def per_layer(self, step: Optional[int] = None) -> "OrderedDict[str, int]":
        out: OrderedDict[str, int] = OrderedDict()
        for e in self.entries:
            if step is None or e.step == step:
                out[e.layer] = out.get(e.layer, 0) + e.count
        return out

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.kind] = out.get(e.kind, 0) + e.count
        return out

    def to_text(self) -> str:
        lines = [f"{'step':>4}  {'layer':<10} {'flops':>14}"]
        for s in range(1, self.n_steps + 1):
            for layer, c in self.per_layer(s).items():
                lines.append(f"{s:>4}  {layer:<10} {c:>14d}")
            lines.append(f"{s:>4}  {'subtotal':<10} {self.per_step()[s]:>14d}")
        for (s, layer), frac in sorted(self.fg_fraction.items()):
            lines.append(f"{s:>4}  fg[{layer}] {frac.numerator}/{frac.denominator}")
        lines.append(f"{'':>4}  {'total':<10} {self.total:>14d}")
        return "\n".join(lines)

    def to_kv(self) -> str:
        """Machine-readable ``key=value`` lines, integers only (fractions as n/d)."""
        lines = [f"flops.steps={self.n_steps}", f"flops.total={self.total}"]
        for s, c in self.per_step().items():
            lines.append(f"flops.step.{s}={c}")
        for (s, layer), frac in sorted(self.fg_fraction.items()):
            lines.append(f"flops.fg.{s}.{layer}={frac.numerator}/{frac.denominator}")
        return "\n".join(lines)


def parse_kv(text: str) -> dict:
    """Inverse of ``FlopsReport.to_kv`` for the aggregate fields."""
    out: dict = {"per_step": {}, "fg": {}}
    for line in text.splitlines():
        if not line.startswith("flops."):
            continue
        key, val = line.split("=", 1)
        parts = key.split(".")
        if parts[1] == "total":
            out["total"] = int(val)
        elif parts[1] == "steps":
            out["steps"] = int(val)
        elif parts[1] == "step":
            out["per_step"][int(parts[2])] = int(val)
        elif parts[1] == "fg":
            out["fg"][(int(parts[2]), ".".join(parts[3:]))] = Fraction(val)
    return out


# ---------------------------------------------------------------------------
# Model walk


class _Acc:
    def __init__(self, step: int):
        self.step = step
        self.entries: list[FlopsEntry] = []

    def add(self, layer: str, part: str, kind: str, count: int) -> None:
        if count:
            self.entries.append(FlopsEntry(self.step, layer, part, kind, count))


def _resblock(acc: _Acc, name: str, cin: int, cout: int, hw: int, td: int) -> None:
    n = hw * hw
    acc.add(name, "res", "norm", count_norm(cin * n))
    acc.add(name, "res", "act", count_act(cin * n))
    acc.add(name, "res", "conv", count_conv(cin, cout, 3, hw, hw))
    acc.add(name, "res", "act", count_act(td))
    acc.add(name, "res", "linear", count_linear(1, td, cout))
    acc.add(name, "res", "add", count_add(cout * n))
    acc.add(name, "res", "norm", count_norm(cout * n))
    acc.add(name, "res", "act", count_act(cout * n))
    acc.add(name, "res", "conv", count_conv(cout, cout, 3, hw, hw))
    if cin != cout:
        acc.add(name, "res", "conv", count_conv(cin, cout, 1, hw, hw))
    acc.add(name, "res", "add", count_add(cout * n))


def _transformer(acc: _Acc, cfg: UNetConfig, name: str, channels: int, hw: int, n_fg: int) -> None:
    n = hw * hw
    d, heads, kc, dc = cfg.d_model, cfg.heads, cfg.cond_tokens, cfg.cond_dim
    dff = d * cfg.ff_mult
    acc.add(name, SHARED, "norm", count_norm(channels * n))
    acc.add(name, SHARED, "linear", count_linear(n, channels, d))
    acc.add(name, SHARED, "norm", count_norm(d * n))
    acc.add(name, SHARED, "linear", 2 * count_linear(n, d, d, bias=False))
    acc.add(name, SHARED, "linear", 2 * count_linear(kc, dc, d, bias=False))
    f = n_fg
    acc.add(name, "self_attn", "linear", count_linear(f, d, d, bias=False))
    acc.add(name, "self_attn", "attention", count_attention(n, f, d, heads))
    acc.add(name, "self_attn", "linear", count_linear(f, d, d))
    acc.add(name, "self_attn", "add", count_add(f * d))
    acc.add(name, "cross_attn", "norm", count_norm(f * d))
    acc.add(name, "cross_attn", "linear", count_linear(f, d, d, bias=False))
    acc.add(name, "cross_attn", "attention", count_attention(n, f, d, heads, n_keys=kc))
    acc.add(name, "cross_attn", "linear", count_linear(f, d, d))
    acc.add(name, "cross_attn", "add", count_add(f * d))
    acc.add(name, "ff", "norm", count_norm(f * d))
    acc.add(name, "ff", "linear", count_linear(f, d, dff))
    acc.add(name, "ff", "act", count_act(f * dff))
    acc.add(name, "ff", "linear", count_linear(f, dff, d))
    acc.add(name, "ff", "add", count_add(f * d))
    acc.add(name, "proj_out", "linear", count_linear(f, d, channels))
    acc.add(name, "proj_out", "add", count_add(f * channels))


def step_entries(cfg: UNetConfig, step: int, n_fg: Mapping[str, int] | None = None) -> list[FlopsEntry]:
    """All entries for one denoising call at batch 1; ``n_fg`` overrides N_f per cache site."""
    n_fg = dict(n_fg or {})
    w0, w1, w2 = cfg.widths
    td, c_lat, s = cfg.time_dim, cfg.latent_channels, cfg.latent_size
    s1, s2 = s // 2, s // 4
    acc = _Acc(step)

    def tf(name: str, channels: int, hw: int) -> None:
        _transformer(acc, cfg, name, channels, hw, n_fg.get(name, hw * hw))

    acc.add("time", "mlp", "linear", count_linear(1, td, td))
    acc.add("time", "mlp", "act", count_act(td))
    acc.add("time", "mlp", "linear", count_linear(1, td, td))
    acc.add("conv_in", "conv", "conv", count_conv(cfg.in_channels, w0, 3, s, s))
    _resblock(acc, "down.0.res", w0, w0, s, td)
    acc.add("down.0.ds", "conv", "conv", count_conv(w0, w0, 3, s1, s1))
    _resblock(acc, "down.1.res", w0, w1, s1, td)
    tf("down.1", w1, s1)
    acc.add("down.1.ds", "conv", "conv", count_conv(w1, w1, 3, s2, s2))
    _resblock(acc, "down.2.res", w1, w2, s2, td)
    tf("down.2", w2, s2)
    _resblock(acc, "mid.res1", w2, w2, s2, td)
    tf("mid", w2, s2)
    _resblock(acc, "mid.res2", w2, w2, s2, td)
    _resblock(acc, "up.0.res", w2 + w2, w2, s2, td)
    tf("up.0", w2, s2)
    acc.add("up.0.us", "conv", "conv", count_conv(w2, w2, 3, s1, s1))
    _resblock(acc, "up.1.res", w2 + w1, w1, s1, td)
    tf("up.1", w1, s1)
    acc.add("up.1.us", "conv", "conv", count_conv(w1, w1, 3, s, s))
    _resblock(acc, "up.2.res", w1 + w0, w0, s, td)
    acc.add("out", "head", "norm", count_norm(w0 * s * s))
    acc.add("out", "head", "act", count_act(w0 * s * s))
    acc.add("out", "head", "conv", count_conv(w0, c_lat, 3, s, s))
    if cfg.prediction != "eps":
        # conversion to eps: two scalings and one add per output element
        acc.add("out", "head", "add", 3 * count_add(c_lat * s * s))
    return acc.entries


def prunable_cost(cfg: UNetConfig, layer: str) -> int:
    """Dense cost of the per-query part of a cache site (everything but the shared part)."""
    if layer not in CACHE_SITES:
        raise KeyError(f"unknown layer id {layer!r}")
    return sum(e.count for e in step_entries(cfg, 1) if e.layer == layer and e.part != SHARED)


def count_run(cfg: UNetConfig, plan: TimestepPlan | int, trace: Optional[Mapping[int, Mapping[str, int]]] = None
              ) -> FlopsReport:
    """FLOPs of a full run. ``trace`` maps 1-based step -> {layer: N_f}; absent entries are dense."""
    n_steps = plan if isinstance(plan, int) else plan.n_steps
    trace = trace or {}
    report = FlopsReport(n_steps=n_steps)
    for step, layers in trace.items():
        if not 1 <= step <= n_steps:
            raise TraceMismatch(f"trace step {step} outside a {n_steps}-step plan")
        for layer, nf in layers.items():
            if layer not in CACHE_SITES:
                raise TraceMismatch(f"trace names unknown layer {layer!r}")
            n = cfg.site_grid(layer) ** 2
            if not 0 <= nf <= n:
                raise TraceMismatch(f"trace has {nf} foreground tokens at {layer!r} (N={n})")
            report.fg_fraction[(step, layer)] = Fraction(nf, n)
    for step in range(1, n_steps + 1):
        report.entries.extend(step_entries(cfg, step, trace.get(step)))
    return report
