"""PSNR, masked PSNR and a pluggable perceptual-distance interface.

Images are in [0, 1] with MAX = 1. Zero error is reported as ``PSNR_CAP`` dB.
No LPIPS network ships here; ``perceptual`` returns a flagged null unless a
backend has been registered. A differentiable image-pyramid distance is
provided as a stand-in backend named ``"pyramid"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 100.0
LOCAL_CROP_MARGIN = 4


class PerceptualBackendError(RuntimeError):
    """The registered perceptual backend failed (distinct from it being absent)."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def _db(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return _db(float(np.mean((a - b) ** 2)))


def psnr_mask(a, b, mask) -> float:
    """PSNR with the squared error averaged over mask = 1 pixels, all channels.

    ``a``/``b`` are H x W x C (or C x H x W when ``channels_first``-shaped tensors
    are passed with a matching mask); ``mask`` is H x W and broadcasts over channels.
    """
    a, b, m = _as_array(a), _as_array(b), _as_array(mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not m.any():
        raise ValueError("psnr_mask needs a non-empty mask")
    err = (a - b) ** 2
    if err.ndim == m.ndim + 1:
        if err.shape[:-1] == m.shape:
            sel = err[m]
        elif err.shape[1:] == m.shape:
            sel = err[:, m]
        else:
            raise ValueError(f"mask {m.shape} does not match image {a.shape}")
    elif err.shape == m.shape:
        sel = err[m]
    else:
        raise ValueError(f"mask {m.shape} does not match image {a.shape}")
    return _db(float(np.mean(sel)))


def crop_box(mask, margin: int = LOCAL_CROP_MARGIN) -> tuple[int, int, int, int]:
    """Bounding box (y0, y1, x0, x1), half-open, of the mask dilated by ``margin`` and clipped."""
    m = _as_array(mask).astype(bool)
    if not m.any():
        raise ValueError("crop_box needs a non-empty mask")
    ys = np.flatnonzero(m.any(axis=1))
    xs = np.flatnonzero(m.any(axis=0))
    h, w = m.shape
    return (max(0, int(ys[0]) - margin), min(h, int(ys[-1]) + 1 + margin),
            max(0, int(xs[0]) - margin), min(w, int(xs[-1]) + 1 + margin))


def pyramid_distance(a: torch.Tensor, b: torch.Tensor, levels: int = 3) -> torch.Tensor:
    """Mean squared difference of image values and finite-difference gradients across an average-pool pyramid.

    Inputs are B x C x H x W; returns a scalar averaged over the batch. Smooth in
    both arguments, so usable as a training loss.
    """
    total = a.new_zeros(())
    for lvl in range(levels):
        if lvl:
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
        d = a - b
        total = total + d.square().mean()
        if d.shape[-1] > 1:
            total = total + (d[..., :, 1:] - d[..., :, :-1]).square().mean()
            total = total + (d[..., 1:, :] - d[..., :-1, :]).square().mean()
    return total / levels


PerceptualFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

_BACKENDS: dict[str, PerceptualFn] = {}


def register_backend(name: str, fn: PerceptualFn) -> None:
    _BACKENDS[name] = fn


def unregister_backend(name: str) -> None:
    _BACKENDS.pop(name, None)


def get_backend(name: Optional[str]) -> Optional[PerceptualFn]:
    if name in (None, "", "none"):
        return None
    try:
        return _BACKENDS[name]
    except KeyError:
        raise KeyError(f"no perceptual backend registered as {name!r}") from None


register_backend("pyramid", pyramid_distance)


@dataclass(frozen=True)
class PerceptualResult:
    value: Optional[float]
    backend: Optional[str]

    @property
    def absent(self) -> bool:
        return self.value is None


def _to_bchw(x) -> torch.Tensor:
    t = torch.as_tensor(_as_array(x))
    if t.dim() == 3:  # H x W x C
        t = t.permute(2, 0, 1)
    return t[None]


def perceptual(a, b, region: str = "full", mask=None, backend: Optional[str] = None,
               margin: int = LOCAL_CROP_MARGIN) -> PerceptualResult:
    """Perceptual distance on the full image or the dilated mask bounding-box crop.

    Images are H x W x C arrays. With no backend, returns a flagged null.
    """
    if region not in ("full", "masked-crop"):
        raise ValueError(f"unknown region {region!r}")
    fn = get_backend(backend)
    if fn is None:
        return PerceptualResult(None, None)
    ta, tb = _to_bchw(a), _to_bchw(b)
    if region == "masked-crop":
        if mask is None:
            raise ValueError("masked-crop region needs a mask")
        y0, y1, x0, x1 = crop_box(mask, margin)
        ta, tb = ta[..., y0:y1, x0:x1], tb[..., y0:y1, x0:x1]
    try:
        with torch.no_grad():
            val = float(fn(ta, tb))
    except Exception as exc:  # surfaced distinctly from "absent"
        raise PerceptualBackendError(f"perceptual backend {backend!r} failed: {exc}") from exc
    return PerceptualResult(val, backend)


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def add(self, scene_id: int, psnr_db: float, psnr_mask_db: float,
            perc: Optional[PerceptualResult] = None) -> None:
        self.rows.append({
            "scene": scene_id,
            "psnr": psnr_db,
            "psnr_mask": psnr_mask_db,
            "perceptual": None if perc is None else perc.value,
        })

    def aggregate(self) -> dict:
        """Mean dB across scenes (masked MSE is averaged per image first)."""
        if not self.rows:
            return {"n": 0, "psnr": None, "psnr_mask": None, "perceptual": None}
        percs = [r["perceptual"] for r in self.rows if r["perceptual"] is not None]
        return {
            "n": len(self.rows),
            "psnr": float(np.mean([r["psnr"] for r in self.rows])),
            "psnr_mask": float(np.mean([r["psnr_mask"] for r in self.rows])),
            "perceptual": float(np.mean(percs)) if len(percs) == len(self.rows) else None,
        }
