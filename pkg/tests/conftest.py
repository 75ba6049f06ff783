import sys

import numpy as np
import pytest
import torch

from fcremove.model import UNetConfig
from fcremove.synthgen import CorpusConfig, generate_corpus

SMALL_CORPUS = CorpusConfig(image_size=16, object_size=(2, 4), shadow_dx=(1, 2), shadow_dy=(1, 2))


def small_scenes(seeds):
    """16x16 scenes for quick training-loop tests."""
    return generate_corpus(seeds, SMALL_CORPUS)


def tiny_config(latent_size: int = 8) -> UNetConfig:
    """Default 8x8 latents (4x4 and 2x2 token grids); fast enough for finite differences."""
    return UNetConfig(latent_size=latent_size, widths=(8, 16, 16), d_model=16, heads=2, time_dim=16, cond_tokens=4,
                      cond_dim=16, cond_crop=8, norm_groups=4)


def flat_slice(params, size: int, gen: torch.Generator):
    """Random (param, flat index) pairs covering ``size`` scalars across the given tensors."""
    params = [p for p in params if p.requires_grad]
    total = sum(p.numel() for p in params)
    picks = torch.randperm(total, generator=gen)[:size].sort().values.tolist()
    out, offset, j = [], 0, 0
    for p in params:
        while j < len(picks) and picks[j] < offset + p.numel():
            out.append((p, picks[j] - offset))
            j += 1
        offset += p.numel()
    return out


def directional_fd(loss_fn, coords, gen: torch.Generator, h: float = 1e-6):
    """(analytic, numeric) directional derivative of ``loss_fn`` along a random direction over ``coords``."""
    direction = torch.randn(len(coords), generator=gen, dtype=torch.float64)
    for p, _ in coords:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = sum(float(p.grad.reshape(-1)[i]) * float(v) if p.grad is not None else 0.0
                   for (p, i), v in zip(coords, direction))

    def shifted(scale):
        with torch.no_grad():
            for (p, i), v in zip(coords, direction):
                p.view(-1)[i] += scale * v
        val = float(loss_fn().detach())
        with torch.no_grad():
            for (p, i), v in zip(coords, direction):
                p.view(-1)[i] -= scale * v
        return val

    numeric = (shifted(h) - shifted(-h)) / (2 * h)
    return analytic, numeric


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in mod.TITLES.items():
        ok, detail = mod.RESULTS.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
