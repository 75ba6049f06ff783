import math

import pytest
import torch

from conftest import directional_fd, flat_slice, rel_err, tiny_config
from fcremove.model import (
    CACHE_SITES,
    VISUAL_TOKEN,
    LatentCodec,
    NumericFault,
    UNet,
    UNetConfig,
    assemble_input,
    crop_objects,
    denoise,
    embed_condition,
    mask_to_tokens,
    predict_x0,
    scenes_to_tensors,
)
from fcremove.scheduler import forward_diffuse, make_linear_schedule
from fcremove.synthgen import CorpusConfig, generate_scene


def _tiny_batch(cfg, b=2, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    s = cfg.latent_size
    image = torch.rand(b, 3, s, s, generator=g, dtype=dtype)
    m = torch.zeros(b, 1, s, s, dtype=dtype)
    m[:, :, 2:5, 3:6] = 1
    z_t = torch.randn(b, 3, s, s, generator=g, dtype=dtype)
    return image, m, z_t


def test_identity_codec_round_trip():
    c = LatentCodec("identity")
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(c.decode(c.encode(x)), x)
    assert torch.equal(c.encode(torch.zeros(1, 3, 32, 32)), torch.zeros(1, 3, 32, 32))
    with pytest.raises(ValueError):
        c.encode(torch.zeros(1, 3, 16, 16))
    with pytest.raises(ValueError):
        LatentCodec("vae")


def test_learned_codec_shapes():
    c = LatentCodec("learned", channels=4)
    z = c.encode(torch.rand(1, 3, 32, 32))
    assert z.shape == (1, 4, 32, 32)
    assert c.decode(z).shape == (1, 3, 32, 32)


def test_assemble_input():
    g = torch.Generator().manual_seed(0)
    z_t, z_ref = torch.randn(2, 3, 8, 8, generator=g), torch.randn(2, 3, 8, 8, generator=g)
    m = (torch.rand(2, 1, 8, 8, generator=g) > 0.5).float()
    x = assemble_input(z_t, m, z_ref).tensor
    assert x.shape[1] == 7
    assert torch.equal(x[:, :3], z_t) and torch.equal(x[:, 3:4], m) and torch.equal(x[:, 4:], z_ref)
    ones = assemble_input(z_t, torch.ones(2, 1, 8, 8), z_ref).tensor
    assert torch.all(ones[:, 3] == 1)


def test_assemble_input_errors():
    z = torch.zeros(1, 3, 8, 8)
    with pytest.raises(ValueError):
        assemble_input(z, torch.full((1, 1, 8, 8), 0.5), z)
    with pytest.raises(ValueError):
        assemble_input(z, torch.zeros(1, 1, 4, 4), z)
    with pytest.raises(ValueError):
        assemble_input(z, torch.zeros(1, 1, 8, 8), torch.zeros(1, 3, 4, 4))


def test_channel_order_matters():
    """Swapping z_t and z_ref changes the output, so the order is wired through."""
    cfg = tiny_config()
    model = UNet(cfg).double()
    image, m, z_t = _tiny_batch(cfg)
    cond = model.embed_condition(image, m)
    a, _ = model(assemble_input(z_t, m, image).tensor, torch.tensor([10, 20]), cond)
    b, _ = model(assemble_input(image, m, z_t).tensor, torch.tensor([10, 20]), cond)
    assert not torch.allclose(a, b)
    x = assemble_input(z_t, m, image).tensor
    perm = torch.tensor([4, 5, 6, 3, 0, 1, 2])
    inv = torch.argsort(perm)
    assert torch.equal(x[:, perm][:, inv], x)


def test_config_site_grids():
    cfg = UNetConfig()
    assert cfg.in_channels == 7
    assert [cfg.site_grid(s) for s in CACHE_SITES] == [16, 8, 8, 8, 16]
    assert len(set(CACHE_SITES)) == 5
    with pytest.raises(KeyError):
        cfg.site_grid("down.3")
    assert UNetConfig.from_dict(cfg.to_dict()) == cfg


def test_embed_condition_contract():
    torch.manual_seed(0)
    model = UNet(UNetConfig())
    s1, s2 = generate_scene(1, CorpusConfig()), generate_scene(2, CorpusConfig())
    c1 = embed_condition(model, s1)
    assert c1.shape == (4, 64)
    assert torch.isfinite(c1).all()
    assert torch.equal(c1, embed_condition(model, s1))
    assert not torch.allclose(c1, embed_condition(model, s2))
    s1.m_obj[:] = False
    with pytest.raises(ValueError):
        embed_condition(model, s1)


def test_crop_covers_object():
    image = torch.zeros(1, 3, 32, 32)
    m = torch.zeros(1, 1, 32, 32)
    m[0, 0, 10:20, 4:12] = 1
    image[0, :, 10:20, 4:12] = 1
    crop = crop_objects(image, m, 16)
    # object fills its own bounding box, so the resampled crop is (nearly) all ones
    assert crop[0, 3].mean() > 0.9


def test_denoise_shapes_and_row_stochastic():
    torch.manual_seed(0)
    model = UNet(UNetConfig()).eval()
    scenes = [generate_scene(i, CorpusConfig()) for i in range(2)]
    t = scenes_to_tensors(scenes)
    cond = model.embed_condition(t["image"], t["m_obj"])
    z = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        eps, rec = denoise(model, assemble_input(z, t["m_obj"], t["image"]), torch.tensor([999, 10]), cond)
        eps2, _ = denoise(model, assemble_input(z, t["m_obj"], t["image"]), torch.tensor([999, 10]), cond)
    assert eps.shape == z.shape
    assert torch.equal(eps, eps2)
    assert set(rec.cross) == set(CACHE_SITES)
    for site, amap in rec.cross.items():
        n = model.cfg.site_grid(site) ** 2
        assert amap.shape == (2, n, 4)
        assert (amap >= 0).all()
        assert (amap.sum(-1) - 1).abs().max() < 1e-5
        assert rec.self_meta[site] == (n, 64)
    assert rec.visual_column("down.1").shape == (2, 256)
    torch.testing.assert_close(rec.visual_column("mid"), rec.cross["mid"][..., VISUAL_TOKEN])
    with pytest.raises(KeyError):
        rec.visual_column("up.7")


def test_denoise_numeric_fault():
    model = UNet(UNetConfig())
    z = torch.full((1, 3, 32, 32), float("nan"))
    m = torch.zeros(1, 1, 32, 32)
    m[..., 4:8, 4:8] = 1
    cond = torch.zeros(1, 4, 64)
    with pytest.raises(NumericFault):
        denoise(model, assemble_input(z, m, torch.zeros_like(z)), 5, cond)


def test_denoise_gradient_matches_finite_differences(gen):
    cfg = tiny_config()
    model = UNet(cfg).double()
    image, m, z_t = _tiny_batch(cfg)
    t = torch.tensor([100, 700])

    def loss():
        cond = model.embed_condition(image, m)
        eps, _ = denoise(model, assemble_input(z_t, m, image), t, cond)
        return eps.square().sum()

    coords = flat_slice(model.parameters(), 1000, gen)
    for _ in range(3):
        a, n = directional_fd(loss, coords, gen)
        assert rel_err(a, n) < 1e-3, (a, n)


def test_predict_x0():
    s = make_linear_schedule()
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    z_t = forward_diffuse(z0, 300, eps, s)
    torch.testing.assert_close(predict_x0(z_t, eps, 300, s), z0, rtol=0, atol=1e-12)
    a = s.alpha_bars[300]
    torch.testing.assert_close(predict_x0(z_t, torch.zeros_like(eps), 300, s), z_t / math.sqrt(a))
    x = predict_x0(z_t, eps, 300, s)
    for idx in [(0, 0, 0, 0), (1, 2, 3, 1)]:
        expect = (float(z_t[idx]) - math.sqrt(1 - a) * float(eps[idx])) / math.sqrt(a)
        assert float(x[idx]) == pytest.approx(expect, abs=1e-12)


def test_mask_to_tokens_max_pools():
    m = torch.zeros(1, 1, 32, 32)
    m[0, 0, 0, 0] = 1
    tok = mask_to_tokens(m, 16)
    assert tok.shape == (1, 256) and tok.sum() == 1 and tok[0, 0]
    assert mask_to_tokens(m, 8)[0].sum() == 1
    with pytest.raises(ValueError):
        mask_to_tokens(m, 5)


@pytest.mark.parametrize("head", ["v", "x0"])
def test_output_head_converts_to_eps(head):
    cfg = UNetConfig(**{**tiny_config().to_dict(), "widths": tiny_config().widths, "prediction": head})
    torch.manual_seed(0)
    net = UNet(cfg).double()
    raw = UNet(UNetConfig(**{**cfg.to_dict(), "widths": cfg.widths, "prediction": "eps"})).double()
    raw.load_state_dict(net.state_dict())
    image, m, z_t = _tiny_batch(cfg)
    inp = assemble_input(z_t, m, image)
    t = torch.tensor([999, 3])
    cond = net.embed_condition(image, m)
    with torch.no_grad():
        eps, _ = denoise(net, inp, t, cond)
        out, _ = denoise(raw, inp, t, cond)
    sched = make_linear_schedule(1000, 1e-4, 0.02)
    abar = sched.alpha_bar(t, like=z_t)
    x0 = predict_x0(z_t, eps, t, sched)
    if head == "v":
        assert torch.allclose(eps, (1 - abar).sqrt() * z_t + abar.sqrt() * out, atol=1e-12)
        assert torch.allclose(x0, abar.sqrt() * z_t - (1 - abar).sqrt() * out, atol=1e-9)
    else:
        assert torch.allclose(x0, out, atol=1e-9)
        assert torch.allclose(eps, (z_t - abar.sqrt() * out) / (1 - abar).sqrt(), atol=1e-12)


def test_head_schedule_not_checkpointed():
    net = UNet(UNetConfig(**{**tiny_config().to_dict(), "widths": (8, 16, 16), "prediction": "x0"}))
    assert "alpha_bars" not in net.state_dict()
    with pytest.raises(ValueError):
        UNetConfig(prediction="score")
