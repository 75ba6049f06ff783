import copy

import pytest
import torch

from conftest import directional_fd, flat_slice, rel_err, small_scenes, tiny_config
from fcremove.metrics import pyramid_distance
from fcremove.model import UNet, assemble_input, denoise, mask_to_tokens, predict_x0
from fcremove.rad import (
    Batch,
    Discriminator,
    DistillConfig,
    DistillState,
    LossWeights,
    TeacherConfig,
    TeacherState,
    disc_loss,
    discriminator_score,
    distill,
    distill_step,
    gen_loss,
    load_generator,
    mask_loss,
    teacher_step,
    train_teacher,
)
from fcremove.scheduler import forward_diffuse, make_linear_schedule, make_timestep_plan


def _state_tensors(state: DistillState):
    out = [p.detach().clone() for p in state.student.parameters()]
    out += [p.detach().clone() for p in state.disc.parameters()]
    for opt in (state.opt_g, state.opt_d):
        for st in opt.state_dict()["state"].values():
            out += [v.clone() for v in st.values() if torch.is_tensor(v)]
    out.append(state.rng.get_state())
    return out


def _same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def test_loss_weight_defaults():
    w = LossWeights()
    assert (w.lambda_diff, w.lambda_lpips, w.lambda_gan, w.lambda_mask) == (1.0, 5.0, 0.5, 0.01)
    with pytest.raises(ValueError):
        LossWeights(lambda_gan=-0.1)


def test_disc_loss_examples(gen):
    assert float(disc_loss(torch.ones(4), -torch.ones(4))) == 0.0
    assert float(disc_loss(torch.zeros(4), torch.zeros(4))) == 2.0
    r, f = torch.randn(16, generator=gen, dtype=torch.float64), torch.randn(16, generator=gen, dtype=torch.float64)
    expect = sum(max(0.0, 1 - float(x)) for x in r) / 16 + sum(max(0.0, 1 + float(x)) for x in f) / 16
    assert float(disc_loss(r, f)) == pytest.approx(expect, abs=1e-12)
    with pytest.raises(ValueError):
        disc_loss(torch.zeros(3), torch.zeros(4))


def test_gen_loss_examples(gen):
    z = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    total, terms = gen_loss(z, z.clone(), torch.zeros(2, dtype=torch.float64), None, LossWeights())
    assert float(total) == 0.0 and terms["lpips_disabled"]
    zp = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    fake = torch.randn(2, generator=gen, dtype=torch.float64)
    zero = LossWeights(0.0, 0.0, 0.0, 0.0)
    assert float(gen_loss(zp, z, fake, pyramid_distance, zero)[0]) == 0.0
    w = LossWeights()
    total, terms = gen_loss(zp, z, fake, pyramid_distance, w)
    lp = float(pyramid_distance(zp, z))
    diff = float(((zp - z) ** 2).sum()) / zp.numel()
    gan = -float(fake.sum()) / 2
    assert float(terms["lpips"]) == pytest.approx(lp, abs=1e-12)
    assert float(terms["diff"]) == pytest.approx(diff, abs=1e-12)
    assert float(terms["gan"]) == pytest.approx(gan, abs=1e-12)
    assert float(total) == pytest.approx(5.0 * lp + 1.0 * diff + 0.5 * gan, abs=1e-12)
    assert not terms["lpips_disabled"]


def test_mask_loss_examples(gen):
    m = torch.zeros(64, dtype=torch.bool)
    m[10:20] = True
    a = torch.stack([m.double(), 1 - m.double()], dim=-1)
    assert float(mask_loss(a, m)) == -1.0
    uniform = torch.full((64, 2), 0.5, dtype=torch.float64)
    assert float(mask_loss(uniform, m)) == 0.0
    r = torch.rand(64, 4, generator=gen, dtype=torch.float64)
    col = r[:, 0].tolist()
    fg = [c for c, k in zip(col, m.tolist()) if k]
    bg = [c for c, k in zip(col, m.tolist()) if not k]
    assert float(mask_loss(r, m)) == pytest.approx(sum(bg) / len(bg) - sum(fg) / len(fg), abs=1e-12)
    with pytest.raises(ValueError):
        mask_loss(r, torch.ones(64, dtype=torch.bool))
    with pytest.raises(ValueError):
        mask_loss(r, torch.zeros(64, dtype=torch.bool))


def test_mask_loss_batched_is_mean_of_samples(gen):
    a = torch.rand(3, 16, 4, generator=gen, dtype=torch.float64)
    m = torch.rand(3, 16, generator=gen) > 0.5
    m[:, 0], m[:, 1] = True, False
    per = [float(mask_loss(a[i], m[i])) for i in range(3)]
    assert float(mask_loss(a, m)) == pytest.approx(sum(per) / 3, abs=1e-12)


def _tiny_batch(cfg, b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    s = cfg.latent_size
    image = torch.rand(b, 3, s, s, generator=g, dtype=torch.float64)
    gt = torch.rand(b, 3, s, s, generator=g, dtype=torch.float64)
    m_obj = torch.zeros(b, 1, s, s, dtype=torch.float64)
    m_obj[:, :, 2:5, 2:5] = 1
    m_eff = m_obj.clone()
    m_eff[:, :, 5:7, 3:6] = 1
    return Batch(list(range(b)), image, gt, m_obj, m_eff)


def test_discriminator_score_gradient_wrt_z(gen):
    cfg = tiny_config()
    D = Discriminator(cfg).double()
    b = _tiny_batch(cfg)
    cond = torch.randn(2, 4, 16, generator=gen, dtype=torch.float64)
    z = b.gt.clone().requires_grad_(True)
    t = torch.tensor([249, 999])
    s1 = discriminator_score(z, b.image, b.m_eff, t, D, cond)
    assert torch.equal(s1, discriminator_score(z, b.image, b.m_eff, t, D, cond))
    a, n = directional_fd(lambda: discriminator_score(z, b.image, b.m_eff, t, D, cond).sum(), [(z, i) for i in range(z.numel())], gen)
    assert rel_err(a, n) < 1e-3


def test_discriminator_initialized_from_teacher():
    cfg = tiny_config()
    teacher = UNet(cfg)
    D = Discriminator.from_teacher(teacher)
    for (k, v), (k2, v2) in zip(teacher.encoder.state_dict().items(), D.encoder.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)


def test_gen_loss_gradient_through_student(gen):
    cfg = tiny_config()
    G, D = UNet(cfg).double(), Discriminator(cfg).double()
    sched = make_linear_schedule()
    b = _tiny_batch(cfg)
    t = torch.tensor([749, 249])
    eps = torch.randn(b.gt.shape, generator=gen, dtype=torch.float64)
    z_t = forward_diffuse(b.gt, t, eps, sched)

    with torch.no_grad():
        cond_d = G.embed_condition(b.image, b.m_obj)

    def loss():
        cond = G.embed_condition(b.image, b.m_obj)
        e, _ = denoise(G, assemble_input(z_t, b.m_obj, b.image), t, cond)
        zp = predict_x0(z_t, e, t, sched)
        fake = discriminator_score(zp, b.image, b.m_eff, t, D, cond_d)
        return gen_loss(zp, b.gt, fake, pyramid_distance, LossWeights())[0]

    coords = flat_slice(G.parameters(), 500, gen)
    a, n = directional_fd(loss, coords, gen)
    assert rel_err(a, n) < 1e-3


def test_asymmetric_masks_in_distill_step():
    cfg = tiny_config(16)
    teacher = UNet(cfg)
    state = DistillState.from_teacher(teacher, DistillConfig(batch_size=2))
    batch = Batch.from_scenes(small_scenes(range(4)))
    seen = []
    distill_step(batch, state, make_linear_schedule(), make_timestep_plan(4, 1000), LossWeights(),
                 DistillConfig(batch_size=4), None, lambda role, inp: seen.append((role, inp.mask.clone())))
    roles = [r for r, _ in seen]
    assert roles.count("generator") == 1 and roles.count("discriminator") == 3
    for role, mask in seen:
        assert torch.equal(mask, batch.m_obj if role == "generator" else batch.m_eff)
    assert not torch.equal(batch.m_obj, batch.m_eff)


def test_distill_step_deterministic():
    cfg = tiny_config(16)
    teacher = UNet(cfg)
    dcfg = DistillConfig(batch_size=2)
    batch = Batch.from_scenes(small_scenes(range(2)))
    sched, plan = make_linear_schedule(), make_timestep_plan(4, 1000)
    runs = []
    for _ in range(2):
        st = DistillState.from_teacher(teacher, dcfg)
        for _ in range(2):
            distill_step(batch, st, sched, plan, LossWeights(), dcfg, pyramid_distance)
        runs.append(_state_tensors(st))
    assert _same(*runs)


def test_pure_regression_breakdown():
    """With gan, lpips and mask weights at zero the generator loss is lambda_diff times the x0 error."""
    cfg = tiny_config(16)
    teacher = UNet(cfg)
    dcfg = DistillConfig(batch_size=2)
    sched, plan = make_linear_schedule(), make_timestep_plan(4, 1000)
    batch = Batch.from_scenes(small_scenes(range(2)))
    st = DistillState.from_teacher(teacher, dcfg)
    student0 = copy.deepcopy(st.student)
    rng = torch.Generator().manual_seed(0)
    rng.set_state(st.rng.get_state())
    w = LossWeights(lambda_diff=2.0, lambda_lpips=0.0, lambda_gan=0.0, lambda_mask=0.0)
    m = distill_step(batch, st, sched, plan, w, dcfg, pyramid_distance)
    # replay the same draws against the pre-step student
    taus = torch.tensor(plan.taus)
    t = taus[torch.randint(0, 4, (2,), generator=rng)]
    eps = torch.randn(batch.gt.shape, generator=rng)
    z_t = forward_diffuse(batch.gt, t, eps, sched)
    with torch.no_grad():
        cond = student0.embed_condition(batch.image, batch.m_obj)
        e, _ = denoise(student0, assemble_input(z_t, batch.m_obj, batch.image), t, cond)
        diff = float((predict_x0(z_t, e, t, sched) - batch.gt).square().mean())
    assert m["diff"] == pytest.approx(diff, rel=1e-6)
    assert m["loss_g"] == pytest.approx(2.0 * m["diff"], rel=1e-12)
    assert m["total"] == m["loss_g"]


def test_regression_loss_decreases():
    cfg = tiny_config(16)
    torch.manual_seed(0)
    teacher = UNet(cfg)
    corpus = small_scenes(range(64))
    dcfg = DistillConfig(iterations=200, batch_size=8, lr_g=1e-3, lr_d=1e-3, seed=0)
    w = LossWeights(lambda_diff=1.0, lambda_lpips=0.0, lambda_gan=0.0, lambda_mask=0.01)
    st = DistillState.from_teacher(teacher, dcfg)
    distill(corpus, st, make_linear_schedule(), make_timestep_plan(4, 1000), w, dcfg)
    diffs = [h["diff"] for h in st.history]
    assert sum(diffs[-50:]) / 50 < 0.5 * sum(diffs[:50]) / 50


def test_teacher_resume_bit_exact(tmp_path):
    cfg = tiny_config(16)
    corpus = small_scenes(range(16))
    tcfg = TeacherConfig(iterations=6, batch_size=4, seed=3)
    sched = make_linear_schedule()
    full = train_teacher(corpus, cfg, sched, tcfg)
    part = train_teacher(corpus, cfg, sched, tcfg, until=3)
    part.save(tmp_path / "t.ckpt")
    resumed = train_teacher(corpus, cfg, sched, tcfg, state=TeacherState.load(tmp_path / "t.ckpt"))
    assert resumed.iteration == 6
    for a, b in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(a, b)
    assert full.history == resumed.history


def test_distill_checkpoint_round_trip_and_resume(tmp_path):
    cfg = tiny_config(16)
    teacher = UNet(cfg)
    corpus = small_scenes(range(16))
    dcfg = DistillConfig(iterations=4, batch_size=2)
    sched, plan = make_linear_schedule(), make_timestep_plan(4, 1000)
    full = distill(corpus, DistillState.from_teacher(teacher, dcfg), sched, plan, LossWeights(), dcfg,
                   lpips_fn=pyramid_distance)
    part = distill(corpus, DistillState.from_teacher(teacher, dcfg), sched, plan, LossWeights(), dcfg, until=2,
                   lpips_fn=pyramid_distance)
    part.save(tmp_path / "s.ckpt")
    loaded = DistillState.load(tmp_path / "s.ckpt")
    assert _same(_state_tensors(part), _state_tensors(loaded))
    resumed = distill(corpus, loaded, sched, plan, LossWeights(), dcfg, lpips_fn=pyramid_distance)
    assert _same(_state_tensors(full), _state_tensors(resumed))
    assert full.history == resumed.history
    g = load_generator(tmp_path / "s.ckpt")
    for a, b in zip(g.parameters(), part.student.parameters()):
        assert torch.equal(a, b)


def test_teacher_step_uses_eff_tokens_for_mask_loss():
    cfg = tiny_config(16)
    batch = Batch.from_scenes(small_scenes(range(4)))
    st = TeacherState.create(cfg, TeacherConfig(batch_size=4))
    m = teacher_step(batch, st, make_linear_schedule(), TeacherConfig(batch_size=4))
    assert set(m) == {"iter", "loss", "eps", "mask"}
    assert -1.0 <= m["mask"] <= 1.0
    assert mask_to_tokens(batch.m_eff, 8).any()
