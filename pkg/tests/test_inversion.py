import math

import pytest
import torch

from oracles import fd_check

from concept_inversion.checkpoint import parameter_hash
from concept_inversion.conditioning import add_placeholder, encode_prompt, prompt_for
from concept_inversion.data import LabeledImages
from concept_inversion.denoiser import predict_noise
from concept_inversion.diffusion import denoising_loss
from concept_inversion.erasure import make_np_guidance, make_sld_guidance
from concept_inversion.guidance import SldParams, SldState
from concept_inversion.inversion import (
    InversionConfig, install_embedding, invert_np, invert_sld, invert_ti, np_ci_loss, sld_ci_step, sld_window,
    ti_loss, transfer_embedding,
)
from concept_inversion.schedule import forward_diffuse

PLACEHOLDER = "<*0>"


def _fixed_batch(B=3, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x0 = (torch.rand(B, 1, 8, 8, generator=g, dtype=dtype) * 2 - 1)
    eps = torch.randn(B, 1, 8, 8, generator=g, dtype=dtype)
    return x0, eps


def _cond_fn(model, seed=0):
    table = model.table.copy()
    add_placeholder(table, PLACEHOLDER, seed=seed)
    base = encode_prompt(prompt_for(PLACEHOLDER), table).detach()

    def cond(v):
        return torch.cat([base[:3], v[None]])

    return cond, table.row(PLACEHOLDER).detach().clone()


def test_ti_loss_gradient(tiny_model64):
    model, sched = tiny_model64
    cond, v = _cond_fn(model)
    x0, eps = _fixed_batch()
    t = torch.tensor([1, 4, 8])
    assert fd_check(lambda u: ti_loss(model, x0, t, eps, cond(u), sched), v) <= 1e-4


def test_np_ci_loss_gradient(tiny_model64):
    model, sched = tiny_model64
    cond, v = _cond_fn(model, seed=1)
    concept = encode_prompt(prompt_for("<digit-3>"), model.table)
    x0, eps = _fixed_batch(seed=1)
    t = torch.tensor([2, 5, 7])
    f = lambda u: np_ci_loss(model, x0, t, eps, cond(u), concept, 3.0, sched)  # noqa: E731
    assert fd_check(f, v) <= 1e-4


def test_sld_ci_loss_gradient(tiny_model64):
    model, sched = tiny_model64
    cond, v = _cond_fn(model, seed=2)
    safety = encode_prompt(prompt_for("<digit-3>"), model.table)
    x0, eps = _fixed_batch(seed=2)
    # large threshold so beta = |s_S * diff| > 1 almost everywhere and the prompt term does not cancel
    params = SldParams(s_S=50.0, lambda_safe=10.0, s_m=0.5, zeta_m=0.7, delta=0)
    warm = SldState()
    with torch.no_grad():
        for t in (2, 3):
            sld_ci_step(model, forward_diffuse(x0, t, eps, sched), t, cond(v), safety, 3.0, 3.0, params, warm)
    assert warm.momentum.abs().sum() > 0

    def f(u):
        state = SldState(momentum=warm.momentum.clone(), steps_taken=warm.steps_taken)
        loss, _ = sld_ci_step(model, forward_diffuse(x0, 4, eps, sched), 4, cond(u), safety, 3.0, 3.0, params, state)
        return loss

    assert fd_check(f, v) <= 1e-4


def test_denoiser_training_loss_gradient(tiny_model64):
    model, sched = tiny_model64
    x0, eps = _fixed_batch(seed=3)
    t = torch.tensor([1, 3, 8])
    cond = encode_prompt(prompt_for("<digit-1>"), model.table).expand(3, -1, -1)
    name, param = "attn_mid.to_v.weight", dict(model.named_parameters())["attn_mid.to_v.weight"]
    base = param.detach().clone()

    def f(w):
        with torch.no_grad():
            param.copy_(w.detach())
        if w.requires_grad:
            param.requires_grad_(True)
            loss = denoising_loss(model, x0, cond, t, eps, sched)
            return loss, param
        return denoising_loss(model, x0, cond, t, eps, sched), None

    loss, p = f(base.clone().requires_grad_(True))
    loss.backward()
    grad = p.grad.detach().clone()
    p.requires_grad_(False)
    p.grad = None
    g = torch.Generator().manual_seed(9)
    h = 1e-6
    for _ in range(4):
        d = torch.randn(base.shape, generator=g, dtype=base.dtype)
        num = (f(base + h * d)[0].item() - f(base - h * d)[0].item()) / (2 * h)
        ana = (grad * d).sum().item()
        assert abs(num - ana) / max(abs(num), abs(ana)) <= 1e-4, name
    f(base)


def test_np_ci_alpha_one_is_conditional_matching(tiny_model64):
    model, sched = tiny_model64
    cond, v = _cond_fn(model)
    concept = encode_prompt(prompt_for("<digit-3>"), model.table)
    x0, eps = _fixed_batch()
    t = torch.tensor([2, 3, 6])
    got = np_ci_loss(model, x0, t, eps, cond(v), concept, 1.0, sched)
    x_t = forward_diffuse(x0, t, eps, sched)
    ref = ((predict_noise(model, x_t, concept, t) - predict_noise(model, x_t, cond(v), t)) ** 2).mean()
    assert torch.allclose(got, ref, rtol=1e-12, atol=0)


def test_np_ci_naive_copy_is_not_a_minimizer(tiny_model64):
    model, sched = tiny_model64
    concept = encode_prompt(prompt_for("<digit-3>"), model.table)
    x0, eps = _fixed_batch()
    t = torch.tensor([2, 3, 6])
    alpha = 3.0
    got = np_ci_loss(model, x0, t, eps, concept.clone(), concept, alpha, sched)
    x_t = forward_diffuse(x0, t, eps, sched)
    e_u = predict_noise(model, x_t, model.null_condition, t)
    e_c = predict_noise(model, x_t, concept, t)
    expected = ((1 - alpha) ** 2 * (e_u - e_c) ** 2).mean()
    assert torch.allclose(got, expected, rtol=1e-10) and got.item() > 0


def test_sld_ci_single_step_no_momentum_reduces_to_np_pattern(tiny_model64):
    model, sched = tiny_model64
    cond, v = _cond_fn(model)
    safety = encode_prompt(prompt_for("<digit-3>"), model.table)
    x0, eps = _fixed_batch()
    x_t = forward_diffuse(x0, 4, eps, sched)
    # warm-up suppresses the safety term: the SLD prediction is plain CFG of c_* at scale mu
    loss, gamma = sld_ci_step(model, x_t, 4, cond(v), safety, 3.0, 2.0, SldParams(delta=5), SldState())
    e_u = predict_noise(model, x_t, model.null_condition, 4)
    e_s = predict_noise(model, x_t, safety, 4)
    e_star = predict_noise(model, x_t, cond(v), 4)
    ref = ((e_u + 2.0 * (e_star - e_u) - (e_u + 3.0 * (e_s - e_u))) ** 2).mean()
    assert torch.count_nonzero(gamma) == 0
    assert torch.allclose(loss, ref, rtol=1e-12)


def test_sld_ci_full_stride_matches_scripted_recursion(tiny_model64):
    model, sched = tiny_model64
    cond, v = _cond_fn(model)
    safety = encode_prompt(prompt_for("<digit-3>"), model.table)
    x0, eps = _fixed_batch()
    p = SldParams(s_S=7.0, lambda_safe=0.5, s_m=0.4, zeta_m=0.6, delta=2)
    alpha, mu = 3.0, 2.5
    state = SldState()
    got = []
    for t in range(1, sched.T + 1):
        loss, _ = sld_ci_step(model, forward_diffuse(x0, t, eps, sched), t, cond(v), safety, alpha, mu, p, state)
        got.append(loss.item())
    m = torch.zeros_like(x0)
    ref = []
    for i, t in enumerate(range(1, sched.T + 1)):
        x_t = forward_diffuse(x0, t, eps, sched)
        e_u = predict_noise(model, x_t, model.null_condition, t)
        e_s = predict_noise(model, x_t, safety, t)
        e_c = predict_noise(model, x_t, cond(v), t)
        diff = e_c - e_s
        beta = torch.where(diff.abs() <= p.lambda_safe, torch.clamp((p.s_S * diff).abs(), min=1.0),
                           torch.zeros_like(diff))
        gamma = torch.zeros_like(x0) if i < p.delta else beta * (e_c - e_u) + p.s_m * m
        pred = e_u + mu * (e_c - e_u - gamma)
        target = e_u + alpha * (e_s - e_u)
        ref.append(((pred - target) ** 2).mean().item())
        m = p.zeta_m * m + (1 - p.zeta_m) * gamma
    assert max(abs(a - b) for a, b in zip(got, ref)) <= 1e-10


def test_sld_window_and_cap():
    cfg = InversionConfig(attack="sld_ci", m=1, n=10, k=3)
    assert sld_window(cfg, 10, torch.Generator()) == [1, 4, 7, 10]
    assert cfg.cap() == 4
    sub = InversionConfig(attack="sld_ci", m=2, n=20, k=2, span=6)
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        w = sld_window(sub, 20, g)
        assert w[0] >= 2 and w[-1] <= 20 and w[-1] - w[0] <= 6
    with pytest.raises(ValueError):
        sld_window(cfg, 5, g)
    with pytest.raises(ValueError):
        InversionConfig(m=5, n=2)


def _examples(n=6):
    g = torch.Generator().manual_seed(0)
    return LabeledImages(torch.rand(n, 1, 8, 8, generator=g) * 2 - 1, torch.full((n,), 3))


def _hashes(model):
    return parameter_hash(model), model.table.fingerprint()


@pytest.mark.parametrize("attack", ["ti", "np_ci", "sld_ci"])
def test_attacks_leave_model_and_vocabulary_untouched(tiny_model, attack):
    model, sched = tiny_model
    before = _hashes(model)
    cfg = InversionConfig(attack=attack, steps=3, batch=2, probe_size=4, n=sched.T, k=2, lr=0.05)
    if attack == "ti":
        res = invert_ti(model, _examples(), None, cfg, sched)
    elif attack == "np_ci":
        res = invert_np(model, "<digit-3>", _examples(), None, cfg, sched)
    else:
        res = invert_sld(model, make_sld_guidance("<digit-3>", "max"), _examples(), None, cfg, sched)
        assert 0 < res.peak_history <= cfg.cap()
    assert _hashes(model) == before
    assert PLACEHOLDER not in model.table
    assert res.embedding.shape == (model.table.dim,) and not res.embedding.requires_grad
    assert len(res.loss_curve) == 3 and math.isfinite(res.final_loss)


def test_sld_ci_memory_cap_respected(tiny_model):
    model, sched = tiny_model
    cfg = InversionConfig(attack="sld_ci", steps=1, batch=2, probe_size=2, n=sched.T, k=1, memory_cap=3)
    res = invert_sld(model, make_sld_guidance("<digit-3>", "max"), _examples(), None, cfg, sched)
    assert res.peak_history == 3


def test_inversion_rejects_unfrozen_model(tiny_model):
    model, sched = tiny_model
    next(model.parameters()).requires_grad_(True)
    with pytest.raises(ValueError):
        invert_ti(model, _examples(), None, InversionConfig(steps=1), sched)


def test_inversion_rejects_empty_examples(tiny_model):
    model, sched = tiny_model
    with pytest.raises(ValueError):
        invert_ti(model, torch.empty(0, 1, 8, 8), None, InversionConfig(steps=1), sched)


def test_invert_sld_needs_sld_spec(tiny_model):
    model, sched = tiny_model
    with pytest.raises(ValueError):
        invert_sld(model, make_np_guidance("<digit-3>"), _examples(), None, InversionConfig(steps=1), sched)


def test_ti_reduces_probe_loss(tiny_model):
    model, sched = tiny_model
    res = invert_ti(model, _examples(), None, InversionConfig(steps=60, lr=0.05, batch=4, probe_size=32), sched)
    assert res.final_loss < res.initial_loss


def test_ti_is_deterministic(tiny_model):
    model, sched = tiny_model
    cfg = InversionConfig(steps=5, batch=2, probe_size=4)
    a = invert_ti(model, _examples(), None, cfg, sched)
    b = invert_ti(model, _examples(), None, cfg, sched)
    assert torch.equal(a.embedding, b.embedding) and a.loss_curve == b.loss_curve


def test_install_embedding_dimension_mismatch(tiny_model):
    model, _ = tiny_model
    with pytest.raises(ValueError):
        install_embedding(model.table, PLACEHOLDER, torch.zeros(model.table.dim + 1))
    table = install_embedding(model.table, PLACEHOLDER, torch.ones(model.table.dim))
    assert torch.equal(table.row(PLACEHOLDER).detach(), torch.ones(model.table.dim))
    assert PLACEHOLDER not in model.table


class _ConstClassifier:
    def predict(self, images):
        return torch.full((len(images),), 3)


def test_transfer_embedding_scores_on_base(tiny_model):
    model, sched = tiny_model
    res = invert_ti(model, _examples(), None, InversionConfig(steps=2, batch=2, probe_size=2), sched)
    imgs, acc = transfer_embedding(res, model, _ConstClassifier(), 3, 4, 0, sched)
    assert imgs.shape == (4, 1, 8, 8) and acc == 1.0
