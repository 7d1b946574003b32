import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit, log_softmax, softmax

from mpu.gradengine import fd_grad, grad, hessian_spectrum_fd, relative_error, top_eigenvalue
from mpu.objectives import (
    MissingReferenceError,
    ObjectiveConfig,
    ObjectiveKind,
    UnlearnData,
    forget_ce,
    loss,
    retain_ce,
)
from mpu.tinyformer import forward, init_params

from .conftest import make_data

KINDS = list(ObjectiveKind)


def _tok_lp(theta, cfg, tokens):
    lsm = log_softmax(forward(theta, cfg, tokens)[:, :-1], axis=-1)
    return np.take_along_axis(lsm, tokens[:, 1:, None], axis=-1)[..., 0]


def _seq(theta, cfg, tokens, mask):
    return (_tok_lp(theta, cfg, tokens) * mask[:, 1:]).sum(axis=1)


def _reference_value(obj, theta, cfg, data):
    """Objective values written out from the defining formulas."""
    ref = obj.reference_params
    f, r, p = data.forget, data.retain, data.preference
    ret = obj.lambda_ret * -np.mean(_seq(theta, cfg, r.tokens, r.mask))
    k = obj.kind
    if k is ObjectiveKind.GRAD_ASCENT:
        return np.mean(_seq(theta, cfg, f.tokens, f.mask))
    if k is ObjectiveKind.GRAD_DIFF:
        return obj.lambda_f * np.mean(_seq(theta, cfg, f.tokens, f.mask)) + ret
    if k is ObjectiveKind.NPO:
        z = obj.beta * (_seq(theta, cfg, f.tokens, f.mask) - _seq(ref, cfg, f.tokens, f.mask))
        return 2 / obj.beta * np.mean(np.log1p(np.exp(z))) + ret
    if k is ObjectiveKind.SIMNPO:
        z = obj.beta * _seq(theta, cfg, f.tokens, f.mask) / f.mask[:, 1:].sum(1) + obj.gamma
        return 2 / obj.beta * np.mean(np.log1p(np.exp(z))) + ret
    if k is ObjectiveKind.DPO:
        w = _seq(theta, cfg, p.tokens, p.mask) - _seq(ref, cfg, p.tokens, p.mask)
        lo = _seq(theta, cfg, p.rejected_tokens, p.rejected_mask) - _seq(ref, cfg, p.rejected_tokens, p.rejected_mask)
        return np.mean(-np.log(expit(obj.beta * (w - lo)))) + ret
    if k is ObjectiveKind.UNDIAL:
        teach = forward(ref, cfg, f.tokens)[:, :-1].copy()
        tgt = f.tokens[:, 1:]
        for b in range(teach.shape[0]):
            for t in range(teach.shape[1]):
                teach[b, t, tgt[b, t]] -= obj.gamma_ud
        q = softmax(teach, axis=-1)
        lsm = log_softmax(forward(theta, cfg, f.tokens)[:, :-1], axis=-1)
        per = -(q * lsm).sum(-1)
        return np.mean((per * f.mask[:, 1:]).sum(1)) + ret
    if k is ObjectiveKind.SATIMP:
        src = obj.satimp_weight_params or theta
        pw = np.exp(_tok_lp(src, cfg, f.tokens))
        w = pw ** obj.beta1 * (1 - pw) ** obj.beta2
        return np.mean((w * _tok_lp(theta, cfg, f.tokens) * f.mask[:, 1:]).sum(1)) + ret
    raise AssertionError(k)


def _obj(kind, ref):
    return ObjectiveConfig(kind=kind, beta=0.7, gamma=0.3, lambda_f=0.8, lambda_ret=0.5, reference_params=ref)


@pytest.mark.parametrize("kind", KINDS)
def test_loss_matches_formula(kind, small_cfg, small_theta, small_data):
    ref = init_params(small_cfg, 9)
    obj = _obj(kind, ref)
    want = _reference_value(obj, small_theta, small_cfg, small_data)
    assert loss(obj, small_theta, small_cfg, small_data) == pytest.approx(want, rel=1e-12)


def test_reference_equal_to_model_gives_log2(small_cfg, small_theta, small_data):
    data = UnlearnData(small_data.forget, None, small_data.preference)
    npo = ObjectiveConfig(kind="npo", beta=0.5, reference_params=small_theta)
    assert loss(npo, small_theta, small_cfg, data) == pytest.approx(2 / 0.5 * math.log(2), rel=1e-12)
    dpo = ObjectiveConfig(kind="dpo", beta=2.0, reference_params=small_theta)
    assert loss(dpo, small_theta, small_cfg, data) == pytest.approx(math.log(2), rel=1e-12)


def test_grad_ascent_has_no_retain_term(small_cfg, small_theta, small_data):
    obj = ObjectiveConfig(kind="grad_ascent", lambda_ret=5.0)
    assert not obj.uses_retain
    a = loss(obj, small_theta, small_cfg, small_data)
    b = loss(obj, small_theta, small_cfg, UnlearnData(small_data.forget))
    assert a == b


@pytest.mark.parametrize("kind", ["npo", "dpo", "undial"])
def test_missing_reference_raises(kind, small_cfg, small_theta, small_data):
    with pytest.raises(MissingReferenceError):
        loss(ObjectiveConfig(kind=kind), small_theta, small_cfg, small_data)


@pytest.mark.parametrize("field", ["gamma", "gamma_ud", "beta1", "beta2", "lambda_f", "lambda_ret"])
def test_negative_hyperparameters_rejected(field):
    with pytest.raises(ValueError):
        ObjectiveConfig(**{field: -0.1})
    with pytest.raises(ValueError):
        ObjectiveConfig(beta=0.0)


def test_ce_metrics_are_per_token(small_cfg, small_theta, small_data):
    f = small_data.forget
    want = -_seq(small_theta, small_cfg, f.tokens, f.mask).sum() / f.mask[:, 1:].sum()
    assert forget_ce(small_theta, small_cfg, small_data) == pytest.approx(want, rel=1e-12)
    r = small_data.retain
    want = -_seq(small_theta, small_cfg, r.tokens, r.mask).sum() / r.mask[:, 1:].sum()
    assert retain_ce(small_theta, small_cfg, small_data) == pytest.approx(want, rel=1e-12)
    assert math.isnan(forget_ce(small_theta, small_cfg, UnlearnData()))


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_matches_central_differences(kind, small_cfg, small_theta, small_data):
    obj = _obj(kind, init_params(small_cfg, 9))
    g = grad(obj, small_theta, small_cfg, small_data)
    assert g.loss == pytest.approx(loss(obj, small_theta, small_cfg, small_data), rel=1e-12)
    coords = np.random.default_rng(1).choice(small_theta.total_dim, 40, replace=False)
    num = fd_grad(obj, small_theta, small_cfg, small_data, coords)
    err = relative_error(g.grad.flatten()[coords], num)
    assert err.max() <= 1e-4


def test_satimp_gradient_is_stop_gradient_surrogate(small_cfg, small_theta, small_data):
    obj = ObjectiveConfig(kind="satimp", beta1=2.0, beta2=0.5, lambda_ret=0.0)
    frozen = replace(obj, satimp_weight_params=small_theta)
    a = grad(obj, small_theta, small_cfg, small_data).grad.flatten()
    b = grad(frozen, small_theta, small_cfg, small_data).grad.flatten()
    np.testing.assert_array_equal(a, b)
    # weights frozen elsewhere still give matching FD on the surrogate
    frozen = replace(obj, satimp_weight_params=init_params(small_cfg, 5))
    coords = np.arange(0, small_theta.total_dim, 97)
    num = fd_grad(frozen, small_theta, small_cfg, small_data, coords)
    ana = grad(frozen, small_theta, small_cfg, small_data).grad.flatten()[coords]
    assert relative_error(ana, num).max() <= 1e-4


def test_empty_forget_gives_retain_only_gradient(small_cfg, small_theta, small_data):
    obj = ObjectiveConfig(kind="grad_ascent")
    g = grad(obj, small_theta, small_cfg, UnlearnData(retain=small_data.retain))
    assert g.loss == 0.0
    assert not np.any(g.grad.flatten())


def test_fd_grad_accepts_callable_and_rejects_bad_step(small_theta):
    fn = lambda th: 0.5 * float(th.flatten() @ th.flatten())
    coords = [0, 5, 17]
    num = fd_grad(fn, small_theta, coords=coords)
    np.testing.assert_allclose(num, small_theta.flatten()[coords], rtol=1e-8)
    with pytest.raises(ValueError):
        fd_grad(fn, small_theta, coords=coords, h=0.0)


def test_top_eigenvalue_on_known_matrix():
    g = np.random.default_rng(2)
    q, _ = np.linalg.qr(g.standard_normal((30, 30)))
    eig = np.linspace(-1.0, 4.0, 30)
    eig[-1] = 7.0
    A = (q * eig) @ q.T
    est = top_eigenvalue(lambda v: A @ v, 30, subspace_dim=4, tol=1e-10, max_iter=500)
    assert est.converged
    assert est.value == pytest.approx(7.0, rel=1e-6)


def test_hessian_fd_matches_dense_hessian(small_cfg, small_data):
    from mpu.tinyformer import ModelConfig

    cfg = ModelConfig(vocab=5, d_model=4, n_layers=1, n_q_heads=2, n_kv_heads=1, d_head=2, d_ff=4, max_seq=6)
    theta = init_params(cfg, 1)
    data = make_data(cfg, seed=4)
    obj = ObjectiveConfig(kind="grad_diff", lambda_f=0.0)
    base = theta.flatten()
    n = base.size
    h = 1e-5
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (grad(obj, theta.unflatten(base + e), cfg, data).grad.flatten()
                   - grad(obj, theta.unflatten(base - e), cfg, data).grad.flatten()) / (2 * h)
    lam = np.linalg.eigvalsh(0.5 * (H + H.T))[-1]
    est = hessian_spectrum_fd(obj, theta, cfg, data, subspace_dim=6, max_iter=400, tol=1e-9)
    assert est.value == pytest.approx(lam, rel=0.02)


def test_satimp_head_hand_values():
    from mpu.objectives import satimp_head

    # vocab 2, one target token; logits give p = 0.5 then p = 1 (numerically)
    tokens = np.array([[0, 1], [0, 1]])
    mask = np.array([[False, True], [False, True]])
    logits = np.zeros((2, 2, 2))
    logits[1, 0] = [-800.0, 0.0]
    li, _ = satimp_head(logits, tokens, mask, 1.0, 1.0)
    assert li[0] == pytest.approx(0.25 * math.log(0.5), abs=1e-6)
    assert li[0] == pytest.approx(-0.173287, abs=1e-6)
    assert li[1] == 0.0


def test_undial_with_equal_models_is_teacher_entropy():
    from mpu.objectives import undial_head

    logits = np.zeros((1, 2, 3))
    logits[0, 0] = [0.2, 1.0, -0.5]
    tokens = np.array([[0, 2]])
    mask = np.array([[False, True]])
    li, g = undial_head(logits, logits, tokens, mask, 0.0)
    p = softmax(logits[0, 0])
    assert li[0] == pytest.approx(-(p * np.log(p)).sum(), rel=1e-12)
    assert np.max(np.abs(g)) < 1e-15


def test_single_token_ce_logit_gradient():
    from mpu.objectives import seq_logprob_head

    tokens = np.array([[0, 1]])
    mask = np.array([[False, True]])
    _, ds = seq_logprob_head(np.zeros((1, 2, 2)), tokens, mask)
    # d CE / d logit_target = -(d s / d logit_target) = softmax - onehot
    assert -ds[0, 0, 1] == pytest.approx(-0.5)
    assert -ds[0, 0, 0] == pytest.approx(0.5)


def test_all_masks_empty_gives_zero_loss_and_grad(small_cfg, small_theta, small_data):
    from mpu.tinyformer import Batch, Role

    f = small_data.forget
    empty = Batch(f.tokens, np.zeros_like(f.mask), Role.FORGET)
    g = grad(ObjectiveConfig(kind="grad_ascent"), small_theta, small_cfg, UnlearnData(empty))
    assert g.loss == 0.0
    assert not np.any(g.grad.flatten())


def test_npo_is_bounded_for_large_log_ratios():
    from mpu.objectives import softplus

    x = np.linspace(-30, 30, 601)
    for beta in (0.1, 1.0, 5.0):
        v = (2 / beta) * softplus(beta * x)
        assert np.all(np.isfinite(v)) and np.all(v > 0)
        assert np.all(v <= (2 / beta) * softplus(beta * np.clip(x, -30, 30)) + 1e-12)


@pytest.mark.parametrize("kind", ["npo", "simnpo", "dpo"])
def test_preference_losses_positive(kind, small_cfg, small_theta, small_data):
    obj = ObjectiveConfig(kind=kind, lambda_ret=0.0, reference_params=init_params(small_cfg, 4))
    assert 0 < loss(obj, small_theta, small_cfg, small_data) < np.inf


def test_fd_grad_empty_coords(small_theta):
    assert fd_grad(lambda th: 0.0, small_theta, coords=[]).shape == (0,)


def test_gradient_fifty_coords_grad_diff(small_cfg, small_theta, small_data):
    obj = ObjectiveConfig(kind="grad_diff")
    g = grad(obj, small_theta, small_cfg, small_data).grad.flatten()
    coords = np.random.default_rng(7).choice(small_theta.total_dim, 50, replace=False)
    num = fd_grad(obj, small_theta, small_cfg, small_data, coords, h=1e-5)
    assert relative_error(g[coords], num).max() <= 1e-5


def test_hessian_on_constructed_quadratic_and_zero(small_theta):
    n = small_theta.total_dim
    a = np.ones(n)
    a[-1] = 5.0
    est = hessian_spectrum_fd(lambda th: th.unflatten(a * th.flatten()), small_theta, subspace_dim=4, tol=1e-10,
                              max_iter=1000)
    assert est.value == pytest.approx(5.0, rel=0.02)
    zero = hessian_spectrum_fd(lambda th: th.zeros_like(), small_theta)
    assert zero.value == 0.0
