import math

import numpy as np
import pytest
import torch

from kdlab.objectives import (DIVERGENCES, ObjectiveConfig, ambiguity,
                              batch_objective, code_per_state_weight, hard_loss,
                              hybrid_loss, lambda_confidence, lambda_curriculum,
                              lambda_entropy, position_lambdas, risk_penalty,
                              soft_loss)
from kdlab.oracle import FLEXIBLE, HIGH_RISK, build_oracle, flexible_probs

LN64 = math.log(64)


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


H_FLEX = entropy(flexible_probs())  # independent entropy oracle


def test_hard_loss_reference_values():
    uniform = torch.zeros(64, dtype=torch.float64)
    assert abs(float(hard_loss(uniform, torch.tensor(5))) - LN64) < 1e-12
    sharp = torch.full((64,), -40.0, dtype=torch.float64)
    sharp[3] = 40.0
    assert float(hard_loss(sharp, torch.tensor(3))) < 1e-9
    two = torch.full((64,), -1e9, dtype=torch.float64)
    two[0] = two[1] = 0.0
    assert abs(float(hard_loss(two, torch.tensor(0))) - math.log(2)) < 1e-9


@pytest.mark.parametrize("div", DIVERGENCES)
def test_soft_loss_zero_at_match(div, rng):
    for _ in range(20):
        logits = torch.tensor(rng.normal(size=64))
        p = torch.softmax(logits, dim=-1)
        assert abs(float(soft_loss(p, logits, div))) < 1e-9


@pytest.mark.parametrize("div", DIVERGENCES)
def test_soft_loss_nonnegative(div, rng):
    for _ in range(50):
        p = torch.tensor(rng.dirichlet(np.full(64, 0.3)))
        logits = torch.tensor(rng.normal(scale=3.0, size=64))
        assert float(soft_loss(p, logits, div)) >= -1e-12


def test_soft_loss_reference_values():
    one_hot = torch.zeros(64, dtype=torch.float64)
    one_hot[7] = 1.0
    uniform_logits = torch.zeros(64, dtype=torch.float64)
    assert abs(float(soft_loss(one_hot, uniform_logits, "fkl")) - LN64) < 1e-12

    flex = torch.zeros(64, dtype=torch.float64)
    flex[:8] = torch.tensor(flexible_probs())
    got = float(soft_loss(flex, uniform_logits, "fkl"))
    assert abs(got - (LN64 - H_FLEX)) < 1e-12
    assert abs(H_FLEX - 1.8018) < 5e-4


def test_soft_loss_unknown_divergence():
    with pytest.raises(ValueError):
        soft_loss(torch.ones(64) / 64, torch.zeros(64), "hellinger")


def test_hybrid_loss_affine():
    assert hybrid_loss(0.0, 2.0, 4.0) == 4.0
    assert hybrid_loss(1.0, 2.0, 4.0) == 2.0
    assert hybrid_loss(0.5, 2.0, 4.0) == 3.0


def test_hybrid_gradient_is_affine_combination(tiny_model64):
    toks = torch.randint(0, 64, (2, 5), generator=torch.Generator().manual_seed(0))
    teacher = torch.softmax(torch.randn(5, 64, dtype=torch.float64,
                                        generator=torch.Generator().manual_seed(1)), dim=-1)

    def grads(lam):
        tiny_model64.zero_grad()
        logits = tiny_model64(toks)
        soft = soft_loss(teacher, logits, "fkl").mean()
        hard = hard_loss(logits, toks).mean()
        hybrid_loss(lam, soft, hard).backward()
        return torch.cat([p.grad.flatten().clone() for p in tiny_model64.parameters()])

    g_soft, g_hard, g_mix = grads(1.0), grads(0.0), grads(0.3)
    assert torch.allclose(g_mix, 0.3 * g_soft + 0.7 * g_hard, atol=1e-12)


def test_lambda_confidence():
    one_hot = np.zeros(64)
    one_hot[0] = 1.0
    assert lambda_confidence(one_hot) == 0.0
    assert abs(lambda_confidence(np.full(64, 1 / 64)) - 63 / 64) < 1e-12
    spec = build_oracle("dialogue")
    first_hr = next(t for t in spec.decision_positions
                    if spec.schedule[t].kind == HIGH_RISK)
    dist = spec.distribution_matrix()[first_hr]
    assert abs(lambda_confidence(dist) - 0.02) < 1e-12
    # always within [0, 1 - 1/64]
    rng = np.random.Generator(np.random.PCG64(0))
    for _ in range(50):
        p = rng.dirichlet(np.ones(64))
        assert 0.0 <= lambda_confidence(p) <= 63 / 64


def test_lambda_entropy():
    one_hot = np.zeros(64)
    one_hot[5] = 1.0
    assert lambda_entropy(one_hot) == 0.0
    assert abs(lambda_entropy(np.full(64, 1 / 64)) - 1.0) < 1e-12
    flex = np.zeros(64)
    flex[:8] = flexible_probs()
    assert abs(lambda_entropy(flex) - H_FLEX / LN64) < 1e-12
    assert abs(lambda_entropy(flex) - 0.4333) < 5e-4


def test_lambda_curriculum():
    assert lambda_curriculum(0, 100, 0.8) == 0.0
    assert lambda_curriculum(100, 100, 0.8) == 0.8
    assert lambda_curriculum(250, 100, 0.8) == 0.8
    assert abs(lambda_curriculum(50, 100, 0.8) - 0.4) < 1e-12
    with pytest.raises(ValueError):
        lambda_curriculum(5, 0, 0.8)


def test_risk_penalty_equal_logits():
    row = torch.zeros(64, dtype=torch.float64)
    pen = risk_penalty(row, row, target=9, alpha=0.1)
    assert abs(float(pen) - (0.1 / 4) * LN64 ** 2) < 1e-12
    assert abs(float(pen) - 0.4324) < 1e-4


def test_risk_penalty_stability():
    at_s = torch.full((64,), 50.0, dtype=torch.float64)
    after = torch.full((64,), -50.0, dtype=torch.float64)
    assert torch.isfinite(risk_penalty(at_s, after, 0, 0.1))
    assert torch.isfinite(risk_penalty(after, at_s, 0, 0.1))


def test_risk_penalty_gradient(tiny_model64):
    from helpers import relative_grad_errors
    toks = torch.randint(0, 64, (1, 5), generator=torch.Generator().manual_seed(2))

    def loss_fn():
        logits = tiny_model64(toks)[0]
        return risk_penalty(logits[2], logits[3], int(toks[0, 2]), alpha=0.1)

    errs = relative_grad_errors(tiny_model64, loss_fn)
    assert errs.max() < 1e-4


def test_code_per_state_weight():
    spec = build_oracle("code")
    hr = [t for t in spec.decision_positions if spec.schedule[t].kind == HIGH_RISK]
    flex = [t for t in spec.decision_positions if spec.schedule[t].kind == FLEXIBLE]
    for t in hr:
        assert code_per_state_weight(spec, t, 0.1) == 0.0
    det = next(t for t in range(spec.template_length) if t not in spec.decision_positions)
    assert code_per_state_weight(spec, det, 0.1) == 0.0
    got = code_per_state_weight(spec, flex[0], 0.1)
    assert abs(got - 0.1 * (H_FLEX / math.log(8))) < 1e-12
    assert abs(got - 0.0867) < 5e-4
    with pytest.raises(ValueError):
        code_per_state_weight(build_oracle("math"), 2, 0.1)


def test_ambiguity_matches_confidence_complement():
    from kdlab.analysis import confidence
    spec = build_oracle("math")
    for t in spec.decision_positions:
        assert abs(ambiguity(spec, t) - (1.0 - confidence(spec, t))) < 1e-12


def test_hard_loss_unbiased_for_teacher_expectation(rng):
    # sampled NLL estimates the teacher-expected cross-entropy
    teacher = np.zeros(64)
    teacher[:4] = (0.95, 0.02, 0.02, 0.01)
    logits = torch.tensor(rng.normal(size=64))
    logq = torch.log_softmax(logits, dim=-1).numpy()
    expected = float(-(teacher[:4] * logq[:4]).sum())
    n = 100_000
    draws = rng.choice(64, size=n, p=teacher)
    sampled = float(-logq[draws].mean())
    sd = float((-logq[rng.choice(64, size=2000, p=teacher)]).std())
    assert abs(sampled - expected) < 5 * sd / math.sqrt(n) + 1e-6


def test_objective_config_validation():
    with pytest.raises(ValueError):
        ObjectiveConfig(mode="zen")
    with pytest.raises(ValueError):
        ObjectiveConfig(lam=1.5)
    with pytest.raises(ValueError):
        ObjectiveConfig(alpha=0.0)
    with pytest.raises(ValueError):
        ObjectiveConfig(divergence="alpha-beta")


def test_position_lambdas_rules():
    spec = build_oracle("code")
    T = spec.template_length
    assert (position_lambdas(spec, ObjectiveConfig(mode="hard")) == 0).all()
    assert (position_lambdas(spec, ObjectiveConfig(mode="soft")) == 1).all()
    static = position_lambdas(spec, ObjectiveConfig(mode="hybrid_static", lam=0.9))
    assert (static == 0.9).all()
    conf = position_lambdas(spec, ObjectiveConfig(mode="hybrid_confidence"))
    det = next(t for t in range(T) if t not in spec.decision_positions)
    assert conf[det] == 0.0
    cur0 = position_lambdas(spec, ObjectiveConfig(mode="hybrid_curriculum", lam=0.8),
                            step=0, total_steps=100)
    cur_end = position_lambdas(spec, ObjectiveConfig(mode="hybrid_curriculum", lam=0.8),
                               step=100, total_steps=100)
    assert (cur0 == 0).all() and (cur_end == 0.8).all()
    per_state = position_lambdas(spec, ObjectiveConfig(mode="code_per_state", lam=0.1))
    hr = [t for t in spec.decision_positions if spec.schedule[t].kind == HIGH_RISK]
    assert all(per_state[t] == 0 for t in hr)


def test_batch_objective_matches_manual():
    spec = build_oracle("dialogue")
    T = spec.template_length
    model_dtype = torch.float64
    B = 3
    g = torch.Generator().manual_seed(4)
    logits = torch.randn(B, T + 1, 64, dtype=model_dtype, generator=g)
    tokens = torch.randint(0, 64, (B, T), generator=g)
    teacher = torch.tensor(spec.distribution_matrix(), dtype=model_dtype)
    cfg = ObjectiveConfig(mode="hybrid_static", lam=0.3)
    lambdas = torch.tensor(position_lambdas(spec, cfg), dtype=model_dtype)
    got = float(batch_objective(logits, tokens, teacher, lambdas, cfg))
    manual = 0.0
    for b in range(B):
        for t in range(T):
            s = float(soft_loss(teacher[t], logits[b, t], "fkl"))
            h = float(hard_loss(logits[b, t], tokens[b, t]))
            manual += 0.3 * s + 0.7 * h
    manual /= B * T
    assert abs(got - manual) < 1e-9


def test_batch_objective_risk_guided_uses_next_row():
    spec = build_oracle("dialogue")
    T = spec.template_length
    g = torch.Generator().manual_seed(5)
    logits = torch.randn(2, T + 1, 64, dtype=torch.float64, generator=g)
    tokens = torch.randint(0, 64, (2, T), generator=g)
    teacher = torch.tensor(spec.distribution_matrix(), dtype=torch.float64)
    cfg = ObjectiveConfig(mode="risk_guided", lam=0.4, alpha=0.1)
    lambdas = torch.tensor(position_lambdas(spec, cfg), dtype=torch.float64)
    got = float(batch_objective(logits, tokens, teacher, lambdas, cfg))
    manual = 0.0
    for b in range(2):
        for t in range(T):
            s = float(soft_loss(teacher[t], logits[b, t], "fkl"))
            h = float(hard_loss(logits[b, t], tokens[b, t]))
            h += float(risk_penalty(logits[b, t], logits[b, t + 1], int(tokens[b, t]), 0.1))
            manual += 0.4 * s + 0.6 * h
    manual /= 2 * T
    assert abs(got - manual) < 1e-9
