from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from dmoblend.denoiser import DenoiserConfig, build_model
from dmoblend.diffusion import (
    NoiseSchedule,
    TrainConfig,
    build_cosine_schedule,
    cosine_alpha_bar,
    posterior_mean,
    posterior_step,
    posterior_variance,
    q_sample,
    train,
    warmup_lr,
    write_loss_csv,
)


def test_schedule_endpoints_and_monotone():
    s = build_cosine_schedule(200)
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[-1] < 1e-3
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.beta.max() <= 0.999


def test_schedule_matches_closed_form():
    T, offset = 50, 0.008
    s = build_cosine_schedule(T, offset)
    for t in range(T + 1):
        f = math.cos((t / T + offset) / (1 + offset) * math.pi / 2) ** 2
        f0 = math.cos(offset / (1 + offset) * math.pi / 2) ** 2
        if t < T:  # last step is clipped
            assert s.alpha_bar[t] == pytest.approx(f / f0, rel=1e-12)
    assert cosine_alpha_bar(T, offset)[T] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("T,offset", [(1, 0.008), (0, 0.008), (10, 0.0), (10, -1.0)])
def test_schedule_rejects_bad_parameters(T, offset):
    with pytest.raises(ValueError):
        build_cosine_schedule(T, offset)


def test_q_sample_endpoints():
    beta = np.zeros(3)
    beta[2] = 1.0
    s = NoiseSchedule(T=2, beta=beta)
    x0, eps = np.array([0.3, -0.7]), np.array([1.5, 2.5])
    np.testing.assert_array_equal(q_sample(s, x0, 1, eps), x0)
    np.testing.assert_array_equal(q_sample(s, x0, 2, eps), eps)


def test_q_sample_per_row_steps():
    s = build_cosine_schedule(10)
    x0, eps = np.ones((2, 3)), np.zeros((2, 3))
    out = q_sample(s, x0, np.array([1, 10]), eps)
    np.testing.assert_allclose(out[0], math.sqrt(s.alpha_bar[1]))
    np.testing.assert_allclose(out[1], math.sqrt(s.alpha_bar[10]))


@pytest.mark.parametrize("t", [1, 0])
def test_q_sample_rejects_out_of_range(t):
    s = build_cosine_schedule(10)
    if t == 1:
        with pytest.raises(ValueError):
            q_sample(s, np.zeros(2), 1, np.zeros(3))
    else:
        with pytest.raises(ValueError):
            q_sample(s, np.zeros(2), 0, np.zeros(2))


def test_posterior_recovers_mean_algebraically():
    s = build_cosine_schedule(100)
    rng = np.random.default_rng(0)
    for t in (2, 37, 100):
        x0, eps = rng.standard_normal(1), rng.standard_normal(1)
        xt = q_sample(s, x0, t, eps)
        a, ab, abp, b = s.alpha[t], s.alpha_bar[t], s.alpha_bar[t - 1], s.beta[t]
        # the posterior mean of q(x_{t-1} | x_t, x0)
        expected = math.sqrt(abp) * b / (1 - ab) * x0 + math.sqrt(a) * (1 - abp) / (1 - ab) * xt
        got = posterior_step(s, xt, eps, t, np.zeros(1))
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)


def test_zero_beta_step_is_identity():
    beta = np.zeros(4)
    beta[3] = 0.5
    s = NoiseSchedule(T=3, beta=beta)
    x = np.array([0.25, -1.0])
    assert posterior_variance(s, 2) == 0.0
    np.testing.assert_array_equal(posterior_step(s, x, np.ones(2), 2, np.ones(2)), x)


def test_last_step_returns_mean():
    s = build_cosine_schedule(20)
    x, e = np.array([0.3]), np.array([0.1])
    np.testing.assert_array_equal(posterior_step(s, x, e, 1, np.array([5.0])), posterior_mean(s, x, e, 1))
    with pytest.raises(ValueError):
        posterior_step(s, x, e, 21, np.zeros(1))


def test_posterior_variance_monte_carlo():
    s = build_cosine_schedule(100)
    t, n = 50, 10_000
    z = np.random.default_rng(1).standard_normal(n)
    out = posterior_step(s, np.zeros(n), np.zeros(n), t, z)
    var = posterior_variance(s, t)
    se = var * math.sqrt(2.0 / (n - 1))
    assert abs(out.var(ddof=1) - var) < 3 * se


def test_warmup_ramp():
    cfg = TrainConfig(learning_rate=1e-3, warmup_steps=20)
    assert warmup_lr(cfg, 1) == pytest.approx(5e-5)
    assert warmup_lr(cfg, 20) == pytest.approx(1e-3)
    assert warmup_lr(cfg, 500) == pytest.approx(1e-3)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)


def tiny_model(T=10, n_pt=3, channels=4, seed=0):
    return build_model(DenoiserConfig(n_pt=n_pt, steps=T, channels=channels), seed=seed)


def test_initial_loss_near_one():
    # zero output projection, so the loss is E|eps|^2 per element
    model = tiny_model()
    data = np.zeros((256, 3, 8))
    _, losses = train(model, data, build_cosine_schedule(10), TrainConfig(batch_size=256, epochs=1, learning_rate=0.0))
    assert losses[0] == pytest.approx(1.0, abs=0.05)


def test_zero_learning_rate_leaves_parameters():
    model = tiny_model()
    before = {k: v.clone() for k, v in model.state_dict().items() if "running" not in k and "num_batches" not in k}
    train(model, np.zeros((16, 3, 8)), build_cosine_schedule(10), TrainConfig(batch_size=16, epochs=1, learning_rate=0.0))
    for k, v in before.items():
        assert torch.equal(model.state_dict()[k], v), k


def test_constant_dataset_is_learnable():
    model = tiny_model(channels=8)
    data = np.zeros((64, 3, 8))
    _, losses = train(model, data, build_cosine_schedule(10),
                      TrainConfig(batch_size=32, epochs=50, learning_rate=1e-2, warmup_steps=5))
    assert losses[-1] < 1.0
    assert losses[-1] < losses[0]


def test_train_is_deterministic():
    data = np.random.default_rng(0).uniform(0, 1, (40, 3, 8))
    cfg = TrainConfig(batch_size=16, epochs=3, seed=4)
    a = train(tiny_model(), data, build_cosine_schedule(10), cfg)[1]
    b = train(tiny_model(), data, build_cosine_schedule(10), cfg)[1]
    assert a == b


def test_train_rejects_bad_data():
    sched = build_cosine_schedule(10)
    with pytest.raises(ValueError):
        train(tiny_model(), np.zeros((0, 3, 8)), sched, TrainConfig())
    with pytest.raises(ValueError):
        train(tiny_model(), np.zeros((4, 5, 8)), sched, TrainConfig())
    with pytest.raises(ValueError):
        train(tiny_model(), np.zeros((4, 3, 8)), build_cosine_schedule(12), TrainConfig())


def test_non_finite_loss_aborts():
    data = np.full((8, 3, 8), np.nan)
    with pytest.raises(FloatingPointError):
        train(tiny_model(), data, build_cosine_schedule(10), TrainConfig(batch_size=8, epochs=1))


def test_loss_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_csv([0.5, 0.25], path)
    assert path.read_text().splitlines() == ["epoch,mean_loss", "1,0.5", "2,0.25"]
