import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from drivessl import sim
from drivessl.encoder import build_encoder, freeze, param_digest
from drivessl.errors import ConfigError, TrainingDivergedError, WorkerError
from drivessl.heads import HeadVariant
from drivessl.ppo import (PpoConfig, RolloutWorker, adaptive_kl_update, collect_rollouts,
                          compute_gae, evaluate, gaussian_kl, gaussian_logp, load_policy,
                          make_agent, ppo_surrogate, save_policy, surrogate_terms, train,
                          value_loss)

D64 = torch.float64
TINY_PPO = PpoConfig(batch_size=128, fragment_len=32, n_workers=2, minibatch=64, sgd_iters=1,
                     lr=1e-3, head_output_gain=0.01)


def t(x):
    return torch.tensor(x, dtype=D64)


# --- math -----------------------------------------------------------------------

def test_gaussian_logp_spot_values():
    assert float(gaussian_logp(t([[0.3]]), t([[0.3]]), t([[1.0]]))) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert float(gaussian_logp(t([[1.3]]), t([[0.3]]), t([[1.0]]))) == pytest.approx(-0.9189385332 - 0.5, abs=1e-9)
    with pytest.raises(ValueError):
        gaussian_logp(t([[0.0]]), t([[0.0]]), t([[0.0]]))


@pytest.mark.parametrize("mean,var", [(0.0, 1.0), (0.7, 0.05), (-2.0, 4.0)])
def test_gaussian_density_integrates_to_one(mean, var):
    sd = math.sqrt(var)
    xs = np.linspace(mean - 12 * sd, mean + 12 * sd, 20001)
    dens = np.exp(gaussian_logp(torch.from_numpy(xs)[:, None], t([mean]), t([var])).numpy())
    integral = float(np.sum((dens[1:] + dens[:-1]) * np.diff(xs)) / 2)
    assert integral == pytest.approx(1.0, abs=1e-3)


def test_gae_examples():
    adv, ret = compute_gae([-30.0], [0.0, 0.0], [1.0], 0.9, 0.95)
    assert adv.tolist() == [-30.0] and ret.tolist() == [-30.0]
    adv, ret = compute_gae([0.0, 0.0], [1.0, 1.0, 1.0], [0.0, 0.0], 0.9, 0.95)
    np.testing.assert_allclose(adv, [-0.1855, -0.1], atol=1e-12)
    np.testing.assert_allclose(ret, adv + 1.0)
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=10), rng.normal(size=11)
    d = (rng.random(10) < 0.3).astype(float)
    adv, _ = compute_gae(r, v, d, 0.9, 0.0)
    np.testing.assert_allclose(adv, r + 0.9 * v[1:] * (1 - d) - v[:-1], atol=0, rtol=0)
    with pytest.raises(ValueError):
        compute_gae([0.0], [0.0], [0.0], 0.9, 0.95)


def test_gae_matches_discounted_sum_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 30))
        r, v = rng.normal(size=n), rng.normal(size=n + 1)
        d = (rng.random(n) < 0.2).astype(float)
        gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
        adv, _ = compute_gae(r, v, d, gamma, lam)
        np.testing.assert_allclose(adv, oracles.gae_discounted(r.tolist(), v.tolist(), d.tolist(), gamma, lam),
                                   atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31), c=st.floats(-50, 50))
def test_gae_is_linear_in_rewards_and_values(seed, c):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    r, v = rng.normal(size=n), rng.normal(size=n + 1)
    d = (rng.random(n) < 0.2).astype(float)
    adv, ret = compute_gae(r, v, d, 0.9, 0.95)
    adv_c, ret_c = compute_gae(c * r, c * v, d, 0.9, 0.95)
    np.testing.assert_allclose(adv_c, c * adv, atol=1e-9)
    np.testing.assert_allclose(ret_c, c * ret, atol=1e-9)


def test_gae_rewards_only_scaling():
    # with zero values, scaling rewards alone scales advantages and returns
    r = np.array([1.0, -2.0, 0.5])
    adv, ret = compute_gae(r, np.zeros(4), np.zeros(3), 0.9, 0.95)
    adv3, ret3 = compute_gae(3 * r, np.zeros(4), np.zeros(3), 0.9, 0.95)
    np.testing.assert_allclose(adv3, 3 * adv)
    np.testing.assert_allclose(ret3, 3 * ret)


@pytest.mark.parametrize("ratio,adv,expect", [(1.0, 0.7, 0.7), (1.0, -2.0, -2.0), (1.5, 1.0, 1.1),
                                              (0.5, -1.0, -0.9)])
def test_surrogate_cases(ratio, adv, expect):
    term = surrogate_terms(t([math.log(ratio)]), t([0.0]), t([adv]), 0.1)
    assert float(term) == pytest.approx(expect, abs=1e-12)
    assert float(ppo_surrogate(t([math.log(ratio)]), t([0.0]), t([adv]), 0.1)) == pytest.approx(-expect, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(lr=st.floats(-3, 3), adv=st.floats(-10, 10), eps=st.floats(0.01, 1.0))
def test_surrogate_is_pessimistic(lr, adv, eps):
    term = float(surrogate_terms(t([lr]), t([0.0]), t([adv]), eps))
    assert term <= math.exp(lr) * adv + 1e-12


def test_surrogate_rejects_non_finite_ratio():
    with pytest.raises(TrainingDivergedError):
        ppo_surrogate(t([1000.0]), t([0.0]), t([1.0]), 0.1)


def test_value_loss_examples_and_oracle():
    ret = t([1.0, -2.0, 3.0])
    assert float(value_loss(ret, t([0.0, 0.0, 0.0]), ret, 10.0)) >= 0
    new, old = t([0.5, -1.0, 2.0]), t([0.4, -1.5, 2.5])
    assert float(value_loss(new, old, ret, 10.0)) == pytest.approx(float(((new - ret) ** 2).mean()), abs=1e-12)
    rng = np.random.default_rng(2)
    for _ in range(30):
        n = int(rng.integers(1, 9))
        a, b, c = rng.normal(size=(3, n)) * 10
        clip = float(rng.uniform(0.1, 5))
        assert float(value_loss(t(a), t(b), t(c), clip)) == pytest.approx(
            oracles.value_loss(a.tolist(), b.tolist(), c.tolist(), clip), abs=1e-6)


@pytest.mark.parametrize("kl,expect", [(0.03, 0.3), (0.1, 0.45), (0.001, 0.2), (0.06, 0.3), (0.015, 0.3)])
def test_adaptive_kl_rule(kl, expect):
    assert adaptive_kl_update(kl, 0.3, 0.03) == pytest.approx(expect, abs=1e-12)


def test_adaptive_kl_rejects_negative():
    with pytest.raises(ValueError):
        adaptive_kl_update(-0.1, 0.3, 0.03)


@settings(max_examples=100, deadline=None)
@given(m0=st.floats(-5, 5), m1=st.floats(-5, 5), v0=st.floats(1e-3, 10), v1=st.floats(1e-3, 10))
def test_gaussian_kl_non_negative(m0, m1, v0, v1):
    assert float(gaussian_kl(t([m0]), t([v0]), t([m1]), t([v1]))) >= -1e-12


def test_config_validation():
    with pytest.raises(ConfigError):
        PpoConfig(batch_size=100, fragment_len=64)
    with pytest.raises(ConfigError):
        PpoConfig(gamma=0.0)
    assert PpoConfig().batch_size == 640 and PpoConfig().lr == 2e-5


# --- rollouts and training --------------------------------------------------------------

@pytest.fixture
def tiny_agent_parts(tiny_encoder_config, small_world):
    return tiny_encoder_config, small_world


def _agent(enc_cfg, end_to_end=False, cfg=TINY_PPO, seed=0):
    enc = build_encoder(enc_cfg, seed=5)
    if not end_to_end:
        freeze(enc)
    return make_agent(enc, HeadVariant("temporal_axis_reduction", "s"), cfg, seed, end_to_end)


def test_full_batch_is_exactly_640(tiny_agent_parts):
    enc_cfg, world = tiny_agent_parts
    cfg = PpoConfig()
    agent = _agent(enc_cfg, cfg=cfg)
    workers = [RolloutWorker(w, world, 0) for w in range(4)]
    batch = collect_rollouts(agent, workers, cfg, torch.Generator().manual_seed(0))
    assert len(batch) == 640
    assert batch.worker.bincount().tolist() == [192, 192, 128, 128]
    assert batch.features.shape[0] == 640 and batch.obs is None


def test_rollouts_deterministic_and_pool_independent(tiny_agent_parts):
    from concurrent.futures import ThreadPoolExecutor
    enc_cfg, world = tiny_agent_parts
    out = []
    for pool in (None, None, ThreadPoolExecutor(2)):
        agent = _agent(enc_cfg)
        workers = [RolloutWorker(w, world, 3) for w in range(2)]
        out.append(collect_rollouts(agent, workers, TINY_PPO, torch.Generator().manual_seed(1), pool))
    for b in out[1:]:
        for key in ("actions", "logp", "rewards", "advantages", "features"):
            assert torch.equal(getattr(out[0], key), getattr(b, key))


def test_end_to_end_rollouts_keep_valid_clips(tiny_agent_parts):
    enc_cfg, world = tiny_agent_parts
    agent = _agent(enc_cfg, end_to_end=True)
    workers = [RolloutWorker(w, world, 0) for w in range(2)]
    batch = collect_rollouts(agent, workers, TINY_PPO, torch.Generator().manual_seed(0))
    assert batch.obs.shape == (128, 4, 3, 16, 16) and batch.obs.dtype == torch.uint8


def test_worker_error_names_worker(small_world):
    w = RolloutWorker(3, small_world, 0)
    with pytest.raises(WorkerError) as info:
        w.step(float("nan"))
    assert info.value.worker_id == 3


def test_vanilla_policy_gradient_limit(tiny_agent_parts):
    """Huge clip radii and no KL: the PPO gradient at the old policy is plain PG + MSE."""
    enc_cfg, world = tiny_agent_parts
    agent = _agent(enc_cfg)
    workers = [RolloutWorker(w, world, 0) for w in range(2)]
    batch = collect_rollouts(agent, workers, TINY_PPO, torch.Generator().manual_seed(0))
    agent.heads.double()
    feats = batch.features.double()
    mean, var, value = agent.heads(feats)
    logp = gaussian_logp(batch.actions.double(), mean, var)
    adv, ret = batch.advantages.double(), batch.returns.double()
    ppo = ppo_surrogate(logp, logp.detach(), adv, 1e9) + value_loss(value, value.detach(), ret, 1e9)
    vanilla = -(adv * logp).mean() + ((value - ret) ** 2).mean()
    g1 = torch.autograd.grad(ppo, list(agent.heads.parameters()), retain_graph=True)
    g2 = torch.autograd.grad(vanilla, list(agent.heads.parameters()))
    for a, b in zip(g1, g2):
        torch.testing.assert_close(a, b, atol=1e-6, rtol=0)


def test_zero_learning_rate_keeps_policy(tiny_agent_parts):
    enc_cfg, world = tiny_agent_parts
    enc = freeze(build_encoder(enc_cfg, seed=5))
    cfg = PpoConfig(**{**TINY_PPO.__dict__, "lr": 0.0, "l1": 0.0, "l2": 0.0})
    ref = make_agent(build_encoder(enc_cfg, seed=5), HeadVariant("temporal_axis_reduction", "s"), cfg, 2)
    res = train(cfg, world, enc, HeadVariant("temporal_axis_reduction", "s"), 5, seed=2)
    assert param_digest(res.agent.heads) == param_digest(ref.heads)
    assert len(res.episodes) == 5


def test_freeze_contract_and_end_to_end(tiny_agent_parts):
    enc_cfg, world = tiny_agent_parts
    enc = freeze(build_encoder(enc_cfg, seed=5))
    digest = param_digest(enc)
    res = train(TINY_PPO, world, enc, HeadVariant("conv_avg_3d", "s"), 4, seed=0)
    assert res.encoder_digest_before == res.encoder_digest_after == digest
    enc2 = build_encoder(enc_cfg, seed=5)
    res2 = train(TINY_PPO, world, enc2, HeadVariant("conv_avg_3d", "s"), 4, seed=0, end_to_end=True)
    assert res2.encoder_digest_before == digest != res2.encoder_digest_after


def test_training_log_and_determinism(tiny_agent_parts):
    enc_cfg, world = tiny_agent_parts
    runs = [train(TINY_PPO, world, freeze(build_encoder(enc_cfg, seed=5)),
                  HeadVariant("direct_projection_1d", "s"), 6, seed=1, serial=serial)
            for serial in (True, True, False)]
    assert runs[0].episodes == runs[1].episodes == runs[2].episodes
    assert [r["episode"] for r in runs[0].episodes] == list(range(6))
    for row in runs[0].iterations:
        assert set(row) >= {"iteration", "episodes", "mean_reward", "mean_steps", "mean_lane_invasions",
                            "policy_loss", "value_loss", "kl", "kl_coef"}
        assert row["kl"] >= 0
    for ep in runs[0].episodes:
        sim.EpisodeStats(ep["total_reward"], ep["steps"], ep["lane_invasions"], ep["collisions"]).check(world)


def test_policy_round_trip_and_evaluate(tmp_path, tiny_agent_parts):
    enc_cfg, world = tiny_agent_parts
    agent = _agent(enc_cfg)
    path = tmp_path / "policy.ckpt"
    save_policy(agent, path)
    loaded = load_policy(path)
    x = torch.rand((3,) + enc_cfg.input_shape)
    with torch.no_grad():
        a = agent.heads(agent.features(x))
        b = loaded.heads(loaded.features(x))
    for u, v in zip(a, b):
        assert torch.equal(u, v)
    world = sim.WorldConfig(**{**world.__dict__, "max_steps": 50})
    s1 = evaluate(loaded, world, 3, seed=4)
    s2 = evaluate(loaded, world, 3, seed=4)
    assert s1 == s2 and len(s1) == 3
