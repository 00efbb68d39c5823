import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from softctl.ppo import (
    CURVE_COLUMNS,
    NonFiniteRatioError,
    PpoConfig,
    ReturnScaler,
    clipped_surrogate,
    collect_rollout,
    evaluate_policy,
    gae,
    init_policy,
    load_policy,
    make_optimizer,
    normalize_advantages,
    ppo_loss,
    ppo_update,
    save_policy,
    stagger,
    train_policy,
)
from softctl.rlenv import EnvironmentFault, VecEnv


class PointEnv:
    """Move a point on a line onto a goal; reward exp(-|goal - x|)."""

    obs_dim, act_dim = 2, 1

    def __init__(self, seed=0, length=20, span=3.0):
        self.rng = np.random.default_rng(seed)
        self.length, self.span = length, span

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.x, self.goal = self.rng.uniform(-self.span, self.span, 2)
        self.t = 0
        return self._obs()

    def _obs(self):
        return np.array([(self.goal - self.x) / self.span, self.t / self.length])

    def step(self, a):
        self.x += float(np.clip(a[0], -3.0, 3.0))
        self.t += 1
        err = abs(self.goal - self.x)
        return self._obs(), math.exp(-err), self.t >= self.length, {"error": err}


class FaultyEnv(PointEnv):
    def step(self, a):
        raise EnvironmentFault("boom")


def brute_force_gae(r, v, done, boot, gamma, lam):
    T = len(r)
    nxt = np.append(v[1:], boot)
    delta = r + gamma * nxt * (1 - done) - v
    adv = np.zeros(T)
    for t in range(T):
        coef = 1.0
        for k in range(t, T):
            adv[t] += coef * delta[k]
            if done[k]:
                break
            coef *= gamma * lam
    return adv


def test_gae_single_step():
    adv, ret = gae([0.7], [0.2], [0.0], 0.5, gamma=1.0, lam=0.3)
    assert adv[0] == pytest.approx(0.7 + 0.5 - 0.2, abs=1e-15)
    assert ret[0] == pytest.approx(0.7 + 0.5, abs=1e-15)


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(0)
    r, v, boot = rng.normal(size=10), rng.normal(size=10), 0.3
    done = (rng.random(10) < 0.2).astype(float)
    adv, _ = gae(r, v, done, boot, 0.9, 0.0)
    nxt = np.append(v[1:], boot)
    np.testing.assert_array_equal(adv, r + 0.9 * nxt * (1 - done) - v)


def test_gae_matches_brute_force_1000_instances():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        T = int(rng.integers(1, 51))
        r, v = rng.normal(size=T), rng.normal(size=T)
        done = (rng.random(T) < 0.1).astype(float)
        boot = rng.normal()
        gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
        adv, ret = gae(r, v, done, boot, gamma, lam)
        np.testing.assert_allclose(adv, brute_force_gae(r, v, done, boot, gamma, lam), rtol=0, atol=1e-10)
        np.testing.assert_allclose(ret, adv + v, rtol=0, atol=1e-15)


def test_gae_batched_columns_independent():
    rng = np.random.default_rng(2)
    r, v = rng.normal(size=(12, 4)), rng.normal(size=(12, 4))
    done = (rng.random((12, 4)) < 0.2).astype(float)
    boot = rng.normal(size=4)
    adv, _ = gae(r, v, done, boot, 0.99, 0.95)
    for j in range(4):
        np.testing.assert_allclose(adv[:, j], gae(r[:, j], v[:, j], done[:, j], boot[j], 0.99, 0.95)[0],
                                   atol=1e-14)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200))
def test_advantage_normalization(values):
    a = np.array(values)
    z = normalize_advantages(a)
    assert abs(z.mean()) < 1e-6
    if a.std() > 1e-6:
        assert abs(z.std() - 1.0) < 1e-6


def test_clipped_surrogate_by_hand():
    s = clipped_surrogate(np.array([0.5, 1.0, 1.5]), np.array([1.0, -1.0, 1.0]), 0.2)
    np.testing.assert_allclose(s, [0.5, -1.0, 1.2], atol=1e-15)


def _batch(policy, n=32, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(n, policy.obs_dim))
    mu, v = policy.forward(obs)
    u = mu + np.exp(policy.log_std) * rng.standard_normal(mu.shape)
    logp = policy.log_prob(mu, u)
    adv = normalize_advantages(rng.normal(size=n))
    returns = rng.normal(size=n)
    return obs, u, logp, adv, returns


def test_ratio_identity_at_old_params():
    policy = init_policy(5, 3, (8, 8), rng=0)
    cfg = PpoConfig(ent_coef=0.0, vf_coef=0.0)
    obs, u, logp, adv, ret = _batch(policy)
    _, diag, _ = ppo_loss(policy, obs, u, logp, adv, ret, cfg, need_grad=False)
    assert diag["policy_loss"] == pytest.approx(-adv.mean(), abs=1e-12)
    assert diag["clip_frac"] == 0.0
    assert abs(diag["approx_kl"]) < 1e-14


def test_zero_advantage_zero_policy_loss():
    policy = init_policy(5, 3, (8, 8), rng=0)
    obs, u, logp, _, ret = _batch(policy)
    policy.log_std += 0.3  # move away from the collection policy
    _, diag, _ = ppo_loss(policy, obs, u, logp, np.zeros(len(u)), ret, PpoConfig(), need_grad=False)
    assert diag["policy_loss"] == 0.0


def _flat_fd(policy, f, idx, h=1e-6):
    params = policy.params()
    sizes = np.cumsum([0] + [p.size for p in params])
    out = []
    for i in idx:
        k = np.searchsorted(sizes, i, side="right") - 1
        flat = params[k].reshape(-1)
        j = i - sizes[k]
        old = flat[j]
        flat[j] = old + h
        fp = f()
        flat[j] = old - h
        fm = f()
        flat[j] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_gradient_finite_differences(seed):
    policy = init_policy(4, 3, (6, 6), rng=seed)
    cfg = PpoConfig(ent_coef=0.05, vf_coef=0.7, clip_range=0.2)
    obs, u, logp, adv, ret = _batch(policy, seed=seed)
    rng = np.random.default_rng(seed)
    for p in policy.params():
        p += 0.05 * rng.normal(size=p.shape)  # some ratios land outside the clip band
    _, diag, grads = ppo_loss(policy, obs, u, logp, adv, ret, cfg)
    flat = np.concatenate([g.ravel() for g in grads])
    loss = lambda: ppo_loss(policy, obs, u, logp, adv, ret, cfg, need_grad=False)[0]
    idx = rng.choice(flat.size, size=80, replace=False)
    np.testing.assert_allclose(flat[idx], _flat_fd(policy, loss, idx), rtol=1e-5, atol=1e-8)


def test_gradient_at_old_params_is_policy_gradient():
    policy = init_policy(4, 3, (6, 6), rng=3)
    cfg = PpoConfig(ent_coef=0.0, vf_coef=0.0)
    obs, u, logp, adv, ret = _batch(policy, seed=3)
    _, _, grads = ppo_loss(policy, obs, u, logp, adv, ret, cfg)

    def pg_objective():
        mu, _ = policy.forward(obs)
        return -np.mean(adv * policy.log_prob(mu, u))

    flat = np.concatenate([g.ravel() for g in grads])
    idx = np.arange(flat.size)
    np.testing.assert_allclose(flat, _flat_fd(policy, pg_objective, idx), rtol=1e-5, atol=1e-9)


def test_non_finite_ratio_aborts():
    policy = init_policy(4, 3, (6, 6), rng=0)
    obs, u, logp, adv, ret = _batch(policy)
    logp[0] = -np.inf
    with pytest.raises(NonFiniteRatioError) as exc:
        ppo_loss(policy, obs, u, logp, adv, ret, PpoConfig())
    assert exc.value.diagnostics["bad_ratios"] == 1


def test_squashed_density_integrates_to_one():
    policy = init_policy(3, 1, (4,), rng=0, action_bound=3.0, log_std_init=-0.2)
    mu = np.array([[0.4]])

    def density(a):
        u = np.arctanh(a / 3.0)
        return math.exp(policy.log_prob(mu, np.array([[u]]))[0])

    total, _ = quad(density, -3.0, 3.0, limit=200)
    assert total == pytest.approx(1.0, abs=1e-7)


def test_actions_within_bound():
    policy = init_policy(3, 3, (8,), rng=0, log_std_init=2.0)
    a, _, _, _ = policy.act(np.zeros((1000, 3)), np.random.default_rng(0))
    assert np.all(np.abs(a) <= 3.0)


def _vec(n, cls=PointEnv):
    return VecEnv([cls(seed=i) for i in range(n)])


def test_rollout_size_and_logprob_recomputation():
    policy = init_policy(2, 1, (64, 64), rng=0)
    vec = _vec(64)
    obs = vec.reset(list(range(64)))
    batch = collect_rollout(vec, policy, 64, obs, np.random.default_rng(0))
    assert batch.size == 4096
    assert batch.obs.shape == (64, 64, 2)
    mu, v = policy.forward(batch.obs.reshape(-1, 2))
    np.testing.assert_allclose(policy.log_prob(mu, batch.u.reshape(-1, 1)), batch.logp.ravel(), rtol=0,
                               atol=1e-10)
    np.testing.assert_array_equal(batch.actions, policy.squash(batch.u))


def test_deterministic_rollouts_repeat():
    policy = init_policy(2, 1, (16,), rng=0)
    out = []
    for _ in range(2):
        vec = _vec(4)
        b = collect_rollout(vec, policy, 30, vec.reset([0, 1, 2, 3]), deterministic=True)
        out.append(b)
    for f in ("obs", "u", "logp", "rewards", "values", "dones", "bootstrap"):
        np.testing.assert_array_equal(getattr(out[0], f), getattr(out[1], f))


def test_env_fault_discards_batch():
    policy = init_policy(2, 1, (4,), rng=0)
    vec = _vec(2, FaultyEnv)
    with pytest.raises(EnvironmentFault):
        collect_rollout(vec, policy, 4, vec.reset(), np.random.default_rng(0))


def test_log_std_floor_respected():
    policy = init_policy(2, 1, (8,), rng=0, log_std_init=-4.9)
    cfg = PpoConfig(n_envs=4, steps_per_env=32, minibatch=32, epochs=5, lr=0.5, ent_coef=-10.0)
    vec = _vec(4)
    batch = collect_rollout(vec, policy, 32, vec.reset(), np.random.default_rng(0))
    ppo_update(policy, make_optimizer(policy, cfg), batch, cfg, np.random.default_rng(0))
    assert policy.log_std[0] == pytest.approx(-5.0)


def test_toy_env_reaches_high_reward(tmp_path):
    cfg = PpoConfig(n_envs=8, steps_per_env=128, total_steps=50_000, minibatch=256, eval_every=5, seed=0,
                    normalize_rewards=False)  # rewards are already O(1) per step
    res = train_policy(lambda i: PointEnv(seed=i), cfg, eval_env=PointEnv(seed=1000),
                       curve_path=tmp_path / "curve.csv")
    assert res.curve[-1]["steps"] <= 50_000
    scores = [evaluate_policy(PointEnv(seed=s), res.policy, seed=s)["mean_reward"] for s in range(20)]
    assert np.mean(scores) > 0.95
    # entropy never grows above its starting value for this task
    ent = [r["entropy"] for r in res.curve]
    assert ent[-1] < ent[0]


def test_curve_and_checkpoint(tmp_path):
    cfg = PpoConfig(n_envs=4, steps_per_env=32, total_steps=4 * 32 * 3, minibatch=64, eval_every=2)
    ck = tmp_path / "policy.bin"
    res = train_policy(lambda i: PointEnv(seed=i), cfg, eval_env=PointEnv(seed=9),
                       curve_path=tmp_path / "curve.csv", checkpoint_path=ck)
    with open(tmp_path / "curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and list(rows[0]) == CURVE_COLUMNS
    assert [int(r["update"]) for r in rows] == [1, 2, 3]
    best = load_policy(ck)
    for a, b in zip(best.params(), res.policy.params()):
        np.testing.assert_array_equal(a, b)
    final, state = load_policy(str(ck) + ".resume", with_optimizer=True)
    for a, b in zip(final.params(), res.final_policy.params()):
        np.testing.assert_array_equal(a, b)
    assert state["t"] == res.optimizer.t
    for a, b in zip(state["m"] + state["v"], res.optimizer.m + res.optimizer.v):
        np.testing.assert_array_equal(a, b)


def test_resume_continues_identically(tmp_path):
    policy = init_policy(2, 1, (8,), rng=0)
    cfg = PpoConfig(n_envs=2, steps_per_env=16, minibatch=16, epochs=2)
    vec = _vec(2)
    batch = collect_rollout(vec, policy, 16, vec.reset([0, 1]), np.random.default_rng(0))
    opt = make_optimizer(policy, cfg)
    ppo_update(policy, opt, batch, cfg, np.random.default_rng(1))
    save_policy(policy, tmp_path / "p.bin", opt=opt)
    loaded, state = load_policy(tmp_path / "p.bin", with_optimizer=True)
    opt2 = make_optimizer(loaded, cfg)
    opt2.load_state(state)
    ppo_update(policy, opt, batch, cfg, np.random.default_rng(2))
    ppo_update(loaded, opt2, batch, cfg, np.random.default_rng(2))
    for a, b in zip(policy.params(), loaded.params()):
        np.testing.assert_array_equal(a, b)


def test_kl_abort_keeps_partial_artifacts(tmp_path):
    cfg = PpoConfig(n_envs=2, steps_per_env=32, total_steps=2 * 32 * 20, minibatch=32, kl_abort=-1.0,
                    kl_patience=2)
    res = train_policy(lambda i: PointEnv(seed=i), cfg, curve_path=tmp_path / "c.csv",
                       checkpoint_path=tmp_path / "p.bin")
    assert res.aborted and len(res.curve) == 2
    assert (tmp_path / "c.csv").exists() and (tmp_path / "p.bin").exists()


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(gamma=0.0)
    with pytest.raises(ValueError):
        PpoConfig(gae_lambda=1.5)
    with pytest.raises(ValueError):
        PpoConfig(clip_range=0.0)
    assert PpoConfig().batch_size == 4096


def test_return_scaler_matches_direct_variance():
    rng = np.random.default_rng(0)
    scaler = ReturnScaler(3, gamma=0.9)
    scaler.count = 0.0  # exact statistics for the comparison
    scaler.mean, scaler.var = 0.0, 0.0
    blocks, all_rets = [], []
    ret = np.zeros(3)
    for _ in range(4):
        r = rng.normal(size=(5, 3))
        d = (rng.random((5, 3)) < 0.2).astype(float)
        for t in range(5):
            ret = ret * 0.9 + r[t]
            all_rets.append(ret.copy())
            ret = ret * (1 - d[t])
        scaled = scaler.scale(r, d)
        np.testing.assert_allclose(scaled, r / math.sqrt(scaler.var + scaler.eps))
    all_rets = np.array(all_rets)
    assert scaler.var == pytest.approx(all_rets.var(), rel=1e-12)
    assert scaler.mean == pytest.approx(all_rets.mean(), rel=1e-12)


def test_stagger_desynchronizes_envs():
    n, length = 8, 20
    vec = VecEnv([PointEnv(seed=i, length=length) for i in range(n)])
    obs = vec.reset(list(range(n)))
    cfg = PpoConfig(n_envs=n, steps_per_env=16, minibatch=16, stagger_steps=length)
    policy = init_policy(2, 1, (4,), rng=0)
    obs = stagger(vec, policy, obs, cfg, np.random.default_rng(0))
    assert [env.t for env in vec.envs] == [i * length // n for i in range(n)]
    np.testing.assert_array_equal(obs[:, 1], [env.t / length for env in vec.envs])


class ShapedPointEnv(PointEnv):
    def step(self, a):
        o, r, done, info = super().step(a)
        info["shaping"] = -info["error"]
        return o, r, done, info


def test_rollout_adds_shaping_but_reports_task_reward():
    policy = init_policy(2, 1, (4,), rng=0)
    plain = VecEnv([PointEnv(seed=0, length=5)])
    shaped = VecEnv([ShapedPointEnv(seed=0, length=5)])
    b1 = collect_rollout(plain, policy, 10, plain.reset([0]), np.random.default_rng(0))
    b2 = collect_rollout(shaped, policy, 10, shaped.reset([0]), np.random.default_rng(0))
    np.testing.assert_array_equal(b1.obs, b2.obs)
    assert np.all(b2.rewards < b1.rewards)
    assert b1.episode_rewards == b2.episode_rewards
