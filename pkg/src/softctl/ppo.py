"""PPO with a clipped surrogate, GAE and a tanh-squashed Gaussian policy (numpy)."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .mlp import Adam, MlpModel, init_mlp, mlp_from_arrays, mlp_header, read_arrays, write_arrays, write_sidecar
from .rlenv import EnvironmentFault, VecEnv

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
CURVE_COLUMNS = ["update", "steps", "mean_reward", "clip_frac", "approx_kl", "entropy",
                 "policy_loss", "value_loss", "eval_error"]


class PolicyDivergenceError(RuntimeError):
    pass


class NonFiniteRatioError(FloatingPointError):
    def __init__(self, msg, diagnostics):
        super().__init__(msg)
        self.diagnostics = diagnostics


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    ent_coef: float = 0.01
    clip_range: float = 0.2
    n_envs: int = 64
    steps_per_env: int = 64
    total_steps: int = 2_000_000
    epochs: int = 10
    minibatch: int = 256
    lr: float = 3e-4
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    adam_eps: float = 1e-5
    hidden: tuple = (64, 64)
    log_std_init: float = -0.5
    log_std_floor: float = -5.0
    action_bound: float = 3.0
    eval_every: int = 10
    kl_abort: float = 1.0
    kl_patience: int = 3
    stagger_steps: int = 0  # env i is first advanced i * stagger_steps // n_envs steps
    normalize_rewards: bool = True  # divide rewards by the running std of the discounted return
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0 or self.clip_range <= 0:
            raise ValueError("need 0 < gamma <= 1, 0 <= gae_lambda <= 1 and clip_range > 0")
        if self.batch_size % self.minibatch:
            raise ValueError("batch size must be a multiple of the minibatch size")

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.steps_per_env


def gae(rewards, values, dones, bootstrap, gamma: float, lam: float):
    """Generalized advantage estimates along axis 0; ``bootstrap`` is V of the state after the last step."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    notdone = 1.0 - np.asarray(dones, dtype=float)
    next_values = np.concatenate([values[1:], np.asarray(bootstrap, dtype=float)[None]], axis=0)
    delta = rewards + gamma * next_values * notdone - values
    adv = np.zeros_like(delta)
    acc = np.zeros_like(delta[0])
    for t in range(len(delta) - 1, -1, -1):
        acc = delta[t] + gamma * lam * notdone[t] * acc
        adv[t] = acc
    return adv, adv + values


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=float)
    z = (adv - adv.mean()) / max(adv.std(), 1e-8)
    return z - z.mean()  # second pass removes rounding residue amplified by a tiny std


def clipped_surrogate(ratio, adv, clip_range: float) -> np.ndarray:
    """Per-sample min(r A, clip(r, 1 - eps, 1 + eps) A)."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range) * adv)


def log1m_tanh2(u):
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


@dataclass
class PolicyNet:
    trunk: MlpModel
    mean_head: MlpModel
    value_head: MlpModel
    log_std: np.ndarray
    action_bound: float = 3.0
    log_std_floor: float = -5.0

    @property
    def obs_dim(self) -> int:
        return self.trunk.n_in

    @property
    def act_dim(self) -> int:
        return self.mean_head.n_out

    def params(self) -> list[np.ndarray]:
        return self.trunk.params() + self.mean_head.params() + self.value_head.params() + [self.log_std]

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.trunk.copy(), self.mean_head.copy(), self.value_head.copy(), self.log_std.copy(),
                         self.action_bound, self.log_std_floor)

    def forward(self, obs):
        """Pre-squash mean (B, A) and value (B,) for a batch of observations."""
        h = self.trunk.forward(np.atleast_2d(obs))
        return self.mean_head.forward(h), self.value_head.forward(h)[:, 0]

    def squash(self, u):
        return self.action_bound * np.tanh(u)

    def log_prob(self, mu, u):
        """Log density of the squashed action given pre-squash sample ``u``."""
        std = np.exp(self.log_std)
        z = (u - mu) / std
        gauss = -0.5 * z * z - self.log_std - 0.5 * LOG_2PI
        corr = math.log(self.action_bound) + log1m_tanh2(u)
        return (gauss - corr).sum(axis=-1)

    def entropy(self) -> float:
        """Entropy of the pre-squash Gaussian."""
        return float(np.sum(self.log_std + 0.5 * (LOG_2PI + 1.0)))

    def act(self, obs, rng=None, deterministic: bool = False):
        """Returns (action, pre-squash sample, log-prob, value)."""
        mu, v = self.forward(obs)
        if deterministic:
            u = mu
        else:
            u = mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)
        return self.squash(u), u, self.log_prob(mu, u), v

    def clamp_log_std(self):
        np.maximum(self.log_std, self.log_std_floor, out=self.log_std)


def init_policy(obs_dim: int, act_dim: int = 3, hidden=(64, 64), rng=None, action_bound: float = 3.0,
                log_std_init: float = -0.5, log_std_floor: float = -5.0) -> PolicyNet:
    rng = np.random.default_rng(rng)
    trunk = init_mlp([obs_dim, *hidden], "tanh", rng, output_activation="tanh")
    mean_head = init_mlp([hidden[-1], act_dim], "identity", rng, output_scale=0.01)
    value_head = init_mlp([hidden[-1], 1], "identity", rng)
    return PolicyNet(trunk, mean_head, value_head, np.full(act_dim, float(log_std_init)), action_bound,
                     log_std_floor)


@dataclass
class RolloutBatch:
    obs: np.ndarray  # (T, N, D)
    u: np.ndarray  # (T, N, A) pre-squash samples
    actions: np.ndarray  # (T, N, A)
    logp: np.ndarray  # (T, N)
    rewards: np.ndarray  # (T, N)
    values: np.ndarray  # (T, N)
    dones: np.ndarray  # (T, N)
    bootstrap: np.ndarray  # (N,)
    last_obs: np.ndarray  # (N, D)
    episode_rewards: list = field(default_factory=list)  # mean per-step reward of finished episodes

    @property
    def size(self) -> int:
        return self.rewards.size


def collect_rollout(vec: VecEnv, policy: PolicyNet, steps_per_env: int, obs, rng=None,
                    deterministic: bool = False, running=None) -> RolloutBatch:
    """Run ``steps_per_env`` vectorized steps from ``obs`` with a frozen policy.

    Stored rewards include any ``info["shaping"]`` term; episode statistics use
    the unshaped task reward.

    ``running`` (per-env reward sums and lengths) is updated in place so episode
    statistics span rollout boundaries.
    """
    n = len(vec)
    obs = np.asarray(obs, dtype=float)
    T, A = steps_per_env, policy.act_dim
    buf = dict(obs=np.empty((T, n, vec.obs_dim)), u=np.empty((T, n, A)), actions=np.empty((T, n, A)),
               logp=np.empty((T, n)), rewards=np.empty((T, n)), values=np.empty((T, n)),
               dones=np.empty((T, n)))
    if running is None:
        running = {"sum": np.zeros(n), "len": np.zeros(n, dtype=int)}
    finished = []
    for t in range(T):
        a, u, lp, v = policy.act(obs, rng, deterministic)
        nxt, r, done, infos = vec.step(a)
        faults = [(i, info["fault"]) for i, info in enumerate(infos) if "fault" in info]
        if faults:
            raise EnvironmentFault(f"environment faults during rollout, batch discarded: {faults}")
        buf["obs"][t], buf["u"][t], buf["actions"][t], buf["logp"][t] = obs, u, a, lp
        shaped = r + np.array([info.get("shaping", 0.0) for info in infos])
        buf["rewards"][t], buf["values"][t], buf["dones"][t] = shaped, v, done
        running["sum"] += r
        running["len"] += 1
        for i in np.flatnonzero(done):
            finished.append(running["sum"][i] / running["len"][i])
            running["sum"][i], running["len"][i] = 0.0, 0
        obs = nxt
    _, bootstrap = policy.forward(obs)
    return RolloutBatch(**buf, bootstrap=bootstrap, last_obs=obs, episode_rewards=finished)


def ppo_loss(policy: PolicyNet, obs, u, old_logp, adv, returns, cfg: PpoConfig, need_grad: bool = True):
    """Clipped-surrogate loss and its gradient in ``policy.params()`` order.

    ``adv`` must already be normalized. Raises NonFiniteRatioError on a
    non-finite probability ratio.
    """
    h, tcache = policy.trunk.forward_cache(obs)
    mu = policy.mean_head.forward(h)
    v = policy.value_head.forward(h)[:, 0]
    logp = policy.log_prob(mu, u)
    ratio = np.exp(logp - old_logp)
    diag = {"approx_kl": float(np.mean((ratio - 1.0) - (logp - old_logp))) if np.all(np.isfinite(ratio)) else math.inf}
    if not np.all(np.isfinite(ratio)):
        diag["bad_ratios"] = int(np.sum(~np.isfinite(ratio)))
        raise NonFiniteRatioError("non-finite probability ratio, update aborted", diag)
    eps = cfg.clip_range
    surrogate = clipped_surrogate(ratio, adv, eps)
    policy_loss = -float(surrogate.mean())
    value_loss = float(np.mean((v - returns) ** 2))
    entropy = policy.entropy()
    total = policy_loss + cfg.vf_coef * value_loss - cfg.ent_coef * entropy
    diag.update(policy_loss=policy_loss, value_loss=value_loss, entropy=entropy, loss=total,
                clip_frac=float(np.mean(np.abs(ratio - 1.0) > eps)))
    if not need_grad:
        return total, diag, None
    B = len(ratio)
    active = ratio * adv <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv  # gradient flows only through r A
    dlogp = np.where(active, -adv * ratio / B, 0.0)
    std = np.exp(policy.log_std)
    zs = (u - mu) / std
    dmu = dlogp[:, None] * zs / std
    dlog_std = (dlogp[:, None] * (zs * zs - 1.0)).sum(axis=0) - cfg.ent_coef
    dv = cfg.vf_coef * 2.0 * (v - returns) / B
    gm = policy.mean_head.backward([(None, h), (mu, mu)], dmu, need_input_grad=True)
    gv = policy.value_head.backward([(None, h), (v[:, None], v[:, None])], dv[:, None], need_input_grad=True)
    gt = policy.trunk.backward(tcache, gm[1] + gv[1])
    return total, diag, gt + gm[0] + gv[0] + [dlog_std]


def clip_grad_norm(grads, max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def ppo_update(policy: PolicyNet, opt: Adam, batch: RolloutBatch, cfg: PpoConfig, rng) -> dict:
    adv, returns = gae(batch.rewards, batch.values, batch.dones, batch.bootstrap, cfg.gamma, cfg.gae_lambda)
    flat = lambda a: a.reshape(batch.size, *a.shape[2:])
    obs, u, old_logp = flat(batch.obs), flat(batch.u), flat(batch.logp)
    adv, returns = normalize_advantages(flat(adv)), flat(returns)
    stats = []
    for _ in range(cfg.epochs):
        order = rng.permutation(batch.size)
        for start in range(0, batch.size, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            _, diag, grads = ppo_loss(policy, obs[idx], u[idx], old_logp[idx], adv[idx], returns[idx], cfg)
            grads, _ = clip_grad_norm(grads, cfg.max_grad_norm)
            opt.step(grads)
            policy.clamp_log_std()
            stats.append(diag)
    keys = ("policy_loss", "value_loss", "clip_frac")
    out = {k: float(np.mean([s[k] for s in stats])) for k in keys}
    # KL of the final policy against the collection policy over the whole batch
    _, final, _ = ppo_loss(policy, obs, u, old_logp, adv, returns, cfg, need_grad=False)
    out.update(approx_kl=final["approx_kl"], entropy=final["entropy"])
    return out


class ReturnScaler:
    """Running variance of per-env discounted returns (parallel Welford merge)."""

    def __init__(self, n_envs: int, gamma: float, eps: float = 1e-8):
        self.gamma, self.eps = gamma, eps
        self.ret = np.zeros(n_envs)
        self.mean, self.var, self.count = 0.0, 1.0, 1e-4

    def update(self, x):
        x = np.ravel(x)
        b_mean, b_var, n = x.mean(), x.var(), x.size
        delta = b_mean - self.mean
        tot = self.count + n
        self.mean += delta * n / tot
        self.var = (self.var * self.count + b_var * n + delta * delta * self.count * n / tot) / tot
        self.count = tot

    def scale(self, rewards, dones) -> np.ndarray:
        """Update statistics with a (T, N) reward block and return it rescaled."""
        rets = np.empty_like(rewards)
        for t in range(len(rewards)):
            self.ret = self.ret * self.gamma + rewards[t]
            rets[t] = self.ret
            self.ret = self.ret * (1.0 - dones[t])
        self.update(rets)
        return rewards / math.sqrt(self.var + self.eps)


def evaluate_policy(env, policy: PolicyNet, seed: int | None = None) -> dict:
    """One deterministic episode; returns mean reward, mean/max error and per-step rows."""
    obs = env.reset(seed)
    rows, done = [], False
    while not done:
        a, _, _, _ = policy.act(obs[None], deterministic=True)
        obs, r, done, info = env.step(a[0])
        rows.append({"reward": r, **info})
    err = np.array([r["error"] for r in rows])
    return {"mean_reward": float(np.mean([r["reward"] for r in rows])), "mean_error": float(err.mean()),
            "max_error": float(err.max()), "rows": rows}


def save_policy(policy: PolicyNet, path, meta: dict | None = None, opt: Adam | None = None) -> None:
    header = {"kind": "policy", "trunk": mlp_header(policy.trunk), "mean_head": mlp_header(policy.mean_head),
              "value_head": mlp_header(policy.value_head), "action_bound": policy.action_bound,
              "log_std_floor": policy.log_std_floor, "obs_dim": policy.obs_dim, "act_dim": policy.act_dim,
              "optimizer_t": opt.t if opt is not None else None}
    arrays = policy.params()
    if opt is not None:
        arrays = arrays + opt.m + opt.v
    write_arrays(path, header, arrays)
    if meta is not None:
        write_sidecar(str(path) + ".json", dict(meta, kind="policy", action_bound=policy.action_bound))


def load_policy(path, with_optimizer: bool = False):
    header, arrays = read_arrays(path)
    if header.get("kind") != "policy":
        raise ValueError(f"{path}: not a policy checkpoint")
    sizes = [len(header[k]["layer_sizes"]) - 1 for k in ("trunk", "mean_head", "value_head")]
    i = 0
    nets = []
    for k, n in zip(("trunk", "mean_head", "value_head"), sizes):
        nets.append(mlp_from_arrays(header[k], arrays[i:i + 2 * n]))
        i += 2 * n
    policy = PolicyNet(*nets, arrays[i], header["action_bound"], header["log_std_floor"])
    if not with_optimizer:
        return policy
    n_p = i + 1
    state = None
    if header.get("optimizer_t") is not None:
        state = {"t": header["optimizer_t"], "m": arrays[n_p:2 * n_p], "v": arrays[2 * n_p:3 * n_p]}
    return policy, state


def make_optimizer(policy: PolicyNet, cfg: PpoConfig) -> Adam:
    return Adam(policy.params(), lr=cfg.lr, eps=cfg.adam_eps)


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CURVE_COLUMNS)
        for row in curve:
            wr.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c])) for c in CURVE_COLUMNS])


def stagger(vec: VecEnv, policy: PolicyNet, obs, cfg: PpoConfig, rng) -> np.ndarray:
    """Advance env i by ``i * stagger_steps // n_envs`` sampled steps so that
    synchronized episodes do not put every rollout in the same phase."""
    obs = obs.copy()
    for i, env in enumerate(vec.envs):
        for _ in range(i * cfg.stagger_steps // cfg.n_envs):
            a, _, _, _ = policy.act(obs[i][None], rng)
            o, _, done, _ = env.step(a[0])
            obs[i] = env.reset() if done else o
    return obs


@dataclass
class TrainResult:
    policy: PolicyNet  # best evaluation checkpoint
    final_policy: PolicyNet
    curve: list
    aborted: bool = False
    best_eval: dict | None = None
    optimizer: Adam | None = None

    def __iter__(self):
        yield self.policy
        yield self.curve


def train_policy(env_factory, cfg: PpoConfig, eval_env=None, curve_path=None, checkpoint_path=None,
                 policy: PolicyNet | None = None, opt_state: dict | None = None) -> TrainResult:
    """Collect, estimate advantages, and run minibatched epochs until ``cfg.total_steps``.

    ``env_factory(i)`` builds training environment ``i``. Every
    ``cfg.eval_every`` updates (and after the last) a deterministic episode on
    ``eval_env`` is scored and the lowest-error policy kept. When the KL to the
    collection policy exceeds ``cfg.kl_abort`` for ``cfg.kl_patience``
    consecutive updates training stops early and the partial artifacts are
    still written.
    """
    ss = np.random.SeedSequence(cfg.seed)
    init_seed, sample_seed, shuffle_seed, env_seed = ss.spawn(4)
    vec = VecEnv([env_factory(i) for i in range(cfg.n_envs)])
    reset_seeds = np.random.default_rng(env_seed).integers(2 ** 31, size=cfg.n_envs).tolist()
    obs = vec.reset(reset_seeds)
    if policy is None:
        policy = init_policy(vec.obs_dim, vec.act_dim, cfg.hidden, np.random.default_rng(init_seed), cfg.action_bound,
                             cfg.log_std_init, cfg.log_std_floor)
    opt = make_optimizer(policy, cfg)
    if opt_state is not None:
        opt.load_state(opt_state)
    sample_rng = np.random.default_rng(sample_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    running = {"sum": np.zeros(cfg.n_envs), "len": np.zeros(cfg.n_envs, dtype=int)}
    if cfg.stagger_steps:
        obs = stagger(vec, policy, obs, cfg, sample_rng)
    scaler = ReturnScaler(cfg.n_envs, cfg.gamma) if cfg.normalize_rewards else None
    n_updates = max(1, cfg.total_steps // cfg.batch_size)
    curve, best, best_eval, hot, aborted = [], policy.copy(), None, 0, False
    t0 = time.perf_counter()
    for update in range(1, n_updates + 1):
        batch = collect_rollout(vec, policy, cfg.steps_per_env, obs, sample_rng, running=running)
        obs = batch.last_obs
        if scaler is not None:
            batch.rewards = scaler.scale(batch.rewards, batch.dones)
        stats = ppo_update(policy, opt, batch, cfg, shuffle_rng)
        hot = hot + 1 if stats["approx_kl"] > cfg.kl_abort else 0
        aborted = hot >= cfg.kl_patience
        eval_error = math.nan
        if eval_env is not None and (update % cfg.eval_every == 0 or update == n_updates or aborted):
            ev = evaluate_policy(eval_env, policy, seed=cfg.seed)
            eval_error = ev["mean_error"]
            if best_eval is None or eval_error < best_eval["mean_error"]:
                best, best_eval = policy.copy(), {k: ev[k] for k in ("mean_reward", "mean_error", "max_error")}
                best_eval["update"] = update
        ep = batch.episode_rewards
        row = {"update": update, "steps": update * cfg.batch_size,
               "mean_reward": float(np.mean(ep)) if ep else float(np.mean(batch.rewards)),
               "eval_error": eval_error, **stats}
        curve.append(row)
        if curve_path is not None:
            write_curve(curve, curve_path)
        if update % 10 == 0 or update == n_updates:
            log.info("update %d/%d reward %.4f eval %.4f kl %.4f std %s (%.0f s)", update, n_updates,
                     row["mean_reward"], eval_error, stats["approx_kl"],
                     np.round(np.exp(policy.log_std), 4), time.perf_counter() - t0)
        if aborted:
            log.warning("approx KL above %g for %d updates, stopping at update %d", cfg.kl_abort, hot, update)
            break
    if eval_env is None:
        best = policy.copy()
    if checkpoint_path is not None:
        meta = {"best_eval": best_eval, "aborted": aborted, "updates": len(curve), "config": cfg}
        save_policy(best, checkpoint_path, meta)
        save_policy(policy, str(checkpoint_path) + ".resume", meta, opt=opt)
    return TrainResult(best, policy, curve, aborted, best_eval, opt)
