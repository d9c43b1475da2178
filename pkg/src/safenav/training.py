"""PPO and Lagrangian-PPO trainers over the tube simulator.

Both methods run the identical clipped-surrogate update; the Lagrangian
variant feeds the policy a combined advantage (A_r - lambda * A_c) / (1 +
lambda) and performs projected dual ascent on lambda against the episodic
cost threshold after every batch.  Plain PPO is the exact special case
lambda == 0 with a zero dual step, so the two are bitwise identical under
the same seed when the multiplier never moves.

Reward advantages are normalized per batch; cost advantages are not (their
absolute scale is what the constraint is stated in).

One trainer instance per seed, single-threaded; run instances in parallel
processes for sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from sklearn.base import BaseEstimator

from . import _kernels
from .geometry import TubeModel
from .ioutil import atomic_write_text
from .network import (GradientTape, PolicyNetwork, backprop,
                      log_policy_distribution)
from .simulator import REACHED_END, EnvConfig
from .validation import check_observation


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    cost_gae_lambda: float | None = None   # None: same as gae_lambda
    clip_epsilon: float = 0.2
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    entropy_coef: float = 0.01
    rollout_steps: int = 2048
    epochs_per_update: int = 4
    minibatch_size: int = 256
    total_episodes: int = 600
    method: str = "ppo"            # "ppo" | "lppo"
    hidden_sizes: tuple = (32, 32)
    grad_clip: float = 0.5
    cost_threshold: float = 500.0
    lambda_lr: float = 0.005
    lambda_init: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0 or not 0.0 < self.gae_lambda <= 1.0:
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.cost_gae_lambda is not None and not 0.0 < self.cost_gae_lambda <= 1.0:
            raise ValueError("cost_gae_lambda must lie in (0, 1]")
        if self.clip_epsilon <= 0.0:
            raise ValueError("clip_epsilon must be positive")
        if self.method not in ("ppo", "lppo"):
            raise ValueError(f"method must be 'ppo' or 'lppo', got {self.method!r}")

    @property
    def cost_lambda(self) -> float:
        return self.gae_lambda if self.cost_gae_lambda is None else self.cost_gae_lambda

    def to_dict(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["hidden_sizes"] = list(self.hidden_sizes)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        doc = dict(doc)
        if "hidden_sizes" in doc:
            doc["hidden_sizes"] = tuple(doc["hidden_sizes"])
        return cls(**doc)

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


@dataclass
class LagrangianState:
    lam: float = 0.0
    threshold: float = 500.0
    lambda_lr: float = 0.005

    def update(self, mean_episodic_cost: float) -> float:
        """Projected dual ascent; lambda never goes negative."""
        self.lam = max(0.0, self.lam + self.lambda_lr
                       * (mean_episodic_cost - self.threshold))
        return self.lam


class Adam:
    def __init__(self, n_params: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)

    def step(self, params: np.ndarray, grads: np.ndarray):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def snapshot(self):
        return self.t, self.m.copy(), self.v.copy()

    def restore(self, snap):
        self.t, m, v = snap[0], snap[1].copy(), snap[2].copy()
        self.m, self.v = m, v


class RolloutBatch:
    """One contiguous block of transitions with episode bookkeeping."""

    def __init__(self, n_steps, obs, actions, rewards, costs, terminals,
                 positions, trunc_obs, final_obs, ep_returns, ep_costs,
                 ep_lengths, ep_reached, n_episodes, start_position):
        self.n_steps = n_steps
        self.obs = obs[:n_steps]
        self.actions = actions[:n_steps]
        self.rewards = rewards[:n_steps]
        self.costs = costs[:n_steps]
        self.terminals = terminals[:n_steps]
        self.positions = positions[:n_steps]
        self.trunc_obs = trunc_obs[:n_steps]
        self.final_obs = final_obs
        self.ep_returns = ep_returns[:n_episodes]
        self.ep_costs = ep_costs[:n_episodes]
        self.ep_lengths = ep_lengths[:n_episodes]
        self.ep_reached = ep_reached[:n_episodes]
        self.n_episodes = n_episodes
        self.start_position = start_position


class EnvRunner:
    """Owns the mutable capsule state and collects batches via the kernels.

    Episodes continue across collect() calls, so consecutive batches form
    one unbroken trajectory stream.
    """

    def __init__(self, tube: TubeModel, config: EnvConfig, rng: np.random.Generator):
        if config.capsule_radius >= tube.radius:
            raise ValueError("capsule radius must be smaller than the tube radius")
        self.tube = tube
        self.config = config
        self.rng = rng
        self._pos = np.zeros(3)
        self._fwd = np.zeros(3)
        self._up = np.zeros(3)
        self._right = np.zeros(3)
        self._ints = np.zeros(3, dtype=np.int64)
        self._ep_acc = np.zeros(3)
        _kernels.reset_state(self._pos, self._fwd, self._up, self._right,
                             tube.points, tube.start_up, tube.start_right,
                             tube.tangents[0], self.rng.random(4),
                             config.reset_lateral, config.reset_angle)

    def collect(self, policy: PolicyNetwork, n_steps: int,
                sample_rng: np.random.Generator | None = None,
                greedy: bool = False, max_episodes: int = 0) -> RolloutBatch:
        tube, cfg = self.tube, self.config
        obs = np.empty((n_steps, 16))
        actions = np.empty(n_steps, dtype=np.int64)
        rewards = np.empty(n_steps)
        costs = np.empty(n_steps)
        terminals = np.empty(n_steps, dtype=np.int64)
        positions = np.empty((n_steps, 3))
        trunc_obs = np.zeros((n_steps, 16))
        final_obs = np.empty(16)
        cap = n_steps + 1
        ep_returns = np.empty(cap)
        ep_costs = np.empty(cap)
        ep_lengths = np.empty(cap)
        ep_reached = np.empty(cap, dtype=np.int64)
        noise = self.rng.random((cap, 4))
        if greedy:
            uniforms = np.zeros(n_steps)
        else:
            if sample_rng is None:
                raise ValueError("sample_rng is required unless greedy=True")
            uniforms = sample_rng.random(n_steps)
        flat, w_off, b_off, in_sz, out_sz, acts = policy.kernel_pack()
        width = policy.max_width
        scratch_a = np.empty(width)
        scratch_b = np.empty(width)
        logits = np.empty(policy.n_outputs)
        start_position = self._pos.copy()
        self._ints[2] = 0

        steps, n_eps = _kernels.rollout(
            self._pos, self._fwd, self._up, self._right, self._ints, self._ep_acc,
            tube.points, tube.ds, tube.total_length, tube.tangents[0],
            tube.tangents[-1], tube.start_up, tube.start_right,
            tube.radius, tube.radius - cfg.capsule_radius, cfg.linear_velocity,
            cfg.angular_step, cfg.eta, cfg.beta, cfg.goal_threshold,
            cfg.horizon, cfg.camera_fov, cfg.view_depth, cfg.reset_lateral,
            cfg.reset_angle,
            flat, w_off, b_off, in_sz, out_sz, acts,
            noise, uniforms,
            1 if greedy else 0, max_episodes,
            obs, actions, rewards, costs, terminals, positions, trunc_obs,
            final_obs, ep_returns, ep_costs, ep_lengths, ep_reached,
            scratch_a, scratch_b, logits)

        return RolloutBatch(steps, obs, actions, rewards, costs, terminals,
                            positions, trunc_obs, final_obs, ep_returns,
                            ep_costs, ep_lengths, ep_reached, n_eps,
                            start_position)


def compute_gae(rewards, terminals, values, tail_value, trunc_values,
                gamma: float, gae_lambda: float):
    """Generalized advantage estimation for one signal stream.

    terminals: 0 running, 1 true termination (no bootstrap), 2 truncation
    (bootstrap with trunc_values[t]).  tail_value bootstraps a batch that
    ends mid-episode.  Returns (advantages, returns); returns = adv + values,
    which for gae_lambda = 1 equals the discounted Monte-Carlo sums.
    """
    n = len(rewards)
    adv = np.empty(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        if terminals[t] == 1:
            next_v, flow = 0.0, 0.0
        elif terminals[t] == 2:
            next_v, flow = trunc_values[t], 0.0
        else:
            next_v = values[t + 1] if t + 1 < n else tail_value
            flow = 1.0
        delta = rewards[t] + gamma * next_v - values[t]
        acc = delta + gamma * gae_lambda * flow * acc
        adv[t] = acc
    return adv, adv + values


def _policy_loss_and_grad(logits, actions, old_logp, adv, clip_epsilon,
                          entropy_coef):
    """Clipped-surrogate loss with entropy bonus and its logit gradient."""
    n = logits.shape[0]
    idx = np.arange(n)
    logp_all = log_policy_distribution(logits)
    p = np.exp(logp_all)
    ratio = np.exp(logp_all[idx, actions] - old_logp)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv
    pg_loss = -float(np.mean(np.minimum(surr1, surr2)))
    entropy = -(p * logp_all).sum(axis=1)
    loss = pg_loss - entropy_coef * float(entropy.mean())

    use_unclipped = surr1 <= surr2
    coef = np.where(use_unclipped, ratio * adv, 0.0)
    dlogp = -p.copy()
    dlogp[idx, actions] += 1.0
    grad = -(coef[:, None] * dlogp) / n
    grad += entropy_coef * (p * (logp_all + entropy[:, None])) / n
    return loss, pg_loss, float(entropy.mean()), ratio, grad


def _value_loss_and_grad(values, targets):
    diff = values[:, 0] - targets
    loss = float(np.mean(diff * diff))
    grad = (2.0 * diff / diff.size)[:, None]
    return loss, grad


class UpdateAbort(RuntimeError):
    """A non-finite loss aborted an update; parameters were restored."""


def run_update(policy, critic_r, critic_c, opt_p, opt_r, opt_c, data,
               config: TrainConfig, shuffle_rng: np.random.Generator) -> dict:
    """One PPO update: epochs of shuffled minibatches over the batch.

    data: dict with obs, actions, old_logp, adv (already combined),
    ret_r, ret_c.  On a non-finite loss all parameters and optimizer
    states are rolled back and UpdateAbort is raised.
    """
    snaps = (policy.params.copy(), critic_r.params.copy(), critic_c.params.copy(),
             opt_p.snapshot(), opt_r.snapshot(), opt_c.snapshot())
    tape_p = GradientTape(policy)
    tape_r = GradientTape(critic_r)
    tape_c = GradientTape(critic_c)
    n = data["obs"].shape[0]

    # before any gradient step the importance ratio must be exactly 1
    idx = np.arange(n)
    logp_start = log_policy_distribution(
        policy.forward_batch(data["obs"]))[idx, data["actions"]]
    ratio_dev = float(np.abs(np.exp(logp_start - data["old_logp"]) - 1.0).max())

    diag = {"policy_loss": 0.0, "value_loss_r": 0.0, "value_loss_c": 0.0,
            "entropy": 0.0, "ratio_dev_update_start": ratio_dev,
            "minibatches": 0}
    try:
        for epoch in range(config.epochs_per_update):
            perm = shuffle_rng.permutation(n)
            for start in range(0, n, config.minibatch_size):
                mb = perm[start:start + config.minibatch_size]
                obs = data["obs"][mb]

                logits, cache = policy.forward_cached(obs)
                loss_p, pg, ent, ratio, grad_logits = _policy_loss_and_grad(
                    logits, data["actions"][mb], data["old_logp"][mb],
                    data["adv"][mb], config.clip_epsilon, config.entropy_coef)

                vr, cache_r = critic_r.forward_cached(obs)
                loss_r, grad_r = _value_loss_and_grad(vr, data["ret_r"][mb])
                vc, cache_c = critic_c.forward_cached(obs)
                loss_c, grad_c = _value_loss_and_grad(vc, data["ret_c"][mb])

                if not np.isfinite([loss_p, loss_r, loss_c]).all():
                    raise UpdateAbort(
                        f"non-finite loss (policy={loss_p}, value_r={loss_r}, "
                        f"value_c={loss_c})")

                tape_p.zero()
                backprop(policy, cache, grad_logits, tape_p)
                tape_p.clip_global_norm(config.grad_clip)
                opt_p.step(policy.params, tape_p.grads)

                tape_r.zero()
                backprop(critic_r, cache_r, grad_r, tape_r)
                tape_r.clip_global_norm(config.grad_clip)
                opt_r.step(critic_r.params, tape_r.grads)

                tape_c.zero()
                backprop(critic_c, cache_c, grad_c, tape_c)
                tape_c.clip_global_norm(config.grad_clip)
                opt_c.step(critic_c.params, tape_c.grads)

                diag["policy_loss"] = loss_p
                diag["value_loss_r"] = loss_r
                diag["value_loss_c"] = loss_c
                diag["entropy"] = ent
                diag["minibatches"] += 1
        if not (policy.is_finite() and critic_r.is_finite() and critic_c.is_finite()):
            raise UpdateAbort("non-finite parameter after update")
    except UpdateAbort:
        policy.params[...] = snaps[0]
        critic_r.params[...] = snaps[1]
        critic_c.params[...] = snaps[2]
        opt_p.restore(snaps[3])
        opt_r.restore(snaps[4])
        opt_c.restore(snaps[5])
        raise
    return diag


class TrainRecord:
    """Per-episode training history plus per-update diagnostics."""

    COLUMNS = ("episode", "return", "cost", "length", "reached_end", "lambda")

    def __init__(self):
        self.returns: list[float] = []
        self.costs: list[float] = []
        self.lengths: list[int] = []
        self.reached: list[bool] = []
        self.lambdas: list[float] = []
        self.updates: list[dict] = []
        self.failure: str | None = None

    @property
    def n_episodes(self) -> int:
        return len(self.returns)

    def add_episode(self, ret, cost, length, reached, lam):
        self.returns.append(float(ret))
        self.costs.append(float(cost))
        self.lengths.append(int(length))
        self.reached.append(bool(reached))
        self.lambdas.append(float(lam))

    def trailing_success_rate(self, window: int = 100) -> float:
        if not self.reached:
            return 0.0
        tail = self.reached[-window:]
        return sum(tail) / len(tail)

    def trailing_mean_cost(self, window: int = 100) -> float:
        if not self.costs:
            return 0.0
        tail = self.costs[-window:]
        return sum(tail) / len(tail)

    def summary(self) -> dict:
        return {
            "episodes": self.n_episodes,
            "trailing_success_rate": self.trailing_success_rate(),
            "trailing_mean_cost": self.trailing_mean_cost(),
            "final_lambda": self.lambdas[-1] if self.lambdas else 0.0,
            "failure": self.failure,
        }

    def to_csv(self, path):
        lines = [",".join(self.COLUMNS)]
        for i in range(self.n_episodes):
            lines.append(",".join((
                str(i), repr(self.returns[i]), repr(self.costs[i]),
                str(self.lengths[i]), str(int(self.reached[i])),
                repr(self.lambdas[i]))))
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "TrainRecord":
        rec = cls()
        with open(path, "r") as f:
            header = f.readline().strip().split(",")
            if tuple(header) != cls.COLUMNS:
                raise ValueError(f"{path}: unexpected columns {header}")
            for line in f:
                parts = line.strip().split(",")
                if len(parts) != len(cls.COLUMNS):
                    raise ValueError(f"{path}: bad row {line!r}")
                rec.add_episode(float(parts[1]), float(parts[2]), int(parts[3]),
                                bool(int(parts[4])), float(parts[5]))
        return rec


def train_policy(tube: TubeModel, config: TrainConfig, seed: int,
                 env_config: EnvConfig | None = None):
    """Train one policy; fully reproducible from (tube, configs, seed).

    Returns (policy, record); the critics are internal and discarded, so
    saved artifacts deploy the policy alone.
    """
    env_config = env_config if env_config is not None else EnvConfig()
    ss = np.random.SeedSequence(seed)
    s_pol, s_vr, s_vc, s_env, s_sample, s_shuffle = ss.spawn(6)

    sizes = (16,) + tuple(config.hidden_sizes) + (5,)
    policy = PolicyNetwork(sizes, seed=s_pol)
    policy.metadata = {"seed": seed, "method": config.method, "episodes": 0}
    v_sizes = (16,) + tuple(config.hidden_sizes) + (1,)
    critic_r = PolicyNetwork(v_sizes, seed=s_vr)
    critic_c = PolicyNetwork(v_sizes, seed=s_vc)

    opt_p = Adam(policy.n_params, config.policy_lr)
    opt_r = Adam(critic_r.n_params, config.value_lr)
    opt_c = Adam(critic_c.n_params, config.value_lr)

    runner = EnvRunner(tube, env_config, np.random.Generator(np.random.PCG64(s_env)))
    sample_rng = np.random.Generator(np.random.PCG64(s_sample))
    shuffle_rng = np.random.Generator(np.random.PCG64(s_shuffle))

    lag = LagrangianState(
        lam=config.lambda_init if config.method == "lppo" else 0.0,
        threshold=config.cost_threshold,
        lambda_lr=config.lambda_lr if config.method == "lppo" else 0.0)

    record = TrainRecord()
    while record.n_episodes < config.total_episodes:
        batch = runner.collect(policy, config.rollout_steps, sample_rng)
        lam_used = lag.lam

        logits = policy.forward_batch(batch.obs)
        idx = np.arange(batch.n_steps)
        old_logp = log_policy_distribution(logits)[idx, batch.actions]
        values_r = critic_r.forward_batch(batch.obs)[:, 0]
        values_c = critic_c.forward_batch(batch.obs)[:, 0]
        tail_r = float(critic_r.forward(batch.final_obs)[0])
        tail_c = float(critic_c.forward(batch.final_obs)[0])
        trunc_r = np.zeros(batch.n_steps)
        trunc_c = np.zeros(batch.n_steps)
        trunc_mask = batch.terminals == 2
        if trunc_mask.any():
            rows = batch.trunc_obs[trunc_mask]
            trunc_r[trunc_mask] = critic_r.forward_batch(rows)[:, 0]
            trunc_c[trunc_mask] = critic_c.forward_batch(rows)[:, 0]

        adv_r, ret_r = compute_gae(batch.rewards, batch.terminals, values_r,
                                   tail_r, trunc_r, config.gamma,
                                   config.gae_lambda)
        adv_c, ret_c = compute_gae(batch.costs, batch.terminals, values_c,
                                   tail_c, trunc_c, config.gamma,
                                   config.cost_lambda)
        adv_r_norm = (adv_r - adv_r.mean()) / (adv_r.std() + 1e-8)
        adv = (adv_r_norm - lam_used * adv_c) / (1.0 + lam_used)

        data = {"obs": batch.obs, "actions": batch.actions, "old_logp": old_logp,
                "adv": adv, "ret_r": ret_r, "ret_c": ret_c}
        try:
            diag = run_update(policy, critic_r, critic_c, opt_p, opt_r, opt_c,
                              data, config, shuffle_rng)
        except UpdateAbort as e:
            record.failure = str(e)
            break

        if batch.n_episodes > 0:
            lag.update(float(batch.ep_costs.mean()))
        diag["lambda"] = lag.lam
        diag["episodes_in_batch"] = batch.n_episodes
        record.updates.append(diag)

        for k in range(batch.n_episodes):
            if record.n_episodes >= config.total_episodes:
                break
            record.add_episode(batch.ep_returns[k], batch.ep_costs[k],
                               batch.ep_lengths[k], batch.ep_reached[k] == 1,
                               lam_used)

    policy.metadata["episodes"] = record.n_episodes
    return policy, record


def evaluate_policy(net: PolicyNetwork, tube: TubeModel, episodes: int = 20,
                    env_config: EnvConfig | None = None,
                    seed_base: int = 0) -> dict:
    """Greedy evaluation over `episodes` independently seeded resets."""
    env_config = env_config if env_config is not None else EnvConfig()
    from .simulator import distance_traveled

    successes = 0
    returns, costs, distances, lengths = [], [], [], []
    for e in range(episodes):
        runner = EnvRunner(tube, env_config,
                           np.random.Generator(np.random.PCG64(seed_base + e)))
        batch = runner.collect(net, env_config.horizon, greedy=True,
                               max_episodes=1)
        reached = batch.n_episodes > 0 and batch.ep_reached[0] == 1
        successes += int(reached)
        returns.append(float(batch.ep_returns[0]) if batch.n_episodes else
                       float(batch.rewards.sum()))
        costs.append(float(batch.ep_costs[0]) if batch.n_episodes else
                     float(batch.costs.sum()))
        lengths.append(int(batch.ep_lengths[0]) if batch.n_episodes else
                       batch.n_steps)
        path = np.vstack([batch.start_position[None, :], batch.positions])
        distances.append(distance_traveled(path, tube))
    return {
        "episodes": episodes,
        "success_rate": successes / episodes,
        "mean_return": float(np.mean(returns)),
        "mean_episodic_cost": float(np.mean(costs)),
        "mean_distance_traveled": float(np.mean(distances)),
        "mean_length": float(np.mean(lengths)),
    }


class PPOTrainer(BaseEstimator):
    """Scikit-learn style wrapper: fit(tube) trains a policy, predict(obs)
    returns greedy actions."""

    _method = "ppo"

    def __init__(self, gamma=0.99, gae_lambda=0.95, clip_epsilon=0.2,
                 policy_lr=3e-4, value_lr=1e-3, entropy_coef=0.01,
                 rollout_steps=2048, epochs_per_update=4, minibatch_size=256,
                 total_episodes=600, hidden_sizes=(32, 32), grad_clip=0.5,
                 env_config=None, seed=0):
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.clip_epsilon = clip_epsilon
        self.policy_lr = policy_lr
        self.value_lr = value_lr
        self.entropy_coef = entropy_coef
        self.rollout_steps = rollout_steps
        self.epochs_per_update = epochs_per_update
        self.minibatch_size = minibatch_size
        self.total_episodes = total_episodes
        self.hidden_sizes = hidden_sizes
        self.grad_clip = grad_clip
        self.env_config = env_config
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            gamma=self.gamma, gae_lambda=self.gae_lambda,
            clip_epsilon=self.clip_epsilon, policy_lr=self.policy_lr,
            value_lr=self.value_lr, entropy_coef=self.entropy_coef,
            rollout_steps=self.rollout_steps,
            epochs_per_update=self.epochs_per_update,
            minibatch_size=self.minibatch_size,
            total_episodes=self.total_episodes, method=self._method,
            hidden_sizes=tuple(self.hidden_sizes), grad_clip=self.grad_clip)

    def fit(self, tube: TubeModel, seed: int | None = None) -> "PPOTrainer":
        train_seed = self.seed if seed is None else seed
        self.policy_, self.record_ = train_policy(
            tube, self._train_config(), train_seed, env_config=self.env_config)
        return self

    def predict(self, obs):
        if not hasattr(self, "policy_"):
            raise RuntimeError("trainer is not fitted; call fit() first")
        arr = np.asarray(obs, dtype=np.float64)
        if arr.ndim == 1:
            return int(np.argmax(self.policy_.forward(check_observation(arr))))
        return np.argmax(self.policy_.forward_batch(arr), axis=1)

    def evaluate(self, tube: TubeModel, episodes: int = 20,
                 seed_base: int = 0) -> dict:
        if not hasattr(self, "policy_"):
            raise RuntimeError("trainer is not fitted; call fit() first")
        return evaluate_policy(self.policy_, tube, episodes,
                               env_config=self.env_config, seed_base=seed_base)


class LagrangianPPOTrainer(PPOTrainer):
    """PPO with projected dual ascent on an episodic cost constraint."""

    _method = "lppo"

    def __init__(self, gamma=0.99, gae_lambda=0.95, clip_epsilon=0.2,
                 policy_lr=3e-4, value_lr=1e-3, entropy_coef=0.01,
                 rollout_steps=2048, epochs_per_update=4, minibatch_size=256,
                 total_episodes=600, hidden_sizes=(32, 32), grad_clip=0.5,
                 env_config=None, seed=0, cost_threshold=500.0,
                 lambda_lr=0.005, lambda_init=0.0):
        super().__init__(gamma=gamma, gae_lambda=gae_lambda,
                         clip_epsilon=clip_epsilon, policy_lr=policy_lr,
                         value_lr=value_lr, entropy_coef=entropy_coef,
                         rollout_steps=rollout_steps,
                         epochs_per_update=epochs_per_update,
                         minibatch_size=minibatch_size,
                         total_episodes=total_episodes,
                         hidden_sizes=hidden_sizes, grad_clip=grad_clip,
                         env_config=env_config, seed=seed)
        self.cost_threshold = cost_threshold
        self.lambda_lr = lambda_lr
        self.lambda_init = lambda_init

    def _train_config(self) -> TrainConfig:
        base = super()._train_config()
        return base.with_overrides(method="lppo",
                                   cost_threshold=self.cost_threshold,
                                   lambda_lr=self.lambda_lr,
                                   lambda_init=self.lambda_init)
