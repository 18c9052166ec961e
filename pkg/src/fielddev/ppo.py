"""PPO-clip training loop: parallel on-policy episode collection, GAE,
the clipped surrogate with value and entropy terms, and minibatch Adam
epochs over episode groups.

Rewards (stage NPVs in dollars) are scaled by ``reward_scale`` for
conditioning; reported NPVs are always unscaled dollars.
"""

from __future__ import annotations

import csv
import dataclasses
import os
import signal
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .errors import InvalidArgumentError, NumericalError
from .fdenv import Action, DO_NOTHING, FieldDevEnv, SimCounter
from .nn import Adam, NetworkSpec, PolicyValueNet, apply_mask, entropy, entropy_grad, \
    load_blob, log_softmax, save_blob


@dataclasses.dataclass(frozen=True)
class PPOConfig:
    episodes_per_iter: int = 320
    minibatch_episodes: int = 160
    learning_rate: float = 1e-3
    clip_epsilon: float = 0.2
    gamma: float = 1.0
    gae_lambda: float = 0.95
    epochs: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    workers: int = 40
    reward_scale: float = 1e-8
    iterations: int = 100
    checkpoint_every: int = 10
    seed: int = 0
    # Whether the location head's log-probability enters the policy gradient
    # on "do nothing" steps (composite-action convention).
    location_logprob_always: bool = True

    def __post_init__(self):
        if not (0.0 < self.clip_epsilon < 1.0):
            raise InvalidArgumentError(f"clip_epsilon must be in (0,1), got {self.clip_epsilon}")
        if not (0.0 <= self.gamma <= 1.0):
            raise InvalidArgumentError(f"gamma must be in [0,1], got {self.gamma}")
        if not (0.0 <= self.gae_lambda <= 1.0):
            raise InvalidArgumentError(f"gae_lambda must be in [0,1], got {self.gae_lambda}")
        if self.minibatch_episodes > self.episodes_per_iter:
            raise InvalidArgumentError("minibatch_episodes cannot exceed episodes_per_iter")
        if self.episodes_per_iter < 1 or self.minibatch_episodes < 1:
            raise InvalidArgumentError("episode counts must be >= 1")
        if self.reward_scale <= 0:
            raise InvalidArgumentError("reward_scale must be positive")


@dataclasses.dataclass
class Episode:
    """One complete rollout, stored column-wise."""

    maps: np.ndarray            # (T, ny, nx, 4)
    vectors: np.ndarray         # (T, 3)
    decision_masks: np.ndarray  # (T, 3) bool
    location_masks: np.ndarray  # (T, L) bool
    decisions: np.ndarray       # (T,) int
    locations: np.ndarray       # (T,) int
    logprobs: np.ndarray        # (T,) behavior log-probabilities
    values: np.ndarray          # (T,) behavior value estimates (scaled units)
    rewards: np.ndarray         # (T,) scaled rewards
    npv: float                  # unscaled episode NPV, dollars

    def __len__(self) -> int:
        return len(self.rewards)


def sample_action(output, decision_mask, location_mask, rng: np.random.Generator,
                  location_always: bool) -> tuple[Action, float]:
    """Sample the composite action from masked heads; returns it with its log-prob."""
    ld = log_softmax(apply_mask(output.decision_logits[0], decision_mask))
    lu = log_softmax(apply_mask(output.location_logits[0], location_mask))
    d = _sample_categorical(np.exp(ld), rng)
    u = _sample_categorical(np.exp(lu), rng)
    logp = ld[d] + (lu[u] if (location_always or d != DO_NOTHING) else 0.0)
    return Action(decision=int(d), location=int(u)), float(logp)


def greedy_action(output, decision_mask, location_mask) -> Action:
    ld = apply_mask(output.decision_logits[0], decision_mask)
    lu = apply_mask(output.location_logits[0], location_mask)
    return Action(decision=int(np.argmax(ld)), location=int(np.argmax(lu)))


def _sample_categorical(p: np.ndarray, rng: np.random.Generator) -> int:
    p = p / p.sum()
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), p.size - 1))


def run_policy_episode(env: FieldDevEnv, net: PolicyValueNet, rng: np.random.Generator,
                       config: PPOConfig, seed: int | None = None) -> Episode:
    obs = env.reset(seed)
    maps, vectors, dmasks, lmasks = [], [], [], []
    decisions, locations, logprobs, values, rewards = [], [], [], [], []
    while not env.done:
        dmask, lmask = env.action_mask()
        out = net.forward(obs.maps, obs.vector)
        action, logp = sample_action(out, dmask, lmask, rng, config.location_logprob_always)
        maps.append(obs.maps)
        vectors.append(obs.vector)
        dmasks.append(dmask)
        lmasks.append(lmask)
        decisions.append(action.decision)
        locations.append(action.location)
        logprobs.append(logp)
        values.append(float(out.value[0]))
        result = env.step(action)
        rewards.append(result.reward * config.reward_scale)
        obs = result.observation
    return Episode(
        maps=np.array(maps), vectors=np.array(vectors),
        decision_masks=np.array(dmasks), location_masks=np.array(lmasks),
        decisions=np.array(decisions), locations=np.array(locations),
        logprobs=np.array(logprobs), values=np.array(values),
        rewards=np.array(rewards),
        npv=float(np.sum(rewards) / config.reward_scale),
    )


def _episode_seed(base_seed: int, iteration: int, episode: int) -> list[int]:
    return [int(base_seed), int(iteration), int(episode)]


def _collect_chunk(env_factory, spec: NetworkSpec, params, config: PPOConfig,
                   base_seed: int, iteration: int, indices) -> list[tuple[int, Episode]]:
    net = PolicyValueNet(spec, seed=0)
    net.set_params(params)
    env = env_factory(SimCounter())
    out = []
    for idx in indices:
        rng = np.random.default_rng(_episode_seed(base_seed, iteration, idx))
        out.append((idx, run_policy_episode(env, net, rng, config, seed=idx)))
    return out


def effective_workers(requested: int, jobs: int) -> int:
    cap = os.environ.get("FIELDEV_THREADS")
    w = min(requested, jobs)
    if cap is not None:
        w = min(w, max(1, int(cap)))
    return max(1, w)


def collect(net: PolicyValueNet, env_factory, config: PPOConfig, iteration: int,
            counter: SimCounter | None = None) -> list[Episode]:
    """Roll out exactly episodes_per_iter episodes under the current policy.

    Episodes are seeded individually from (seed, iteration, index), so the
    batch is identical for any worker count.
    """
    n = config.episodes_per_iter
    workers = effective_workers(config.workers, n)
    if workers == 1:
        chunks = [_collect_chunk(env_factory, net.spec, net.params(), config,
                                 config.seed, iteration, range(n))]
    else:
        params = net.clone_params()
        splits = [list(range(w, n, workers)) for w in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_collect_chunk, env_factory, net.spec, params,
                                   config, config.seed, iteration, s) for s in splits]
            chunks = [f.result() for f in futures]
    episodes: list[Episode | None] = [None] * n
    for chunk in chunks:
        for idx, ep in chunk:
            episodes[idx] = ep
    if counter is not None:
        for ep in episodes:
            counter.count_episode()
            for _ in range(len(ep)):
                counter.count_stage()
    return episodes


def compute_gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float
                ) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets for one finite episode.

    The terminal bootstrap value is zero; value targets are A + V.
    """
    t_len = len(rewards)
    next_values = np.append(values[1:], 0.0)
    not_done = np.append(np.ones(t_len - 1), 0.0) if t_len else np.zeros(0)
    deltas = rewards + gamma * next_values * not_done - values
    advantages = np.zeros(t_len)
    acc = 0.0
    for t in range(t_len - 1, -1, -1):
        acc = deltas[t] + gamma * lam * not_done[t] * acc
        advantages[t] = acc
    return advantages, advantages + values


def clipped_surrogate(ratio: float, advantage: float, eps: float) -> float:
    """PPO-clip objective for one transition: min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    return min(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


@dataclasses.dataclass
class _FlatBatch:
    maps: np.ndarray
    vectors: np.ndarray
    decision_masks: np.ndarray
    location_masks: np.ndarray
    decisions: np.ndarray
    locations: np.ndarray
    logprobs_old: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray
    episode_slices: list[np.ndarray]


def _flatten(episodes: list[Episode], config: PPOConfig) -> _FlatBatch:
    advantages, targets = [], []
    slices, start = [], 0
    for ep in episodes:
        a, tgt = compute_gae(ep.rewards, ep.values, config.gamma, config.gae_lambda)
        advantages.append(a)
        targets.append(tgt)
        slices.append(np.arange(start, start + len(ep)))
        start += len(ep)
    adv = np.concatenate(advantages)
    mean, std = adv.mean(), adv.std()
    adv = (adv - mean) / (std if std > 1e-12 else 1.0)
    return _FlatBatch(
        maps=np.concatenate([ep.maps for ep in episodes]),
        vectors=np.concatenate([ep.vectors for ep in episodes]),
        decision_masks=np.concatenate([ep.decision_masks for ep in episodes]),
        location_masks=np.concatenate([ep.location_masks for ep in episodes]),
        decisions=np.concatenate([ep.decisions for ep in episodes]),
        locations=np.concatenate([ep.locations for ep in episodes]),
        logprobs_old=np.concatenate([ep.logprobs for ep in episodes]),
        advantages=adv,
        value_targets=np.concatenate(targets),
        episode_slices=slices,
    )


def train_iteration(net: PolicyValueNet, adam: Adam, episodes: list[Episode],
                    config: PPOConfig, iteration: int) -> dict:
    """One PPO update: epochs of minibatch (grouped by episode) Adam steps."""
    batch = _flatten(episodes, config)
    rng = np.random.default_rng(_episode_seed(config.seed, iteration, 2**31 - 1))
    n_episodes = len(episodes)
    eps = config.clip_epsilon
    flag_always = config.location_logprob_always

    metric_sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
                   "clip_fraction": 0.0, "kl": 0.0}
    n_updates = 0
    ratio_first = None

    for epoch in range(config.epochs):
        order = rng.permutation(n_episodes)
        for start in range(0, n_episodes, config.minibatch_episodes):
            chosen = order[start:start + config.minibatch_episodes]
            idx = np.concatenate([batch.episode_slices[e] for e in chosen])
            n = idx.size

            out = net.forward(batch.maps[idx], batch.vectors[idx])
            ld = log_softmax(apply_mask(out.decision_logits, batch.decision_masks[idx]))
            lu = log_softmax(apply_mask(out.location_logits, batch.location_masks[idx]))
            rows = np.arange(n)
            d, u = batch.decisions[idx], batch.locations[idx]
            flag = np.ones(n) if flag_always else (d != DO_NOTHING).astype(float)
            logp_new = ld[rows, d] + flag * lu[rows, u]

            ratio = np.exp(logp_new - batch.logprobs_old[idx])
            adv = batch.advantages[idx]
            clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
            unclipped = ratio * adv
            surr = np.minimum(unclipped, clipped)
            if ratio_first is None:
                ratio_first = float(np.abs(ratio - 1.0).max()) if n else 0.0

            # d surr / d logp: the unclipped branch carries the gradient; where
            # the clipped branch is strictly smaller the clip is saturated and
            # the gradient is zero.
            active = unclipped <= clipped
            dsurr_dlogp = np.where(active, ratio * adv, 0.0)
            dlogp = -dsurr_dlogp / n  # from policy_loss = -mean(surr)

            pd, pu = np.exp(ld), np.exp(lu)
            onehot_d = np.zeros_like(pd)
            onehot_d[rows, d] = 1.0
            onehot_u = np.zeros_like(pu)
            onehot_u[rows, u] = 1.0
            d_dec = dlogp[:, None] * (onehot_d - pd)
            d_loc = (dlogp * flag)[:, None] * (onehot_u - pu)

            d_dec -= (config.entropy_coef / n) * entropy_grad(
                apply_mask(out.decision_logits, batch.decision_masks[idx]))
            d_loc -= (config.entropy_coef / n) * entropy_grad(
                apply_mask(out.location_logits, batch.location_masks[idx]))

            v_err = out.value - batch.value_targets[idx]
            d_val = 2.0 * config.value_coef * v_err / n

            net.backward(d_dec, d_loc, d_val)
            adam.step(net.grads())

            ent = entropy(apply_mask(out.decision_logits, batch.decision_masks[idx])) \
                + entropy(apply_mask(out.location_logits, batch.location_masks[idx]))
            metric_sums["policy_loss"] += float(-surr.mean())
            metric_sums["value_loss"] += float((v_err ** 2).mean())
            metric_sums["entropy"] += float(ent.mean())
            metric_sums["clip_fraction"] += float((np.abs(ratio - 1.0) > eps).mean())
            metric_sums["kl"] += float((batch.logprobs_old[idx] - logp_new).mean())
            n_updates += 1

    metrics = {k: v / n_updates for k, v in metric_sums.items()}
    npvs = np.array([ep.npv for ep in episodes])
    metrics.update(mean_npv=float(npvs.mean()), max_npv=float(npvs.max()),
                   ratio_first=ratio_first)
    if not np.isfinite(list(metrics.values())).all():
        raise NumericalError(f"non-finite training metrics: {metrics}")
    return metrics


CURVE_FIELDS = ["iteration", "mean_npv", "max_npv", "policy_loss", "value_loss",
                "entropy", "clip_fraction", "kl", "sims_total"]


def save_checkpoint(path, net: PolicyValueNet, adam: Adam, iteration: int,
                    sims_total: int) -> None:
    arrays = dict(net.params())
    arrays.update(adam.state_arrays())
    arrays["meta"] = np.array([iteration, sims_total], dtype=np.int64)
    save_blob(path, net.spec.spec_hash(), arrays)


def load_checkpoint(path, net: PolicyValueNet, adam: Adam | None = None) -> dict:
    arrays = load_blob(path, net.spec.spec_hash())
    net.set_params({k: arrays[k] for k in net.params()})
    if adam is not None:
        adam.load_state_arrays(arrays)
    meta = arrays["meta"]
    return {"iteration": int(meta[0]), "sims_total": int(meta[1])}


def train(env_factory, spec: NetworkSpec, config: PPOConfig, out_dir,
          counter: SimCounter | None = None, resume: bool = False,
          log=None) -> tuple[PolicyValueNet, list[dict]]:
    """Full training run: collect/update loop with CSV curve and checkpoints.

    Per-iteration seeds derive from (seed, iteration), so resuming from a
    checkpoint continues exactly as an uninterrupted run would.
    """
    os.makedirs(out_dir, exist_ok=True)
    counter = counter if counter is not None else SimCounter()
    net = PolicyValueNet(spec, seed=config.seed)
    adam = Adam(net.params(), lr=config.learning_rate)
    curve_path = os.path.join(out_dir, "learning_curve.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")

    start = 0
    rows: list[dict] = []
    if resume:
        meta = load_checkpoint(ckpt_path, net, adam)
        start = meta["iteration"]
        with open(curve_path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["iteration"]) <= start]

    with _InterruptFlag() as interrupted:
        for iteration in range(start, config.iterations):
            episodes = collect(net, env_factory, config, iteration, counter)
            metrics = train_iteration(net, adam, episodes, config, iteration)
            row = {
                "iteration": iteration + 1,
                "mean_npv": metrics["mean_npv"],
                "max_npv": metrics["max_npv"],
                "policy_loss": metrics["policy_loss"],
                "value_loss": metrics["value_loss"],
                "entropy": metrics["entropy"],
                "clip_fraction": metrics["clip_fraction"],
                "kl": metrics["kl"],
                "sims_total": counter.episodes,
            }
            rows.append(row)
            _write_curve(curve_path, rows)
            if (iteration + 1) % config.checkpoint_every == 0 \
                    or iteration + 1 == config.iterations or interrupted():
                save_checkpoint(ckpt_path, net, adam, iteration + 1, counter.episodes)
            if log is not None:
                log(f"iter {iteration + 1}/{config.iterations} "
                    f"mean_npv {row['mean_npv']:.4g} max_npv {row['max_npv']:.4g}")
            if interrupted():
                if log is not None:
                    log("interrupt received: checkpointed after finishing the iteration")
                break
    if config.iterations == 0 or start >= config.iterations:
        save_checkpoint(ckpt_path, net, adam, start, counter.episodes)
    return net, rows


class _InterruptFlag:
    """Turn SIGINT into a flag so an iteration can finish and checkpoint."""

    def __enter__(self):
        self._hit = False
        try:
            self._old = signal.signal(signal.SIGINT, self._handler)
        except ValueError:  # not the main thread; leave handling untouched
            self._old = None
        return lambda: self._hit

    def _handler(self, signum, frame):
        self._hit = True

    def __exit__(self, exc_type, exc, tb):
        # The interrupt was honored (iteration finished + checkpoint), so it
        # is not re-raised; training simply ends early.
        if self._old is not None:
            signal.signal(signal.SIGINT, self._old)
        return False


def _write_curve(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in CURVE_FIELDS})


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def greedy_rollout(env: FieldDevEnv, net: PolicyValueNet,
                   forced: dict[int, Action] | None = None):
    """Deterministic argmax rollout; optional per-stage action overrides.

    Returns (schedule, rewards, npv, counterfactual) where counterfactual
    maps each forced stage to the action the policy would have taken.
    """
    forced = forced or {}
    obs = env.reset()
    schedule: list[Action] = []
    rewards: list[float] = []
    counterfactual: dict[int, Action] = {}
    while not env.done:
        dmask, lmask = env.action_mask()
        out = net.forward(obs.maps, obs.vector)
        policy_action = greedy_action(out, dmask, lmask)
        stage = env.stage
        action = forced.get(stage, policy_action)
        if stage in forced:
            counterfactual[stage] = policy_action
        schedule.append(action)
        result = env.step(action)
        rewards.append(result.reward)
        obs = result.observation
    if env.counter is not None:
        env.counter.count_episode()
    return schedule, rewards, float(np.sum(rewards)), counterfactual
