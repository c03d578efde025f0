"""MAPPO training loop: centralized critic, decentralized actors.

During training one critic sees the full world state (true availabilities,
true queue lengths, and the whole age matrix) while each dispatcher's actor
sees only its own stale knowledge snapshot. All actors learn from the team
reward. Execution is fully decentralized: a trained policy acts from
snapshots alone.

Actors share one network by default, with a one-hot dispatcher id appended
to the observation; set ``parameter_sharing=False`` for per-dispatcher
networks. Both heads are conditioned on the pre-query observation: a query
issued this slot refreshes what the actor sees from the next slot on.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import EnvConfig, TrainConfig, config_as_dict
from .env import DispatchEnv, JointAction, KnowledgeSnapshot, WorldState
from .errors import ConfigError, ContractViolation
from .nn import Adam, DenseNet, PolicyHeads

CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# observation / state encodings


def snapshot_features(snapshot: KnowledgeSnapshot, config: EnvConfig) -> list[float]:
    """Per-server triple (seen availability, seen queue / capacity, capped
    normalized age), concatenated over servers."""
    cap = float(config.aoi_cap)
    out = []
    for k in range(config.n_servers):
        out.append(1.0 if snapshot.seen_available[k] else 0.0)
        out.append(snapshot.seen_queue[k] / config.queue_capacity[k])
        out.append(min(snapshot.aoi[k], config.aoi_cap) / cap)
    return out


def actor_obs_dim(config: EnvConfig, parameter_sharing: bool) -> int:
    return 3 * config.n_servers + (config.n_dispatchers if parameter_sharing else 0)


def critic_state_dim(config: EnvConfig) -> int:
    return 2 * config.n_servers + config.n_dispatchers * config.n_servers


def encode_actor_batch(
    snapshots: Sequence[KnowledgeSnapshot], config: EnvConfig, parameter_sharing: bool
) -> np.ndarray:
    """(n_dispatchers, obs_dim) actor inputs, one row per dispatcher."""
    n = config.n_dispatchers
    rows = []
    for i, snap in enumerate(snapshots):
        feats = snapshot_features(snap, config)
        if parameter_sharing:
            one_hot = [0.0] * n
            one_hot[i] = 1.0
            feats.extend(one_hot)
        rows.append(feats)
    return np.asarray(rows, dtype=np.float64)


def encode_critic_state(world: WorldState, config: EnvConfig) -> np.ndarray:
    """Full-state critic input: true availabilities, true normalized queue
    lengths, and the normalized age matrix of every dispatcher."""
    cap = float(config.aoi_cap)
    feats = [1.0 if s.available else 0.0 for s in world.servers]
    feats.extend(
        len(s.queue) / q for s, q in zip(world.servers, config.queue_capacity)
    )
    for snap in world.knowledge:
        feats.extend(min(a, config.aoi_cap) / cap for a in snap.aoi)
    return np.asarray(feats, dtype=np.float64)


def to_joint_action(bits: np.ndarray, dispatch: np.ndarray) -> JointAction:
    return JointAction(
        queries=tuple(tuple(bool(b) for b in row) for row in bits),
        dispatch=tuple(None if d < 0 else int(d) for d in dispatch),
    )


def refresh_encoded_obs(obs: np.ndarray, responses, config: EnvConfig) -> np.ndarray:
    """Encoded observations with queried entries replaced by this slot's
    responses (age encoded as 0: fresher than any stored knowledge)."""
    out = obs.copy()
    for r in responses:
        base = 3 * r.server
        out[r.dispatcher, base] = 1.0 if r.available else 0.0
        out[r.dispatcher, base + 1] = r.queue_length / config.queue_capacity[r.server]
        out[r.dispatcher, base + 2] = 0.0
    return out


# ---------------------------------------------------------------------------
# actor container


class ActorGroup:
    """The dispatcher policies: one shared net or one net per dispatcher."""

    def __init__(self, env_config: EnvConfig, train_config: TrainConfig, rng: np.random.Generator):
        self.env_config = env_config
        self.shared = train_config.parameter_sharing
        self.obs_dim = actor_obs_dim(env_config, self.shared)
        out_dim = 2 * env_config.n_servers
        sizes = (self.obs_dim, *train_config.hidden_sizes, out_dim)
        count = 1 if self.shared else env_config.n_dispatchers
        self.nets = [DenseNet(sizes, rng, out_gain=0.01) for _ in range(count)]

    def heads(self, obs: np.ndarray) -> PolicyHeads:
        """Distribution over actions for a (n_dispatchers, obs_dim) batch."""
        k = self.env_config.n_servers
        if self.shared:
            return PolicyHeads(self.nets[0].forward(obs), k)
        logits = np.vstack([net.forward(obs[i : i + 1]) for i, net in enumerate(self.nets)])
        return PolicyHeads(logits, k)

    def net_for_agent(self, agent: int) -> DenseNet:
        return self.nets[0] if self.shared else self.nets[agent]


class MappoPolicy:
    """Decentralized execution of trained actors (the critic is not used)."""

    def __init__(
        self,
        actors: ActorGroup,
        env_config: EnvConfig,
        greedy: bool = True,
        two_phase: bool = False,
    ):
        self.actors = actors
        self.env_config = env_config
        self.greedy = greedy
        self.two_phase = two_phase
        self.name = "mappo"
        self._rng = np.random.default_rng(0)

    def begin_episode(self, rng: np.random.Generator) -> None:
        self._rng = rng

    def act(self, env: DispatchEnv) -> JointAction:
        cfg = env.config
        if cfg.n_dispatchers != self.env_config.n_dispatchers or cfg.n_servers != self.env_config.n_servers:
            raise ConfigError(
                "environment dimensions do not match the dimensions this policy was trained for"
            )
        snaps = [env.observe(n) for n in range(cfg.n_dispatchers)]
        obs = encode_actor_batch(snaps, cfg, self.actors.shared)
        heads = self.actors.heads(obs)
        if not self.two_phase:
            if self.greedy:
                bits, disp = heads.greedy(env.arrivals)
            else:
                bits, disp = heads.sample(self._rng, env.arrivals)
            return to_joint_action(bits, disp)
        bits = heads.greedy_queries() if self.greedy else heads.sample_queries(self._rng)
        responses = env.process_queries([[bool(b) for b in row] for row in bits])
        heads2 = self.actors.heads(refresh_encoded_obs(obs, responses, cfg))
        if self.greedy:
            disp = heads2.greedy_dispatch(env.arrivals)
        else:
            disp = heads2.sample_dispatch(self._rng, env.arrivals)
        return to_joint_action(bits, disp)


# ---------------------------------------------------------------------------
# rollouts and advantage estimation


@dataclass
class RolloutBuffer:
    """One rollout of trajectories for a MAPPO update.

    Per slot: critic state, team reward, critic value. Per slot and
    dispatcher: encoded observation, sampled action, behavior log-prob.
    Episode truncations inside the rollout carry their own bootstrap values;
    ``bootstrap_value`` bootstraps the final slot. Advantages and return
    targets are filled in by :func:`compute_gae`.
    """

    actor_obs: np.ndarray
    query_bits: np.ndarray
    dispatch: np.ndarray
    log_probs: np.ndarray
    states: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    episode_ends: np.ndarray
    end_values: dict[int, float] = field(default_factory=dict)
    bootstrap_value: Optional[float] = None
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    # two-phase policies: the observation the dispatch head conditioned on
    # (pre-query observation refreshed with the slot's query responses)
    actor_obs_refreshed: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_agents(self) -> int:
        return self.actor_obs.shape[1]


class ValueNormalizer:
    """Debiased exponential moving estimate of return mean/std.

    Return targets scale like reward/(1-discount), far from the critic's
    unit-scale initialization; training the critic in normalized space keeps
    one learning rate workable across configs. Before the first update the
    transform is the identity.
    """

    def __init__(self, rate: float = 0.99):
        self.rate = rate
        self.mean = 0.0
        self.sq = 0.0
        self.weight = 0.0

    def update(self, targets: np.ndarray) -> None:
        self.mean = self.rate * self.mean + (1.0 - self.rate) * float(np.mean(targets))
        self.sq = self.rate * self.sq + (1.0 - self.rate) * float(np.mean(targets**2))
        self.weight = self.rate * self.weight + (1.0 - self.rate)

    def _stats(self) -> tuple[float, float]:
        if self.weight == 0.0:
            return 0.0, 1.0
        mean = self.mean / self.weight
        var = max(self.sq / self.weight - mean * mean, 1e-8)
        return mean, float(np.sqrt(var))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        mean, std = self._stats()
        return (x - mean) / std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        mean, std = self._stats()
        return mean + std * x

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}stats": np.array([self.mean, self.sq, self.weight, self.rate])}

    def load_state_arrays(self, prefix: str, arrays) -> None:
        self.mean, self.sq, self.weight, self.rate = (float(v) for v in arrays[f"{prefix}stats"])


def _critic_values(critic: DenseNet, states: np.ndarray, normalizer: Optional[ValueNormalizer]) -> np.ndarray:
    raw = critic.forward(states)[:, 0]
    return normalizer.denormalize(raw) if normalizer is not None else raw


def collect_rollout(
    env: DispatchEnv,
    actors: ActorGroup,
    critic: DenseNet,
    train_config: TrainConfig,
    rng: np.random.Generator,
    normalizer: Optional[ValueNormalizer] = None,
) -> RolloutBuffer:
    """Run the envs for ``rollout_length`` slots, sampling from the actors.

    Episodes that hit the horizon inside the rollout are bootstrapped with
    the critic's value of the truncated state and the env is reset in place.
    """
    cfg = env.config
    two_phase = train_config.two_phase_policy
    length, n, k = train_config.rollout_length, cfg.n_dispatchers, cfg.n_servers
    actor_obs = np.empty((length, n, actors.obs_dim))
    actor_obs_refreshed = np.empty((length, n, actors.obs_dim)) if two_phase else None
    query_bits = np.empty((length, n, k), dtype=np.int8)
    dispatch = np.empty((length, n), dtype=np.int64)
    log_probs = np.empty((length, n))
    states = np.empty((length, critic_state_dim(cfg)))
    rewards = np.empty(length)
    episode_ends = np.zeros(length, dtype=bool)
    end_states: list[tuple[int, np.ndarray]] = []

    for t in range(length):
        snaps = [env.observe(i) for i in range(n)]
        obs = encode_actor_batch(snaps, cfg, actors.shared)
        state = encode_critic_state(env.world, cfg)
        heads = actors.heads(obs)
        arrivals = list(env.arrivals)
        if two_phase:
            bits = heads.sample_queries(rng)
            responses = env.process_queries([[bool(b) for b in row] for row in bits])
            obs2 = refresh_encoded_obs(obs, responses, cfg)
            heads2 = actors.heads(obs2)
            disp = heads2.sample_dispatch(rng, arrivals)
            lp = heads.log_prob_queries(bits) + heads2.log_prob_dispatch(disp)
            actor_obs_refreshed[t] = obs2
        else:
            bits, disp = heads.sample(rng, arrivals)
            lp = heads.log_prob(bits, disp)
        outcome = env.step(to_joint_action(bits, disp))

        actor_obs[t] = obs
        query_bits[t] = bits
        dispatch[t] = disp
        log_probs[t] = lp
        states[t] = state
        rewards[t] = outcome.team_reward
        if env.done:
            episode_ends[t] = True
            end_states.append((t, encode_critic_state(env.world, cfg)))
            env.reset()

    tail = encode_critic_state(env.world, cfg)
    extra = np.vstack([s for _, s in end_states] + [tail])
    all_values = _critic_values(critic, np.vstack([states, extra]), normalizer)
    values = all_values[:length]
    end_values = {
        t: float(v) for (t, _), v in zip(end_states, all_values[length:])
    }
    bootstrap = float(all_values[-1])

    return RolloutBuffer(
        actor_obs=actor_obs,
        query_bits=query_bits,
        dispatch=dispatch,
        log_probs=log_probs,
        states=states,
        rewards=rewards,
        values=values,
        episode_ends=episode_ends,
        end_values=end_values,
        bootstrap_value=bootstrap,
        actor_obs_refreshed=actor_obs_refreshed,
    )


def compute_gae(
    buffer: RolloutBuffer, discount: float, gae_lambda: float
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and return targets for a rollout.

    One-step TD errors ``reward + discount * V(next) - V(current)`` are
    accumulated backwards with weight ``discount * gae_lambda``, restarting
    at episode boundaries; return targets are advantages plus values. With
    ``gae_lambda=0`` this reduces to the one-step advantage, with
    ``gae_lambda=1`` to discounted reward sums around the value baseline.
    """
    if buffer.bootstrap_value is None:
        raise ContractViolation("rollout buffer is missing its terminal bootstrap value")
    length = buffer.length
    next_values = np.empty(length)
    for t in range(length):
        if buffer.episode_ends[t]:
            if t not in buffer.end_values:
                raise ContractViolation(f"episode boundary at slot {t} has no bootstrap value")
            next_values[t] = buffer.end_values[t]
        elif t + 1 < length:
            next_values[t] = buffer.values[t + 1]
        else:
            next_values[t] = buffer.bootstrap_value

    advantages = np.empty(length)
    carry = 0.0
    for t in range(length - 1, -1, -1):
        delta = buffer.rewards[t] + discount * next_values[t] - buffer.values[t]
        if buffer.episode_ends[t]:
            carry = 0.0
        carry = delta + discount * gae_lambda * carry
        advantages[t] = carry
    returns = advantages + buffer.values
    buffer.advantages = advantages
    buffer.returns = returns
    return advantages, returns


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class SurrogateResult:
    objective: float
    mean_ratio: float
    clip_fraction: float
    n_excluded: int


def clipped_surrogate(
    new_log_probs: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    clip_epsilon: float,
) -> SurrogateResult:
    """Clipped-ratio policy objective (to be maximized).

    Per sample the contribution is ``min(ratio * adv, clip(ratio) * adv)``
    with the ratio of new to old action probability. Samples with a
    non-finite ratio are excluded and counted.
    """
    new_log_probs = np.asarray(new_log_probs, dtype=np.float64)
    old_log_probs = np.asarray(old_log_probs, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    if not new_log_probs.shape == old_log_probs.shape == advantages.shape:
        raise ValueError("log-prob and advantage vectors must have identical shapes")
    with np.errstate(over="ignore"):  # overflow -> inf -> excluded below
        ratio = np.exp(new_log_probs - old_log_probs)
    finite = np.isfinite(ratio)
    n_excluded = int((~finite).sum())
    safe_ratio = np.where(finite, ratio, 1.0)
    unclipped = safe_ratio * advantages
    clipped = np.clip(safe_ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantages
    per_sample = np.where(finite, np.minimum(unclipped, clipped), 0.0)
    n_used = max(int(finite.sum()), 1)
    objective = float(per_sample.sum() / n_used)
    mean_ratio = float(safe_ratio[finite].mean()) if finite.any() else float("nan")
    clip_fraction = float((np.abs(safe_ratio - 1.0) > clip_epsilon)[finite].mean()) if finite.any() else 0.0
    return SurrogateResult(objective, mean_ratio, clip_fraction, n_excluded)


def value_loss(values: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared error between predicted values and return targets."""
    values = np.asarray(values, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if values.shape != targets.shape:
        raise ValueError("values and targets must have identical shapes")
    return float(np.mean((values - targets) ** 2))


def total_loss(
    policy_term: float,
    value_term: float,
    entropy_term: float,
    value_coef: float,
    entropy_coef: float,
) -> float:
    """Scalar training loss: minimizing it maximizes the policy objective and
    the entropy bonus while fitting the critic."""
    return -policy_term + value_coef * value_term - entropy_coef * entropy_term


# ---------------------------------------------------------------------------
# the update


@dataclass
class UpdateStats:
    surrogate: float
    value_loss: float
    entropy: float
    mean_ratio: float
    clip_fraction: float
    first_minibatch_mean_ratio: float
    aborted_minibatches: int
    adv_mean: float
    adv_std: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    """Standardize one update batch of advantages to mean 0, std 1."""
    advantages = np.asarray(advantages, dtype=np.float64)
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def _minibatch_slices(n: int, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    count = min(count, n)
    return [chunk for chunk in np.array_split(perm, count) if chunk.size]


def mappo_update(
    buffer: RolloutBuffer,
    actors: ActorGroup,
    critic: DenseNet,
    train_config: TrainConfig,
    actor_opts: Sequence[Adam],
    critic_opt: Adam,
    rng: np.random.Generator,
    normalizer: Optional[ValueNormalizer] = None,
) -> UpdateStats:
    """One MAPPO update: several epochs of shuffled minibatches.

    Actors minimize the negated clipped surrogate minus the entropy bonus on
    their own observation/action samples (every agent sees the shared team
    advantage); the critic fits the return targets on full-state inputs. A
    minibatch whose loss or gradients go non-finite is skipped and counted.
    """
    if buffer.advantages is None or buffer.returns is None:
        raise ContractViolation("compute_gae must run before mappo_update")
    cfg = train_config
    two_phase = cfg.two_phase_policy
    if two_phase and buffer.actor_obs_refreshed is None:
        raise ContractViolation("two-phase update needs the refreshed observations in the buffer")
    length, n_agents = buffer.length, buffer.n_agents
    k = actors.env_config.n_servers

    adv = buffer.advantages
    adv_mean, adv_std = float(adv.mean()), float(adv.std())
    if cfg.normalize_advantages:
        adv = normalize_advantages(adv)

    flat_obs = buffer.actor_obs.reshape(length * n_agents, -1)
    flat_obs2 = (
        buffer.actor_obs_refreshed.reshape(length * n_agents, -1) if two_phase else None
    )
    flat_bits = buffer.query_bits.reshape(length * n_agents, k)
    flat_disp = buffer.dispatch.reshape(length * n_agents)
    flat_old_lp = buffer.log_probs.reshape(length * n_agents)
    flat_adv = np.repeat(adv, n_agents)

    if actors.shared:
        groups = [(actors.nets[0], actor_opts[0], np.arange(length * n_agents))]
    else:
        groups = [
            (actors.nets[a], actor_opts[a], np.arange(a, length * n_agents, n_agents))
            for a in range(n_agents)
        ]

    targets = buffer.returns
    if normalizer is not None:
        normalizer.update(targets)
        targets = normalizer.normalize(targets)

    surrogates, vlosses, entropies, ratios, clipfracs = [], [], [], [], []
    first_ratio: Optional[float] = None
    aborted = 0

    for _ in range(cfg.epochs_per_update):
        for net, opt, pool in groups:
            for mb in _minibatch_slices(pool.size, cfg.minibatch_count, rng):
                idx = pool[mb]
                bits, disp = flat_bits[idx], flat_disp[idx]
                has_disp = disp >= 0
                if two_phase:
                    heads_u = PolicyHeads(net.forward(flat_obs2[idx]), k)
                    heads_q = PolicyHeads(net.forward(flat_obs[idx]), k)  # cache: phase 1
                    new_lp = heads_q.log_prob_queries(bits) + heads_u.log_prob_dispatch(disp)
                    entropy = heads_q.entropy_queries() + heads_u.entropy_dispatch(has_disp)
                else:
                    heads = PolicyHeads(net.forward(flat_obs[idx]), k)
                    new_lp = heads.log_prob(bits, disp)
                    entropy = heads.entropy(has_disp)
                surr = clipped_surrogate(new_lp, flat_old_lp[idx], flat_adv[idx], cfg.clip_epsilon)
                ent_mean = float(entropy.mean())
                if first_ratio is None:
                    first_ratio = surr.mean_ratio
                if not np.isfinite(surr.objective) or not np.isfinite(ent_mean):
                    aborted += 1
                    continue

                batch = idx.size
                with np.errstate(over="ignore"):
                    ratio = np.exp(new_lp - flat_old_lp[idx])
                finite = np.isfinite(ratio)
                safe_ratio = np.where(finite, ratio, 0.0)
                unclipped = safe_ratio * flat_adv[idx]
                clipped = np.clip(safe_ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * flat_adv[idx]
                active = (unclipped <= clipped) & finite
                n_used = max(int(finite.sum()), 1)
                coeff = np.where(active, safe_ratio * flat_adv[idx], 0.0) / n_used
                if two_phase:
                    # phase-1 cache is live: backprop the query-head terms,
                    # then rerun phase 2 and backprop the dispatch-head terms
                    g_q = (
                        -coeff[:, None] * heads_q.grad_log_prob_queries(bits)
                        - (cfg.entropy_coef / batch) * heads_q.grad_entropy_queries()
                    )
                    grads = net.backward(g_q)
                    net.forward(flat_obs2[idx])
                    g_u = (
                        -coeff[:, None] * heads_u.grad_log_prob_dispatch(disp)
                        - (cfg.entropy_coef / batch) * heads_u.grad_entropy_dispatch(has_disp)
                    )
                    grads = [a + b for a, b in zip(grads, net.backward(g_u))]
                else:
                    dlogits = (
                        -coeff[:, None] * heads.grad_log_prob(bits, disp)
                        - (cfg.entropy_coef / batch) * heads.grad_entropy(has_disp)
                    )
                    grads = net.backward(dlogits)
                if not opt.step(net.params, grads):
                    aborted += 1
                    continue
                surrogates.append(surr.objective)
                entropies.append(ent_mean)
                ratios.append(surr.mean_ratio)
                clipfracs.append(surr.clip_fraction)

        for mb in _minibatch_slices(length, cfg.minibatch_count, rng):
            pred = critic.forward(buffer.states[mb])[:, 0]
            vloss = value_loss(pred, targets[mb])
            if not np.isfinite(vloss):
                aborted += 1
                continue
            dpred = cfg.value_coef * 2.0 * (pred - targets[mb]) / mb.size
            if not critic_opt.step(critic.params, critic.backward(dpred[:, None])):
                aborted += 1
                continue
            vlosses.append(vloss)

    def _mean(xs: list[float]) -> float:
        return float(np.mean(xs)) if xs else float("nan")

    return UpdateStats(
        surrogate=_mean(surrogates),
        value_loss=_mean(vlosses),
        entropy=_mean(entropies),
        mean_ratio=_mean(ratios),
        clip_fraction=_mean(clipfracs),
        first_minibatch_mean_ratio=first_ratio if first_ratio is not None else float("nan"),
        aborted_minibatches=aborted,
        adv_mean=adv_mean,
        adv_std=adv_std,
    )


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalStats:
    """Decentralized evaluation metrics, averaged per slot.

    ``reward_per_slot`` is the team reward (sum over dispatchers) averaged
    over every slot of every episode; it equals
    ``throughput_per_slot - query_cost * queries_per_slot`` exactly.
    """

    episodes: int
    slots: int
    reward_per_slot: float
    throughput_per_slot: float
    queries_per_slot: float
    drops_per_slot: float
    episode_rewards: tuple[float, ...]

    @property
    def reward_se(self) -> float:
        """Standard error of the per-episode reward means."""
        if self.episodes < 2:
            return 0.0
        return float(np.std(self.episode_rewards, ddof=1) / np.sqrt(self.episodes))


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(parts)).generate_state(1, np.uint64)[0])


def evaluate(policy, env_config: EnvConfig, episodes: int, seed: int) -> EvalStats:
    """Run full decentralized episodes and average the team reward per slot.

    Works for any policy exposing ``begin_episode(rng)`` and ``act(env)``;
    the critic plays no role here. Episode seeds derive from ``seed`` so a
    rerun reproduces results exactly.
    """
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    beta = env_config.query_cost
    total_acks = total_naks = total_queries = 0
    episode_rewards = []
    for ep in range(episodes):
        env = DispatchEnv(replace(env_config, seed=_derived_seed(seed, ep, 0)))
        policy.begin_episode(np.random.default_rng(np.random.SeedSequence((seed, ep, 1))))
        acks = naks = queries = 0
        for _ in range(env_config.horizon):
            outcome = env.step(policy.act(env))
            acks += sum(outcome.completions)
            naks += sum(outcome.drops)
            queries += sum(outcome.queries_issued)
        total_acks += acks
        total_naks += naks
        total_queries += queries
        episode_rewards.append((acks - beta * queries) / env_config.horizon)
    slots = episodes * env_config.horizon
    return EvalStats(
        episodes=episodes,
        slots=slots,
        reward_per_slot=(total_acks - beta * total_queries) / slots,
        throughput_per_slot=total_acks / slots,
        queries_per_slot=total_queries / slots,
        drops_per_slot=total_naks / slots,
        episode_rewards=tuple(episode_rewards),
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: str | Path,
    actors: ActorGroup,
    critic: DenseNet,
    env_config: EnvConfig,
    train_config: TrainConfig,
    update_index: int,
    seed: int,
    actor_opts: Optional[Sequence[Adam]] = None,
    critic_opt: Optional[Adam] = None,
    normalizer: Optional[ValueNormalizer] = None,
) -> Path:
    """Versioned binary dump of networks, optimizer state, and configs."""
    path = Path(path)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "env_config": config_as_dict(env_config),
        "train_config": config_as_dict(train_config),
        "update_index": update_index,
        "seed": seed,
        "n_actor_nets": len(actors.nets),
        "actor_layer_sizes": list(actors.nets[0].layer_sizes),
        "critic_layer_sizes": list(critic.layer_sizes),
        "has_optimizer": actor_opts is not None and critic_opt is not None,
        "has_normalizer": normalizer is not None,
    }
    arrays: dict[str, np.ndarray] = {}
    for i, net in enumerate(actors.nets):
        arrays.update(net.state_arrays(f"actor{i}_"))
    arrays.update(critic.state_arrays("critic_"))
    if actor_opts is not None and critic_opt is not None:
        for i, opt in enumerate(actor_opts):
            arrays.update(opt.state_arrays(f"actor{i}_opt_"))
        arrays.update(critic_opt.state_arrays("critic_opt_"))
    if normalizer is not None:
        arrays.update(normalizer.state_arrays("vnorm_"))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return path


@dataclass
class CheckpointBundle:
    env_config: EnvConfig
    train_config: TrainConfig
    update_index: int
    seed: int
    actors: ActorGroup
    critic: DenseNet
    actor_opts: Optional[list[Adam]]
    critic_opt: Optional[Adam]
    normalizer: Optional[ValueNormalizer]


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    with np.load(path) as data:
        arrays = {key: data[key] for key in data.files}
    meta = json.loads(bytes(arrays.pop("meta")).decode())
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"checkpoint {path} has format version {meta.get('format_version')}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    env_config = EnvConfig(**meta["env_config"])
    train_config = TrainConfig(**meta["train_config"])
    rng = np.random.default_rng(0)
    actors = ActorGroup(env_config, train_config, rng)
    for i, net in enumerate(actors.nets):
        net.load_state_arrays(f"actor{i}_", arrays)
    critic = DenseNet(tuple(meta["critic_layer_sizes"]), rng)
    critic.load_state_arrays("critic_", arrays)
    actor_opts = critic_opt = None
    if meta.get("has_optimizer"):
        actor_opts = []
        for i, net in enumerate(actors.nets):
            opt = Adam(net.params, train_config.learning_rate, max_grad_norm=train_config.max_grad_norm)
            opt.load_state_arrays(f"actor{i}_opt_", arrays)
            actor_opts.append(opt)
        critic_opt = Adam(critic.params, train_config.learning_rate, max_grad_norm=train_config.max_grad_norm)
        critic_opt.load_state_arrays("critic_opt_", arrays)
    normalizer = None
    if meta.get("has_normalizer"):
        normalizer = ValueNormalizer()
        normalizer.load_state_arrays("vnorm_", arrays)
    return CheckpointBundle(
        env_config=env_config,
        train_config=train_config,
        update_index=int(meta["update_index"]),
        seed=int(meta["seed"]),
        actors=actors,
        critic=critic,
        actor_opts=actor_opts,
        critic_opt=critic_opt,
        normalizer=normalizer,
    )


def load_policy(path: str | Path, greedy: bool = True) -> tuple[MappoPolicy, EnvConfig]:
    """Evaluation-only load: actors plus the env config they were trained on."""
    bundle = load_checkpoint(path)
    policy = MappoPolicy(
        bundle.actors,
        bundle.env_config,
        greedy=greedy,
        two_phase=bundle.train_config.two_phase_policy,
    )
    return policy, bundle.env_config


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns the training state and runs the update loop.

    Emits one JSON line per update when given a progress path and writes a
    checkpoint every ``eval_interval`` updates plus a final one. Resuming
    restores networks, optimizers, and the value normalizer; environment
    episodes restart fresh (the world itself is not serialized).
    """

    def __init__(
        self,
        env_config: EnvConfig,
        train_config: TrainConfig,
        seed: int = 0,
        out_dir: Optional[str | Path] = None,
    ):
        self.env_config = env_config
        self.train_config = train_config
        self.seed = seed
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.update_index = 0

        init_rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
        self.actors = ActorGroup(env_config, train_config, init_rng)
        critic_sizes = (critic_state_dim(env_config), *train_config.hidden_sizes, 1)
        self.critic = DenseNet(critic_sizes, init_rng, out_gain=1.0)
        self._check_dimensions()

        lr, clip = train_config.learning_rate, train_config.max_grad_norm
        self.actor_opts = [Adam(net.params, lr, max_grad_norm=clip) for net in self.actors.nets]
        self.critic_opt = Adam(self.critic.params, lr, max_grad_norm=clip)
        self.normalizer = ValueNormalizer() if train_config.normalize_values else None

        self.env = DispatchEnv(replace(env_config, seed=_derived_seed(seed, 0)))
        self._sample_rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
        self._shuffle_rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
        self._eval_seed = _derived_seed(seed, 4)
        self.history: list[dict] = []

    def _check_dimensions(self) -> None:
        expected_actor = actor_obs_dim(self.env_config, self.train_config.parameter_sharing)
        expected_critic = critic_state_dim(self.env_config)
        if self.actors.nets[0].layer_sizes[0] != expected_actor:
            raise ConfigError(
                f"actor input size {self.actors.nets[0].layer_sizes[0]} != "
                f"local observation size {expected_actor}"
            )
        if self.critic.layer_sizes[0] != expected_critic:
            raise ConfigError(
                f"critic input size {self.critic.layer_sizes[0]} != full state size {expected_critic}"
            )

    @classmethod
    def from_checkpoint(
        cls, path: str | Path, out_dir: Optional[str | Path] = None
    ) -> "Trainer":
        bundle = load_checkpoint(path)
        if bundle.actor_opts is None or bundle.critic_opt is None:
            raise ConfigError(f"checkpoint {path} has no optimizer state; cannot resume")
        trainer = cls(bundle.env_config, bundle.train_config, seed=bundle.seed, out_dir=out_dir)
        trainer.actors = bundle.actors
        trainer.critic = bundle.critic
        trainer.actor_opts = bundle.actor_opts
        trainer.critic_opt = bundle.critic_opt
        trainer.normalizer = bundle.normalizer
        trainer.update_index = bundle.update_index
        return trainer

    def policy(self, greedy: Optional[bool] = None) -> MappoPolicy:
        if greedy is None:
            greedy = self.train_config.greedy_eval
        return MappoPolicy(
            self.actors,
            self.env_config,
            greedy=greedy,
            two_phase=self.train_config.two_phase_policy,
        )

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(
            path,
            self.actors,
            self.critic,
            self.env_config,
            self.train_config,
            self.update_index,
            self.seed,
            actor_opts=self.actor_opts,
            critic_opt=self.critic_opt,
            normalizer=self.normalizer,
        )

    def run_update(self) -> UpdateStats:
        buffer = collect_rollout(
            self.env, self.actors, self.critic, self.train_config, self._sample_rng, self.normalizer
        )
        compute_gae(buffer, self.train_config.discount, self.train_config.gae_lambda)
        stats = mappo_update(
            buffer,
            self.actors,
            self.critic,
            self.train_config,
            self.actor_opts,
            self.critic_opt,
            self._shuffle_rng,
            self.normalizer,
        )
        self.update_index += 1
        return stats

    def train(
        self,
        n_updates: Optional[int] = None,
        progress_path: Optional[str | Path] = None,
        log: Optional[Callable[[str], None]] = None,
        on_record: Optional[Callable[[dict], None]] = None,
    ) -> list[dict]:
        """Run updates until ``total_updates``; returns per-update records."""
        cfg = self.train_config
        target = self.update_index + n_updates if n_updates is not None else cfg.total_updates
        progress_fh = None
        if progress_path is not None:
            Path(progress_path).parent.mkdir(parents=True, exist_ok=True)
            progress_fh = open(progress_path, "a")
        try:
            while self.update_index < target:
                start = time.perf_counter()
                stats = self.run_update()
                record = {"update": self.update_index, **stats.as_dict()}
                record["seconds"] = round(time.perf_counter() - start, 4)
                if self.update_index % cfg.eval_interval == 0 or self.update_index == target:
                    eval_stats = evaluate(
                        self.policy(), self.env_config, cfg.eval_episodes, self._eval_seed
                    )
                    record["eval_reward_per_slot"] = eval_stats.reward_per_slot
                    record["eval_queries_per_slot"] = eval_stats.queries_per_slot
                    if self.out_dir is not None:
                        self.save(self.out_dir / f"checkpoint_{self.update_index:06d}.npz")
                self.history.append(record)
                if progress_fh is not None:
                    progress_fh.write(json.dumps(record, sort_keys=True) + "\n")
                    progress_fh.flush()
                if on_record is not None:
                    on_record(record)
                if log is not None:
                    log(
                        f"update {record['update']}: surrogate={stats.surrogate:.4f} "
                        f"value_loss={stats.value_loss:.4f} entropy={stats.entropy:.3f}"
                        + (
                            f" eval_reward={record['eval_reward_per_slot']:.4f}"
                            if "eval_reward_per_slot" in record
                            else ""
                        )
                    )
            if self.out_dir is not None:
                self.save(self.out_dir / "checkpoint_final.npz")
        finally:
            if progress_fh is not None:
                progress_fh.close()
        return self.history
