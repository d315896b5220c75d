"""Federated reward learning and multi-objective PPO alignment.

Two reward models per client (helpfulness, harmlessness) are trained with a
pairwise Bradley-Terry loss on locally generated preference data, then
federated by full-parameter averaging. Alignment freezes the reward models,
derives a critic per objective from them, and runs clipped-surrogate PPO
where each client's advantages come from its own linear blend of the two
reward/value streams. The stop token counts as an action, so terminal
rewards land on the step that ended the response.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import fed as F
from . import model as M
from . import tasks as T
from .errors import ConfigError, PhaseOrderError
from .optim import Adam

OBJECTIVES = ("helpful", "harmless")


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    gamma: float = 1.0
    gae_lambda: float = 0.95
    kl_coeff: float = 0.02
    rollout_batch: int = 16
    ppo_epochs: int = 4
    lr_policy: float = 1e-3
    lr_critic: float = 1e-3
    rollout_temperature: float = 1.0
    max_new: int = 8
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must be in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gae_lambda must be in [0, 1]")
        if self.kl_coeff < 0:
            raise ConfigError("kl_coeff must be >= 0")


# ---------------------------------------------------------------------------
# reward learning
# ---------------------------------------------------------------------------


def preference_loss(rm: M.ScoringModel, pair: T.PreferencePair) -> ad.Tensor:
    """Bradley-Terry: -log sigmoid(score(chosen) - score(rejected))."""
    return preference_loss_batch(rm, [pair])


def preference_loss_batch(rm: M.ScoringModel, pairs: list[T.PreferencePair]) -> ad.Tensor:
    seqs = [list(p.prompt) + list(p.chosen) for p in pairs] + \
           [list(p.prompt) + list(p.rejected) for p in pairs]
    scores = rm.scores(seqs)
    n = len(pairs)
    chosen = ad.take_rows(scores, np.arange(n, dtype=np.intp))
    rejected = ad.take_rows(scores, np.arange(n, 2 * n, dtype=np.intp))
    gap = ad.sub(chosen, rejected)
    return ad.mean(ad.softplus(ad.neg(gap)))


def ranking_accuracy(rm: M.ScoringModel, pairs: list[T.PreferencePair]) -> float:
    """Fraction of pairs where the chosen response outscores the rejected one."""
    if not pairs:
        return math.nan
    with ad.no_grad():
        seqs = [list(p.prompt) + list(p.chosen) for p in pairs] + \
               [list(p.prompt) + list(p.rejected) for p in pairs]
        s = rm.scores(seqs).data[:, 0]
    n = len(pairs)
    return float(np.mean(s[:n] > s[n:]))


def setup_reward_models(clients: list[F.ClientState], cfg: M.ScorerConfig, seed: int) -> None:
    """Give every client an identically initialized reward model pair."""
    for c in clients:
        c.reward_models = {
            "helpful": M.ScoringModel(cfg, seed=F.derive_seed(seed, "rm", "helpful"), group="reward_head"),
            "harmless": M.ScoringModel(cfg, seed=F.derive_seed(seed, "rm", "harmless"), group="reward_head"),
        }


def generate_client_preferences(client: F.ClientState, n_pairs: int, objectives: tuple[str, ...],
                                policy: T.VocabPolicy, seed: int, temperature: float = 1.2,
                                max_new: int = 8,
                                min_gap: dict[str, float] | float = 0.1,
                                retry_budget: int = 12) -> None:
    """Sample preference pairs from the client's own policy on its own shard.

    ``min_gap`` may be per-objective: harmless score gaps are quantized by
    response length, so they need a lower tie threshold than helpful gaps.
    """
    sampler = M.Sampler("temperature", temperature=temperature)
    for obj in objectives:
        gap = min_gap[obj] if isinstance(min_gap, dict) else min_gap
        client.preferences[obj] = T.gen_preferences(
            client.model, client.shard, n_pairs, obj, sampler,
            F.derive_seed(seed, "pref", obj, client.id), policy,
            max_new=max_new, min_gap=gap, retry_budget=retry_budget)


def _reward_objectives(strategy: F.Strategy) -> tuple[str, ...]:
    return ("helpful",) if strategy.reward_mode == "single_helpful" else OBJECTIVES


def run_reward_phase(clients: list[F.ClientState], server: F.Server, strategy: F.Strategy,
                     stop: F.ConvergenceCriterion, *, lr: float, steps_per_round: int,
                     batch_size: int, heldout: dict[str, list[T.PreferencePair]],
                     seed: int, weight_decay: float = 0.01) -> list[F.RoundReport]:
    """Federated reward learning: local Bradley-Terry steps, full-model averaging.

    The round metric is the mean held-out ranking accuracy of the aggregated
    reward models (identical across clients right after broadcast).
    """
    objectives = _reward_objectives(strategy)
    for c in clients:
        if c.reward_models is None:
            raise PhaseOrderError(f"client {c.id} has no reward models initialized")
        for obj in objectives:
            if not c.preferences.get(obj):
                raise PhaseOrderError(f"client {c.id} has no {obj} preference data")
    opts = {c.id: {obj: Adam(c.reward_models[obj].partition.trainable(), lr=lr,
                             weight_decay=weight_decay)
                   for obj in objectives} for c in clients}

    def work(client: F.ClientState, round_index: int) -> F.ClientRoundStats:
        rng = np.random.default_rng(F.derive_seed(seed, "reward", round_index, client.id))
        losses = []
        for obj in objectives:
            pairs = client.preferences[obj]
            opt = opts[client.id][obj]
            for _ in range(steps_per_round):
                idx = rng.integers(0, len(pairs), size=min(batch_size, len(pairs)))
                loss = preference_loss_batch(client.reward_models[obj], [pairs[i] for i in idx])
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                losses.append(loss.item())
        return F.ClientRoundStats(loss=float(np.mean(losses)))

    def evaluate(cs: list[F.ClientState], round_index: int) -> dict[str, float]:
        accs = [ranking_accuracy(cs[0].reward_models[obj], heldout[obj]) for obj in objectives]
        acc = float(np.mean(accs))
        return {"accuracy": acc, "stop_metric": acc}

    channels = [
        F.ExchangeChannel(f"rm_{obj}", (lambda o: lambda c: c.reward_models[o].partition)(obj),
                          ("reward_head",), ("reward_head",),
                          weight_fn=(lambda o: lambda c: float(len(c.preferences[o])))(obj))
        for obj in objectives
    ]
    return F.run_phase(clients, server, strategy, "reward", stop,
                       local_work=work, channels=channels, evaluate=evaluate)


# ---------------------------------------------------------------------------
# rollouts and GAE
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    task: T.InstructionTask
    prompt: list[int]
    actions: list[int]            # emitted tokens, stop token included if hit
    logps_old: np.ndarray
    ref_logps: np.ndarray
    rm_rewards: dict[str, float]  # frozen reward-model scores of the response
    oracle: dict[str, float]      # ground-truth oracle scores of the response

    @property
    def response(self) -> list[int]:
        return self.actions[:-1] if (self.actions and self.actions[-1] == T.EOS) else self.actions


def rollout(client: F.ClientState, tasks: list[T.InstructionTask], cfg: PPOConfig,
            rng: np.random.Generator, policy: T.VocabPolicy) -> list[Trajectory]:
    """Sample responses, re-score with the frozen reward models, attach
    per-step log-probs under the current and reference policies."""
    if client.ref_model is None:
        raise PhaseOrderError(f"client {client.id} has no frozen reference policy")
    sampler = M.Sampler("temperature", temperature=cfg.rollout_temperature)
    prompts = [list(t.prompt) for t in tasks]
    gens = M.generate_batch(client.model, prompts, cfg.max_new, sampler, rng, stop_token=T.EOS)
    keep = [i for i, g in enumerate(gens) if g.tokens]
    if not keep:
        return []
    ref = M.sequence_logps(client.ref_model, [prompts[i] for i in keep],
                           [gens[i].tokens for i in keep],
                           temperature=cfg.rollout_temperature)
    scored = {}
    with ad.no_grad():
        for obj in OBJECTIVES:
            seqs = [prompts[i] + gens[i].response for i in keep]
            scored[obj] = client.reward_models[obj].scores(seqs).data[:, 0]
    out = []
    for j, i in enumerate(keep):
        g = gens[i]
        out.append(Trajectory(
            task=tasks[i], prompt=prompts[i], actions=list(g.tokens),
            logps_old=g.logps.copy(), ref_logps=ref[j],
            rm_rewards={obj: float(scored[obj][j]) for obj in OBJECTIVES},
            oracle={"helpful": T.oracle_helpful(tasks[i], g.response),
                    "harmless": T.oracle_harmless(g.response, policy)},
        ))
    return out


def kl_shaped_rewards(traj: Trajectory, objective: str, cfg: PPOConfig) -> np.ndarray:
    """Per-step rewards: -kl_coeff * (logp - ref_logp), terminal rm score at the end."""
    r = -cfg.kl_coeff * (traj.logps_old - traj.ref_logps)
    r[-1] += traj.rm_rewards[objective]
    return r


def gae_advantages(rewards: np.ndarray, values: np.ndarray,
                   cfg: PPOConfig) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation; ``values`` has one bootstrap extra.

    Returns raw (unnormalized) advantages and returns; batch normalization
    is the PPO update's job.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = len(rewards)
    if len(values) != n + 1:
        raise ValueError(f"values must have length {n + 1}, got {len(values)}")
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + cfg.gamma * values[t + 1] - values[t]
        last = delta + cfg.gamma * cfg.gae_lambda * last
        adv[t] = last
    return adv, adv + values[:n]


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------


def _value_positions(traj: Trajectory) -> list[int]:
    # value of the state *before* each action: pooled position prompt_len-1+t
    start = len(traj.prompt) - 1
    return [start + t for t in range(len(traj.actions))]


def _critic_values(client: F.ClientState, trajectories: list[Trajectory], objective: str,
                   record: bool):
    seqs = [t.prompt + t.actions for t in trajectories]
    idx = [_value_positions(t) for t in trajectories]
    critic = client.critic_models[objective]
    if record:
        return critic.score_values(seqs, idx)
    with ad.no_grad():
        return critic.score_values(seqs, idx).data[:, 0].astype(np.float64)


@dataclass
class PPOStats:
    policy_loss: float
    critic_loss: dict[str, float]
    mean_ratio: float
    mean_kl: float
    n_steps: int


def ppo_update(client: F.ClientState, trajectories: list[Trajectory], cfg: PPOConfig,
               optimizers: dict, weights: tuple[float, float] | None = None) -> PPOStats:
    """Clipped-surrogate PPO on the personalized advantage blend.

    Policy (adapter+LoRA) maximizes min(ratio*A, clip(ratio)*A) where A comes
    from rewards/values combined with the client's preference weights; each
    critic regresses onto the returns of its own objective's reward stream.
    Reward models are never touched.
    """
    if not trajectories:
        raise ValueError("ppo_update needs at least one trajectory")
    w_h, w_x = weights if weights is not None else client.weights
    lengths = [len(t.actions) for t in trajectories]

    # per-objective raw values, combined GAE under the personalized signal
    vals = {obj: _critic_values(client, trajectories, obj, record=False)
            for obj in OBJECTIVES}
    adv_flat, returns = [], {obj: [] for obj in OBJECTIVES}
    off = 0
    for traj, n in zip(trajectories, lengths):
        v = {obj: np.append(vals[obj][off:off + n], 0.0) for obj in OBJECTIVES}
        r = {obj: kl_shaped_rewards(traj, obj, cfg) for obj in OBJECTIVES}
        combined_r = w_h * r["helpful"] + w_x * r["harmless"]
        combined_v = w_h * v["helpful"] + w_x * v["harmless"]
        adv, _ = gae_advantages(combined_r, combined_v, cfg)
        adv_flat.append(adv)
        for obj in OBJECTIVES:
            _, ret = gae_advantages(r[obj], v[obj], cfg)
            returns[obj].append(ret)
        off += n
    advantages = np.concatenate(adv_flat)
    if cfg.normalize_advantages and advantages.size > 1:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    ret_flat = {obj: np.concatenate(returns[obj]).astype(np.float32) for obj in OBJECTIVES}
    logp_old = np.concatenate([t.logps_old for t in trajectories]).astype(np.float32)
    adv32 = advantages.astype(np.float32)

    prompts = [t.prompt for t in trajectories]
    actions = [t.actions for t in trajectories]
    stats = PPOStats(0.0, {}, 0.0, 0.0, int(sum(lengths)))
    for _ in range(cfg.ppo_epochs):
        logp_new, _ = M.sequence_logps(client.model, prompts, actions,
                                       temperature=cfg.rollout_temperature, record=True)
        ratio = ad.exp(ad.sub(logp_new, logp_old))
        if not np.isfinite(ratio.data).all():
            raise ad.NumericsError(
                f"NaN/Inf in PPO ratios (client {client.id}; "
                f"logp_new range [{logp_new.data.min()}, {logp_new.data.max()}])")
        surr = ad.minimum(ad.mul(ratio, adv32),
                          ad.mul(ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv32))
        policy_loss = ad.neg(ad.mean(surr))
        optimizers["policy"].zero_grad()
        stats.mean_ratio = float(ratio.data.mean())
        stats.mean_kl = float((logp_old - logp_new.data).mean())
        stats.policy_loss = policy_loss.item()
        ad.backward(policy_loss)
        optimizers["policy"].step()

        for obj in OBJECTIVES:
            if (obj == "helpful" and w_h == 0.0) or (obj == "harmless" and w_x == 0.0):
                continue
            pred = _critic_values(client, trajectories, obj, record=True)
            err = ad.sub(pred, ret_flat[obj].reshape(-1, 1))
            closs = ad.mean(ad.mul(err, err))
            optimizers[f"critic_{obj}"].zero_grad()
            ad.backward(closs)
            optimizers[f"critic_{obj}"].step()
            stats.critic_loss[obj] = closs.item()
    return stats


# ---------------------------------------------------------------------------
# alignment phase
# ---------------------------------------------------------------------------


def prepare_alignment(clients: list[F.ClientState], cfg: PPOConfig) -> None:
    """Freeze reward models, snapshot the reference policy, derive critics."""
    for c in clients:
        if c.reward_models is None:
            raise PhaseOrderError(f"client {c.id} has no trained reward models")
        for rm in c.reward_models.values():
            rm.set_trainable(False)
        c.ref_model = c.model.clone()
        c.critic_models = {obj: c.reward_models[obj].clone(group="critic_head")
                           for obj in OBJECTIVES}
        for critic in c.critic_models.values():
            critic.set_trainable(True)
        c.optimizer = {
            "policy": Adam(c.model.partition.trainable(), lr=cfg.lr_policy),
            "critic_helpful": Adam(c.critic_models["helpful"].partition.trainable(),
                                   lr=cfg.lr_critic),
            "critic_harmless": Adam(c.critic_models["harmless"].partition.trainable(),
                                    lr=cfg.lr_critic),
        }


def run_align_phase(clients: list[F.ClientState], server: F.Server, strategy: F.Strategy,
                    stop: F.ConvergenceCriterion, *, ppo_cfg: PPOConfig,
                    eval_shards: list[list[T.InstructionTask]], policy: T.VocabPolicy,
                    seed: int) -> list[F.RoundReport]:
    """Federated multi-objective PPO alignment.

    Per round each client runs rollouts and PPO on its personalized signal
    (SFL-style strategies force weights to helpful-only), then uploads per
    the strategy; critics and any non-uploaded groups remain local. GLOBAL
    rewards are greedy-decode oracle means on per-client eval shards;
    per-client rows carry that client's rollout oracle means.
    """
    prepare_alignment(clients, ppo_cfg)
    single = strategy.reward_mode == "single_helpful"

    def work(client: F.ClientState, round_index: int) -> F.ClientRoundStats:
        rng = np.random.default_rng(F.derive_seed(seed, "align", round_index, client.id))
        if not client.shard:
            return F.ClientRoundStats(skipped=True)
        picks = rng.integers(0, len(client.shard), size=ppo_cfg.rollout_batch)
        tasks = [client.shard[i] for i in picks]
        trajs = rollout(client, tasks, ppo_cfg, rng, policy)
        if not trajs:
            return F.ClientRoundStats(skipped=True)
        stats = ppo_update(client, trajs, ppo_cfg, client.optimizer,
                           weights=(1.0, 0.0) if single else None)
        r_h = float(np.mean([t.oracle["helpful"] for t in trajs]))
        r_x = float(np.mean([t.oracle["harmless"] for t in trajs]))
        return F.ClientRoundStats(loss=stats.policy_loss, r_helpful=r_h,
                                  r_harmless=r_x, r_total=r_h + r_x)

    sampler = M.Sampler("temperature", temperature=ppo_cfg.rollout_temperature)

    def evaluate(cs: list[F.ClientState], round_index: int) -> dict[str, float]:
        helpful, harmless = [], []
        for c in cs:
            if not eval_shards[c.id]:
                continue
            rng = np.random.default_rng(F.derive_seed(seed, "align-eval", round_index, c.id))
            h, x, _ = F.sampled_eval(c.model, eval_shards[c.id], policy, sampler, rng,
                                     ppo_cfg.max_new)
            helpful.append(h)
            harmless.append(x)
        r_h = float(np.mean(helpful)) if helpful else math.nan
        r_x = float(np.mean(harmless)) if harmless else math.nan
        return {"accuracy": r_h, "r_helpful": r_h, "r_harmless": r_x,
                "r_total": r_h + r_x, "stop_metric": r_h + r_x}

    channels = [F.ExchangeChannel("policy", lambda c: c.model.partition,
                                  strategy.upload_groups, strategy.aggregate_groups)]
    return F.run_phase(clients, server, strategy, "align", stop,
                       local_work=work, channels=channels, evaluate=evaluate)
