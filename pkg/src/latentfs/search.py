"""PPO actor-critic search over pooled subset embeddings.

Each rollout starts from the pooled embedding of a high-scoring record. The
actor proposes an additive Gaussian step in embedding space, the frozen
decoder turns the moved embedding back into a subset, and the step is rewarded
for beating the rollout's incumbent score and for using fewer features.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .codec import EmptyReconstruction, SetCodec, decode_pooled, encode_batch
from .records import FeatureSubset, top_k_records
from .seeding import derive_seed


@dataclass
class SearchConfig:
    lam: float = 0.1
    gamma: float = 0.99
    clip_eps: float = 0.2
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    steps: int = 1000
    epochs: int = 10
    batch: int = 512
    n_seeds: int = 25
    ppo_iters: int = 4
    action_std: float = 0.1
    hidden: int = 256
    max_decode_failures: int = 10

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")


# ---------------------------------------------------------------- PPO math

def compute_reward(perf_new: float, perf_old: float, subset_len: int, universe_size: int, lam: float) -> float:
    """lam * (perf_new - perf_old) + (1 - lam) * (1 - subset_len / universe_size)."""
    if not 1 <= subset_len <= universe_size:
        raise ValueError(f"subset_len must lie in [1, {universe_size}], got {subset_len}")
    return lam * (perf_new - perf_old) + (1.0 - lam) * (1.0 - subset_len / universe_size)


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("need at least one reward")
    out = np.empty_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def critic_loss(values, returns):
    """Mean squared error between value estimates and returns.

    Works on tensors (differentiable) or array-likes (returns a float).
    """
    as_tensor = isinstance(values, torch.Tensor)
    v = values if as_tensor else torch.as_tensor(np.asarray(values, dtype=np.float64))
    g = returns if isinstance(returns, torch.Tensor) else torch.as_tensor(np.asarray(returns, dtype=np.float64))
    if v.shape != g.shape or v.numel() == 0:
        raise ValueError(f"values/returns length mismatch: {tuple(v.shape)} vs {tuple(g.shape)}")
    loss = ((v - g.to(v.dtype)) ** 2).mean()
    return loss if as_tensor else float(loss)


def actor_objective(ratios, advantages, clip_eps: float):
    """Clipped surrogate: mean of min(r * A, clip(r, 1 - eps, 1 + eps) * A).

    This is the quantity the actor update maximizes.
    """
    as_tensor = isinstance(ratios, torch.Tensor)
    r = ratios if as_tensor else torch.as_tensor(np.atleast_1d(np.asarray(ratios, dtype=np.float64)))
    a = advantages if isinstance(advantages, torch.Tensor) else torch.as_tensor(
        np.atleast_1d(np.asarray(advantages, dtype=np.float64)))
    if r.shape != a.shape:
        raise ValueError("ratios/advantages length mismatch")
    if (r <= 0).any():
        raise ValueError("probability ratios must be positive")
    a = a.to(r.dtype)
    obj = torch.minimum(r * a, torch.clamp(r, 1 - clip_eps, 1 + clip_eps) * a).mean()
    return obj if as_tensor else float(obj)


# ---------------------------------------------------------------- agent

class GaussianActor(nn.Module):
    def __init__(self, state_dim, action_dim, hidden=256, init_std=0.1):
        super().__init__()
        self.body = nn.Sequential(nn.Linear(state_dim, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh())
        self.mu = nn.Linear(hidden, action_dim)
        with torch.no_grad():
            self.mu.weight.mul_(0.01)
            self.mu.bias.zero_()
        self.log_std = nn.Parameter(torch.full((action_dim,), math.log(init_std)))

    def forward(self, s):
        return self.mu(self.body(s)), self.log_std.exp().expand(*s.shape[:-1], -1)

    def log_prob(self, s, a):
        mu, std = self(s)
        return torch.distributions.Normal(mu, std).log_prob(a).sum(-1)


class Critic(nn.Module):
    def __init__(self, state_dim, hidden=256):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(state_dim, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh(),
                                 nn.Linear(hidden, 1))

    def forward(self, s):
        return self.net(s).squeeze(-1)


class Agent:
    """Shared actor/critic pair (one agent serves every seed)."""

    def __init__(self, state_dim, action_dim, config: SearchConfig, seed: int):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.actor = GaussianActor(state_dim, action_dim, config.hidden, config.action_std)
            self.critic = Critic(state_dim, config.hidden)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=config.actor_lr)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=config.critic_lr)
        self.config = config


@dataclass
class SearchTrajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    subsets: list = field(default_factory=list)
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None
    aborted: bool = False

    def __len__(self):
        return len(self.rewards)


def search_state(membership: np.ndarray, pooled: torch.Tensor) -> torch.Tensor:
    return torch.cat([torch.as_tensor(membership, dtype=torch.float32), pooled.reshape(-1).float()])


def estimate_advantages(trajectories, gamma: float, normalize: bool = True) -> np.ndarray:
    """G_t - V(s_t) per trajectory, then standardized across the whole batch.

    Fills ``returns`` and ``advantages`` on every trajectory and returns the
    concatenated advantages. Standardization is skipped when the batch has a
    single element or zero variance.
    """
    if isinstance(trajectories, SearchTrajectory):
        trajectories = [trajectories]
    raw = []
    for tr in trajectories:
        if len(tr.values) != len(tr.rewards):
            raise ValueError("trajectory values and rewards must align")
        tr.returns = discounted_returns(tr.rewards, gamma) if len(tr) else np.zeros(0)
        raw.append(tr.returns - np.asarray(tr.values, dtype=np.float64))
    adv = np.concatenate(raw) if raw else np.zeros(0)
    if normalize and adv.size > 1 and adv.std() > 1e-8:
        adv = (adv - adv.mean()) / adv.std()
    start = 0
    for tr in trajectories:
        tr.advantages = adv[start: start + len(tr)]
        start += len(tr)
    return adv


def rollout(seed_pooled: torch.Tensor, seed_subset: FeatureSubset, agent: Agent, codec: SetCodec, scorer,
            config: SearchConfig, length: int, generator: torch.Generator, explore: bool = True,
            seed_perf: float | None = None) -> SearchTrajectory:
    """Walk ``length`` actor steps from one seed embedding.

    ``scorer(ids) -> float`` supplies the performance used in the reward. A
    step whose embedding decodes to nothing earns -1 and leaves the state
    where it was; more than ``config.max_decode_failures`` such steps in a row
    abort the rollout.
    """
    n = codec.config.universe_size
    P = seed_pooled.detach().clone()
    try:
        current = decode_pooled(P, codec)
    except EmptyReconstruction:
        current = seed_subset
    membership = current.one_hot()
    best = scorer(seed_subset.ids) if seed_perf is None else seed_perf
    tr = SearchTrajectory()
    failures = 0
    for _ in range(length):
        s = search_state(membership, P)
        with torch.no_grad():
            mu, std = agent.actor(s)
            if explore:
                a = mu + std * torch.randn(mu.shape, generator=generator)
            else:
                a = mu
            logp = torch.distributions.Normal(mu, std).log_prob(a).sum()
            v = agent.critic(s)
        P_new = P + a.view_as(P).to(P.dtype)
        try:
            f = decode_pooled(P_new, codec)
        except EmptyReconstruction:
            failures += 1
            reward = -1.0
            f = None
        if f is not None:
            failures = 0
            perf = scorer(f.ids)
            reward = compute_reward(perf, best, len(f), n, config.lam)
            best = max(best, perf)
            P, membership = P_new, f.one_hot()
        tr.states.append(s)
        tr.actions.append(a)
        tr.log_probs.append(float(logp))
        tr.values.append(float(v))
        tr.rewards.append(reward)
        tr.subsets.append(f)
        if failures > config.max_decode_failures:
            tr.aborted = True
            break
    return tr


def ppo_update(agent: Agent, trajectories, generator: torch.Generator) -> dict:
    cfg = agent.config
    trajectories = [t for t in trajectories if len(t)]
    if not trajectories:
        return {"actor": 0.0, "critic": 0.0}
    estimate_advantages(trajectories, cfg.gamma)
    S = torch.stack([s for t in trajectories for s in t.states])
    A = torch.stack([a for t in trajectories for a in t.actions])
    old_logp = torch.tensor([lp for t in trajectories for lp in t.log_probs])
    adv = torch.tensor(np.concatenate([t.advantages for t in trajectories]), dtype=torch.float32)
    ret = torch.tensor(np.concatenate([t.returns for t in trajectories]), dtype=torch.float32)
    stats = {"actor": 0.0, "critic": 0.0}
    for _ in range(cfg.ppo_iters):
        order = torch.randperm(len(S), generator=generator)
        for start in range(0, len(S), cfg.batch):
            idx = order[start: start + cfg.batch]
            # bounded log-ratio: summed log-probs over thousands of action dims under/overflow exp
            log_ratio = torch.clamp(agent.actor.log_prob(S[idx], A[idx]) - old_logp[idx], -20.0, 20.0)
            ratio = torch.exp(log_ratio)
            a_loss = -actor_objective(ratio, adv[idx], cfg.clip_eps)
            agent.actor_opt.zero_grad()
            a_loss.backward()
            agent.actor_opt.step()
            c_loss = critic_loss(agent.critic(S[idx]), ret[idx])
            agent.critic_opt.zero_grad()
            c_loss.backward()
            agent.critic_opt.step()
            stats = {"actor": -a_loss.item(), "critic": c_loss.item()}
    return stats


# ---------------------------------------------------------------- driver

class CandidatePool:
    """Truly evaluated subsets in discovery order."""

    def __init__(self):
        self.perf: dict[tuple[int, ...], float] = {}

    def add(self, ids, perf: float):
        key = tuple(sorted(ids))
        if key not in self.perf:
            self.perf[key] = float(perf)

    def best(self):
        if not self.perf:
            raise ValueError("empty candidate pool")
        # higher perf, then fewer features, then earliest discovery
        ranked = sorted(enumerate(self.perf.items()), key=lambda it: (-it[1][1], len(it[1][0]), it[0]))
        return ranked[0][1]

    def __len__(self):
        return len(self.perf)


def search(codec: SetCodec, store, evaluator, config: SearchConfig | None = None, seed: int = 0, scorer=None,
           log=None):
    """Run the seeded PPO search and return ``(best_subset, report)``.

    ``evaluator(ids) -> float`` is the ground-truth score (it must memoize if
    evaluation is costly). ``scorer`` defaults to the evaluator and provides
    in-rollout reward scores; a scorer may answer from a surrogate as long as
    it exposes ``known`` (truly evaluated subsets -> scores). The returned
    subset is the best truly evaluated candidate among seeds, rollout visits
    and a final greedy pass of the trained actor.
    """
    config = config or SearchConfig()
    scorer = scorer or evaluator
    n = codec.config.universe_size
    seeds = top_k_records(store, config.n_seeds)
    seed_pooled = encode_batch([r.subset for r in seeds], codec)
    state_dim = n + codec.config.K * codec.config.d
    agent = Agent(state_dim, codec.config.K * codec.config.d, config, derive_seed(seed, "agent"))
    gen = torch.Generator().manual_seed(derive_seed(seed, "rollout"))

    pool = CandidatePool()
    seed_perfs = []
    for r in seeds:
        v = evaluator(r.subset.ids)
        seed_perfs.append(v)
        pool.add(r.subset.ids, v)
    length = max(1, config.steps // len(seeds))
    reward_curve, failures, visited = [], 0, []
    for epoch in range(config.epochs):
        trajectories = [
            rollout(seed_pooled[i], seeds[i].subset, agent, codec, scorer, config, length, gen, True, seed_perfs[i])
            for i in range(len(seeds))
        ]
        failures += sum(f is None for t in trajectories for f in t.subsets)
        visited.extend(f.canonical for t in trajectories for f in t.subsets if f is not None)
        rewards = [r for t in trajectories for r in t.rewards]
        reward_curve.append(float(np.mean(rewards)) if rewards else float("nan"))
        stats = ppo_update(agent, trajectories, gen)
        if log:
            log(f"search epoch {epoch + 1}/{config.epochs} mean reward {reward_curve[-1]:.4f} "
                f"actor {stats['actor']:.4f} critic {stats['critic']:.4f}")

    # greedy pass of the trained actor: the enhanced embedding of every seed
    final = []
    for i in range(len(seeds)):
        t = rollout(seed_pooled[i], seeds[i].subset, agent, codec, scorer, config, length, gen, False,
                    seed_perfs[i])
        final.extend(f.ids for f in t.subsets if f is not None)
    known = _known(scorer)
    for key in visited:
        if key in known:
            pool.add(key, known[key])
    for ids in final:
        pool.add(ids, evaluator(ids))
    best_ids, best_perf = pool.best()
    report = {
        "best_subset": list(best_ids),
        "best_perf": best_perf,
        "seed_perfs": seed_perfs,
        "reward_curve": reward_curve,
        "candidates_evaluated": len(pool),
        "decode_failures": failures,
        "config": asdict(config),
    }
    return FeatureSubset(best_ids, n), report


def _known(scorer) -> dict:
    known = getattr(scorer, "known", None)
    if known is None:
        known = getattr(scorer, "cache", {})
    return dict(known)
