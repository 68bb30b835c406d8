"""Centralized training with a variance-penalized TD loss.

The loss sums, over batch episodes and timesteps, the squared TD error of
the mixed joint value plus lam times the per-agent variance of the encoder
messages. Training rollouts use full communication (every message summed
into every teammate's action values); gating is an execution-time protocol
and is applied during evaluation rollouts only. Episodes are stored whole
and replayed through the recurrent network with explicit backpropagation
through time.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import __version__
from .agent import AgentNet, combine, Encoder, message_variance
from .mixer import QmixMixer, VdnMixer
from .nn import Array, ParamBlock
from .protocol import beta, CommConfig, CommLog, protocol_step

METHODS = ("vbc-vdn", "vbc-qmix", "fc", "vdn", "qmix")

EVAL_MODES = {"vbc-vdn": "eval-gated", "vbc-qmix": "eval-gated",
              "fc": "eval-full", "vdn": "eval-local", "qmix": "eval-local"}


def method_uses_comm(method: str) -> bool:
    return method in ("vbc-vdn", "vbc-qmix", "fc")


def method_mixer_kind(method: str) -> str:
    return "qmix" if method.endswith("qmix") else "vdn"


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.1
    lr: float = 5e-4
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    batch_size: int = 32
    buffer_capacity: int = 500
    target_period: int = 50        # gradient steps between target copies
    eps_start: float = 1.0
    eps_final: float = 0.05
    eps_anneal_steps: int = 50_000  # env steps of linear annealing
    train_every: int = 1            # gradient step every k-th episode
    d_h: int = 32
    enc_hidden: int = 64
    d_mix: int = 32
    explore_local_q: bool = False   # explore on local Q instead of combined

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must be in [0, 1)")
        if self.lam < 0.0:
            raise ValueError("lam must be nonnegative")
        if not (0.0 <= self.eps_final <= self.eps_start <= 1.0):
            raise ValueError("epsilon schedule must satisfy 0 <= final <= start <= 1")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("buffer must hold at least one batch")
        if self.train_every < 1 or self.target_period < 1:
            raise ValueError("train_every and target_period must be >= 1")


@dataclass
class EpisodeRecord:
    obs: Array        # (T, N, obs_dim)
    state: Array      # (T, state_dim)
    actions: Array    # (T, N) int
    rewards: Array    # (T,)

    @property
    def length(self) -> int:
        return self.obs.shape[0]


class EpisodeBuffer:
    """Ring buffer of whole episodes; oldest episodes are evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._episodes: deque[EpisodeRecord] = deque(maxlen=capacity)

    def add(self, record: EpisodeRecord) -> None:
        self._episodes.append(record)

    def __len__(self) -> int:
        return len(self._episodes)

    def sample(self, rng: np.random.Generator, batch: int) -> list[EpisodeRecord]:
        if batch > len(self):
            raise ValueError(f"asked for {batch} episodes, buffer holds {len(self)}")
        idx = rng.choice(len(self), size=batch, replace=False)
        return [self._episodes[int(i)] for i in idx]


class Model:
    """Agent network, optional shared encoder and the mixing head."""

    def __init__(self, obs_dim: int, state_dim: int, n_agents: int,
                 n_actions: int, cfg: TrainConfig, method: str,
                 rng: Optional[np.random.Generator] = None):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.cfg = cfg
        self.method = method
        self.agent = AgentNet(obs_dim, n_actions, cfg.d_h)
        self.encoder = (Encoder(cfg.d_h, n_actions, cfg.enc_hidden)
                        if method_uses_comm(method) else None)
        if method_mixer_kind(method) == "qmix":
            self.mixer = QmixMixer(n_agents, state_dim, cfg.d_mix)
        else:
            self.mixer = VdnMixer(n_agents)
        params = self.agent.params() + self.mixer.params()
        if self.encoder is not None:
            params = params + self.encoder.params()
        self.block = ParamBlock(params)
        if rng is not None:
            self.agent.init_params(rng)
            if self.encoder is not None:
                self.encoder.init_params(rng)
            self.mixer.init_params(rng)

    @property
    def comm(self) -> bool:
        return self.encoder is not None

    def clone(self) -> "Model":
        other = Model(self.obs_dim, self.state_dim, self.n_agents,
                      self.n_actions, self.cfg, self.method)
        other.block.copy_from(self.block)
        return other

    def save(self, path) -> None:
        self.block.save(path, version=__version__)

    def load(self, path) -> str:
        return self.block.load(path)


class TrainDiverged(RuntimeError):
    def __init__(self, message: str, model: Model):
        super().__init__(message)
        self.model = model


def compute_loss(model: Model, target: Model, episodes: list[EpisodeRecord],
                 cfg: TrainConfig, backward: bool = True) -> tuple[float, dict]:
    """Forward (and by default backward) pass of the penalized loss.

    Gradients accumulate into model.block; the caller is responsible for
    zeroing them beforehand (the optimizer step clears them afterwards).
    With backward=False nothing is cached or mutated, which gives a pure
    loss evaluation for finite-difference checks. Returns the scalar loss
    and diagnostics.
    """
    if not episodes:
        raise ValueError("batch must be non-empty")
    b = len(episodes)
    n, a = model.n_agents, model.n_actions
    d, s_dim, dh = model.obs_dim, model.state_dim, cfg.d_h
    t_max = max(rec.length for rec in episodes)

    obs = np.zeros((t_max, b, n, d))
    state = np.zeros((t_max, b, s_dim))
    actions = np.zeros((t_max, b, n), dtype=np.int64)
    rewards = np.zeros((t_max, b))
    mask = np.zeros((t_max, b))
    bootstrap = np.zeros((t_max, b))
    for k, rec in enumerate(episodes):
        length = rec.length
        obs[:length, k] = rec.obs
        state[:length, k] = rec.state
        actions[:length, k] = rec.actions
        rewards[:length, k] = rec.rewards
        mask[:length, k] = 1.0
        bootstrap[:length - 1, k] = 1.0   # last real step has no successor

    # online pass (cached for backward)
    h = np.zeros((b * n, dh))
    q_tot = np.zeros((t_max, b))
    msgs_per_t: list[Array] = []
    for t in range(t_max):
        q, c, h = model.agent.step(obs[t].reshape(b * n, d), h, cache=backward)
        q = q.reshape(b, n, a)
        if model.comm:
            m = model.encoder.forward(c, cache=backward).reshape(b, n, a)
            comb = q + m.sum(axis=1, keepdims=True) - m
            msgs_per_t.append(m)
        else:
            comb = q
        chosen = np.take_along_axis(comb, actions[t][..., None], axis=2)[..., 0]
        q_tot[t] = model.mixer.forward(chosen, state[t], cache=backward)

    # target pass (no caching, its own hidden trajectory)
    ht = np.zeros((b * n, dh))
    tq_tot = np.zeros((t_max, b))
    for t in range(t_max):
        tq, tc, ht = target.agent.step(obs[t].reshape(b * n, d), ht, cache=False)
        tq = tq.reshape(b, n, a)
        if target.comm:
            tm = target.encoder.forward(tc, cache=False).reshape(b, n, a)
            tcomb = tq + tm.sum(axis=1, keepdims=True) - tm
        else:
            tcomb = tq
        tq_tot[t] = target.mixer.forward(tcomb.max(axis=2), state[t], cache=False)

    next_val = np.zeros((t_max, b))
    next_val[:-1] = tq_tot[1:]
    y = rewards + cfg.gamma * bootstrap * next_val
    td = (q_tot - y) * mask
    loss_td = float((td * td).sum())

    penalty = 0.0
    if model.comm and cfg.lam > 0.0:
        for t in range(t_max):
            var_t = msgs_per_t[t].var(axis=-1)          # (b, n) population
            penalty += float((var_t * mask[t][:, None]).sum())
        penalty *= cfg.lam
    loss = loss_td + penalty

    if not np.isfinite(loss):
        lengths = [rec.length for rec in episodes]
        raise FloatingPointError(
            f"non-finite loss (td={loss_td}, penalty={penalty}, "
            f"batch={b}, lengths={lengths})")

    diagnostics = {"loss_td": loss_td, "penalty": penalty, "batch": b,
                   "t_max": t_max}
    if not backward:
        return loss, diagnostics

    # backward in reverse time order, popping every cache pushed above
    dh_next = np.zeros((b * n, dh))
    for t in reversed(range(t_max)):
        dq_tot = 2.0 * td[t]
        dchosen, _ = model.mixer.backward(dq_tot)
        dcomb = np.zeros((b, n, a))
        np.put_along_axis(dcomb, actions[t][..., None], dchosen[..., None], axis=2)
        if model.comm:
            dm = dcomb.sum(axis=1, keepdims=True) - dcomb
            if cfg.lam > 0.0:
                m = msgs_per_t[t]
                dm = dm + (cfg.lam * mask[t][:, None, None] * 2.0 / a
                           * (m - m.mean(axis=-1, keepdims=True)))
            dc = model.encoder.backward(dm.reshape(b * n, a))
        else:
            dc = np.zeros((b * n, dh))
        dh_next = model.agent.backward_step(dcomb.reshape(b * n, a), dc, dh_next)

    return loss, diagnostics


class Trainer:
    """Owns the model, target, buffer and RNG streams for one run."""

    def __init__(self, env, method: str, cfg: TrainConfig, seed: int,
                 comm: CommConfig = None, eval_episodes: int = 20,
                 checkpoint_period: int = 200):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
        self.env = env
        self.method = method
        self.cfg = cfg
        self.comm_cfg = comm if comm is not None else CommConfig()
        self.eval_episodes = eval_episodes
        self.checkpoint_period = checkpoint_period
        self.seed = seed
        init_ss, act_ss, sample_ss = np.random.SeedSequence(seed).spawn(3)
        self.rng_act = np.random.default_rng(act_ss)
        self.rng_sample = np.random.default_rng(sample_ss)
        self.model = Model(env.obs_dim, env.state_dim, env.n_agents,
                           env.n_actions, cfg, method,
                           rng=np.random.default_rng(init_ss))
        self.target = self.model.clone()
        self.buffer = EpisodeBuffer(cfg.buffer_capacity)
        self.env_steps = 0
        self.grad_steps = 0
        self.episodes_done = 0
        self.last_loss = 0.0

    def epsilon(self) -> float:
        cfg = self.cfg
        if self.env_steps >= cfg.eps_anneal_steps:
            return cfg.eps_final
        frac = self.env_steps / cfg.eps_anneal_steps
        return cfg.eps_start + frac * (cfg.eps_final - cfg.eps_start)

    def _policy_values(self, q: Array, msgs, mode: str,
                       log: Optional[CommLog], t: int) -> Array:
        """Per-agent decision values (n, a) for the requested mode."""
        n = self.env.n_agents
        if mode == "eval-gated":
            combined, rec = protocol_step(
                [q[i] for i in range(n)], [msgs[i] for i in range(n)],
                self.comm_cfg, t=t)
            if log is not None:
                log.append(rec)
            return np.stack(combined)
        if mode == "eval-full" or (mode == "train" and msgs is not None
                                   and not self.cfg.explore_local_q):
            return np.stack([
                combine(q[i], [msgs[j] for j in range(n) if j != i])
                for i in range(n)])
        return q    # local values: no encoder, or local-Q exploration

    def rollout(self, mode: str, log: Optional[CommLog] = None) -> tuple[EpisodeRecord, dict]:
        env = self.env
        n = env.n_agents
        res = env.reset()
        h = self.model.agent.initial_hidden(n)
        obs_seq, state_seq, act_seq, rew_seq = [], [], [], []
        var_sum, var_count = 0.0, 0
        total_reward = 0.0
        collisions = 0
        final_info = {}
        done = False
        while not done:
            obs = np.stack(res.obs)
            q, c, h = self.model.agent.step(obs, h, cache=False)
            msgs = None
            if self.model.comm:
                msgs = self.model.encoder.forward(c, cache=False)
                var_sum += float(sum(message_variance(msgs[i]) for i in range(n)))
                var_count += n
            values = self._policy_values(q, msgs, mode, log, t=len(act_seq))
            if mode == "train":
                eps = self.epsilon()
                actions = np.empty(n, dtype=np.int64)
                for i in range(n):
                    if self.rng_act.random() < eps:
                        actions[i] = self.rng_act.integers(env.n_actions)
                    else:
                        actions[i] = int(np.argmax(values[i]))
            else:
                actions = np.array([int(np.argmax(values[i])) for i in range(n)],
                                   dtype=np.int64)
            obs_seq.append(obs)
            state_seq.append(res.state)
            act_seq.append(actions)
            res = env.step(actions)
            rew_seq.append(res.reward)
            total_reward += res.reward
            collisions += res.info.get("collisions", 0)
            final_info = res.info
            done = res.done
            if mode == "train":
                self.env_steps += 1
        record = EpisodeRecord(obs=np.stack(obs_seq), state=np.stack(state_seq),
                               actions=np.stack(act_seq),
                               rewards=np.array(rew_seq))
        if mode == "train":
            self.buffer.add(record)
        stats = {"reward": total_reward,
                 "msg_variance": var_sum / var_count if var_count else 0.0,
                 "length": record.length}
        if "avg_distance" in final_info:
            stats["avg_distance"] = final_info["avg_distance"]
            stats["collisions"] = collisions
        if "prey_alive" in final_info:
            stats["captures"] = self.env.cfg.n_prey - final_info["prey_alive"]
        return record, stats

    def gradient_step(self) -> float:
        batch = self.buffer.sample(self.rng_sample, self.cfg.batch_size)
        self.model.block.zero_grad()
        loss, _ = compute_loss(self.model, self.target, batch, self.cfg)
        if loss > 1e6:
            raise TrainDiverged(f"loss diverged: {loss}", self.model)
        self.model.block.rmsprop_step(self.cfg.lr, self.cfg.rmsprop_alpha,
                                      self.cfg.rmsprop_eps)
        self.grad_steps += 1
        if self.grad_steps % self.cfg.target_period == 0:
            self.target.block.copy_from(self.model.block)
        self.last_loss = loss
        return loss

    def evaluate(self, episodes: int,
                 collect_log: bool = False) -> tuple[dict, list[CommLog]]:
        """Greedy evaluation in the method's execution mode."""
        mode = EVAL_MODES[self.method]
        logs = []
        rewards, variances, betas = [], [], []
        extra: dict[str, list] = {}
        for _ in range(episodes):
            log = CommLog(self.env.n_agents) if mode == "eval-gated" else None
            _, stats = self.rollout(mode, log=log)
            rewards.append(stats["reward"])
            variances.append(stats["msg_variance"])
            for key in ("avg_distance", "collisions", "captures"):
                if key in stats:
                    extra.setdefault(key, []).append(stats[key])
            if mode == "eval-gated":
                betas.append(beta(log))
                if collect_log:
                    logs.append(log)
            elif mode == "eval-full":
                betas.append(1.0)
            else:
                betas.append(0.0)
        out = {
            "mean_eval_reward": float(np.mean(rewards)),
            "beta": float(np.mean(betas)),
            "mean_msg_variance": float(np.mean(variances)),
        }
        for key, vals in extra.items():
            out[key] = float(np.mean(vals))
        return out, logs

    def metrics_row(self, episode: int, stats: dict) -> dict:
        row = {"episode": episode,
               "mean_eval_reward": stats["mean_eval_reward"],
               "beta": stats["beta"],
               "mean_msg_variance": stats["mean_msg_variance"],
               "loss": self.last_loss}
        for key in ("avg_distance", "collisions", "captures"):
            if key in stats:
                row[key] = stats[key]
        return row

    def run(self, episodes: int) -> list[dict]:
        """Alternate rollouts and gradient steps; emit checkpoint metrics."""
        rows = []
        for _ in range(episodes):
            self.rollout("train")
            self.episodes_done += 1
            if (self.episodes_done % self.cfg.train_every == 0
                    and len(self.buffer) >= self.cfg.batch_size):
                self.gradient_step()
            if self.episodes_done % self.checkpoint_period == 0:
                stats, _ = self.evaluate(self.eval_episodes)
                rows.append(self.metrics_row(self.episodes_done, stats))
        return rows
