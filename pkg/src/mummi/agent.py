"""Replay buffer, latent-imagination actor-critic, CEM planner and the outer training loop."""
from __future__ import annotations

import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffmath as dm
from .config import RunConfig, TrainConfig
from .data import Episode, SequenceBatch
from .diffmath import Tape, Tensor
from .distributions import DiagGaussian
from .envs import MissingnessModel, PAPER_REGIMES, RandomPolicy, ToyWorldConfig, collect_episode
from .layers import MLP, ParamStore
from .losses import LossBreakdown, world_model_loss
from .mssm import MSSM, FilterOutput, LatentState
from .optim import Adam
from .persistence import check_shapes, load_checkpoint, load_episode_dir, save_checkpoint, save_episode

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class InsufficientDataError(ValueError):
    pass


# replay

class ReplayBuffer:
    """FIFO store of complete episodes. Appends and samples take a lock, so a
    collector thread can add episodes while the trainer samples."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._episodes: deque[Episode] = deque(maxlen=capacity)
        self.inserted = 0
        self._lock = threading.Lock()

    def add(self, episode: Episode) -> None:
        with self._lock:
            self._episodes.append(episode)
            self.inserted += 1

    def __len__(self) -> int:
        return len(self._episodes)

    def episodes(self) -> list[Episode]:
        with self._lock:
            return list(self._episodes)

    def sample_batch(self, B: int, T: int, seed: int | np.random.Generator) -> SequenceBatch:
        return sample_batch(self, B, T, seed)


def sample_batch(buffer: ReplayBuffer, B: int, T: int, seed: int | np.random.Generator) -> SequenceBatch:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eligible = [ep for ep in buffer.episodes() if len(ep) >= T]
    if not eligible:
        raise InsufficientDataError(
            f"no episode of length >= {T} in the buffer ({len(buffer)} stored); collect more data first")
    picks = []
    for _ in range(B):
        ep = eligible[int(rng.integers(len(eligible)))]
        start = int(rng.integers(len(ep) - T + 1))
        picks.append(ep.slice(start, T))
    return SequenceBatch.stack(picks)


# actor and critic

def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class Actor:
    """Gaussian policy with a tanh-squashed mean and a state-independent learned std."""

    def __init__(self, store: ParamStore, feat_dim: int, action_dim: int, hidden, rng: np.random.Generator,
                 activation: str = "elu", init_std: float = 0.5, std_min: float = 1e-2):
        self.net = MLP(store, "actor", feat_dim, hidden, action_dim, rng, activation)
        self.raw_std = store.add("actor.raw_std", np.full(action_dim, _inv_softplus(init_std)))
        self.std_min = std_min
        self.action_dim = action_dim

    def mode(self, features) -> Tensor:
        return dm.tanh(self.net(features))

    def std(self) -> Tensor:
        return dm.softplus(self.raw_std) + self.std_min

    def dist(self, features) -> DiagGaussian:
        mean = self.mode(features)
        return DiagGaussian(mean, dm.broadcast_to(self.std(), mean.shape))

    def sample(self, features, rng: np.random.Generator) -> Tensor:
        mean = self.mode(features)
        eps = rng.standard_normal(mean.shape)
        return dm.clip(mean + self.std() * eps, -1.0, 1.0)


class Critic:
    def __init__(self, store: ParamStore, feat_dim: int, hidden, rng: np.random.Generator, activation: str = "elu"):
        self.net = MLP(store, "critic", feat_dim, hidden, 1, rng, activation)

    def __call__(self, features) -> Tensor:
        out = self.net(features)
        return out[..., 0]


# returns

def lambda_returns(rewards, values, gamma: float, lam: float):
    """TD(lambda) targets over an imagined horizon.

    ``rewards[t]`` is the reward received on the transition out of step ``t`` and
    ``values`` has one extra trailing entry used to bootstrap. Works on arrays
    (returns an array) or on Tensors (returns a Tensor on the active tape).
    """
    as_array = not isinstance(rewards, Tensor) and not isinstance(values, Tensor)
    r, v = dm.as_tensor(rewards), dm.as_tensor(values)
    H = r.shape[0]
    if H < 1:
        raise ValueError("lambda_returns needs H >= 1")
    if v.shape[0] != H + 1 or v.shape[1:] != r.shape[1:]:
        raise dm.ShapeError("lambda_returns", r.shape, v.shape)
    out: list[Tensor] = [None] * H  # type: ignore[list-item]
    nxt = v[H]
    for t in reversed(range(H)):
        nxt = r[t] + gamma * ((1.0 - lam) * v[t + 1] + lam * nxt)
        out[t] = nxt
    G = dm.stack(out, axis=0)
    return G.data.copy() if as_array else G


@dataclass
class ActorCriticMetrics:
    actor_loss: float
    critic_loss: float
    mean_return: float
    mean_value: float
    imagined_reward: float
    actor_grad_norm: float
    critic_grad_norm: float
    action_std: float

    def to_record(self) -> dict:
        return dict(self.__dict__)


def select_starts(post: FilterOutput, n: int | None, rng: np.random.Generator) -> LatentState:
    """Flatten posterior states to ``[B*T, ...]`` and optionally subsample ``n`` of them."""
    h = post.h.data.reshape(-1, post.h.shape[-1])
    s_c = post.s_c.data.reshape(-1, post.s_c.shape[-1])
    if n is not None and n < h.shape[0]:
        idx = rng.choice(h.shape[0], size=n, replace=False)
        h, s_c = h[idx], s_c[idx]
    return LatentState(Tensor(h), Tensor(s_c))


def actor_critic_update(model: MSSM, actor: Actor, critic: Critic, actor_opt: Adam, critic_opt: Adam,
                        start: LatentState, horizon: int, gamma: float, lam: float,
                        rng: np.random.Generator) -> ActorCriticMetrics:
    """One actor step and one critic step on trajectories imagined from ``start``.

    The world model and the critic are frozen while the actor loss is
    differentiated, so neither receives a gradient; the critic then regresses on
    the detached targets.
    """
    start = start.detach()
    frozen = list(model.params) + list(critic_opt.params)
    with dm.no_grad_for(frozen), Tape() as tape:
        traj = model.imagine_rollout(start, horizon, policy=actor.sample, rng=rng)
        feats = traj.features()
        values = critic(feats)
        returns = lambda_returns(traj.reward_mean[1:], values, gamma, lam)
        actor_loss = -returns.mean()
        if not np.isfinite(actor_loss.data):
            raise DivergenceError(f"non-finite actor loss ({actor_loss.data})")
        actor_opt.zero_grad()
        tape.backward(actor_loss)
    actor_norm = actor_opt.step()

    targets = returns.data
    inputs = feats.data[:-1]
    with dm.no_grad_for(list(model.params) + list(actor_opt.params)), Tape() as tape:
        v = critic(inputs)
        critic_loss = 0.5 * dm.square(v - targets).mean()
        if not np.isfinite(critic_loss.data):
            raise DivergenceError(f"non-finite critic loss ({critic_loss.data})")
        critic_opt.zero_grad()
        tape.backward(critic_loss)
    critic_norm = critic_opt.step()
    return ActorCriticMetrics(
        actor_loss=float(actor_loss.data), critic_loss=float(critic_loss.data),
        mean_return=float(targets.mean()), mean_value=float(values.data.mean()),
        imagined_reward=float(traj.reward_mean.data[1:].mean()),
        actor_grad_norm=actor_norm, critic_grad_norm=critic_norm,
        action_std=float(actor.std().data.mean()),
    )


# planning

class _SharedNoise:
    """Noise source giving every row the same draw, so candidates are compared on common noise."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def standard_normal(self, shape) -> np.ndarray:
        return np.broadcast_to(self.rng.standard_normal((1,) + tuple(shape[1:])), shape)


@dataclass
class CEMResult:
    action: np.ndarray
    mean: np.ndarray
    elite_scores: list[float]


def cem_plan(model: MSSM, start: LatentState, horizon: int, candidates: int, iterations: int, elites: int,
             rng: np.random.Generator | int = 0, min_std: float = 0.05,
             value_fn: Callable[[Tensor], Tensor] | None = None, return_info: bool = False):
    """Cross-entropy planning in latent space; returns the first action of the final mean.

    Candidates are scored by their summed predicted rewards (plus an optional
    terminal value). The imagination noise is fixed for the whole call and the
    previous elites stay in the pool, so the mean elite score never decreases.
    """
    if not candidates > elites >= 2:
        raise ValueError("need candidates > elites >= 2")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    A = model.config.action_dim
    mean = np.zeros((horizon, A))
    std = np.ones((horizon, A))
    history: list[float] = []
    if iterations == 0:
        res = CEMResult(np.zeros(A), mean, history)
        return res if return_info else res.action
    noise_seed = int(rng.integers(2**62))
    h0 = np.repeat(start.h.data[:1], candidates, axis=0)
    c0 = np.repeat(start.s_c.data[:1], candidates, axis=0)
    base = LatentState(Tensor(h0), Tensor(c0))

    def score(seqs: np.ndarray) -> np.ndarray:
        traj = model.imagine_rollout(base, horizon, actions=np.swapaxes(seqs, 0, 1),
                                     rng=_SharedNoise(noise_seed))
        total = traj.reward_mean.data[1:].sum(axis=0)
        if value_fn is not None:
            total = total + value_fn(traj.features()[-1]).data
        return total

    elite_seqs = np.zeros((0, horizon, A))
    elite_scores = np.zeros(0)
    for _ in range(iterations):
        n_new = candidates - len(elite_seqs)
        fresh = np.clip(mean + std * rng.standard_normal((n_new, horizon, A)), -1.0, 1.0)
        pool = np.concatenate([elite_seqs, fresh], axis=0)
        scores = score(pool)
        # kept elites are re-scored under the same shared noise, so their scores are unchanged
        order = np.argsort(-scores, kind="stable")[:elites]
        elite_seqs, elite_scores = pool[order], scores[order]
        history.append(float(elite_scores.mean()))
        mean = elite_seqs.mean(axis=0)
        std = np.maximum(elite_seqs.std(axis=0), min_std)
    res = CEMResult(np.clip(mean[0], -1.0, 1.0), mean, history)
    return res if return_info else res.action


# acting

class LatentPolicy:
    """Env-facing policy: filters observations online and acts from the latent state."""

    name = "actor"

    def __init__(self, agent: "Agent", noise_std: float = 0.0, seed: int = 0, use_cem: bool = False):
        self.agent = agent
        self.noise_std = noise_std
        self.use_cem = use_cem
        self.rng = np.random.default_rng(seed)
        self.state: LatentState | None = None
        if use_cem:
            self.name = "cem"

    def reset(self) -> None:
        self.state = self.agent.model.initial_state(1)

    def act(self) -> np.ndarray:
        cfg = self.agent.train_config
        if self.use_cem:
            return cem_plan(self.agent.model, self.state, cfg.cem_horizon, cfg.cem_candidates,
                            cfg.cem_iterations, cfg.cem_elites, self.rng, value_fn=self.agent.critic)
        a = self.agent.actor.mode(self.state.features()).data[0]
        if self.noise_std > 0:
            a = a + self.noise_std * self.rng.standard_normal(a.shape)
        return np.clip(a, -1.0, 1.0)

    def observe(self, action, observations, present) -> None:
        obs = {m: np.asarray(x)[None] for m, x in observations.items()}
        self.state = self.agent.model.filter_step(self.state, np.asarray(action)[None], obs,
                                                  present, self.rng, sample=False)


# agent

class Agent:
    """World model, actor, critic and their optimizers, built from a RunConfig."""

    def __init__(self, run_config: RunConfig):
        self.run_config = run_config
        self.train_config: TrainConfig = run_config.train
        tc = self.train_config
        self.model = MSSM(run_config.model_config())
        mc = self.model.config
        rng = np.random.default_rng([tc.seed, 1])
        feat = mc.h_dim + mc.c_dim
        self.ac_params = ParamStore()
        self.actor = Actor(self.ac_params, feat, mc.action_dim, mc.hidden, rng, mc.activation)
        self.critic = Critic(self.ac_params, feat, mc.hidden, rng, mc.activation)
        actor_p = [p for n, p in self.ac_params.items() if n.startswith("actor.")]
        critic_p = [p for n, p in self.ac_params.items() if n.startswith("critic.")]
        self.model_opt = Adam(self.model.params, tc.model_lr, clip_norm=tc.grad_clip)
        self.actor_opt = Adam(actor_p, tc.actor_lr, clip_norm=tc.grad_clip)
        self.critic_opt = Adam(critic_p, tc.critic_lr, clip_norm=tc.grad_clip)
        self.rng = np.random.default_rng([tc.seed, 2])
        self.step = 0
        self.episodes_collected = 0

    def model_update(self, batch: SequenceBatch) -> LossBreakdown:
        tc = self.train_config
        seed = int(self.rng.integers(2**62))
        with Tape() as tape:
            loss = world_model_loss(self.model, batch, tc.variant, seed, tc.modality_weights or None,
                                    tc.free_nats, tc.sequence_level)
            if not np.isfinite(loss.value):
                raise DivergenceError(f"non-finite world-model loss ({loss.value})")
            self.model_opt.zero_grad()
            tape.backward(loss.total)
        self.model_opt.step()
        return loss

    def imagine_update(self, post: FilterOutput) -> ActorCriticMetrics:
        tc = self.train_config
        start = select_starts(post, tc.imagine_starts, self.rng)
        return actor_critic_update(self.model, self.actor, self.critic, self.actor_opt, self.critic_opt,
                                   start, tc.horizon, tc.gamma, tc.td_lambda, self.rng)

    def policy(self, noise_std: float = 0.0, seed: int = 0, use_cem: bool = False) -> LatentPolicy:
        return LatentPolicy(self, noise_std, seed, use_cem)

    def exploration_std(self, step: int) -> float:
        tc = self.train_config
        frac = min(step / max(tc.steps - 1, 1), 1.0)
        return tc.expl_noise + frac * (tc.expl_noise_final - tc.expl_noise)

    # checkpoints

    def sections(self) -> dict[str, dict[str, np.ndarray]]:
        out = {
            "model": self.model.params.state_dict(),
            "policy": self.ac_params.state_dict(),
        }
        for key, opt in (("opt_model", self.model_opt), ("opt_actor", self.actor_opt), ("opt_critic", self.critic_opt)):
            out[key] = opt.state_dict()
        return out

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        meta = {
            "model_config": self.model.config.to_dict(),
            "model_fingerprint": self.model.config.fingerprint(),
            "run_config": self.run_config.to_dict(),
            "step": self.step,
            "episodes_collected": self.episodes_collected,
            "rng_state": self.rng.bit_generator.state,
        }
        meta.update(extra or {})
        return save_checkpoint(path, self.sections(), meta)

    def load(self, path: str | Path, weights_only: bool = False) -> dict:
        sections, meta = load_checkpoint(path)
        live_model = {n: p.data.shape for n, p in self.model.params.items()}
        live_policy = {n: p.data.shape for n, p in self.ac_params.items()}
        check_shapes("model", sections.get("model", {}), live_model)
        check_shapes("policy", sections.get("policy", {}), live_policy)
        self.model.params.load_state_dict(sections["model"])
        self.ac_params.load_state_dict(sections["policy"])
        if not weights_only:
            self.model_opt.load_state_dict(sections["opt_model"])
            self.actor_opt.load_state_dict(sections["opt_actor"])
            self.critic_opt.load_state_dict(sections["opt_critic"])
            self.rng.bit_generator.state = meta["rng_state"]
            self.step = int(meta["step"])
            self.episodes_collected = int(meta["episodes_collected"])
        return meta

    @classmethod
    def from_checkpoint(cls, path: str | Path, run_config: RunConfig | None = None) -> "Agent":
        _, meta = load_checkpoint(path)
        if run_config is None:
            from .config import from_dict
            run_config = from_dict(meta["run_config"])
        agent = cls(run_config)
        agent.load(path, weights_only=True)
        return agent


# evaluation

@dataclass
class EvalReport:
    mean: float
    std: float
    returns: list[float]
    missing_rate: float
    masked_fraction: float
    episodes: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def summary(self) -> str:
        return f"{self.mean:.2f} ± {self.std:.2f} over {self.episodes} episodes (missing {self.missing_rate:.1%})"


def evaluate(agent: Agent, env: ToyWorldConfig, missing_rate: float, episodes: int, seed: int = 10_000,
             use_cem: bool = False) -> EvalReport:
    """Run noise-free episodes with masks applied before filtering."""
    returns, masked = [], []
    for i in range(episodes):
        ep_seed = seed + i
        pol = agent.policy(noise_std=0.0, seed=ep_seed, use_cem=use_cem)
        ep = collect_episode(env, pol, MissingnessModel(missing_rate, ep_seed), seed=ep_seed)
        returns.append(ep.total_reward)
        masked.append(np.mean([1.0 - k.mean() for k in ep.masks.values()]))
    arr = np.asarray(returns)
    return EvalReport(float(arr.mean()), float(arr.std()), [float(r) for r in arr], missing_rate,
                      float(np.mean(masked)), episodes)


# training loop

class MetricsWriter:
    def __init__(self, path: Path | None):
        self.path = path
        self.records: list[dict] = []

    def emit(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, default=float) + "\n")


@dataclass
class TrainResult:
    agent: Agent
    buffer: ReplayBuffer
    records: list[dict]
    run_dir: Path | None


def _episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 3, index]).generate_state(1)[0])


def _mean_records(records: list[dict]) -> dict:
    out: dict = {}
    for key in records[0]:
        vals = [r[key] for r in records if isinstance(r.get(key), (int, float)) and not isinstance(r.get(key), bool)]
        if vals:
            out[key] = float(np.mean(vals))
    return out


def train_loop(run_config: RunConfig, run_dir: str | Path | None = None, resume: bool = False,
               offline: list[Episode] | None = None, progress: Callable[[dict], None] | None = None,
               stop_after: int | None = None) -> TrainResult:
    """Alternate collection, world-model updates and imagination updates.

    Each outer step collects one episode (skipped with ``offline`` data), then
    runs ``updates_per_step`` model and actor-critic updates. With a run
    directory, episodes and checkpoints are written there and ``resume``
    continues bit-exactly from ``checkpoint.npz``. ``stop_after`` ends this call
    early after that many outer steps, as if the process had been interrupted.
    """
    tc = run_config.train
    env = run_config.env_config()
    rd = Path(run_dir) if run_dir is not None else None
    agent = Agent(run_config)
    buffer = ReplayBuffer(tc.buffer_capacity)
    ckpt = rd / "checkpoint.npz" if rd is not None else None
    ep_dir = rd / "episodes" if rd is not None else None
    if rd is not None:
        rd.mkdir(parents=True, exist_ok=True)
        ep_dir.mkdir(exist_ok=True)
        run_config.save(rd / "config.json")
        if not resume and (rd / "metrics.jsonl").exists():
            (rd / "metrics.jsonl").unlink()
    metrics = MetricsWriter(rd / "metrics.jsonl" if rd is not None else None)

    def store(ep: Episode) -> None:
        buffer.add(ep)
        if ep_dir is not None:
            save_episode(ep_dir / f"episode_{agent.episodes_collected:06d}.npz", ep)
        agent.episodes_collected += 1

    def collect(policy) -> Episode:
        seed = _episode_seed(tc.seed, agent.episodes_collected)
        return collect_episode(env, policy, MissingnessModel(tc.missing_rate, seed), seed=seed)

    if offline is not None:
        for ep in offline:
            buffer.add(ep)
    if resume:
        if ckpt is None or not ckpt.exists():
            raise FileNotFoundError("resume requested but no checkpoint found in the run directory")
        agent.load(ckpt)
        if offline is None:
            for ep in load_episode_dir(ep_dir)[:agent.episodes_collected]:
                buffer.add(ep)
    elif offline is None:
        for _ in range(tc.seed_episodes):
            store(collect(RandomPolicy(_episode_seed(tc.seed, agent.episodes_collected))))

    first = agent.step
    while agent.step < tc.steps:
        step = agent.step
        if stop_after is not None and step - first >= stop_after:
            break
        t0 = time.perf_counter()
        if offline is None:
            noise = agent.exploration_std(step)
            ep = collect(agent.policy(noise_std=noise, seed=_episode_seed(tc.seed, 10**6 + agent.episodes_collected)))
            store(ep)
            metrics.emit({"step": step, "phase": "collect", "episode_return": ep.total_reward,
                          "missing_rate": tc.missing_rate, "exploration_std": noise,
                          "episodes": agent.episodes_collected})
        model_recs, ac_recs = [], []
        try:
            for _ in range(tc.updates_per_step):
                batch = sample_batch(buffer, tc.batch_size, tc.seq_len, agent.rng)
                loss = agent.model_update(batch)
                rec = loss.to_record()
                rec["grad_norm"] = agent.model_opt.last_norm
                rec["clipped"] = float(agent.model_opt.last_clipped)
                model_recs.append(rec)
                ac_recs.append(agent.imagine_update(loss.posterior).to_record())
        except (dm.DiffMathError, FloatingPointError) as exc:
            raise DivergenceError(f"step {step}: {exc}") from exc
        agent.step += 1
        model_rec = {"step": step, "phase": "model", "variant": tc.variant, **_mean_records(model_recs)}
        ac_rec = {"step": step, "phase": "actor_critic", **_mean_records(ac_recs),
                  "seconds": time.perf_counter() - t0}
        metrics.emit(model_rec)
        metrics.emit(ac_rec)
        if progress is not None:
            progress(ac_rec | {"model_loss": model_rec.get("loss")})
        if tc.eval_every and agent.step % tc.eval_every == 0:
            for rate in PAPER_REGIMES.values():
                rep = evaluate(agent, env, rate, tc.eval_episodes, use_cem=tc.eval_with_cem)
                metrics.emit({"step": step, "phase": "eval", "missing_rate": rate,
                              "episode_return": rep.mean, "episode_return_std": rep.std})
        if ckpt is not None and (agent.step % tc.checkpoint_every == 0 or agent.step == tc.steps):
            agent.save(ckpt)
    return TrainResult(agent, buffer, metrics.records, rd)
