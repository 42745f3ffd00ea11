"""2D multi-sensor toy world and the missing-segment simulator.

A point robot moves in the unit square towards a fixed goal. Depending on the
selected modality set it is observed through a noisy position sensor and a
ceiling camera (``toy2d``), two cameras with different viewpoints
(``toy2d-dualcam``), or independent x and y sensors (``toy2d-axes``).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from .data import Episode
from .mssm import ModalitySpec

ENV_NAMES = ("toy2d", "toy2d-dualcam", "toy2d-axes")
ACTION_DIM = 2


@dataclass(frozen=True)
class ToyWorldConfig:
    modality_set: str = "toy2d"
    arena: float = 1.0
    goal: tuple[float, float] = (0.75, 0.75)
    resolution: int = 16
    position_noise: float = 0.02
    distractor: float = 0.3
    blob_sigma: float = 1.0  # in pixels
    tactile: bool = False
    episode_length: int = 100
    step_size: float = 0.05
    goal_radius: float = 0.05
    goal_bonus: float = 1.0
    contact_margin: float = 0.02

    def __post_init__(self):
        if self.modality_set not in ENV_NAMES:
            raise ValueError(f"unknown modality set {self.modality_set!r}; expected one of {ENV_NAMES}")
        if self.resolution < 4:
            raise ValueError("resolution must be >= 4")
        if self.position_noise < 0 or self.distractor < 0:
            raise ValueError("noise levels must be >= 0")
        object.__setattr__(self, "goal", tuple(float(g) for g in self.goal))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["goal"] = list(self.goal)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyWorldConfig":
        d = dict(d)
        if "goal" in d:
            d["goal"] = tuple(d["goal"])
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def modality_specs(self, encoder_hidden=(64, 64)) -> list[ModalitySpec]:
        r = self.resolution
        if self.modality_set == "toy2d":
            specs = [ModalitySpec("position", (2,), encoder_hidden), ModalitySpec("camera", (r, r), encoder_hidden)]
        elif self.modality_set == "toy2d-dualcam":
            specs = [ModalitySpec("front", (r, r), encoder_hidden), ModalitySpec("rear", (r, r), encoder_hidden)]
        else:
            specs = [ModalitySpec("x_sensor", (1,), encoder_hidden), ModalitySpec("y_sensor", (1,), encoder_hidden)]
        if self.tactile:
            specs.append(ModalitySpec("tactile", (4,), encoder_hidden))
        return specs

    @property
    def modality_names(self) -> list[str]:
        return [s.name for s in self.modality_specs()]


@dataclass(frozen=True)
class ToyState:
    position: tuple[float, float]
    t: int
    noise_key: int

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.position, dtype=np.float64)


def env_config(name: str, **overrides) -> ToyWorldConfig:
    return ToyWorldConfig(modality_set=name, **overrides)


def reset(config: ToyWorldConfig, seed: int) -> tuple[ToyState, dict[str, np.ndarray], dict]:
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0.0, config.arena, size=2)
    state = ToyState((float(pos[0]), float(pos[1])), 0, int(rng.integers(2**62)))
    info = {"goal_distance": goal_distance(state, config), "position": state.xy}
    return state, render_modalities(state, config), info


def goal_distance(state: ToyState, config: ToyWorldConfig) -> float:
    return float(np.linalg.norm(state.xy - np.asarray(config.goal)))


def reward_at(position: np.ndarray, config: ToyWorldConfig) -> float:
    dist = float(np.linalg.norm(np.asarray(position) - np.asarray(config.goal)))
    return -dist + (config.goal_bonus if dist <= config.goal_radius else 0.0)


def step(state: ToyState, action, config: ToyWorldConfig):
    """Advance one step. Returns ``(next_state, observations, reward, done)``."""
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(ACTION_DIM), -1.0, 1.0)
    pos = np.clip(state.xy + config.step_size * a, 0.0, config.arena)
    nxt = ToyState((float(pos[0]), float(pos[1])), state.t + 1, state.noise_key)
    reward = reward_at(pos, config)
    done = nxt.t >= config.episode_length
    return nxt, render_modalities(nxt, config), reward, done


def _blob(xy: np.ndarray, config: ToyWorldConfig, sigma_px: float, flip: bool) -> np.ndarray:
    r = config.resolution
    centers = (np.arange(r) + 0.5) / r * config.arena
    sigma = sigma_px / r * config.arena
    x, y = xy
    if flip:
        x, y = config.arena - x, config.arena - y
    gx = np.exp(-0.5 * ((centers - x) / sigma) ** 2)
    gy = np.exp(-0.5 * ((centers - y) / sigma) ** 2)
    return np.outer(gy, gx)  # rows index y, columns index x


def render_modalities(state: ToyState, config: ToyWorldConfig) -> dict[str, np.ndarray]:
    """Pure function of ``(state, config)``: sensor noise is keyed on the state's noise key and step."""
    rng = np.random.default_rng([state.noise_key, state.t])
    xy = state.xy
    r = config.resolution
    out: dict[str, np.ndarray] = {}
    if config.modality_set == "toy2d":
        out["position"] = xy + config.position_noise * rng.standard_normal(2)
        out["camera"] = _blob(xy, config, config.blob_sigma, False) + config.distractor * rng.uniform(size=(r, r))
    elif config.modality_set == "toy2d-dualcam":
        out["front"] = _blob(xy, config, config.blob_sigma, False) + config.distractor * rng.uniform(size=(r, r))
        out["rear"] = _blob(xy, config, 1.5 * config.blob_sigma, True) + config.distractor * rng.uniform(size=(r, r))
    else:
        noise = config.position_noise * rng.standard_normal(2)
        out["x_sensor"] = np.array([xy[0] + noise[0]])
        out["y_sensor"] = np.array([xy[1] + noise[1]])
    if config.tactile:
        m, a = config.contact_margin, config.arena
        out["tactile"] = np.array([xy[0] <= m, xy[0] >= a - m, xy[1] <= m, xy[1] >= a - m], dtype=np.float64)
    return out


class ToyWorld:
    """Stateful wrapper around :func:`reset` / :func:`step`."""

    def __init__(self, config: ToyWorldConfig):
        self.config = config
        self.state: ToyState | None = None

    def reset(self, seed: int):
        self.state, obs, info = reset(self.config, seed)
        return obs, info

    def step(self, action):
        if self.state is None:
            raise RuntimeError("call reset() first")
        self.state, obs, reward, done = step(self.state, action, self.config)
        return obs, reward, done

    @property
    def position(self) -> np.ndarray:
        return self.state.xy


# missing data

@dataclass(frozen=True)
class MissingnessModel:
    target_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.target_rate <= 1.0:
            raise ValueError(f"missing rate must lie in [0, 1], got {self.target_rate}")


PAPER_REGIMES = {"none": 0.0, "medium": 0.375, "high": 0.75}


def masked_count(rate: float, T: int, rng: np.random.Generator) -> int:
    """Number of steps to drop: exact when ``rate * T`` is whole, otherwise floor or
    ceil with probability equal to the fractional part (so long-run rates are exact)."""
    target = rate * T
    base = int(np.floor(target + 1e-9))
    frac = target - base
    if frac > 1e-9 and rng.random() < frac:
        base += 1
    return min(base, T)


def _drop_segments(T: int, k: int, rng: np.random.Generator) -> np.ndarray:
    dropped = np.zeros(T, dtype=bool)
    count = 0
    while count < k:
        length = int(rng.integers(1, k - count + 1))
        start = int(rng.integers(0, T - length + 1))
        dropped[start:start + length] = True
        count = int(dropped.sum())
    return dropped


def generate_masks(model: MissingnessModel, T: int, M: int) -> np.ndarray:
    """Availability masks ``[M, T]`` (True = present) built from uniformly random segments.

    Segments with random starts and lengths are dropped until exactly the target
    count of steps per modality is missing; segment lengths never exceed the
    remaining budget, so the count is hit without trimming.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(model.seed)
    masks = np.ones((M, T), dtype=bool)
    if model.target_rate == 0.0:
        return masks
    for m in range(M):
        k = masked_count(model.target_rate, T, rng)
        masks[m] = ~_drop_segments(T, k, rng)
    return masks


# collection

class Policy(Protocol):
    def reset(self) -> None: ...

    def act(self) -> np.ndarray: ...

    def observe(self, action: np.ndarray, observations: dict[str, np.ndarray], present: dict[str, bool]) -> None: ...


class RandomPolicy:
    name = "random"

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def reset(self) -> None:
        pass

    def act(self) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, size=ACTION_DIM)

    def observe(self, action, observations, present) -> None:
        pass


def collect_episode(config: ToyWorldConfig, policy=None, missingness: MissingnessModel | None = None,
                    seed: int = 0, on_step: Callable | None = None) -> Episode:
    """Roll one episode.

    The policy picks action ``t`` from everything seen before it, then receives the
    resulting (masked) observations through ``observe``. Masks are drawn before
    the rollout so the policy only ever sees the available modalities.
    """
    policy = policy if policy is not None else RandomPolicy(seed)
    missingness = missingness if missingness is not None else MissingnessModel(0.0, seed)
    names = config.modality_names
    T = config.episode_length
    mask_arr = generate_masks(missingness, T, len(names))
    state, _, _ = reset(config, seed)
    policy.reset()
    obs_buf = {m: [] for m in names}
    actions, rewards, positions = [], [], []
    for t in range(T):
        a = np.clip(np.asarray(policy.act(), dtype=np.float64), -1.0, 1.0)
        state, obs, reward, _ = step(state, a, config)
        present = {m: bool(mask_arr[i, t]) for i, m in enumerate(names)}
        policy.observe(a, obs, present)
        if on_step is not None:
            on_step(t, state, a, reward)
        for m in names:
            obs_buf[m].append(obs[m])
        actions.append(a)
        rewards.append(reward)
        positions.append(state.xy)
    header = {
        "env": config.modality_set,
        "env_config": config.to_dict(),
        "config_fingerprint": config.fingerprint(),
        "seed": int(seed),
        "policy": getattr(policy, "name", type(policy).__name__),
        "missing_rate": missingness.target_rate,
        "missing_seed": missingness.seed,
    }
    return Episode(
        {m: np.asarray(v, dtype=np.float64) for m, v in obs_buf.items()},
        np.asarray(actions), np.asarray(rewards),
        {m: mask_arr[i].copy() for i, m in enumerate(names)},
        np.asarray(positions), header,
    )
