"""Episode and batch containers shared by the environment, model and replay buffer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Episode:
    """One rollout. Index ``t`` holds the action taken at step ``t`` and what followed it.

    ``masks[m][t]`` is True when modality ``m`` was available at step ``t``.
    Masked observations stay in storage; consumers must honour the flags.
    """

    observations: dict[str, np.ndarray]
    actions: np.ndarray
    rewards: np.ndarray
    masks: dict[str, np.ndarray]
    positions: np.ndarray | None = None
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        T = len(self.actions)
        if T < 1:
            raise ValueError("episode must contain at least one step")
        if len(self.rewards) != T:
            raise ValueError(f"rewards length {len(self.rewards)} != actions length {T}")
        if set(self.observations) != set(self.masks):
            raise ValueError("observations and masks must name the same modalities")
        for m, obs in self.observations.items():
            if len(obs) != T:
                raise ValueError(f"modality {m!r} has {len(obs)} steps, expected {T}")
            mask = np.asarray(self.masks[m])
            if mask.shape != (T,) or mask.dtype != bool:
                raise ValueError(f"mask for {m!r} must be a boolean array of shape ({T},)")
            if not np.all(np.isfinite(obs)):
                raise ValueError(f"non-finite observation in modality {m!r}")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def modalities(self) -> list[str]:
        return list(self.observations)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    def slice(self, start: int, length: int) -> "Episode":
        sl = slice(start, start + length)
        return Episode(
            {m: o[sl] for m, o in self.observations.items()},
            self.actions[sl],
            self.rewards[sl],
            {m: k[sl] for m, k in self.masks.items()},
            None if self.positions is None else self.positions[sl],
            dict(self.header),
        )

    def as_batch(self) -> "SequenceBatch":
        return SequenceBatch.stack([self])


@dataclass
class SequenceBatch:
    """``B`` aligned sequences of length ``T``: arrays carry leading ``[B, T]`` axes."""

    observations: dict[str, np.ndarray]
    actions: np.ndarray
    rewards: np.ndarray
    masks: dict[str, np.ndarray]
    positions: np.ndarray | None = None

    @property
    def B(self) -> int:
        return self.actions.shape[0]

    @property
    def T(self) -> int:
        return self.actions.shape[1]

    @property
    def modalities(self) -> list[str]:
        return list(self.observations)

    @classmethod
    def stack(cls, episodes: list[Episode]) -> "SequenceBatch":
        if not episodes:
            raise ValueError("empty batch")
        mods = episodes[0].modalities
        pos = None
        if all(e.positions is not None for e in episodes):
            pos = np.stack([e.positions for e in episodes])
        return cls(
            {m: np.stack([e.observations[m] for e in episodes]) for m in mods},
            np.stack([e.actions for e in episodes]),
            np.stack([e.rewards for e in episodes]),
            {m: np.stack([e.masks[m] for e in episodes]) for m in mods},
            pos,
        )

    def without(self, modality: str) -> "SequenceBatch":
        return SequenceBatch(
            {m: o for m, o in self.observations.items() if m != modality},
            self.actions, self.rewards,
            {m: k for m, k in self.masks.items() if m != modality},
            self.positions,
        )

    def with_masks(self, masks: dict[str, np.ndarray]) -> "SequenceBatch":
        return SequenceBatch(self.observations, self.actions, self.rewards,
                             {m: np.asarray(masks[m], dtype=bool) for m in self.observations}, self.positions)
