"""Latent-space diagnostics: expert embeddings, linear probes, projections and a tiny PNG writer."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Episode, SequenceBatch
from .distributions import poe_fuse
from .envs import MissingnessModel, RandomPolicy, ToyWorldConfig, collect_episode
from .mssm import MSSM


@dataclass
class LatentSamples:
    """Expert means and stds for ``N`` fully observed states, plus their fused PoE."""

    positions: np.ndarray
    means: dict[str, np.ndarray]
    stds: dict[str, np.ndarray]
    fused: np.ndarray

    @property
    def modalities(self) -> list[str]:
        return list(self.means)

    def __len__(self) -> int:
        return len(self.positions)


def probe_episodes(env: ToyWorldConfig, n_states: int, seed: int = 0, policy_factory=None) -> list[Episode]:
    """Enough fully observed episodes to cover ``n_states`` states."""
    n_eps = -(-n_states // env.episode_length)
    make = policy_factory or RandomPolicy
    return [collect_episode(env, make(seed + i), MissingnessModel(0.0, seed + i), seed=seed + i)
            for i in range(n_eps)]


def latent_samples(model: MSSM, episodes: list[Episode], n: int | None = None) -> LatentSamples:
    obs = {m: np.concatenate([e.observations[m] for e in episodes]) for m in episodes[0].modalities}
    pos = np.concatenate([e.positions for e in episodes])
    if n is not None:
        obs = {m: o[:n] for m, o in obs.items()}
        pos = pos[:n]
    experts = {m: model.encode_modality(m, o) for m, o in obs.items()}
    fused = poe_fuse(list(experts.values()))
    return LatentSamples(pos, {m: e.mean.data for m, e in experts.items()},
                         {m: e.std.data for m, e in experts.items()}, fused.mean.data)


def linear_probe_r2(features: np.ndarray, targets: np.ndarray, train_frac: float = 0.5) -> np.ndarray:
    """Held-out R^2 (one per target column) of a least-squares affine probe.

    The first ``train_frac`` of the rows fit the probe and the rest score it.
    """
    X = np.c_[features, np.ones(len(features))]
    k = int(len(X) * train_frac)
    if not 0 < k < len(X):
        raise ValueError("need rows on both sides of the split")
    w, *_ = np.linalg.lstsq(X[:k], targets[:k], rcond=None)
    resid = targets[k:] - X[k:] @ w
    return 1.0 - (resid ** 2).mean(0) / targets[k:].var(0)


def filtered_probe_r2(model: MSSM, episodes: list[Episode], drop: tuple[str, ...] = (), seed: int = 0) -> np.ndarray:
    """Probe R^2 from filtered latent features ``[h, s_c]`` with the ``drop`` modalities masked throughout."""
    batch = SequenceBatch.stack(episodes)
    masks = {m: (np.zeros_like(k) if m in drop else k) for m, k in batch.masks.items()}
    post = model.filter_sequence(batch.with_masks(masks), seed)
    feats = np.concatenate([post.h.data, post.s_c.data], axis=-1)
    return linear_probe_r2(feats.reshape(-1, feats.shape[-1]), batch.positions.reshape(-1, 2))


def cross_modal_distance(samples: LatentSamples, a: str, b: str) -> float:
    """Mean Euclidean distance between two experts' embeddings of the same state."""
    return float(np.linalg.norm(samples.means[a] - samples.means[b], axis=-1).mean())


def calibration_ratio(samples: LatentSamples, num: str = "camera", den: str = "position") -> float:
    return float(samples.stds[num].mean() / samples.stds[den].mean())


def pca2(fit_on: np.ndarray):
    """Top-2 principal directions of ``fit_on``; returns a function projecting any ``[N, E]`` array."""
    center = fit_on.mean(0)
    if fit_on.shape[1] == 2:
        return lambda x: np.asarray(x) - center
    _, _, vt = np.linalg.svd(fit_on - center, full_matrices=False)
    basis = vt[:2].T
    return lambda x: (np.asarray(x) - center) @ basis


def projection_rows(samples: LatentSamples) -> list[dict]:
    """One row per (state, modality) plus one per fused state: ``N * (M + 1)`` rows."""
    project = pca2(samples.fused)
    rows = []
    for source, emb in list(samples.means.items()) + [("fused", samples.fused)]:
        p = project(emb)
        for i in range(len(samples)):
            rows.append({"source": source, "index": i, "pc1": p[i, 0], "pc2": p[i, 1],
                         "x": samples.positions[i, 0], "y": samples.positions[i, 1]})
    return rows


def write_png(path: str | Path, rgb: np.ndarray) -> Path:
    """Write an ``[H, W, 3]`` uint8 image as an 8-bit RGB PNG."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[i].tobytes() for i in range(h))

    def chunk(tag: bytes, data: bytes) -> bytes:
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    png = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
           + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))
    path = Path(path)
    path.write_bytes(png)
    return path


def scatter_image(points: np.ndarray, colors01: np.ndarray, size: int = 256, dot: int = 2) -> np.ndarray:
    """Render 2D points on a white canvas; red encodes colour[:, 0] and blue colour[:, 1]."""
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    lo, hi = points.min(0), points.max(0)
    span = np.where(hi > lo, hi - lo, 1.0)
    pix = ((points - lo) / span * (size - 1 - 2 * dot) + dot).round().astype(int)
    c = np.clip(colors01, 0, 1)
    rgb = np.stack([255 * c[:, 0], 64 * np.ones(len(c)), 255 * c[:, 1]], axis=1).astype(np.uint8)
    for (px, py), col in zip(pix, rgb):
        img[size - 1 - py - dot:size - py + dot, px - dot:px + dot + 1] = col
    return img
