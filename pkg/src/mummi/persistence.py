"""On-disk formats: per-episode archives and model checkpoints (both plain ``.npz``)."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import Episode

EPISODE_FORMAT = "mummi-episode/1"
CHECKPOINT_FORMAT = "mummi-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _json_array(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)


def _read_json(arr: np.ndarray):
    return json.loads(arr.tobytes().decode())


def save_episode(path: str | Path, episode: Episode) -> Path:
    path = Path(path)
    arrays = {"actions": episode.actions, "rewards": episode.rewards}
    for m in episode.modalities:
        arrays[f"obs/{m}"] = episode.observations[m]
        arrays[f"mask/{m}"] = episode.masks[m]
    if episode.positions is not None:
        arrays["positions"] = episode.positions
    header = dict(episode.header)
    header["format"] = EPISODE_FORMAT
    header["modalities"] = episode.modalities
    header["shapes"] = {k: list(v.shape) for k, v in arrays.items()}
    arrays["header"] = _json_array(header)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_episode(path: str | Path) -> Episode:
    with np.load(path, allow_pickle=False) as z:
        header = _read_json(z["header"])
        if header.get("format") != EPISODE_FORMAT:
            raise ValueError(f"{path}: not an episode archive")
        mods = header["modalities"]
        ep = Episode(
            {m: z[f"obs/{m}"] for m in mods},
            z["actions"], z["rewards"],
            {m: z[f"mask/{m}"] for m in mods},
            z["positions"] if "positions" in z.files else None,
            {k: v for k, v in header.items() if k not in ("format", "modalities", "shapes")},
        )
    for key, shape in header["shapes"].items():
        if key.startswith("obs/"):
            actual = ep.observations[key[4:]].shape
        elif key.startswith("mask/"):
            actual = ep.masks[key[5:]].shape
        else:
            actual = getattr(ep, key).shape
        if list(actual) != shape:
            raise ValueError(f"{path}: {key} has shape {actual}, header says {shape}")
    return ep


def save_episode_dir(directory: str | Path, episodes, start_index: int = 0) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    return [save_episode(d / f"episode_{start_index + i:06d}.npz", ep) for i, ep in enumerate(episodes)]


def load_episode_dir(directory: str | Path) -> list[Episode]:
    return [load_episode(p) for p in sorted(Path(directory).glob("episode_*.npz"))]


def save_checkpoint(path: str | Path, sections: dict[str, dict[str, np.ndarray]], meta: dict) -> Path:
    """Write named parameter sections plus a JSON metadata block.

    Written to a temporary file first so an interrupted save never clobbers the
    previous checkpoint.
    """
    path = Path(path)
    arrays = {}
    for section, params in sections.items():
        for name, arr in params.items():
            arrays[f"{section}/{name}"] = np.asarray(arr)
    meta = dict(meta)
    meta["format"] = CHECKPOINT_FORMAT
    meta["sections"] = {s: {n: list(np.shape(a)) for n, a in p.items()} for s, p in sections.items()}
    arrays["__meta__"] = _json_array(meta)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = _read_json(z["__meta__"])
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a checkpoint")
        sections: dict[str, dict[str, np.ndarray]] = {}
        for key in z.files:
            if key == "__meta__":
                continue
            section, name = key.split("/", 1)
            sections.setdefault(section, {})[name] = z[key]
    return sections, meta


def check_shapes(section: str, saved: dict[str, np.ndarray], live: dict[str, tuple]) -> None:
    """Fail loudly when a checkpoint section does not match the live parameter shapes."""
    missing = sorted(set(live) - set(saved))
    extra = sorted(set(saved) - set(live))
    bad = [f"{k}: checkpoint {tuple(saved[k].shape)} vs live {tuple(live[k])}"
           for k in live if k in saved and tuple(saved[k].shape) != tuple(live[k])]
    if missing or extra or bad:
        parts = []
        if missing:
            parts.append(f"missing {missing}")
        if extra:
            parts.append(f"unexpected {extra}")
        if bad:
            parts.append("shape mismatch " + "; ".join(bad))
        raise CheckpointError(f"checkpoint section {section!r} incompatible: " + ", ".join(parts))
