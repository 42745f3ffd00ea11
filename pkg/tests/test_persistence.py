import numpy as np
import pytest

from mummi.envs import MissingnessModel, collect_episode, env_config
from mummi.persistence import (CheckpointError, check_shapes, load_checkpoint, load_episode, load_episode_dir,
                               save_checkpoint, save_episode, save_episode_dir)


def test_episode_roundtrip_is_bit_exact(tmp_path):
    ep = collect_episode(env_config("toy2d-dualcam", episode_length=12), seed=3,
                         missingness=MissingnessModel(0.5, 1))
    back = load_episode(save_episode(tmp_path / "ep.npz", ep))
    np.testing.assert_array_equal(back.actions, ep.actions)
    np.testing.assert_array_equal(back.rewards, ep.rewards)
    np.testing.assert_array_equal(back.positions, ep.positions)
    for m in ep.modalities:
        np.testing.assert_array_equal(back.observations[m], ep.observations[m])
        np.testing.assert_array_equal(back.masks[m], ep.masks[m])
        assert back.masks[m].dtype == bool
    assert back.header == ep.header
    assert back.modalities == ep.modalities


def test_episode_dir_keeps_order(tmp_path):
    cfg = env_config("toy2d", episode_length=4)
    eps = [collect_episode(cfg, seed=s) for s in range(3)]
    save_episode_dir(tmp_path, eps)
    back = load_episode_dir(tmp_path)
    assert [e.header["seed"] for e in back] == [0, 1, 2]


def test_episode_rejects_foreign_archive(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, header=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ValueError):
        load_episode(path)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    sections = {"model": {"a.W": rng.normal(size=(3, 4)), "a.b": rng.normal(size=4)},
                "opt": {"t": np.array(7)}}
    save_checkpoint(tmp_path / "c.npz", sections, {"step": 5, "note": [1, 2]})
    back, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta["step"] == 5 and meta["note"] == [1, 2]
    for s in sections:
        for k, v in sections[s].items():
            np.testing.assert_array_equal(back[s][k], v)
    assert not (tmp_path / "c.npz.tmp").exists()


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.npz")


def test_check_shapes_lists_every_problem():
    saved = {"w": np.zeros((2, 3)), "old": np.zeros(1)}
    live = {"w": (3, 3), "new": (4,)}
    with pytest.raises(CheckpointError) as info:
        check_shapes("model", saved, live)
    msg = str(info.value)
    assert "missing ['new']" in msg and "unexpected ['old']" in msg and "w: checkpoint (2, 3) vs live (3, 3)" in msg
    check_shapes("model", {"w": np.zeros((3, 3))}, {"w": (3, 3)})
