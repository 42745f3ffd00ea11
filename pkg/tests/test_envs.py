import numpy as np
import pytest

from mummi.envs import (PAPER_REGIMES, MissingnessModel, RandomPolicy, ToyState, ToyWorld, ToyWorldConfig,
                        collect_episode, env_config, generate_masks, render_modalities, reset, reward_at, step)


def at(x, y, t=0, key=0):
    return ToyState((x, y), t, key)


def test_reset_is_seeded_and_in_bounds():
    cfg = env_config("toy2d")
    for seed in range(50):
        s1, o1, info = reset(cfg, seed)
        s2, o2, _ = reset(cfg, seed)
        assert s1 == s2
        np.testing.assert_array_equal(o1["camera"], o2["camera"])
        assert 0 <= s1.position[0] <= 1 and 0 <= s1.position[1] <= 1
        assert info["goal_distance"] == pytest.approx(np.linalg.norm(s1.xy - np.array(cfg.goal)))


def test_reward_examples():
    cfg = env_config("toy2d")
    _, _, r, _ = step(at(*cfg.goal), [0, 0], cfg)
    assert r == 1.0
    _, _, r, _ = step(at(0.25, 0.75), [0, 0], cfg)
    assert r == pytest.approx(-0.5)


def test_moving_towards_goal_increases_reward():
    cfg = env_config("toy2d")
    goal = np.array(cfg.goal)
    for x in np.linspace(0, 1, 50):
        for y in np.linspace(0, 1, 50):
            p = np.array([x, y])
            d = goal - p
            dist = np.linalg.norm(d)
            if dist < 2 * cfg.step_size:
                continue
            nxt, _, r, _ = step(at(x, y), d / np.abs(d).max(), cfg)
            assert r > reward_at(p, cfg)


def test_episode_ends_at_fixed_length():
    cfg = env_config("toy2d", episode_length=5)
    world = ToyWorld(cfg)
    world.reset(0)
    dones = [world.step([0.1, 0.1])[2] for _ in range(5)]
    assert dones == [False] * 4 + [True]


def test_dynamics_deterministic_given_seed_and_actions():
    cfg = env_config("toy2d-dualcam")
    acts = np.random.default_rng(0).uniform(-1, 1, (20, 2))
    runs = []
    for _ in range(2):
        s, _, _ = reset(cfg, 3)
        out = []
        for a in acts:
            s, obs, r, _ = step(s, a, cfg)
            out.append((s.position, r, obs["rear"].sum()))
        runs.append(out)
    assert runs[0] == runs[1]


def test_rendering_is_pure():
    cfg = env_config("toy2d", tactile=True)
    s = at(0.3, 0.6, t=4, key=11)
    a, b = render_modalities(s, cfg), render_modalities(s, cfg)
    for m in a:
        np.testing.assert_array_equal(a[m], b[m])
    assert set(a) == {"position", "camera", "tactile"}


def test_blob_peak_at_center_pixel():
    cfg = env_config("toy2d", resolution=15, distractor=0.0)
    img = render_modalities(at(0.5, 0.5), cfg)["camera"]
    assert np.unravel_index(np.argmax(img), img.shape) == (7, 7)


def test_zero_noise_position_is_exact():
    cfg = env_config("toy2d", position_noise=0.0)
    np.testing.assert_array_equal(render_modalities(at(0.2, 0.9), cfg)["position"], [0.2, 0.9])
    cfg = env_config("toy2d-axes", position_noise=0.0)
    obs = render_modalities(at(0.2, 0.9), cfg)
    assert obs["x_sensor"][0] == 0.2 and obs["y_sensor"][0] == 0.9


def test_blob_centroid_tracks_position():
    cfg = env_config("toy2d", distractor=0.0)
    r = cfg.resolution
    centers = (np.arange(r) + 0.5) / r
    rng = np.random.default_rng(0)
    for _ in range(100):
        x, y = rng.uniform(0.1, 0.9, 2)
        img = render_modalities(at(x, y), cfg)["camera"]
        cx = (img.sum(0) * centers).sum() / img.sum()
        cy = (img.sum(1) * centers).sum() / img.sum()
        assert abs(cx - x) < 1 / r and abs(cy - y) < 1 / r


def test_rear_camera_is_flipped():
    cfg = env_config("toy2d-dualcam", distractor=0.0)
    obs = render_modalities(at(0.1, 0.2), cfg)
    fy, fx = np.unravel_index(np.argmax(obs["front"]), obs["front"].shape)
    ry, rx = np.unravel_index(np.argmax(obs["rear"]), obs["rear"].shape)
    assert (fy + ry, fx + rx) == (cfg.resolution - 1, cfg.resolution - 1)


def test_tactile_flags_walls():
    cfg = env_config("toy2d", tactile=True)
    np.testing.assert_array_equal(render_modalities(at(0.0, 0.5), cfg)["tactile"], [1, 0, 0, 0])
    np.testing.assert_array_equal(render_modalities(at(0.5, 1.0), cfg)["tactile"], [0, 0, 0, 1])


def test_config_validation():
    with pytest.raises(ValueError):
        env_config("mujoco")
    with pytest.raises(ValueError):
        ToyWorldConfig(resolution=2)
    cfg = env_config("toy2d-axes")
    assert ToyWorldConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.modality_names == ["x_sensor", "y_sensor"]


def test_masks_rate_zero_all_present():
    assert generate_masks(MissingnessModel(0.0, 1), 100, 3).all()


def test_masks_exact_count_when_integral():
    for seed in range(50):
        masks = generate_masks(MissingnessModel(0.375, seed), 96, 2)
        assert masks.shape == (2, 96)
        np.testing.assert_array_equal((~masks).sum(axis=1), [36, 36])
    assert (~generate_masks(MissingnessModel(0.75, 0), 100, 2)).sum(axis=1).tolist() == [75, 75]


def test_masks_fractional_count_is_floor_or_ceil():
    counts = {int((~generate_masks(MissingnessModel(0.375, s), 100, 1)).sum()) for s in range(200)}
    assert counts == {37, 38}


@pytest.mark.parametrize("rate", [PAPER_REGIMES["medium"], PAPER_REGIMES["high"]])
def test_masks_long_run_rate(rate):
    dropped = sum(int((~generate_masks(MissingnessModel(rate, s), 100, 2)).sum()) for s in range(1000))
    assert abs(dropped / (1000 * 200) - rate) <= 0.001


def test_masks_reject_bad_inputs():
    with pytest.raises(ValueError):
        MissingnessModel(1.5)
    with pytest.raises(ValueError):
        generate_masks(MissingnessModel(0.5), 0, 2)


def test_collect_episode_contract():
    cfg = env_config("toy2d", episode_length=30)
    ep = collect_episode(cfg, seed=4, missingness=MissingnessModel(0.5, 9))
    assert len(ep) == 30 and ep.observations["camera"].shape == (30, 16, 16)
    assert ep.header["policy"] == "random" and ep.header["seed"] == 4
    again = collect_episode(cfg, seed=4, missingness=MissingnessModel(0.5, 9))
    for m in ep.modalities:
        np.testing.assert_array_equal(ep.masks[m], again.masks[m])
    # replay the recorded actions step by step
    s, _, _ = reset(cfg, 4)
    for t, a in enumerate(ep.actions):
        s, obs, r, _ = step(s, a, cfg)
        assert r == ep.rewards[t]
        np.testing.assert_array_equal(obs["camera"], ep.observations["camera"][t])


def test_policy_sees_masked_presence():
    cfg = env_config("toy2d", episode_length=20)
    seen = []

    class Spy(RandomPolicy):
        def observe(self, action, observations, present):
            seen.append(present["camera"])

    ep = collect_episode(cfg, Spy(0), MissingnessModel(0.5, 1), seed=0)
    np.testing.assert_array_equal(seen, ep.masks["camera"])


def test_random_policy_baseline_near_minus_45():
    cfg = env_config("toy2d")
    returns = [collect_episode(cfg, seed=s).total_reward for s in range(100)]
    assert abs(np.mean(returns) + 45) <= 10
