import numpy as np
import pytest

from mummi.data import Episode, SequenceBatch
from mummi.envs import MissingnessModel, collect_episode, env_config
from mummi.mssm import MSSM, ModalitySpec, ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        modalities=[ModalitySpec("position", (2,), (6,)), ModalitySpec("camera", (4, 4), (6,))],
        h_dim=5, c_dim=3, f_dim=4, embed_dim=4, hidden=(6,), init_seed=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_env(T: int = 3):
    return env_config("toy2d", resolution=4, episode_length=T)


def tiny_batch(B: int = 2, T: int = 3, rate: float = 0.0, seed: int = 0) -> SequenceBatch:
    env = tiny_env(T)
    eps = [collect_episode(env, seed=seed + i, missingness=MissingnessModel(rate, seed + i)) for i in range(B)]
    return SequenceBatch.stack(eps)


@pytest.fixture
def model() -> MSSM:
    return MSSM(tiny_config())


@pytest.fixture
def batch() -> SequenceBatch:
    return tiny_batch()


def zero_params(model: MSSM, prefix: str) -> None:
    for name, p in model.params.items():
        if name.startswith(prefix):
            p.data[...] = 0.0


def make_episode(T: int, obs_dims: dict[str, tuple], seed: int = 0) -> Episode:
    rng = np.random.default_rng(seed)
    return Episode(
        {m: rng.normal(size=(T,) + shape) for m, shape in obs_dims.items()},
        rng.uniform(-1, 1, size=(T, 2)), rng.normal(size=T),
        {m: np.ones(T, dtype=bool) for m in obs_dims},
    )


# acceptance results, printed once more in the terminal summary
ACCEPTANCE: list[str] = []


@pytest.fixture
def accept():
    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
