"""Multi-modal state-space model.

The latent state at step ``t`` is ``(h_t, s^c_t, s^f_t)``:

* ``h_t = GRU(h_{t-1}, [s^c_{t-1}, a_{t-1}])`` is deterministic,
* ``p(s^c_t | h_t)`` and ``p(s^f_t | s^c_t)`` form the prior path,
* ``q(s^f_t | x^{1:M}_t)`` is a product of per-modality experts and
  ``q(s^c_t | s^f_t, h_t)`` mixes it with the recurrent context.

Decoders, the reward head and the projector all read ``[h, s^c]``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffmath as dm
from .data import Episode, SequenceBatch
from .diffmath import Tensor
from .distributions import DiagGaussian, from_raw, poe_fuse_guarded
from .layers import MLP, GRUCell, ParamStore


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    obs_shape: tuple[int, ...]
    encoder_hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not self.obs_shape:
            raise ValueError(f"modality {self.name!r}: obs_shape must be non-empty")
        object.__setattr__(self, "obs_shape", tuple(int(s) for s in self.obs_shape))
        object.__setattr__(self, "encoder_hidden", tuple(int(s) for s in self.encoder_hidden))

    @property
    def obs_dim(self) -> int:
        return int(np.prod(self.obs_shape))


@dataclass
class ModelConfig:
    modalities: list[ModalitySpec]
    action_dim: int = 2
    h_dim: int = 64
    c_dim: int = 16
    f_dim: int = 32
    embed_dim: int = 32
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "elu"
    std_min: float = 1e-3
    prior_expert: bool = False
    init_seed: int = 0

    def __post_init__(self):
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"modality names must be unique: {names}")
        if self.embed_dim != self.f_dim:
            raise ValueError("embed_dim must equal f_dim: the projector output is compared with expert means")
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = [dict(name=m.name, obs_shape=list(m.obs_shape), encoder_hidden=list(m.encoder_hidden))
                           for m in self.modalities]
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["modalities"] = [ModalitySpec(m["name"], tuple(m["obs_shape"]), tuple(m.get("encoder_hidden", (64, 64))))
                           for m in d["modalities"]]
        d["hidden"] = tuple(d.get("hidden", (64, 64)))
        return cls(**d)

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("init_seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class LatentState:
    h: Tensor
    s_c: Tensor
    s_f: Tensor | None = None

    def features(self) -> Tensor:
        return dm.concat([self.h, self.s_c], axis=-1)

    def detach(self) -> "LatentState":
        return LatentState(self.h.detach(), self.s_c.detach(), None if self.s_f is None else self.s_f.detach())


@dataclass
class FilterOutput:
    """Posterior pass over a ``[B, T]`` batch; tensors carry ``[B, T, ...]`` axes."""

    h: Tensor
    s_c: Tensor
    s_f: Tensor
    post_sc: DiagGaussian
    prior_sc: DiagGaussian
    post_sf: DiagGaussian
    prior_sf: DiagGaussian
    experts: dict[str, DiagGaussian]
    masks: dict[str, np.ndarray]
    present: np.ndarray
    fallback_sc: np.ndarray = field(default=None)

    def state(self, t: int) -> LatentState:
        return LatentState(self.h[:, t], self.s_c[:, t], self.s_f[:, t])

    @property
    def B(self) -> int:
        return self.h.shape[0]

    @property
    def T(self) -> int:
        return self.h.shape[1]


@dataclass
class ImaginedTrajectory:
    """Prior-path rollout; ``h``/``s_c`` are ``[H+1, N, .]``, actions ``[H, N, A]``, rewards ``[H+1, N]``."""

    h: Tensor
    s_c: Tensor
    actions: Tensor | None
    reward_mean: Tensor

    @property
    def horizon(self) -> int:
        return self.h.shape[0] - 1

    def features(self) -> Tensor:
        return dm.concat([self.h, self.s_c], axis=-1)

    def states(self) -> list[LatentState]:
        return [LatentState(self.h[i], self.s_c[i]) for i in range(self.h.shape[0])]


class MSSM:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.init_seed)
        c = config
        act = c.activation
        self.params = ParamStore()
        p = self.params
        self.modalities = {m.name: m for m in c.modalities}
        self.gru = GRUCell(p, "gru", c.c_dim + c.action_dim, c.h_dim, rng)
        self.prior_sc_net = MLP(p, "prior_sc", c.h_dim, c.hidden, 2 * c.c_dim, rng, act)
        self.prior_sf_net = MLP(p, "prior_sf", c.c_dim, c.hidden, 2 * c.f_dim, rng, act)
        self.post_sc_net = MLP(p, "post_sc", c.f_dim + c.h_dim, c.hidden, 2 * c.c_dim, rng, act)
        self.encoders = {m.name: MLP(p, f"enc.{m.name}", m.obs_dim, m.encoder_hidden, 2 * c.f_dim, rng, act)
                         for m in c.modalities}
        self.decoders = {m.name: MLP(p, f"dec.{m.name}", c.h_dim + c.c_dim, c.hidden, m.obs_dim, rng, act)
                         for m in c.modalities}
        self.reward_net = MLP(p, "reward", c.h_dim + c.c_dim, c.hidden, 1, rng, act)
        self.projector = MLP(p, "proj", c.h_dim + c.c_dim, c.hidden, c.embed_dim, rng, act)

    # parameter groups

    def representation_params(self) -> list[Tensor]:
        return list(self.params)

    # single-function heads

    def _check(self, op: str, x, dim: int) -> Tensor:
        x = dm.as_tensor(x)
        if x.shape[-1] != dim:
            raise dm.ShapeError(op, x.shape, (dim,))
        return x

    def deterministic_step(self, h_prev, s_c_prev, a_prev) -> Tensor:
        c = self.config
        h_prev = self._check("deterministic_step[h]", h_prev, c.h_dim)
        s_c_prev = self._check("deterministic_step[s_c]", s_c_prev, c.c_dim)
        a_prev = self._check("deterministic_step[a]", a_prev, c.action_dim)
        return self.gru(dm.concat([s_c_prev, a_prev], axis=-1), h_prev)

    def prior_s_c(self, h) -> DiagGaussian:
        h = self._check("prior_s_c", h, self.config.h_dim)
        return from_raw(self.prior_sc_net(h), self.config.std_min)

    def prior_s_f(self, s_c) -> DiagGaussian:
        s_c = self._check("prior_s_f", s_c, self.config.c_dim)
        return from_raw(self.prior_sf_net(s_c), self.config.std_min)

    def posterior_s_c(self, s_f, h) -> DiagGaussian:
        s_f = self._check("posterior_s_c[s_f]", s_f, self.config.f_dim)
        h = self._check("posterior_s_c[h]", h, self.config.h_dim)
        return from_raw(self.post_sc_net(dm.concat([s_f, h], axis=-1)), self.config.std_min)

    def _flatten_obs(self, name: str, x) -> Tensor:
        spec = self.modalities.get(name)
        if spec is None:
            raise KeyError(f"unknown modality {name!r}")
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        n = len(spec.obs_shape)
        if x.shape[x.ndim - n:] != spec.obs_shape:
            raise dm.ShapeError(f"encode_modality[{name}]", x.shape, spec.obs_shape)
        return Tensor(x.reshape(x.shape[:x.ndim - n] + (spec.obs_dim,)))

    def encode_modality(self, name: str, x) -> DiagGaussian:
        """Expert ``q(s^f | x^m)``; its mean doubles as the contrastive embedding of ``x``."""
        return from_raw(self.encoders[name](self._flatten_obs(name, x)), self.config.std_min)

    def fuse_posterior(self, experts: list[DiagGaussian], masks: list[np.ndarray],
                       fallback: DiagGaussian | None = None) -> DiagGaussian:
        """PoE over present experts; rows with none present take ``fallback``."""
        prior_expert = None
        if self.config.prior_expert:
            zeros = np.zeros(experts[0].shape if experts else fallback.shape)
            prior_expert = DiagGaussian(zeros, np.ones_like(zeros))
        if not experts:
            if fallback is None:
                raise ValueError("no experts present and no fallback supplied")
            return fallback
        fused, present = poe_fuse_guarded(experts, masks, prior_expert)
        if present.all():
            return fused
        if fallback is None:
            raise ValueError("some rows have no present expert and no fallback was supplied")
        keep = present[..., None]
        return DiagGaussian(dm.where(keep, fused.mean, fallback.mean), dm.where(keep, fused.std, fallback.std))

    def decode_modality(self, name: str, h, s_c) -> DiagGaussian:
        mean = self.decoders[name](self._features(h, s_c))
        return DiagGaussian(mean, np.ones(mean.shape))

    def predict_reward(self, h, s_c) -> DiagGaussian:
        mean = self.reward_net(self._features(h, s_c))
        return DiagGaussian(mean, np.ones(mean.shape))

    def project_latent(self, h, s_c) -> Tensor:
        return self.projector(self._features(h, s_c))

    def _features(self, h, s_c) -> Tensor:
        h = self._check("features[h]", h, self.config.h_dim)
        s_c = self._check("features[s_c]", s_c, self.config.c_dim)
        return dm.concat([h, s_c], axis=-1)

    # sequence inference

    def initial_state(self, n: int) -> LatentState:
        c = self.config
        return LatentState(Tensor(np.zeros((n, c.h_dim))), Tensor(np.zeros((n, c.c_dim))))

    def _posterior_step(self, h_prev: Tensor, s_c_prev: Tensor, a_prev, fused: DiagGaussian,
                        present: np.ndarray, eps_sf, eps_sc, eps_fb):
        """One filtering step given the (already fused) expert posterior for this step.

        Returns ``h, s_f, s_c, post_sc, sf_dist, fallback_sc`` where ``sf_dist`` is the
        distribution actually sampled for ``s^f`` and ``fallback_sc`` is the prior-path
        ``s^c`` sample used on rows without any expert (None when every row had one).
        """
        h = self.deterministic_step(h_prev, s_c_prev, a_prev)
        sf_dist = fused
        fallback_sc = None
        if not present.all():
            fallback_sc = self.prior_s_c(h).sample(eps_fb)
            fb = self.prior_s_f(fallback_sc)
            keep = present[:, None]
            sf_dist = DiagGaussian(dm.where(keep, fused.mean, fb.mean), dm.where(keep, fused.std, fb.std))
        s_f = sf_dist.sample(eps_sf)
        post = self.posterior_s_c(s_f, h)
        s_c = post.sample(eps_sc)
        return h, s_f, s_c, post, sf_dist, fallback_sc

    def _encode_batch(self, batch: SequenceBatch):
        experts, masks = {}, {}
        for name in batch.observations:
            if name not in self.modalities:
                raise KeyError(f"batch carries unknown modality {name!r}")
            experts[name] = self.encode_modality(name, batch.observations[name])
            mask = np.asarray(batch.masks[name], dtype=bool)
            if mask.shape != (batch.B, batch.T):
                raise ValueError(f"mask for {name!r} has shape {mask.shape}, expected {(batch.B, batch.T)}")
            masks[name] = mask
        return experts, masks

    def filter_sequence(self, batch: SequenceBatch | Episode, noise_seed: int | np.random.Generator = 0) -> FilterOutput:
        """Run the posterior over every step of ``batch`` starting from a zero state.

        Noise is drawn up front with shapes independent of which modalities are
        present, so masking a modality entirely is indistinguishable from
        deleting it.
        """
        if isinstance(batch, Episode):
            batch = batch.as_batch()
        B, T = batch.B, batch.T
        if T == 0:
            raise ValueError("cannot filter an empty sequence")
        c = self.config
        rng = noise_seed if isinstance(noise_seed, np.random.Generator) else np.random.default_rng(noise_seed)
        eps_sf = rng.standard_normal((T, B, c.f_dim))
        eps_sc = rng.standard_normal((T, B, c.c_dim))
        eps_fb = rng.standard_normal((T, B, c.c_dim))

        experts, masks = self._encode_batch(batch)
        prior_expert = None
        if c.prior_expert:
            zeros = np.zeros((B, T, c.f_dim))
            prior_expert = DiagGaussian(zeros, np.ones_like(zeros))
        if experts:
            fused, present = poe_fuse_guarded(list(experts.values()), list(masks.values()), prior_expert)
        else:
            present = np.zeros((B, T), dtype=bool)
            placeholder = np.zeros((B, T, c.f_dim))
            fused = DiagGaussian(placeholder, np.ones_like(placeholder))

        actions = np.asarray(batch.actions, dtype=np.float64)
        state = self.initial_state(B)
        h, s_c = state.h, state.s_c
        hs, scs, sfs, pm, ps, sfm, sfsd = [], [], [], [], [], [], []
        fallback_sc = np.zeros((B, T, c.c_dim))
        for t in range(T):
            fused_t = fused[:, t]
            h, s_f, s_c, post, sf_dist, fb_sc = self._posterior_step(
                h, s_c, actions[:, t], fused_t, present[:, t], eps_sf[t], eps_sc[t], eps_fb[t])
            if fb_sc is not None:
                fallback_sc[:, t] = fb_sc.data
            hs.append(h); scs.append(s_c); sfs.append(s_f)
            pm.append(post.mean); ps.append(post.std)
            sfm.append(sf_dist.mean); sfsd.append(sf_dist.std)

        H = dm.stack(hs, axis=1)
        SC = dm.stack(scs, axis=1)
        SF = dm.stack(sfs, axis=1)
        post_sc = DiagGaussian(dm.stack(pm, axis=1), dm.stack(ps, axis=1))
        post_sf = DiagGaussian(dm.stack(sfm, axis=1), dm.stack(sfsd, axis=1))
        prior_sc = self.prior_s_c(H)
        prior_sf = self.prior_s_f(SC)
        if not present.all():
            # on fallback rows q(s^f) *is* the prior, so that KL factor vanishes
            keep = present[..., None]
            prior_sf = DiagGaussian(dm.where(keep, prior_sf.mean, post_sf.mean),
                                    dm.where(keep, prior_sf.std, post_sf.std))
        return FilterOutput(H, SC, SF, post_sc, prior_sc, post_sf, prior_sf, experts, masks, present, fallback_sc)

    def filter_step(self, state: LatentState, action, observations: dict[str, np.ndarray],
                    present: dict[str, np.ndarray | bool], rng: np.random.Generator,
                    sample: bool = True) -> LatentState:
        """Online version of one filtering step for acting; inputs carry a leading batch axis."""
        c = self.config
        n = state.h.shape[0]
        experts, masks = [], []
        for name, x in observations.items():
            experts.append(self.encode_modality(name, x))
            masks.append(np.broadcast_to(np.asarray(present[name], dtype=bool), (n,)))
        prior_expert = None
        if c.prior_expert:
            zeros = np.zeros((n, c.f_dim))
            prior_expert = DiagGaussian(zeros, np.ones_like(zeros))
        if experts:
            fused, any_present = poe_fuse_guarded(experts, masks, prior_expert)
        else:
            any_present = np.zeros(n, dtype=bool)
            fused = DiagGaussian(np.zeros((n, c.f_dim)), np.ones((n, c.f_dim)))
        if sample:
            eps_sf = rng.standard_normal((n, c.f_dim))
            eps_sc = rng.standard_normal((n, c.c_dim))
            eps_fb = rng.standard_normal((n, c.c_dim))
        else:
            eps_sf, eps_sc, eps_fb = np.zeros((n, c.f_dim)), np.zeros((n, c.c_dim)), np.zeros((n, c.c_dim))
        h, s_f, s_c, *_ = self._posterior_step(state.h, state.s_c, np.asarray(action, dtype=np.float64),
                                               fused, any_present, eps_sf, eps_sc, eps_fb)
        return LatentState(h, s_c, s_f)

    def imagine_rollout(self, start: LatentState, horizon: int,
                        policy: Callable[[Tensor, np.random.Generator], Tensor] | None = None,
                        actions=None, rng: np.random.Generator | int = 0) -> ImaginedTrajectory:
        """Roll the prior path forward from ``start`` without reading any observation.

        Actions come from ``policy(features, rng)`` or from ``actions`` shaped ``[horizon, N, A]``.
        """
        if horizon < 0:
            raise ValueError("horizon must be >= 0")
        if policy is None and actions is None and horizon > 0:
            raise ValueError("imagine_rollout needs a policy or an action sequence")
        # anything with a standard_normal(shape) method works as the noise source
        rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
        h, s_c = dm.as_tensor(start.h), dm.as_tensor(start.s_c)
        n = h.shape[0]
        hs, scs, acts = [h], [s_c], []
        for t in range(horizon):
            if actions is not None:
                a = dm.as_tensor(actions[t])
            else:
                a = policy(dm.concat([h, s_c], axis=-1), rng)
            acts.append(a)
            h = self.deterministic_step(h, s_c, a)
            s_c = self.prior_s_c(h).sample(rng.standard_normal((n, self.config.c_dim)))
            hs.append(h)
            scs.append(s_c)
        H = dm.stack(hs, axis=0)
        SC = dm.stack(scs, axis=0)
        reward = self.predict_reward(H, SC).mean[..., 0]
        return ImaginedTrajectory(H, SC, dm.stack(acts, axis=0) if acts else None, reward)
