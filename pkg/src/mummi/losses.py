"""Training objectives for the MSSM.

Every objective is returned negated (for minimisation) inside a
:class:`LossBreakdown`. All per-step terms are averaged over the ``B x T`` grid,
so modality weights mean the same thing for any sequence length.

Signed combination of the parts::

    total = sum_m weight_m * contrastive_m - sum_m reconstruction_m - reward_logprob + kl

``contrastive_m`` is an InfoNCE loss (>= 0), ``reconstruction_m`` and
``reward_logprob`` are mean log-likelihoods, and ``kl`` is the (optionally
free-nats clipped) mean KL per step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .data import SequenceBatch
from .diffmath import Tensor
from .distributions import kl_divergence, log_prob
from .mssm import MSSM, FilterOutput

VARIANTS = ("mummi", "mummi-b", "elbo")


@dataclass
class LossBreakdown:
    total: Tensor
    variant: str
    per_modality_contrastive: dict[str, float] = field(default_factory=dict)
    reconstruction: dict[str, float] = field(default_factory=dict)
    reward_logprob: float = 0.0
    kl: float = 0.0
    kl_sc: float = 0.0
    kl_sf: float = 0.0
    kl_sf_mc_std: float = 0.0
    contrastive_accuracy: dict[str, float] = field(default_factory=dict)
    contrastive_pairs: dict[str, int] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    weights: dict[str, float] = field(default_factory=dict)
    posterior: FilterOutput | None = field(default=None, repr=False)

    @property
    def value(self) -> float:
        return float(self.total.data)

    def combined(self) -> float:
        """Recompute ``total`` from the logged parts."""
        out = sum(self.weights.get(m, 1.0) * v for m, v in self.per_modality_contrastive.items())
        out -= sum(self.reconstruction.values())
        return out - self.reward_logprob + self.kl

    def to_record(self) -> dict:
        rec = {
            "loss": self.value,
            "variant": self.variant,
            "reward_logprob": self.reward_logprob,
            "kl": self.kl,
            "kl_sc": self.kl_sc,
            "kl_sf": self.kl_sf,
            "kl_sf_mc_std": self.kl_sf_mc_std,
        }
        for m, v in self.per_modality_contrastive.items():
            rec[f"contrastive/{m}"] = v
            rec[f"accuracy/{m}"] = self.contrastive_accuracy.get(m, 0.0)
        for m, v in self.reconstruction.items():
            rec[f"reconstruction/{m}"] = v
        if self.skipped:
            rec["skipped"] = list(self.skipped)
        return rec


# scores and InfoNCE

def density_ratio_score(model: MSSM, modality: str, x_m, h, s_c) -> Tensor:
    """Log of the squared-exponential density ratio: ``-||d_m(x) - g(z)||^2`` per row."""
    d = model.encode_modality(modality, x_m).mean
    g = model.project_latent(h, s_c)
    if d.shape != g.shape:
        raise dm.ShapeError("density_ratio_score", d.shape, g.shape)
    return -dm.square(d - g).sum(axis=-1)


def mummi_b_score(model: MSSM, fused_mean, h, s_c) -> Tensor:
    """Same kernel but against the fused PoE mean instead of a single expert."""
    b = dm.as_tensor(fused_mean)
    g = model.project_latent(h, s_c)
    if b.shape != g.shape:
        raise dm.ShapeError("mummi_b_score", b.shape, g.shape)
    return -dm.square(b - g).sum(axis=-1)


def infonce_from_scores(scores: Tensor) -> tuple[Tensor, float]:
    """InfoNCE over a square score matrix whose diagonal holds the positives.

    Row ``i`` scores state ``i`` against every candidate observation ``j``.
    Returns ``(mean loss, top-1 accuracy)``.
    """
    scores = dm.as_tensor(scores)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise dm.ShapeError("infonce", scores.shape)
    n = scores.shape[0]
    idx = np.arange(n)
    positive = scores[idx, idx]
    loss = (dm.logsumexp(scores, axis=1) - positive).mean()
    acc = float(np.mean(np.argmax(scores.data, axis=1) == idx))
    return loss, acc


def infonce_embeddings(g: Tensor, d: Tensor) -> tuple[Tensor, float]:
    """InfoNCE with scores ``-||d_j - g_i||^2`` for paired rows of ``g`` (states) and ``d`` (observations)."""
    return infonce_from_scores(-dm.sq_dist_matrix(g, d))


def _sequence_infonce(g: Tensor, d: Tensor, mask: np.ndarray) -> tuple[Tensor, float, int]:
    """Sequence-level variant: scores summed over steps where both sequences are observed."""
    B, T = mask.shape
    valid = mask.any(axis=1)
    rows = np.flatnonzero(valid)
    if len(rows) < 2:
        return Tensor(0.0), 0.0, len(rows)
    total = None
    for t in range(T):
        w = (mask[rows, t][:, None] & mask[rows, t][None, :]).astype(np.float64)
        if not w.any():
            continue
        s = -dm.sq_dist_matrix(g[rows, t], d[rows, t]) * w
        total = s if total is None else total + s
    loss, acc = infonce_from_scores(total)
    return loss, acc, len(rows)


def infonce_per_modality(model: MSSM, modality: str, post: FilterOutput, batch: SequenceBatch | None = None,
                         sequence_level: bool = False, embeddings: Tensor | None = None):
    """Contrastive loss for one modality over every unmasked (state, observation) pair in the batch.

    Masked slots are removed from both positives and the negative pool. Returns
    ``(loss, accuracy, n_pairs)``; ``loss`` is None when fewer than two pairs remain.
    """
    mask = post.masks[modality]
    d = post.experts[modality].mean
    g = embeddings if embeddings is not None else model.project_latent(post.h, post.s_c)
    return _infonce_masked(g, d, mask, sequence_level)


def _infonce_masked(g: Tensor, d: Tensor, mask: np.ndarray, sequence_level: bool):
    if sequence_level:
        loss, acc, n = _sequence_infonce(g, d, mask)
        return (loss if n >= 2 else None), acc, n
    flat = np.flatnonzero(mask.reshape(-1))
    n = len(flat)
    if n < 2:
        return None, 0.0, n
    E = g.shape[-1]
    gi = g.reshape(-1, E)[flat]
    dj = d.reshape(-1, d.shape[-1])[flat]
    loss, acc = infonce_embeddings(gi, dj)
    return loss, acc, n


def mi_lower_bound_estimate(infonce_loss: float, n: int) -> float:
    if n < 2:
        raise ValueError("need at least two candidates")
    return float(np.log(n) - infonce_loss)


# shared pieces

def _kl_terms(post: FilterOutput, free_nats: float = 0.0):
    """Mean KL per step: closed form for ``s^c`` plus a one-sample estimate for ``s^f``."""
    kl_sc = kl_divergence(post.post_sc, post.prior_sc)
    kl_sf_steps = log_prob(post.post_sf, post.s_f) - log_prob(post.prior_sf, post.s_f)
    kl_steps = kl_sc + kl_sf_steps
    kl = kl_steps.mean()
    if free_nats > 0.0:
        kl = dm.maximum(kl, free_nats)
    return kl, float(kl_sc.data.mean()), float(kl_sf_steps.data.mean()), float(kl_sf_steps.data.std())


def _reward_term(model: MSSM, post: FilterOutput, batch: SequenceBatch) -> Tensor:
    dist = model.predict_reward(post.h, post.s_c)
    return log_prob(dist, np.asarray(batch.rewards, dtype=np.float64)[..., None]).mean()


def _check_batch(batch: SequenceBatch) -> None:
    if batch.B < 1 or batch.T < 1:
        raise ValueError("batch must contain at least one sequence of at least one step")


def multimodal_elbo(model: MSSM, batch: SequenceBatch, seed: int | np.random.Generator = 0,
                    free_nats: float = 0.0, post: FilterOutput | None = None) -> LossBreakdown:
    """Negated multi-modal ELBO with mask-weighted reconstruction terms."""
    _check_batch(batch)
    post = post if post is not None else model.filter_sequence(batch, seed)
    recon: dict[str, float] = {}
    total = None
    for name in batch.observations:
        dist = model.decode_modality(name, post.h, post.s_c)
        x = model._flatten_obs(name, batch.observations[name])
        w = post.masks[name].astype(np.float64)
        lp = (log_prob(dist, x) * w).mean()
        recon[name] = float(lp.data)
        total = -lp if total is None else total - lp
    reward = _reward_term(model, post, batch)
    kl, kl_sc, kl_sf, kl_sf_std = _kl_terms(post, free_nats)
    total = (kl - reward) if total is None else total - reward + kl
    return LossBreakdown(total, "elbo", reconstruction=recon, reward_logprob=float(reward.data),
                         kl=float(kl.data), kl_sc=kl_sc, kl_sf=kl_sf, kl_sf_mc_std=kl_sf_std, posterior=post)


def mummi_total(model: MSSM, batch: SequenceBatch, seed: int | np.random.Generator = 0,
                modality_weights: dict[str, float] | None = None, variant: str = "per-modality",
                sequence_level: bool = False, free_nats: float = 0.0,
                post: FilterOutput | None = None) -> LossBreakdown:
    """Negated MuMMI objective: weighted InfoNCE terms plus reward log-likelihood minus KL.

    ``variant="b"`` swaps the per-modality terms for a single InfoNCE term on the
    fused PoE mean. A modality with fewer than two unmasked pairs is skipped and
    listed in ``skipped``.
    """
    _check_batch(batch)
    if variant not in ("per-modality", "b"):
        raise ValueError(f"unknown MuMMI variant {variant!r}")
    weights = {m: 1.0 for m in batch.observations}
    if modality_weights:
        for m, w in modality_weights.items():
            if w < 0:
                raise ValueError(f"modality weight for {m!r} must be >= 0")
            if m in weights:
                weights[m] = float(w)
    post = post if post is not None else model.filter_sequence(batch, seed)
    g = model.project_latent(post.h, post.s_c)
    contrast: dict[str, float] = {}
    acc: dict[str, float] = {}
    pairs: dict[str, int] = {}
    skipped: list[str] = []
    total = None
    if variant == "per-modality":
        for name in batch.observations:
            loss, a, n = _infonce_masked(g, post.experts[name].mean, post.masks[name], sequence_level)
            pairs[name] = n
            if loss is None:
                skipped.append(name)
                continue
            contrast[name] = float(loss.data)
            acc[name] = a
            if weights[name] != 0.0:
                term = loss * weights[name]
                total = term if total is None else total + term
        out_weights = weights
    else:
        loss, a, n = _infonce_masked(g, post.post_sf.mean, post.present, sequence_level)
        pairs["fused"] = n
        out_weights = {"fused": 1.0}
        if loss is None:
            skipped.append("fused")
        else:
            contrast["fused"] = float(loss.data)
            acc["fused"] = a
            total = loss
    reward = _reward_term(model, post, batch)
    kl, kl_sc, kl_sf, kl_sf_std = _kl_terms(post, free_nats)
    total = (kl - reward) if total is None else total - reward + kl
    return LossBreakdown(total, "mummi" if variant == "per-modality" else "mummi-b",
                         per_modality_contrastive=contrast, reward_logprob=float(reward.data),
                         kl=float(kl.data), kl_sc=kl_sc, kl_sf=kl_sf, kl_sf_mc_std=kl_sf_std,
                         contrastive_accuracy=acc, contrastive_pairs=pairs, skipped=skipped,
                         weights=out_weights, posterior=post)


def world_model_loss(model: MSSM, batch: SequenceBatch, variant: str, seed: int | np.random.Generator = 0,
                     modality_weights: dict[str, float] | None = None, free_nats: float = 0.0,
                     sequence_level: bool = False) -> LossBreakdown:
    if variant == "mummi":
        return mummi_total(model, batch, seed, modality_weights, "per-modality", sequence_level, free_nats)
    if variant == "mummi-b":
        return mummi_total(model, batch, seed, modality_weights, "b", sequence_level, free_nats)
    if variant == "elbo":
        return multimodal_elbo(model, batch, seed, free_nats)
    raise ValueError(f"unknown loss variant {variant!r}; expected one of {VARIANTS}")
