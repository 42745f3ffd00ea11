"""Diagonal Gaussian algebra: reparameterised sampling, densities, KL and product-of-experts fusion.

All functions treat the last axis as the event dimension and broadcast over any
leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

STD_MIN = 1e-3


@dataclass
class DiagGaussian:
    mean: Tensor
    std: Tensor

    def __post_init__(self):
        self.mean = dm.as_tensor(self.mean)
        self.std = dm.as_tensor(self.std)
        if self.mean.shape != self.std.shape:
            raise dm.ShapeError("DiagGaussian", self.mean.shape, self.std.shape)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @property
    def variance(self) -> np.ndarray:
        return self.std.data ** 2

    def __getitem__(self, idx) -> "DiagGaussian":
        return DiagGaussian(self.mean[idx], self.std[idx])

    def reshape(self, *shape) -> "DiagGaussian":
        return DiagGaussian(self.mean.reshape(*shape), self.std.reshape(*shape))

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.std.detach())

    def sample(self, noise) -> Tensor:
        return sample_reparam(self, noise)

    def log_prob(self, x) -> Tensor:
        return log_prob(self, x)


def from_raw(raw: Tensor, std_min: float = STD_MIN) -> DiagGaussian:
    """Split a network output ``[..., 2D]`` into mean and ``softplus(raw) + std_min``."""
    d = raw.shape[-1] // 2
    if raw.shape[-1] != 2 * d:
        raise dm.ShapeError("from_raw", raw.shape)
    return DiagGaussian(raw[..., :d], dm.softplus(raw[..., d:]) + std_min)


def _check_dim(op: str, g: DiagGaussian, x) -> None:
    if np.shape(x)[-1:] != (g.dim,):
        raise dm.ShapeError(op, np.shape(x), g.shape)


def sample_reparam(g: DiagGaussian, noise) -> Tensor:
    noise = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    _check_dim("sample_reparam", g, noise)
    return g.mean + g.std * noise


def log_prob(g: DiagGaussian, x) -> Tensor:
    x = dm.as_tensor(x)
    _check_dim("log_prob", g, x.data)
    return dm.gaussian_log_prob(x, g.mean, g.std).sum(axis=-1)


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    if q.dim != p.dim:
        raise dm.ShapeError("kl_divergence", q.shape, p.shape)
    return dm.gaussian_kl(q.mean, q.std, p.mean, p.std).sum(axis=-1)


def _fuse(experts: Sequence[DiagGaussian], weights: Sequence[np.ndarray | None]):
    """Precision-weighted sums; ``weights`` are 0/1 arrays broadcastable to the batch shape."""
    prec_sum = None
    wmean_sum = None
    for e, w in zip(experts, weights):
        prec = 1.0 / dm.square(e.std)
        if w is not None:
            prec = prec * np.asarray(w, dtype=np.float64)[..., None]
        term = e.mean * prec
        prec_sum = prec if prec_sum is None else prec_sum + prec
        wmean_sum = term if wmean_sum is None else wmean_sum + term
    return prec_sum, wmean_sum


def poe_fuse(experts: Sequence[DiagGaussian], prior_expert: DiagGaussian | None = None,
             masks: Sequence[np.ndarray] | None = None) -> DiagGaussian:
    """Product of Gaussian experts.

    ``masks`` (one boolean array per expert, shaped like the batch axes) drops
    experts row by row. Every row must keep at least one expert or have a prior
    expert; callers handle the all-missing case themselves.
    """
    experts = list(experts)
    if not experts and prior_expert is None:
        raise ValueError("poe_fuse needs at least one expert")
    dims = {e.dim for e in experts} | ({prior_expert.dim} if prior_expert is not None else set())
    if len(dims) != 1:
        raise dm.ShapeError("poe_fuse", *[e.shape for e in experts])
    if masks is not None:
        if len(masks) != len(experts):
            raise ValueError("one mask per expert required")
        masks = [np.asarray(m, dtype=bool) for m in masks]
        present = np.zeros(np.broadcast_shapes(*[m.shape for m in masks]), dtype=bool)
        for m in masks:
            present |= m
        if prior_expert is None and not present.all():
            raise ValueError("poe_fuse: some rows have no present expert and no prior expert")
    if len(experts) == 1 and prior_expert is None:
        return experts[0]
    weights: list[np.ndarray | None] = list(masks) if masks is not None else [None] * len(experts)
    if prior_expert is not None:
        experts = experts + [prior_expert]
        weights = weights + [None]
    prec_sum, wmean_sum = _fuse(experts, weights)
    var = 1.0 / prec_sum
    return DiagGaussian(wmean_sum * var, dm.sqrt(var))


def poe_fuse_guarded(experts: Sequence[DiagGaussian], masks: Sequence[np.ndarray],
                     prior_expert: DiagGaussian | None = None) -> tuple[DiagGaussian, np.ndarray]:
    """Masked PoE that never divides by zero.

    Rows with no present expert (and no prior expert) get a placeholder unit
    Gaussian; the returned boolean array marks which rows are valid so the caller
    can substitute its own fallback.
    """
    masks = [np.asarray(m, dtype=bool) for m in masks]
    present = np.zeros(masks[0].shape, dtype=bool)
    for m in masks:
        present |= m
    weights: list[np.ndarray | None] = list(masks)
    experts = list(experts)
    if prior_expert is not None:
        experts.append(prior_expert)
        weights.append(None)
        present = np.ones_like(present)
    prec_sum, wmean_sum = _fuse(experts, weights)
    pad = (~present).astype(np.float64)[..., None]
    var = 1.0 / (prec_sum + pad)
    return DiagGaussian(wmean_sum * var, dm.sqrt(var)), present
