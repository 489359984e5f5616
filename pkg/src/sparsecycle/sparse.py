"""Sparse-masked convolutions and the boosted k-winner activation.

A :class:`SparseConv2d` keeps a fixed random binary mask over its kernel so
that each output channel only sees a subset of its input connections.
:class:`KWinner` keeps the ``k`` most active units of every sample and uses
homeostatic boosting: every unit tracks an exponential moving average of how
often it wins (its duty cycle) and units that win less often than the target
density get their pre-activations scaled up during selection.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .layers import INIT_STD


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_count(fan_in: int, weight_density: float) -> int:
    """Number of retained connections per output channel."""
    return max(1, _round_half_up(weight_density * fan_in))


def init_sparse_mask(shape: Sequence[int], weight_density: float, seed: int) -> np.ndarray:
    """Binary mask with a fixed number of ones per output channel.

    Positions are drawn without replacement from ``np.random.default_rng(seed)``,
    so the mask is a pure function of ``(seed, shape, weight_density)``.
    """
    if not 0.0 < weight_density <= 1.0:
        raise ValueError(f"weight_density must be in (0, 1], got {weight_density}")
    shape = tuple(int(s) for s in shape)
    cout = shape[0]
    fan_in = int(np.prod(shape[1:]))
    n_keep = mask_count(fan_in, weight_density)
    mask = np.zeros((cout, fan_in), dtype=np.float32)
    if n_keep == fan_in:
        mask[:] = 1.0
        return mask.reshape(shape)
    rng = np.random.default_rng(seed)
    for row in range(cout):
        mask[row, rng.choice(fan_in, size=n_keep, replace=False)] = 1.0
    return mask.reshape(shape)


class SparseConv2d(nn.Module):
    """Convolution whose kernel is multiplied by a fixed binary mask."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        weight_density: float = 0.5,
        seed: int = 0,
        stride: int = 1,
        padding: int = 0,
        padding_mode: str = "zero",
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.padding_mode = padding_mode
        self.weight_density = weight_density
        self.seed = seed
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = nn.Parameter(torch.empty(shape))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.register_buffer("mask", torch.from_numpy(init_sparse_mask(shape, weight_density, seed)))
        with torch.no_grad():
            self.weight.normal_(0.0, INIT_STD, generator=generator)
        self.apply_weight_mask()

    @torch.no_grad()
    def apply_weight_mask(self) -> "SparseConv2d":
        self.weight.mul_(self.mask)
        return self

    def forward(self, x):
        return ad.conv2d(
            x, self.weight * self.mask, self.bias, self.stride, self.padding, self.padding_mode
        )

    def extra_repr(self):
        co, ci, k, _ = self.weight.shape
        return f"{ci}, {co}, kernel_size={k}, weight_density={self.weight_density}, seed={self.seed}"


def apply_weight_mask(module: nn.Module) -> nn.Module:
    """Zero the masked-out weights of every sparse convolution inside ``module``."""
    for m in module.modules():
        if isinstance(m, SparseConv2d):
            m.apply_weight_mask()
    return module


def weight_masks(module: nn.Module, prefix: str = "") -> dict:
    """Map ``<param name>`` to mask for every sparse weight in ``module``."""
    out = {}
    for name, m in module.named_modules():
        if isinstance(m, SparseConv2d):
            key = f"{name}.weight" if name else "weight"
            out[prefix + key] = m.mask
    return out


def boost_coefficients(duty_cycle, target_density: float, boost_strength: float):
    """``exp(boost_strength * (target_density - duty_cycle))``, elementwise."""
    if isinstance(duty_cycle, torch.Tensor):
        return torch.exp(boost_strength * (target_density - duty_cycle))
    return np.exp(boost_strength * (target_density - np.asarray(duty_cycle, dtype=np.float64)))


def duty_cycle_update(duty_cycle, winners, alpha: float):
    """One step of the duty-cycle moving average.

    ``winners`` is a (batch, n_units) 0/1 indicator; its batch mean is the
    observed activity of each unit.
    """
    if isinstance(duty_cycle, torch.Tensor):
        activity = winners.to(duty_cycle.dtype).reshape(-1, duty_cycle.numel()).mean(dim=0)
        return (1.0 - alpha) * duty_cycle + alpha * activity
    activity = np.asarray(winners, dtype=np.float64).reshape(-1, np.size(duty_cycle)).mean(axis=0)
    return (1.0 - alpha) * np.asarray(duty_cycle, dtype=np.float64) + alpha * activity


def select_winners(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest entries per row, ties going to the lower index."""
    order = torch.argsort(-scores, dim=1, stable=True)
    return order[:, :k]


def winner_count(n_units: int, activation_density: float) -> int:
    if not 0.0 < activation_density <= 1.0:
        raise ValueError(f"activation_density must be in (0, 1], got {activation_density}")
    return min(n_units, max(1, _round_half_up(activation_density * n_units)))


def kwinner_eval(x, activation_density: float, clamp_negative: bool = False):
    """Unboosted k-winner with ``k`` taken from a density; keeps no state."""
    n = x.shape[0]
    flat = x.reshape(n, -1)
    idx = select_winners(flat.detach(), winner_count(flat.shape[1], activation_density))
    out = flat * torch.zeros_like(flat).scatter_(1, idx, 1.0)
    if clamp_negative:
        out = ad.relu(out)
    return out.reshape(x.shape)


class KWinner(nn.Module):
    """Boosted k-winner-take-all over the flattened C*H*W units of each sample.

    Parameters
    ----------
    n_units : int
        Flattened per-sample size the layer is applied to.
    k : int
        Number of winners kept per sample.
    boost_strength : float
        Boosting factor; 0 disables boosting.
    alpha : float
        Duty-cycle averaging rate.
    clamp_negative : bool
        Emit ``max(x, 0)`` at winner positions instead of the raw value.
    """

    def __init__(
        self,
        n_units: int,
        k: int,
        boost_strength: float = 1.5,
        alpha: float = 0.001,
        clamp_negative: bool = False,
    ):
        super().__init__()
        if not 1 <= k <= n_units:
            raise ValueError(f"k must satisfy 1 <= k <= n_units={n_units}, got {k}")
        if boost_strength < 0:
            raise ValueError(f"boost_strength must be non-negative, got {boost_strength}")
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {alpha}")
        self.n_units = n_units
        self.k = k
        self.boost_strength = boost_strength
        self.alpha = alpha
        self.clamp_negative = clamp_negative
        # float64 so the moving average stays exact to ~1e-16
        self.register_buffer("duty_cycle", torch.zeros(n_units, dtype=torch.float64))

    @classmethod
    def from_density(cls, n_units: int, activation_density: float, **kwargs) -> "KWinner":
        return cls(n_units, winner_count(n_units, activation_density), **kwargs)

    @property
    def target_density(self) -> float:
        return self.k / self.n_units

    def boost_coefficients(self) -> torch.Tensor:
        return boost_coefficients(self.duty_cycle, self.target_density, self.boost_strength)

    def forward(self, x):
        n = x.shape[0]
        flat = x.reshape(n, -1)
        if flat.shape[1] != self.n_units:
            raise ad.ShapeError(
                f"kwinner: per-sample size {flat.shape[1]} does not match n_units={self.n_units}"
            )
        scores = flat.detach()
        if self.training and self.boost_strength > 0:
            scores = scores * self.boost_coefficients().to(scores.dtype)
        idx = select_winners(scores, self.k)
        mask = torch.zeros_like(scores).scatter_(1, idx, 1.0)
        out = flat * mask
        if self.clamp_negative:
            out = ad.relu(out)
        if self.training:
            with torch.no_grad():
                self.duty_cycle.copy_(duty_cycle_update(self.duty_cycle, mask, self.alpha))
        return out.reshape(x.shape)

    def extra_repr(self):
        return (
            f"n_units={self.n_units}, k={self.k}, boost_strength={self.boost_strength}, "
            f"alpha={self.alpha}"
        )
