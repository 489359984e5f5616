"""Training objectives: cycle consistency, WGAN-GP critic/generator terms,
feature-space perceptual loss and the weighted generator total."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import torch
from torch import nn

from . import autodiff as ad

CriticFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_perc: float = 100.0
    lambda_gp: float = 10.0

    def __post_init__(self):
        for name in ("lambda_cyc", "lambda_perc", "lambda_gp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


def cycle_loss(x, y, rec_x, rec_y):
    """Mean absolute reconstruction error, summed over both cycle directions."""
    return ad.reduce(rec_x, "l1_mean", x) + ad.reduce(rec_y, "l1_mean", y)


def _scores(critic: CriticFn, x):
    s = critic(x)
    return s.reshape(x.shape[0], -1).mean(dim=1)


def interpolate(real, fake, eps):
    """``eps * real + (1 - eps) * fake`` with one ``eps`` per sample."""
    e = eps.reshape(-1, *([1] * (real.dim() - 1))).to(real.dtype)
    return e * real + (1 - e) * fake


def gradient_penalty(critic: CriticFn, real, fake, eps=None, generator: Optional[torch.Generator] = None):
    """Batch mean of ``(||grad_u critic(u)||_2 - 1)^2`` at random interpolates ``u``.

    The returned value is differentiable w.r.t. the critic's parameters
    (the input gradient is built with a second-order graph).
    """
    ad._check_same_shape(real, fake, "gradient_penalty")
    if eps is None:
        eps = torch.rand(real.shape[0], generator=generator, dtype=real.dtype)
    u = interpolate(real.detach(), fake.detach(), eps).requires_grad_(True)
    (g,) = ad.grad(_scores(critic, u).sum(), [u], create_second_order=True)
    norms = g.reshape(g.shape[0], -1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss_terms(critic: CriticFn, real, fake, eps=None, generator=None) -> Tuple:
    """Return ``(mean critic(fake) - mean critic(real), gradient penalty)``."""
    fake = fake.detach()
    gap = _scores(critic, fake).mean() - _scores(critic, real).mean()
    return gap, gradient_penalty(critic, real, fake, eps=eps, generator=generator)


def critic_loss(critic: CriticFn, real, fake, lambda_gp: float = 10.0, eps=None, generator=None):
    gap, gp = critic_loss_terms(critic, real, fake, eps=eps, generator=generator)
    return gap + lambda_gp * gp


def generator_adv_loss(critic: CriticFn, fake):
    return -_scores(critic, fake).mean()


class FeatureExtractor(nn.Module):
    """Frozen conv/ReLU stack used as the perceptual feature map.

    The default is three 3x3 convolutions (3->16->32->32 channels, strides
    1, 2, 1) with seeded He-normal weights. ``tap`` selects after which
    conv+ReLU stage features are read. Real pretrained weights can be loaded
    with :meth:`load_weights` from a checkpoint-format file holding
    ``conv{i}.weight`` / ``conv{i}.bias`` tensors.
    """

    def __init__(self, channels=(3, 16, 32, 32), strides=(1, 2, 1), tap: int = 3, seed: int = 1234):
        super().__init__()
        if not 1 <= tap <= len(strides):
            raise ValueError(f"tap must be in [1, {len(strides)}], got {tap}")
        self.tap = tap
        self.strides = tuple(strides)
        g = torch.Generator().manual_seed(seed)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for cin, cout in zip(channels[:-1], channels[1:]):
            w = torch.randn(cout, cin, 3, 3, generator=g) * np.sqrt(2.0 / (cin * 9))
            self.weights.append(nn.Parameter(w, requires_grad=False))
            self.biases.append(nn.Parameter(torch.zeros(cout), requires_grad=False))

    def load_weights(self, path) -> "FeatureExtractor":
        from .checkpoint import read_tensors

        tensors = read_tensors(path)
        with torch.no_grad():
            for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
                for name, p in ((f"conv{i}.weight", w), (f"conv{i}.bias", b)):
                    if name not in tensors:
                        raise KeyError(f"feature weights file {path} lacks tensor {name!r}")
                    value = torch.from_numpy(np.asarray(tensors[name], dtype=np.float32))
                    if value.shape != p.shape:
                        raise ad.ShapeError(
                            f"{name}: expected shape {tuple(p.shape)}, got {tuple(value.shape)}"
                        )
                    p.copy_(value)
        return self

    def forward(self, x):
        h = x
        for i in range(self.tap):
            h = ad.relu(ad.conv2d(h, self.weights[i].to(h.dtype), self.biases[i].to(h.dtype),
                                  stride=self.strides[i], padding=1))
        return h


def perceptual_loss(extractor: Callable, restored, sharp):
    """Squared feature difference summed over channels and space, divided by
    the feature map's H*W; averaged over the batch."""
    ad._check_same_shape(restored, sharp, "perceptual_loss")
    diff = extractor(sharp) - extractor(restored)
    if diff.dim() == 3:
        diff = diff.unsqueeze(1)
    h, w = diff.shape[-2:]
    per_sample = (diff * diff).reshape(diff.shape[0], -1).sum(dim=1) / (h * w)
    return per_sample.mean()


def total_generator_loss(adv, cyc, perc, weights: LossWeights):
    return adv + weights.lambda_cyc * cyc + weights.lambda_perc * perc
