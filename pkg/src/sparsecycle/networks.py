"""Residual encoder/decoder generators and PatchGAN-style critics."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Tuple

import torch
from torch import nn

from .layers import Conv2d, ConvTranspose2d, InstanceNorm, LeakyReLU, ReLU, Tanh
from .sparse import KWinner, SparseConv2d, kwinner_eval


@dataclass
class NetworkSpec:
    """Topology of the generators and critics.

    ``res_block_convs`` selects the two-conv residual block (default) or the
    single-conv variant ``x + KWinner(IN(SConv(x)))``.
    """

    base_channels: int = 8
    n_res_blocks: int = 3
    image_channels: int = 3
    sparse_res_blocks: bool = True
    kwinner: bool = True
    activation_density: float = 0.3
    weight_density: float = 0.5
    boost_strength: float = 1.5
    duty_cycle_alpha: float = 0.001
    clamp_negative: bool = False
    res_block_convs: int = 2
    residual_output: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_res_blocks < 1:
            raise ValueError(f"n_res_blocks must be >= 1, got {self.n_res_blocks}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.image_channels < 1:
            raise ValueError(f"image_channels must be >= 1, got {self.image_channels}")
        if self.kwinner and not self.sparse_res_blocks:
            raise ValueError("kwinner=True requires sparse_res_blocks=True")
        if self.res_block_convs not in (1, 2):
            raise ValueError(f"res_block_convs must be 1 or 2, got {self.res_block_convs}")
        if not 0.0 < self.weight_density <= 1.0:
            raise ValueError(f"weight_density must be in (0, 1], got {self.weight_density}")
        if not 0.0 < self.activation_density <= 1.0:
            raise ValueError(
                f"activation_density must be in (0, 1], got {self.activation_density}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


class ResBlock(nn.Module):
    """Residual block at constant width, reflect padding 1, stride 1.

    The inner activation is a lazily-built :class:`KWinner` when the spec asks
    for it, since its unit count depends on the feature-map size.
    """

    def __init__(self, channels: int, spec: NetworkSpec, seed: int, generator: torch.Generator):
        super().__init__()
        self.channels = channels
        self.spec = spec
        n_convs = spec.res_block_convs if spec.sparse_res_blocks else 2

        def conv(i):
            if spec.sparse_res_blocks:
                return SparseConv2d(
                    channels, channels, 3, spec.weight_density, seed=seed + i,
                    padding=1, padding_mode="reflect", generator=generator,
                )
            return Conv2d(channels, channels, 3, padding=1, padding_mode="reflect", generator=generator)

        self.conv1 = conv(0)
        self.norm1 = InstanceNorm(channels)
        self.act = None if spec.kwinner else ReLU()
        if n_convs == 2:
            self.conv2 = conv(1)
            self.norm2 = InstanceNorm(channels)
        else:
            self.conv2 = None
            self.norm2 = None

    def _activation(self, h):
        if self.act is None:
            n_units = h[0].numel()
            self.act = KWinner.from_density(
                n_units,
                self.spec.activation_density,
                boost_strength=self.spec.boost_strength,
                alpha=self.spec.duty_cycle_alpha,
                clamp_negative=self.spec.clamp_negative,
            ).train(self.training)
        elif isinstance(self.act, KWinner) and self.act.n_units != h[0].numel():
            if self.training:
                raise ValueError(
                    f"k-winner was built for {self.act.n_units} units per sample, got "
                    f"{h[0].numel()}; training needs a fixed input size"
                )
            # inference on another image size: same density, no boosting
            return kwinner_eval(h, self.spec.activation_density, self.spec.clamp_negative)
        return self.act(h)

    @property
    def kwinner(self):
        return self.act if isinstance(self.act, KWinner) else None

    def forward(self, x):
        h = self._activation(self.norm1(self.conv1(x)))
        if self.conv2 is not None:
            h = self.norm2(self.conv2(h))
        return x + h


class Generator(nn.Module):
    """Encoder, residual trunk, decoder; maps [-1, 1] images to [-1, 1] images."""

    def __init__(self, spec: NetworkSpec, seed: int = None):
        super().__init__()
        self.spec = spec
        seed = spec.seed if seed is None else seed
        g = torch.Generator().manual_seed(seed)
        f, c = spec.base_channels, spec.image_channels
        self.encoder = nn.Sequential(
            Conv2d(c, f, 7, padding=3, padding_mode="reflect", generator=g),
            InstanceNorm(f), ReLU(),
            Conv2d(f, 2 * f, 3, stride=2, padding=1, generator=g),
            InstanceNorm(2 * f), ReLU(),
            Conv2d(2 * f, 4 * f, 3, stride=2, padding=1, generator=g),
            InstanceNorm(4 * f), ReLU(),
        )
        self.blocks = nn.Sequential(
            *[ResBlock(4 * f, spec, seed=seed * 1000 + 10 * i, generator=g) for i in range(spec.n_res_blocks)]
        )
        self.decoder = nn.Sequential(
            ConvTranspose2d(4 * f, 2 * f, 3, stride=2, padding=1, output_padding=1, generator=g),
            InstanceNorm(2 * f), ReLU(),
            ConvTranspose2d(2 * f, f, 3, stride=2, padding=1, output_padding=1, generator=g),
            InstanceNorm(f), ReLU(),
            Conv2d(f, c, 7, padding=3, padding_mode="reflect", generator=g),
            Tanh(),
        )

    def forward(self, x):
        if x.dim() != 4:
            raise ValueError(f"generator input must be (N, C, H, W), got {tuple(x.shape)}")
        h, w = x.shape[2:]
        if h % 4 or w % 4:
            raise ValueError(f"generator input size must be divisible by 4, got {h}x{w}")
        out = self.decoder(self.blocks(self.encoder(x)))
        if self.spec.residual_output:
            out = torch.clamp(x + out, -1.0, 1.0)
        return out

    def encode(self, x):
        return self.encoder(x)

    def kwinners(self):
        return [b.kwinner for b in self.blocks if b.kwinner is not None]

    def materialize(self, height: int, width: int) -> "Generator":
        """Run one throwaway forward so lazily-sized layers exist (no state change)."""
        was_training = self.training
        self.eval()
        with torch.no_grad():
            self(torch.zeros(1, self.spec.image_channels, height, width))
        self.train(was_training)
        return self


class Critic(nn.Module):
    """PatchGAN critic without output nonlinearity; score = mean of the patch map."""

    def __init__(self, spec: NetworkSpec, seed: int = None):
        super().__init__()
        self.spec = spec
        g = torch.Generator().manual_seed(spec.seed if seed is None else seed)
        f, c = spec.base_channels, spec.image_channels
        self.body = nn.Sequential(
            Conv2d(c, f, 4, stride=2, padding=1, generator=g), LeakyReLU(0.2),
            Conv2d(f, 2 * f, 4, stride=2, padding=1, generator=g), InstanceNorm(2 * f), LeakyReLU(0.2),
            Conv2d(2 * f, 4 * f, 4, stride=2, padding=1, generator=g), InstanceNorm(4 * f), LeakyReLU(0.2),
            Conv2d(4 * f, 8 * f, 4, stride=1, padding=1, generator=g), InstanceNorm(8 * f), LeakyReLU(0.2),
            # no output bias: it cancels in the Wasserstein gap and the penalty never sees it
            Conv2d(8 * f, 1, 4, stride=1, padding=1, bias=False, generator=g),
        )

    @staticmethod
    def patch_shape(height: int, width: int) -> Tuple[int, int]:
        def out(n):
            for stride in (2, 2, 2, 1, 1):
                n = (n + 2 - 4) // stride + 1
            return n
        return out(height), out(width)

    def patch_map(self, x):
        ph, pw = self.patch_shape(*x.shape[2:])
        if ph < 1 or pw < 1:
            raise ValueError(f"critic input {x.shape[2]}x{x.shape[3]} is too small for the receptive field")
        return self.body(x)

    def forward(self, x):
        return self.patch_map(x).mean(dim=(1, 2, 3))


def build_generator(spec: NetworkSpec, seed: int = None) -> Generator:
    return Generator(spec, seed)


def build_res_block(channels: int, spec: NetworkSpec, seed: int = 0) -> ResBlock:
    return ResBlock(channels, spec, seed, torch.Generator().manual_seed(seed))


def build_critic(spec: NetworkSpec, seed: int = None) -> Critic:
    return Critic(spec, seed)


@dataclass
class CycleOutputs:
    fake_y: torch.Tensor  # G_X(x): restored sharp
    fake_x: torch.Tensor  # G_Y(y): synthesized blur
    rec_x: torch.Tensor   # G_Y(G_X(x))
    rec_y: torch.Tensor   # G_X(G_Y(y))


def forward_cycle(g_x, g_y, x, y) -> CycleOutputs:
    fake_y = g_x(x)
    fake_x = g_y(y)
    return CycleOutputs(fake_y, fake_x, g_y(fake_y), g_x(fake_x))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
