"""Alternating WGAN-GP / cycle-consistency training loop.

One iteration updates the sharp-domain critic and the blur-domain critic on
detached translations, then takes a single joint Adam step on both
generators, then re-applies the sparse weight masks. Every random draw of a
run (shuffling, augmentation, interpolation weights) comes from one seeded
``torch.Generator`` whose state is checkpointed with the model.
"""
from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .checkpoint import (
    F64_SUFFIX,
    read_tensors,
    tensor_to_text,
    text_to_tensor,
    write_tensors,
)
from .config import TrainConfig, dump_config, load_config
from .data import ImagePair, augment, stack_pairs
from .losses import (
    FeatureExtractor,
    critic_loss_terms,
    cycle_loss,
    generator_adv_loss,
    perceptual_loss,
    total_generator_loss,
)
from .networks import Critic, Generator, NetworkSpec, forward_cycle
from .sparse import apply_weight_mask, weight_masks

logger = logging.getLogger(__name__)

TRACE_FIELDS = ("epoch", "step", "loss_g", "loss_dx", "loss_dy", "cyc", "perc", "adv", "gp")
LOSS_TERMS = TRACE_FIELDS[2:]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite {term} loss ({value})")
        self.term = term
        self.value = value


def lr_at(epoch: float, config: TrainConfig) -> float:
    """Constant ``lr0`` until ``decay_start_epoch``, then linear decay to 0 at ``epochs``."""
    if epoch < config.decay_start_epoch:
        return config.lr0
    span = config.epochs - config.decay_start_epoch
    if span == 0:
        return 0.0
    return config.lr0 * max(0.0, config.epochs - epoch) / span


def adam_step(param, grad, m, v, step: int, lr: float, beta1=0.5, beta2=0.999, eps=1e-8, mask=None):
    """In-place bias-corrected Adam update of one tensor; ``step`` counts from 1."""
    with torch.no_grad():
        if mask is not None:
            grad = grad * mask
        m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        param.sub_(lr * m_hat / (v_hat.sqrt() + eps))


class Adam:
    """Adam over a named parameter set with optional per-parameter masks."""

    def __init__(self, params: Mapping[str, torch.Tensor], beta1=0.5, beta2=0.999, eps=1e-8, masks=None):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.masks = dict(masks or {})
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.t = 0

    def step(self, grads: Sequence[torch.Tensor], lr: float) -> None:
        self.t += 1
        for (name, p), g in zip(self.params.items(), grads):
            adam_step(p, g, self.m[name], self.v[name], self.t, lr,
                      self.beta1, self.beta2, self.eps, self.masks.get(name))

    def state_tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array(self.t, dtype=np.float32)}
        for name in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name].numpy()
            out[f"{prefix}.v.{name}"] = self.v[name].numpy()
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray], prefix: str) -> None:
        self.t = int(tensors[f"{prefix}.step"])
        for name in self.params:
            self.m[name] = torch.from_numpy(np.array(tensors[f"{prefix}.m.{name}"]))
            self.v[name] = torch.from_numpy(np.array(tensors[f"{prefix}.v.{name}"]))


def _named(prefix: str, module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{n}": p for n, p in module.named_parameters()}


def _check_finite(record: Mapping[str, float]) -> None:
    for term in LOSS_TERMS:
        value = record.get(term)
        if value is not None and not math.isfinite(value):
            raise NonFiniteLossError(term, value)


class Trainer:
    """Owns both generators, both critics, their optimizers and the run RNG.

    Parameters
    ----------
    net : NetworkSpec
        Generator/critic topology; ``net.seed`` drives initialization.
    config : TrainConfig
        Optimization protocol; ``config.seed`` drives the run RNG.
    image_shape : (C, H, W)
        Training image shape. Sizes k-winner layers.
    """

    def __init__(self, net: NetworkSpec, config: TrainConfig, image_shape: Sequence[int]):
        c, h, w = (int(s) for s in image_shape)
        if c != net.image_channels:
            raise ValueError(f"images have {c} channels, network expects {net.image_channels}")
        self.net, self.config, self.image_shape = net, config, (c, h, w)
        s = net.seed
        self.g_x = Generator(net, seed=4 * s).materialize(h, w)
        self.g_y = Generator(net, seed=4 * s + 1).materialize(h, w)
        self.d_x = Critic(net, seed=4 * s + 2)
        self.d_y = Critic(net, seed=4 * s + 3)
        self.extractor = None
        if config.perceptual:
            self.extractor = FeatureExtractor(tap=config.perceptual_tap)
            if config.perceptual_weights:
                self.extractor.load_weights(config.perceptual_weights)
        betas = dict(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
        gen_params = {**_named("gx", self.g_x), **_named("gy", self.g_y)}
        gen_masks = {**weight_masks(self.g_x, "gx."), **weight_masks(self.g_y, "gy.")}
        self.opt_g = Adam(gen_params, masks=gen_masks, **betas)
        self.opt_dx = Adam(_named("dx", self.d_x), **betas)
        self.opt_dy = Adam(_named("dy", self.d_y), **betas)
        self.rng = torch.Generator().manual_seed(config.seed)
        self.epoch = 0
        self.global_step = 0
        self.history: List[Dict[str, float]] = []

    # -- single iteration ---------------------------------------------------

    def train_step(self, x: torch.Tensor, y: torch.Tensor, lr: float) -> Dict[str, float]:
        cfg = self.config
        for m in (self.g_x, self.g_y, self.d_x, self.d_y):
            m.train()
        with torch.no_grad():
            fake_y, fake_x = self.g_x(x), self.g_y(y)

        for _ in range(cfg.n_critic):
            gap_y, gp_y = critic_loss_terms(self.d_y, y, fake_y, generator=self.rng)
            loss_dy = gap_y + cfg.lambda_gp * gp_y
            _check_finite({"loss_dy": loss_dy.item()})
            self.opt_dy.step(ad.grad(loss_dy, self.opt_dy.params.values()), lr)

            gap_x, gp_x = critic_loss_terms(self.d_x, x, fake_x, generator=self.rng)
            loss_dx = gap_x + cfg.lambda_gp * gp_x
            _check_finite({"loss_dx": loss_dx.item()})
            self.opt_dx.step(ad.grad(loss_dx, self.opt_dx.params.values()), lr)

        out = forward_cycle(self.g_x, self.g_y, x, y)
        adv = generator_adv_loss(self.d_y, out.fake_y) + generator_adv_loss(self.d_x, out.fake_x)
        cyc = cycle_loss(x, y, out.rec_x, out.rec_y)
        perc = torch.zeros((), dtype=x.dtype)
        if self.extractor is not None:
            perc = perceptual_loss(self.extractor, out.fake_y, y)
            if cfg.perceptual_blur_side:
                perc = perc + perceptual_loss(self.extractor, out.fake_x, x)
        loss_g = total_generator_loss(adv, cyc, perc, cfg.weights)
        record = {
            "loss_g": loss_g.item(), "loss_dx": loss_dx.item(), "loss_dy": loss_dy.item(),
            "cyc": cyc.item(), "perc": perc.item(), "adv": adv.item(),
            "gp": gp_x.item() + gp_y.item(),
        }
        _check_finite(record)
        self.opt_g.step(ad.grad(loss_g, self.opt_g.params.values()), lr)
        apply_weight_mask(self.g_x)
        apply_weight_mask(self.g_y)
        self.global_step += 1
        return record

    # -- epochs -------------------------------------------------------------

    def _batch(self, pairs: Sequence[ImagePair], idx: Sequence[int]):
        cfg = self.config
        chosen = []
        for i in idx:
            p = pairs[i]
            if cfg.augment:
                seed = int(torch.randint(0, 2**31 - 1, (1,), generator=self.rng))
                p = augment(p, seed, flip=cfg.augment_flip, min_crop=cfg.augment_min_crop)
            chosen.append(p)
        x, y = stack_pairs(chosen)
        return torch.from_numpy(x), torch.from_numpy(y)

    def run_epoch(self, pairs: Sequence[ImagePair]) -> List[Dict[str, float]]:
        lr = lr_at(self.epoch, self.config)
        order = torch.randperm(len(pairs), generator=self.rng).tolist()
        bs = self.config.batch_size
        records = []
        for step, start in enumerate(range(0, len(order), bs)):
            x, y = self._batch(pairs, order[start:start + bs])
            rec = self.train_step(x, y, lr)
            rec = {"epoch": self.epoch, "step": step, **rec}
            records.append(rec)
        self.history.extend(records)
        self.epoch += 1
        return records

    def fit(
        self,
        pairs: Sequence[ImagePair],
        epochs: Optional[int] = None,
        on_epoch_end: Optional[Callable[["Trainer", List[Dict[str, float]]], None]] = None,
    ) -> "Trainer":
        """Train from the current epoch up to ``epochs`` (default: config.epochs)."""
        if not pairs:
            raise ValueError("cannot train on an empty dataset")
        shape = tuple(pairs[0].sharp.shape)
        if shape != self.image_shape:
            raise ValueError(f"dataset images are {shape}, trainer was built for {self.image_shape}")
        stop = self.config.epochs if epochs is None else min(epochs, self.config.epochs)
        while self.epoch < stop:
            records = self.run_epoch(pairs)
            if on_epoch_end is not None:
                on_epoch_end(self, records)
            last = records[-1]
            logger.info(
                "epoch %d/%d loss_g=%.4f loss_dx=%.4f loss_dy=%.4f",
                self.epoch, self.config.epochs, last["loss_g"], last["loss_dx"], last["loss_dy"],
            )
        return self

    # -- inference ----------------------------------------------------------

    @torch.no_grad()
    def deblur(self, blurry: np.ndarray) -> np.ndarray:
        self.g_x.eval()
        out = self.g_x(torch.from_numpy(np.ascontiguousarray(blurry, dtype=np.float32)))
        return out.numpy()

    # -- state --------------------------------------------------------------

    def modules(self) -> Dict[str, torch.nn.Module]:
        return {"gx": self.g_x, "gy": self.g_y, "dx": self.d_x, "dy": self.d_y}

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for prefix, module in self.modules().items():
            for name, t in module.state_dict().items():
                key = f"{prefix}.{name}"
                if t.dtype == torch.float64:
                    key += F64_SUFFIX
                out[key] = t.detach().numpy().copy()
        out.update(self.opt_g.state_tensors("opt.g"))
        out.update(self.opt_dx.state_tensors("opt.dx"))
        out.update(self.opt_dy.state_tensors("opt.dy"))
        out["meta.epoch"] = np.array(self.epoch, dtype=np.float32)
        out["meta.global_step"] = np.array(self.global_step, dtype=np.float32)
        out["meta.rng"] = self.rng.get_state().numpy().astype(np.float32)
        out["meta.image_shape"] = np.array(self.image_shape, dtype=np.float32)
        out["meta.config"] = text_to_tensor(dump_config(self.net, self.config))
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray]) -> "Trainer":
        for prefix, module in self.modules().items():
            state = {}
            for name, current in module.state_dict().items():
                key = f"{prefix}.{name}"
                if current.dtype == torch.float64:
                    key += F64_SUFFIX
                if key not in tensors:
                    raise KeyError(f"checkpoint lacks tensor {key!r}")
                state[name] = torch.from_numpy(np.array(tensors[key])).to(current.dtype)
            module.load_state_dict(state, strict=True)
        self.opt_g.load_state_tensors(tensors, "opt.g")
        self.opt_dx.load_state_tensors(tensors, "opt.dx")
        self.opt_dy.load_state_tensors(tensors, "opt.dy")
        self.epoch = int(tensors["meta.epoch"])
        self.global_step = int(tensors["meta.global_step"])
        self.rng.set_state(torch.from_numpy(np.asarray(tensors["meta.rng"]).astype(np.uint8)))
        return self

    def save_checkpoint(self, path) -> None:
        write_tensors(path, self.state_tensors())

    @classmethod
    def from_checkpoint(cls, path, config: Optional[TrainConfig] = None) -> "Trainer":
        """Rebuild a trainer from a checkpoint; ``config`` overrides the stored
        training config (the network spec always comes from the file)."""
        tensors = read_tensors(path)
        net, stored, _ = load_config(tensor_to_text(tensors["meta.config"]), str(path))
        shape = tuple(int(v) for v in tensors["meta.image_shape"])
        trainer = cls(net, config or stored, shape)
        return trainer.load_state_tensors(tensors)


def load_generator(path, direction: str = "gx") -> Generator:
    """Load one generator (``gx``: blur to sharp, ``gy``: sharp to blur) in eval mode."""
    tensors = read_tensors(path)
    net, _, _ = load_config(tensor_to_text(tensors["meta.config"]), str(path))
    c, h, w = (int(v) for v in tensors["meta.image_shape"])
    seed = 4 * net.seed + (0 if direction == "gx" else 1)
    gen = Generator(net, seed=seed).materialize(h, w)
    state = {}
    for name, current in gen.state_dict().items():
        key = f"{direction}.{name}" + (F64_SUFFIX if current.dtype == torch.float64 else "")
        state[name] = torch.from_numpy(np.array(tensors[key])).to(current.dtype)
    gen.load_state_dict(state, strict=True)
    return gen.eval()


def write_trace(path, records: Sequence[Mapping[str, float]], append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(TRACE_FIELDS)
        for r in records:
            writer.writerow([r["epoch"], r["step"]] + [repr(float(r[k])) for k in LOSS_TERMS])
