"""Finite-difference gradient suite over every differentiable operation.

Each registered op builds seeded float64 cases. The analytic gradient from
the autodiff record is compared with a central difference of the same
float64 forward (``h = 1e-3``) using

    rel = ||analytic - numeric|| / max(||analytic||, ||numeric||)

Cases are drawn so that no kink (ReLU, LeakyReLU, absolute value, k-winner
selection boundary) lies within ``KINK_MARGIN`` of an evaluation point.
"""
from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .losses import (
    FeatureExtractor,
    cycle_loss,
    generator_adv_loss,
    gradient_penalty,
    perceptual_loss,
)
from .sparse import KWinner, init_sparse_mask

STEP = 1e-3
TOLERANCE = 1e-4
SECOND_ORDER_TOLERANCE = 1e-3
KINK_MARGIN = 1e-2
CASES_PER_OP = 20

Tap = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class Case:
    fn: Callable[..., torch.Tensor]  # scalar-valued
    inputs: List[torch.Tensor]


@dataclass
class OpSpec:
    name: str
    build: Callable[[np.random.Generator, Tap], Case]
    tolerance: float = TOLERANCE
    second_order: bool = False


@dataclass
class OpResult:
    name: str
    cases: int
    max_rel_error: float
    tolerance: float
    seconds: float
    worst_case: int = -1

    @property
    def passed(self) -> bool:
        return self.cases > 0 and self.max_rel_error < self.tolerance


@dataclass
class SuiteReport:
    results: List[OpResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[str]:
        return [r.name for r in self.results if not r.passed]

    def to_text(self) -> str:
        width = max(len(r.name) for r in self.results)
        lines = [f"{'op':<{width}}  cases  max rel err  tolerance  status"]
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(
                f"{r.name:<{width}}  {r.cases:5d}  {r.max_rel_error:11.3e}  {r.tolerance:9.0e}  {status}"
            )
        n_pass = sum(r.passed for r in self.results)
        lines.append(f"{n_pass}/{len(self.results)} ops passed")
        return "\n".join(lines)


# -- helpers ------------------------------------------------------------------

def _identity_tap(t):
    return t


def corrupting_tap(scale: float = 1.5) -> Tap:
    """Identity in the forward pass, gradient multiplied by ``scale``.

    Written as ``t*s + (t*(1-s)).detach()`` so that it stays differentiable
    to any order.
    """
    def tap(t):
        return t * scale + (t * (1.0 - scale)).detach()
    return tap


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def _randn(rng, *shape, scale=1.0):
    return _t(rng.standard_normal(shape) * scale)


def _away_from_zero(rng, *shape, margin=0.05):
    """Normal draws pushed at least ``margin`` away from 0."""
    a = rng.standard_normal(shape)
    return _t(np.sign(a) * (np.abs(a) + margin))


def _clear_of_kinks(values: torch.Tensor, margin: float = KINK_MARGIN) -> bool:
    return bool(values.detach().abs().min() > margin)


def _draw(rng, make, accept, attempts=200):
    for _ in range(attempts):
        value = make()
        if accept(value):
            return value
    raise RuntimeError("could not draw a case away from kinks")


def numeric_gradient(fn: Callable, inputs: Sequence[torch.Tensor], h: float = STEP) -> List[torch.Tensor]:
    grads = []
    base = [t.detach().clone() for t in inputs]
    for i, t in enumerate(base):
        g = torch.zeros_like(t)
        flat = t.view(-1)
        gflat = g.view(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + h
            plus = fn(*base).item()
            flat[j] = orig - h
            minus = fn(*base).item()
            flat[j] = orig
            gflat[j] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def analytic_gradient(fn: Callable, inputs: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    return list(ad.grad(fn(*leaves), leaves, allow_unused=True))


def relative_error(analytic: Sequence[torch.Tensor], numeric: Sequence[torch.Tensor]) -> float:
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    denom = max(a.norm().item(), n.norm().item())
    if denom == 0.0:
        return 0.0
    return (a - n).norm().item() / denom


def check_case(case: Case) -> float:
    return relative_error(analytic_gradient(case.fn, case.inputs), numeric_gradient(case.fn, case.inputs))


# -- case builders --------------------------------------------------------------

def _conv_case(stride=1, padding=0, mode="zero"):
    def build(rng, tap):
        n, cin, cout, k = 1, int(rng.integers(1, 3)), int(rng.integers(1, 3)), 3
        size = int(rng.integers(4, 6))
        x, w, b = _randn(rng, n, cin, size, size), _randn(rng, cout, cin, k, k), _randn(rng, cout)
        probe = ad.conv2d(x, w, b, stride, padding, mode)
        r = _randn(rng, *probe.shape)
        return Case(lambda x, w, b: (tap(ad.conv2d(x, w, b, stride, padding, mode)) * r).sum(), [x, w, b])
    return build


def _conv_transpose_case(rng, tap):
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    stride = int(rng.integers(1, 3))
    size = int(rng.integers(2, 4))
    x, w, b = _randn(rng, 1, cin, size, size), _randn(rng, cin, cout, 3, 3), _randn(rng, cout)
    padding = 1
    out_pad = stride - 1
    probe = ad.conv_transpose2d(x, w, b, stride, padding, out_pad)
    r = _randn(rng, *probe.shape)

    def fn(x, w, b):
        return (tap(ad.conv_transpose2d(x, w, b, stride, padding, out_pad)) * r).sum()
    return Case(fn, [x, w, b])


def _instance_norm_case(rng, tap):
    c = int(rng.integers(1, 4))
    x = _randn(rng, 2, c, 3, 3)
    gamma, beta = _randn(rng, c), _randn(rng, c)
    r = _randn(rng, *x.shape)
    return Case(lambda x, g, b: (tap(ad.instance_norm(x, g, b)) * r).sum(), [x, gamma, beta])


def _unary_case(kind, **kw):
    def build(rng, tap):
        x = _away_from_zero(rng, 1, 2, 3, 3) if kind in ("relu", "leaky_relu") else _randn(rng, 1, 2, 3, 3)
        r = _randn(rng, *x.shape)
        return Case(lambda x: (tap(ad.pointwise(x, kind, **kw)) * r).sum(), [x])
    return build


def _binary_case(kind):
    def build(rng, tap):
        a, b = _randn(rng, 1, 2, 3, 3), _randn(rng, 1, 2, 3, 3)
        r = _randn(rng, *a.shape)
        return Case(lambda a, b: (tap(ad.pointwise(a, kind, b)) * r).sum(), [a, b])
    return build


def _reduce_case(kind):
    def build(rng, tap):
        a = _randn(rng, 1, 2, 3, 3)
        if kind in ("l1_mean", "mse"):
            b = a + _away_from_zero(rng, *a.shape)
            return Case(lambda a, b: tap(ad.reduce(a, kind, b)), [a, b])
        return Case(lambda a: tap(ad.reduce(a, kind)), [a])
    return build


def _kwinner_case(rng, tap):
    """Boosted selection with a frozen random duty cycle; scores well separated."""
    c, h, w = 2, 3, 3
    n = c * h * w
    layer = KWinner(n, int(rng.integers(2, n // 2)), boost_strength=float(rng.uniform(0.5, 3.0)))
    layer.duty_cycle.copy_(_t(rng.uniform(0, 0.5, n)))
    boost = layer.boost_coefficients()

    def separated(x):
        scores = (x.reshape(-1) * boost).sort().values
        return bool((scores[1:] - scores[:-1]).min() > 4 * STEP * boost.max()) and _clear_of_kinks(x)

    x = _draw(rng, lambda: _randn(rng, 1, c, h, w), separated)
    r = _randn(rng, 1, c, h, w)

    def fn(x):
        saved = layer.duty_cycle.clone()
        out = layer(x)
        layer.duty_cycle.copy_(saved)  # keep the case a pure function
        return (tap(out) * r).sum()
    return Case(fn, [x])


def _sparse_conv_case(rng, tap):
    cin, cout = 2, 2
    shape = (cout, cin, 3, 3)
    mask = _t(init_sparse_mask(shape, float(rng.uniform(0.2, 0.8)), int(rng.integers(0, 2**31))))
    x, w, b = _randn(rng, 1, cin, 4, 4), _randn(rng, *shape), _randn(rng, cout)
    r = _randn(rng, 1, cout, 4, 4)
    return Case(
        lambda x, w, b: (tap(ad.conv2d(x, w * mask, b, 1, 1, "reflect")) * r).sum(), [x, w, b]
    )


def _cycle_case(rng, tap):
    x, y = _randn(rng, 1, 3, 4, 4), _randn(rng, 1, 3, 4, 4)
    rx = x + _away_from_zero(rng, *x.shape)
    ry = y + _away_from_zero(rng, *y.shape)
    return Case(lambda rx, ry: tap(cycle_loss(x, y, rx, ry)), [rx, ry])


_EXTRACTOR = None


def _extractor():
    global _EXTRACTOR
    if _EXTRACTOR is None:
        _EXTRACTOR = FeatureExtractor(channels=(3, 4, 4), strides=(1, 2), tap=2, seed=7).double()
    return _EXTRACTOR


def _extractor_preacts(ext, x):
    pre, h = [], x
    for i in range(ext.tap):
        z = ad.conv2d(h, ext.weights[i], ext.biases[i], stride=ext.strides[i], padding=1)
        pre.append(z.reshape(-1))
        h = ad.relu(z)
    return torch.cat(pre)


def _perceptual_case(rng, tap):
    ext = _extractor()
    restored, sharp = _draw(
        rng,
        lambda: (_randn(rng, 1, 3, 4, 4), _randn(rng, 1, 3, 4, 4)),
        lambda p: _clear_of_kinks(_extractor_preacts(ext, p[0])) and _clear_of_kinks(_extractor_preacts(ext, p[1])),
    )
    return Case(lambda a, b: tap(perceptual_loss(ext, a, b)), [restored, sharp])


def _tiny_critic_params(rng, c=2, f=2):
    return [_randn(rng, f, c, 3, 3, scale=0.7), _randn(rng, f, scale=0.1),
            _randn(rng, 1, f, 3, 3, scale=0.7), _randn(rng, 1, scale=0.1)]


def _tiny_critic(params, x, tap=_identity_tap, preacts=None):
    """conv(stride 2) -> instance norm -> leaky relu -> conv -> mean."""
    w1, b1, w2, b2 = params
    z = tap(ad.conv2d(x, w1, b1, stride=2, padding=1))
    ones = torch.ones(z.shape[1], dtype=z.dtype)
    n = ad.instance_norm(z, ones, torch.zeros_like(ones))
    if preacts is not None:
        preacts.append(n.reshape(-1))
    return ad.conv2d(ad.leaky_relu(n, 0.2), w2, b2, padding=1).mean(dim=(1, 2, 3))


def _adv_case(rng, tap):
    params = _tiny_critic_params(rng)
    fake = _draw(
        rng,
        lambda: _randn(rng, 2, 2, 4, 4),
        lambda x: _clear_of_kinks(_preacts(params, x)),
    )

    def fn(fake, *params):
        return tap(generator_adv_loss(lambda u: _tiny_critic(params, u), fake))
    return Case(fn, [fake, *params])


def _preacts(params, x):
    out = []
    _tiny_critic(params, x, preacts=out)
    return out[-1]


def _gradient_penalty_case(rng, tap):
    """Second order: d GP / d critic parameters through the input gradient."""
    def make():
        params = _tiny_critic_params(rng)
        real, fake = _randn(rng, 2, 2, 4, 4), _randn(rng, 2, 2, 4, 4)
        eps = _t(rng.uniform(0.1, 0.9, 2))
        return params, real, fake, eps

    def ok(case):
        params, real, fake, eps = case
        u = eps.reshape(-1, 1, 1, 1) * real + (1 - eps.reshape(-1, 1, 1, 1)) * fake
        return _clear_of_kinks(_preacts(params, u), 5 * KINK_MARGIN)

    params, real, fake, eps = _draw(rng, make, ok)

    def fn(*params):
        return gradient_penalty(lambda u: _tiny_critic(params, u, tap), real, fake, eps=eps)
    return Case(fn, list(params))


def _composed_case(rng, tap):
    """conv -> instance norm -> relu -> mean."""
    c = 2
    x, w, b = _randn(rng, 1, c, 4, 4), _randn(rng, c, c, 3, 3), _randn(rng, c)
    gamma, beta = _randn(rng, c), _randn(rng, c)

    def pre(x, w, b, g, be):
        return ad.instance_norm(ad.conv2d(x, w, b, padding=1), g, be)

    def make():
        return _randn(rng, 1, c, 4, 4), _randn(rng, c, c, 3, 3), _randn(rng, c)

    x, w, b = _draw(rng, make, lambda p: _clear_of_kinks(pre(*p, gamma, beta)))
    return Case(lambda x, w, b, g, be: tap(ad.reduce(ad.relu(pre(x, w, b, g, be)), "mean")), [x, w, b, gamma, beta])


REGISTRY: Dict[str, OpSpec] = {
    spec.name: spec
    for spec in [
        OpSpec("conv2d", _conv_case()),
        OpSpec("conv2d_reflect", _conv_case(padding=1, mode="reflect")),
        OpSpec("conv2d_stride2", _conv_case(stride=2, padding=1)),
        OpSpec("conv_transpose2d", _conv_transpose_case),
        OpSpec("instance_norm", _instance_norm_case),
        OpSpec("relu", _unary_case("relu")),
        OpSpec("leaky_relu", _unary_case("leaky_relu", slope=0.2)),
        OpSpec("tanh", _unary_case("tanh")),
        OpSpec("scale", _unary_case("scale", factor=-1.7)),
        OpSpec("add", _binary_case("add")),
        OpSpec("sub", _binary_case("sub")),
        OpSpec("mul", _binary_case("mul")),
        OpSpec("mean", _reduce_case("mean")),
        OpSpec("sum", _reduce_case("sum")),
        OpSpec("l1_mean", _reduce_case("l1_mean")),
        OpSpec("mse", _reduce_case("mse")),
        OpSpec("kwinner", _kwinner_case),
        OpSpec("sparse_conv2d", _sparse_conv_case),
        OpSpec("cycle_loss", _cycle_case),
        OpSpec("perceptual_loss", _perceptual_case),
        OpSpec("generator_adv_loss", _adv_case),
        OpSpec("gradient_penalty", _gradient_penalty_case, SECOND_ORDER_TOLERANCE, second_order=True),
        OpSpec("conv_in_relu_mean", _composed_case),
    ]
}


def run_op(spec: OpSpec, seed: int = 0, cases: int = CASES_PER_OP, tap: Tap = _identity_tap) -> OpResult:
    start = time.perf_counter()
    rng = np.random.default_rng([seed, zlib.crc32(spec.name.encode())])
    worst, worst_i = 0.0, -1
    for i in range(cases):
        err = check_case(spec.build(rng, tap))
        if not err <= worst:  # also catches NaN
            worst, worst_i = err, i
    return OpResult(spec.name, cases, worst, spec.tolerance, time.perf_counter() - start, worst_i)


def run_suite(
    seed: int = 0,
    cases: int = CASES_PER_OP,
    ops: Optional[Sequence[str]] = None,
    corrupt: Optional[str] = None,
) -> SuiteReport:
    """Run the registered checks; ``corrupt`` names an op whose backward is
    deliberately scaled, to exercise the harness itself."""
    names = list(REGISTRY) if ops is None else list(ops)
    unknown = [n for n in names + ([corrupt] if corrupt else []) if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}; registered: {', '.join(REGISTRY)}")
    report = SuiteReport()
    for name in names:
        tap = corrupting_tap() if name == corrupt else _identity_tap
        report.results.append(run_op(REGISTRY[name], seed, cases, tap))
    return report
