"""Differentiable operator set used by every network in the package.

The operators are thin, validated wrappers over :mod:`torch` tensors. They
exist so that shape errors are reported with the offending dimension and so
that kink conventions (right-hand derivative at 0 for ReLU-type functions)
are fixed in one place. All operators support double backward.
"""
from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

PADDING_MODES = ("zero", "reflect")
POINTWISE_KINDS = ("relu", "leaky_relu", "tanh", "add", "sub", "mul", "scale")
REDUCE_KINDS = ("mean", "sum", "l1_mean", "mse")


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes."""


def _check_4d(t: Tensor, name: str) -> None:
    if t.dim() != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {tuple(t.shape)}")


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.dim() != b.dim():
        raise ShapeError(f"{op}: rank mismatch {a.dim()} vs {b.dim()}")
    for axis, (m, n) in enumerate(zip(a.shape, b.shape)):
        if m != n:
            raise ShapeError(f"{op}: dimension {axis} mismatch ({m} vs {n})")


def _pad(x: Tensor, padding: int, mode: str) -> Tensor:
    if padding == 0:
        return x
    if mode == "zero":
        return F.pad(x, (padding,) * 4)
    if mode == "reflect":
        h, w = x.shape[-2:]
        if padding >= h or padding >= w:
            raise ShapeError(
                f"reflect padding {padding} needs spatial size > {padding}, got {h}x{w}"
            )
        return F.pad(x, (padding,) * 4, mode="reflect")
    raise ValueError(f"unknown padding mode {mode!r}; expected one of {PADDING_MODES}")


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    padding_mode: str = "zero",
) -> Tensor:
    """Cross-correlate ``input`` (N, Cin, H, W) with ``weight`` (Cout, Cin, Kh, Kw)."""
    _check_4d(input, "input")
    _check_4d(weight, "weight")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if weight.shape[1] != input.shape[1]:
        raise ShapeError(
            f"conv2d: channel dimension mismatch, input has {input.shape[1]} "
            f"channels but weight expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"conv2d: bias must have shape ({weight.shape[0]},), got {tuple(bias.shape)}"
        )
    kh, kw = weight.shape[2:]
    h, w = input.shape[2] + 2 * padding, input.shape[3] + 2 * padding
    if h < kh:
        raise ShapeError(f"conv2d: padded height {h} smaller than kernel height {kh}")
    if w < kw:
        raise ShapeError(f"conv2d: padded width {w} smaller than kernel width {kw}")
    return F.conv2d(_pad(input, padding, padding_mode), weight, bias, stride=stride)


def conv_transpose2d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is laid out (Cin, Cout, Kh, Kw).

    Output size is ``(H - 1) * stride - 2 * padding + Kh + output_padding``.
    """
    _check_4d(input, "input")
    _check_4d(weight, "weight")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if weight.shape[0] != input.shape[1]:
        raise ShapeError(
            f"conv_transpose2d: channel dimension mismatch, input has {input.shape[1]} "
            f"channels but weight expects {weight.shape[0]}"
        )
    if not 0 <= output_padding < stride:
        raise ValueError(f"output_padding must be in [0, stride), got {output_padding}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"conv_transpose2d: bias must have shape ({weight.shape[1]},), "
            f"got {tuple(bias.shape)}"
        )
    return F.conv_transpose2d(
        input, weight, bias, stride=stride, padding=padding, output_padding=output_padding
    )


def instance_norm(
    input: Tensor,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    """Per-sample, per-channel standardization over H x W with affine rescale."""
    _check_4d(input, "input")
    c = input.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"instance_norm: {name} must have shape ({c},), got {tuple(p.shape)}")
    mu = input.mean(dim=(2, 3), keepdim=True)
    centered = input - mu
    var = (centered * centered).mean(dim=(2, 3), keepdim=True)
    out = centered / torch.sqrt(var + eps)
    if gamma is not None:
        out = out * gamma.view(1, c, 1, 1)
    if beta is not None:
        out = out + beta.view(1, c, 1, 1)
    return out


def relu(x: Tensor) -> Tensor:
    # where() keeps a derivative of 1 at x == 0 (right-hand convention)
    return torch.where(x >= 0, x, torch.zeros_like(x))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return torch.where(x >= 0, x, x * slope)


def pointwise(
    input: Tensor,
    kind: str,
    other: Optional[Tensor] = None,
    *,
    slope: float = 0.2,
    factor: float = 1.0,
) -> Tensor:
    """Elementwise unary/binary operator selected by ``kind``."""
    if kind == "relu":
        return relu(input)
    if kind == "leaky_relu":
        return leaky_relu(input, slope)
    if kind == "tanh":
        return torch.tanh(input)
    if kind == "scale":
        return input * factor
    if kind in ("add", "sub", "mul"):
        if other is None:
            raise ValueError(f"pointwise {kind!r} needs a second operand")
        _check_same_shape(input, other, kind)
        if kind == "add":
            return input + other
        if kind == "sub":
            return input - other
        return input * other
    raise ValueError(f"unknown pointwise kind {kind!r}; expected one of {POINTWISE_KINDS}")


def reduce(input: Tensor, kind: str, other: Optional[Tensor] = None) -> Tensor:
    """Reduce to a scalar: mean, sum, mean absolute or mean squared difference."""
    if kind == "mean":
        return input.mean()
    if kind == "sum":
        return input.sum()
    if kind in ("l1_mean", "mse"):
        if other is None:
            raise ValueError(f"reduce {kind!r} needs a second operand")
        _check_same_shape(input, other, kind)
        diff = input - other
        return diff.abs().mean() if kind == "l1_mean" else (diff * diff).mean()
    raise ValueError(f"unknown reduce kind {kind!r}; expected one of {REDUCE_KINDS}")


def _check_scalar(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")


def backward(loss: Tensor, create_second_order: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    _check_scalar(loss)
    loss.backward(create_graph=create_second_order)


def grad(
    loss: Tensor,
    inputs: Sequence[Tensor],
    create_second_order: bool = False,
    allow_unused: bool = False,
) -> tuple:
    """Return d(loss)/d(inputs) without touching ``.grad`` buffers."""
    _check_scalar(loss)
    grads = torch.autograd.grad(
        loss,
        list(inputs),
        create_graph=create_second_order,
        allow_unused=allow_unused,
    )
    if allow_unused:
        grads = tuple(torch.zeros_like(t) if g is None else g for g, t in zip(grads, inputs))
    return grads
