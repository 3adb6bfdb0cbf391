"""Neural building blocks: dense/conv layers, instance norm, Gaussian heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a stack.

    kind is one of dense | conv | transposed-conv | relu | instance-norm |
    flatten | reshape. Only the fields relevant to the kind are meaningful.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    shape: tuple = ()

    def __post_init__(self):
        if self.kind in ("dense",) and (self.in_dim < 1 or self.out_dim < 1):
            raise ValueError(f"dense layer needs positive dims, got {self.in_dim}->{self.out_dim}")
        if self.kind in ("conv", "transposed-conv"):
            if self.in_dim < 1 or self.out_dim < 1 or self.kernel < 1 or self.stride < 1:
                raise ValueError(f"{self.kind} layer needs positive dimensions")


def dense(in_dim, out_dim):
    return LayerSpec("dense", in_dim=in_dim, out_dim=out_dim)


def conv(in_ch, out_ch, kernel, stride=1, padding=0):
    return LayerSpec("conv", in_dim=in_ch, out_dim=out_ch, kernel=kernel,
                     stride=stride, padding=padding)


def transposed_conv(in_ch, out_ch, kernel, stride=1, padding=0):
    return LayerSpec("transposed-conv", in_dim=in_ch, out_dim=out_ch, kernel=kernel,
                     stride=stride, padding=padding)


def relu_layer():
    return LayerSpec("relu")


def instance_norm_layer():
    return LayerSpec("instance-norm")


def flatten_layer():
    return LayerSpec("flatten")


def reshape_layer(shape):
    return LayerSpec("reshape", shape=tuple(shape))


@dataclass
class GaussianParams:
    """Mean vector plus a shared scalar variance."""

    mean: ad.Tensor
    sigma2: float


def init_params(spec, seed, prefix=""):
    """Glorot-uniform weights, zero biases; deterministic given seed.

    Weights ~ U(-a, a) with a = sqrt(6 / (fan_in + fan_out)). Parameter names
    are "<prefix><layer_index:02d>.w" / ".b"; parameterless layers keep their
    index so names map back to spec positions.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(spec):
        if layer.kind == "dense":
            fan_in, fan_out = layer.in_dim, layer.out_dim
            wshape = (layer.in_dim, layer.out_dim)
            bshape = (layer.out_dim,)
        elif layer.kind == "conv":
            k2 = layer.kernel * layer.kernel
            fan_in, fan_out = layer.in_dim * k2, layer.out_dim * k2
            wshape = (layer.out_dim, layer.in_dim, layer.kernel, layer.kernel)
            bshape = (layer.out_dim,)
        elif layer.kind == "transposed-conv":
            k2 = layer.kernel * layer.kernel
            fan_in, fan_out = layer.in_dim * k2, layer.out_dim * k2
            wshape = (layer.in_dim, layer.out_dim, layer.kernel, layer.kernel)
            bshape = (layer.out_dim,)
        else:
            continue
        a = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}{i:02d}.w"] = ad.Tensor(rng.uniform(-a, a, wshape), requires_grad=True)
        params[f"{prefix}{i:02d}.b"] = ad.Tensor(np.zeros(bshape), requires_grad=True)
    return params


def instance_norm(x, eps=1e-5):
    """Normalize each (sample, channel) plane to zero mean, unit variance.

    No learned affine. eps guards zero-variance planes; with eps=0 the result
    is exactly invariant to positive affine rescaling of the input.
    """
    m = ad.tensor_mean(x, axis=(2, 3), keepdims=True)
    centered = ad.sub(x, ad.broadcast(m, x.shape))
    v = ad.tensor_mean(ad.square(centered), axis=(2, 3), keepdims=True)
    denom = ad.sqrt(ad.add(v, ad.constant(eps)))
    return ad.div(centered, ad.broadcast(denom, x.shape))


def forward_stack(spec, params, x, prefix=""):
    """Apply the layers of `spec` in order to x."""
    h = x
    for i, layer in enumerate(spec):
        if layer.kind == "dense":
            h = ad.add(ad.matmul(h, params[f"{prefix}{i:02d}.w"]), params[f"{prefix}{i:02d}.b"])
        elif layer.kind == "conv":
            h = ad.conv2d(h, params[f"{prefix}{i:02d}.w"], params[f"{prefix}{i:02d}.b"],
                          stride=layer.stride, padding=layer.padding)
        elif layer.kind == "transposed-conv":
            h = ad.conv_transpose2d(h, params[f"{prefix}{i:02d}.w"], params[f"{prefix}{i:02d}.b"],
                                    stride=layer.stride, padding=layer.padding)
        elif layer.kind == "relu":
            h = ad.relu(h)
        elif layer.kind == "instance-norm":
            h = instance_norm(h)
        elif layer.kind == "flatten":
            h = ad.reshape(h, (h.shape[0], -1))
        elif layer.kind == "reshape":
            h = ad.reshape(h, (h.shape[0],) + layer.shape)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return h
