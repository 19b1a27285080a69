"""Declarative feed-forward network description and a trace-recording forward pass.

Networks are sequences of layer specs (dense, conv, pooling, flatten, ReLU,
residual blocks). The forward pass records every layer's input and output
activations so relevance can be propagated backward afterwards.
"""

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor_core as tc
from .errors import DimensionError, DomainError, NumericError


@dataclass(frozen=True)
class Dense:
    weights: np.ndarray  # [Nout, Nin]
    bias: np.ndarray     # [Nout]


@dataclass(frozen=True)
class Conv2D:
    kernel: np.ndarray   # [Cout, Kh, Kw, Cin]
    bias: np.ndarray | None
    strides: tuple[int, int] = (1, 1)
    padding: str = "valid"


@dataclass(frozen=True)
class MaxPool2D:
    pool: tuple[int, int]
    strides: tuple[int, int]


@dataclass(frozen=True)
class AvgPool2D:
    pool: tuple[int, int]
    strides: tuple[int, int]


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class ResidualBlock:
    """branch(x) + skip(x); skip is identity when projection is None."""

    branch: tuple
    projection: Conv2D | None = None


LayerSpec = Union[Dense, Conv2D, MaxPool2D, AvgPool2D, Flatten, ReLU, ResidualBlock]


@dataclass(frozen=True)
class Preprocessing:
    mode: str = "unit"                 # 'unit' or 'centered'
    means: np.ndarray | None = None    # per-channel means for 'centered'


@dataclass(frozen=True)
class Network:
    layers: tuple
    input_shape: tuple
    num_outputs: int
    name: str = ""
    labels: tuple | None = None
    preprocessing: Preprocessing = field(default_factory=Preprocessing)

    def __post_init__(self):
        shapes = infer_shapes(self.layers, self.input_shape)
        final = shapes[-1][1] if shapes else tuple(self.input_shape)
        if final != (self.num_outputs,):
            raise DimensionError(
                f"network produces shape {final}, expected ({self.num_outputs},)"
            )


def _pool_geometry(pool, strides):
    if any(p < 1 for p in pool) or any(s < 1 for s in strides):
        raise DimensionError(f"pool extents and strides must be >= 1, got {pool}, {strides}")


def layer_output_shape(layer: LayerSpec, in_shape: tuple) -> tuple:
    """Output shape of one layer given its input shape; validates geometry."""
    if isinstance(layer, Dense):
        nout, nin = layer.weights.shape
        if in_shape != (nin,):
            raise DimensionError(f"dense expects input ({nin},), got {in_shape}")
        if layer.bias is None or layer.bias.shape != (nout,):
            raise DimensionError("dense bias shape does not match weight rows")
        return (nout,)
    if isinstance(layer, Conv2D):
        if len(in_shape) != 3 or in_shape[2] != layer.kernel.shape[3]:
            raise DimensionError(
                f"conv expects [H, W, {layer.kernel.shape[3]}] input, got {in_shape}"
            )
        hh, ww = tc.conv_output_shape(in_shape[:2], layer.kernel.shape[1:3],
                                      layer.strides, layer.padding)
        return (hh, ww, layer.kernel.shape[0])
    if isinstance(layer, (MaxPool2D, AvgPool2D)):
        if len(in_shape) != 3:
            raise DimensionError(f"pooling expects [H, W, C] input, got {in_shape}")
        _pool_geometry(layer.pool, layer.strides)
        hh, ww = tc.conv_output_shape(in_shape[:2], layer.pool, layer.strides, "valid")
        return (hh, ww, in_shape[2])
    if isinstance(layer, Flatten):
        return (int(np.prod(in_shape)),)
    if isinstance(layer, ReLU):
        return in_shape
    if isinstance(layer, ResidualBlock):
        shape = in_shape
        for sub in layer.branch:
            if isinstance(sub, ResidualBlock):
                raise DomainError("nested residual blocks are not supported")
            shape = layer_output_shape(sub, shape)
        if layer.projection is None:
            skip_shape = in_shape
        else:
            _check_projection(layer.projection)
            skip_shape = layer_output_shape(layer.projection, in_shape)
        if shape != skip_shape:
            raise DimensionError(
                f"residual branch output {shape} does not match skip output {skip_shape}"
            )
        return shape
    raise DomainError(f"unknown layer kind {type(layer).__name__}")


def _check_projection(proj: Conv2D):
    # only the 1x1, stride-2, bias-free downsampling projection is supported
    if proj.kernel.shape[1:3] != (1, 1) or tuple(proj.strides) != (2, 2) or proj.bias is not None:
        raise DomainError(
            "residual projection must be a bias-free 1x1 convolution with stride 2"
        )


def infer_shapes(layers, input_shape) -> list[tuple[tuple, tuple]]:
    """Per-layer (input_shape, output_shape) pairs, validating the whole chain."""
    shapes = []
    shape = tuple(int(e) for e in input_shape)
    for layer in layers:
        out = layer_output_shape(layer, shape)
        shapes.append((shape, out))
        shape = out
    return shapes


@dataclass
class LayerTrace:
    x_in: np.ndarray
    x_out: np.ndarray
    branch: list | None = None      # sub-traces of a residual branch
    skip: "LayerTrace | None" = None  # projection sub-trace (identity skips record none)


@dataclass
class ForwardTrace:
    layers: list
    logits: np.ndarray


def _apply_layer(layer: LayerSpec, x: np.ndarray, where: str) -> LayerTrace:
    if isinstance(layer, Dense):
        out = tc.matvec(layer.weights, x) + layer.bias
    elif isinstance(layer, Conv2D):
        out = tc.conv2d(x, layer.kernel, layer.bias, layer.strides, layer.padding)
    elif isinstance(layer, MaxPool2D):
        win = tc.conv_windows(x, layer.pool, layer.strides, "valid")
        out = win.max(axis=(2, 3))
    elif isinstance(layer, AvgPool2D):
        win = tc.conv_windows(x, layer.pool, layer.strides, "valid")
        out = win.mean(axis=(2, 3))
    elif isinstance(layer, Flatten):
        out = x.ravel(order="C")
    elif isinstance(layer, ReLU):
        out = np.maximum(x, 0.0)
    elif isinstance(layer, ResidualBlock):
        branch_traces = []
        b = x
        for i, sub in enumerate(layer.branch):
            entry = _apply_layer(sub, b, f"{where}.branch[{i}]")
            branch_traces.append(entry)
            b = entry.x_out
        if layer.projection is None:
            skip_trace = None
            s = x
        else:
            skip_trace = _apply_layer(layer.projection, x, f"{where}.projection")
            s = skip_trace.x_out
        out = b + s
        trace = LayerTrace(x, out, branch=branch_traces, skip=skip_trace)
        if not np.isfinite(out).all():
            raise NumericError("non-finite activation", layer=where)
        return trace
    else:
        raise DomainError(f"unknown layer kind {type(layer).__name__}")
    if not np.isfinite(out).all():
        raise NumericError("non-finite activation", layer=where)
    return LayerTrace(x, out)


def forward(net: Network, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network, recording every layer's input and output activations."""
    if tuple(x.shape) != tuple(net.input_shape):
        raise DimensionError(f"input shape {x.shape} != network input {net.input_shape}")
    entries = []
    cur = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(net.layers):
        entry = _apply_layer(layer, cur, f"{i}:{type(layer).__name__}")
        entries.append(entry)
        cur = entry.x_out
    return cur, ForwardTrace(entries, cur)


def predict_class(net: Network, x: np.ndarray) -> int:
    """Index of the maximum logit; ties resolve to the lowest index."""
    logits, _ = forward(net, x)
    return int(np.argmax(logits))


def prepare_input(net: Network, image: np.ndarray) -> np.ndarray:
    """Apply the network's declared preprocessing to a [0, 1]-scaled image."""
    prep = net.preprocessing
    if prep.mode == "unit":
        return image
    if prep.mode == "centered":
        if prep.means is None or image.ndim != 3 or len(prep.means) != image.shape[2]:
            raise DimensionError("centered preprocessing requires per-channel means")
        return image - np.asarray(prep.means, dtype=np.float64)[None, None, :]
    raise DomainError(f"unknown preprocessing mode {prep.mode!r}")
