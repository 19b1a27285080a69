"""Dense tensor primitives used by forward inference and backward relevance.

Everything operates on float64 numpy arrays. Images and feature maps are
channel-last [H, W, C]; convolution kernels are [Cout, Kh, Kw, Cin]. All
functions are pure and never mutate their inputs.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, NumericError

Tensor = np.ndarray


def as_tensor(data, shape=None) -> Tensor:
    """Convert external data to a validated float64 tensor.

    Rejects empty extents and non-finite values; use for anything that
    crosses the package boundary (files, user input).
    """
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if shape is not None:
        try:
            arr = arr.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot view {arr.size} values as shape {tuple(shape)}") from exc
    if arr.size == 0:
        raise DimensionError(f"tensor extents must all be >= 1, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError("tensor contains NaN or infinite values")
    return arr


def matvec(weights: Tensor, x: Tensor) -> Tensor:
    """Matrix-vector product weights[Nout, Nin] @ x[Nin]."""
    if weights.ndim != 2 or x.ndim != 1 or weights.shape[1] != x.shape[0]:
        raise DimensionError(
            f"matvec shapes incompatible: weights {weights.shape}, x {x.shape}"
        )
    return weights @ x


def _axis_geometry(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (out_size, pad_lo, pad_hi) for one spatial axis."""
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if padding == "valid":
        if k > size:
            raise DimensionError(f"kernel extent {k} exceeds input extent {size}")
        return (size - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        lo = total // 2  # odd totals put the extra pad on the bottom/right
        return out, lo, total - lo
    raise DomainError(f"unknown padding mode {padding!r}")


def conv_output_shape(in_spatial, kernel_spatial, strides, padding) -> tuple[int, int]:
    h, _, _ = _axis_geometry(in_spatial[0], kernel_spatial[0], strides[0], padding)
    w, _, _ = _axis_geometry(in_spatial[1], kernel_spatial[1], strides[1], padding)
    return h, w


def conv_windows(x: Tensor, kernel_spatial, strides, padding) -> Tensor:
    """Extract strided convolution windows: [H', W', Kh, Kw, Cin].

    The same window layout serves pooling (per-channel windows with
    Cin = C) and the window-wise relevance rules.
    """
    if x.ndim != 3:
        raise DimensionError(f"expected [H, W, C] input, got shape {x.shape}")
    kh, kw = kernel_spatial
    _, pt, pb = _axis_geometry(x.shape[0], kh, strides[0], padding)
    _, pl, pr = _axis_geometry(x.shape[1], kw, strides[1], padding)
    xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))  # [Hv, Wv, C, Kh, Kw]
    win = win[:: strides[0], :: strides[1]]
    return np.ascontiguousarray(np.moveaxis(win, 2, 4))  # [H', W', Kh, Kw, C]


def scatter_windows(contrib: Tensor, out_spatial, strides, padding) -> Tensor:
    """Adjoint of conv_windows: sum per-window values back onto the input grid.

    contrib is [H', W', Kh, Kw, C]; returns [H, W, C]. Contributions that
    fall on padding are discarded.
    """
    hh, ww, kh, kw, c = contrib.shape
    h, w = out_spatial
    _, pt, _ = _axis_geometry(h, kh, strides[0], padding)
    _, pl, _ = _axis_geometry(w, kw, strides[1], padding)
    hp = max(h + pt, (hh - 1) * strides[0] + kh)
    wp = max(w + pl, (ww - 1) * strides[1] + kw)
    acc = np.zeros((hp, wp, c))
    for p1 in range(kh):
        for p2 in range(kw):
            acc[p1 : p1 + strides[0] * hh : strides[0],
                p2 : p2 + strides[1] * ww : strides[1]] += contrib[:, :, p1, p2, :]
    return acc[pt : pt + h, pl : pl + w]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None,
           strides=(1, 1), padding: str = "valid") -> Tensor:
    """2-D cross-correlation of x[H, W, Cin] with kernel[Cout, Kh, Kw, Cin].

    out[j1, j2, co] = bias[co] + sum over the (Kh, Kw, Cin) window at
    (j1*s1, j2*s2) of kernel * input.
    """
    if kernel.ndim != 4:
        raise DimensionError(f"expected [Cout, Kh, Kw, Cin] kernel, got shape {kernel.shape}")
    if x.ndim != 3 or x.shape[2] != kernel.shape[3]:
        raise DimensionError(
            f"conv2d input {x.shape} incompatible with kernel {kernel.shape}"
        )
    win = conv_windows(x, kernel.shape[1:3], strides, padding)
    out = np.einsum("hwijc,oijc->hwo", win, kernel)
    if bias is not None:
        if bias.shape != (kernel.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} does not match Cout {kernel.shape[0]}")
        out = out + bias
    return out


def conv2d_transpose(grad_like: Tensor, kernel: Tensor, strides=(1, 1),
                     padding: str = "valid", out_spatial=None) -> Tensor:
    """Exact linear adjoint of bias-free conv2d.

    grad_like is output-shaped [H', W', Cout]; the result is input-shaped
    [H, W, Cin]. out_spatial pins (H, W) when strides make the forward
    geometry ambiguous; defaults to the smallest valid input.
    """
    if kernel.ndim != 4 or grad_like.ndim != 3 or grad_like.shape[2] != kernel.shape[0]:
        raise DimensionError(
            f"conv2d_transpose shapes incompatible: grad {grad_like.shape}, kernel {kernel.shape}"
        )
    hh, ww, _ = grad_like.shape
    kh, kw = kernel.shape[1:3]
    if out_spatial is None:
        if padding == "valid":
            out_spatial = ((hh - 1) * strides[0] + kh, (ww - 1) * strides[1] + kw)
        else:
            out_spatial = (hh * strides[0], ww * strides[1])
    expected = conv_output_shape(out_spatial, (kh, kw), strides, padding)
    if expected != (hh, ww):
        raise DimensionError(
            f"grad shape {grad_like.shape[:2]} inconsistent with input {tuple(out_spatial)} "
            f"under kernel {(kh, kw)}, strides {tuple(strides)}, padding {padding!r}"
        )
    contrib = np.einsum("hwo,oijc->hwijc", grad_like, kernel)
    return scatter_windows(contrib, out_spatial, strides, padding)


def window_counts(in_spatial, kernel_spatial, strides, padding) -> Tensor:
    """Number of forward windows covering each input position, shape [H, W]."""
    hh, ww = conv_output_shape(in_spatial, kernel_spatial, strides, padding)
    ones_g = np.ones((hh, ww, 1))
    ones_k = np.ones((1, kernel_spatial[0], kernel_spatial[1], 1))
    return conv2d_transpose(ones_g, ones_k, strides, padding, out_spatial=in_spatial)[:, :, 0]


def top_fraction_indices(values: Tensor, fraction: float, ordering: str = "signed") -> np.ndarray:
    """Flat indices of the ceil(fraction*N) largest entries, ascending order.

    ordering 'signed' ranks by value, 'absolute' by magnitude. Ties are
    broken by ascending flat index so selections are reproducible and
    nested across fractions.
    """
    flat = np.asarray(values).ravel(order="C")
    if flat.size == 0:
        raise DomainError("cannot select from an empty tensor")
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"fraction must be in (0, 1], got {fraction}")
    if ordering == "signed":
        key = flat
    elif ordering == "absolute":
        key = np.abs(flat)
    else:
        raise DomainError(f"unknown ordering {ordering!r}")
    count = math.ceil(fraction * flat.size)
    order = np.argsort(-key, kind="stable")  # stable keeps lower indices first on ties
    return np.sort(order[:count])
