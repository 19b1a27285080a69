"""Backward relevance propagation through a recorded forward trace.

Implements five backward rules. The four classical rules redistribute the
selected logit proportionally to w*x over per-neuron denominators; the
relative rule multiplies weight * activation * downstream contribution with
fixed per-layer constants and never divides by data-dependent sums, except
for the two path-sum ratios when recombining residual blocks.
"""

from dataclasses import dataclass, field

import numpy as np

from . import model_graph as mg
from . import tensor_core as tc
from .errors import DimensionError, DomainError, GuardedDenominatorError, NumericError

RULES = ("lrp0", "lrp_epsilon", "lrp_gamma", "lrp_alpha_beta", "rlrp")


@dataclass(frozen=True)
class MethodConfig:
    rule: str = "rlrp"
    epsilon: float = 0.01
    gamma: float = 0.25
    alpha: float = 2.0
    beta: float = -1.0
    denominator_guard: float = 1e-9

    def __post_init__(self):
        if self.rule not in RULES:
            raise DomainError(f"unknown rule {self.rule!r}, expected one of {RULES}")
        if self.rule == "lrp_epsilon" and not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if self.rule == "lrp_gamma" and self.gamma < 0:
            raise DomainError(f"gamma must be non-negative, got {self.gamma}")
        if self.denominator_guard < 0:
            raise DomainError("denominator_guard must be non-negative")

    def label(self) -> str:
        if self.rule == "lrp_epsilon":
            return f"lrp_eps{self.epsilon:g}"
        if self.rule == "lrp_gamma":
            return f"lrp_gamma{self.gamma:g}"
        if self.rule == "lrp_alpha_beta":
            return f"lrp_ab{self.alpha:g}_{self.beta:g}"
        return self.rule


@dataclass
class ContributionMap:
    values: np.ndarray
    selected_output: int
    method: MethodConfig
    seed_value: float
    per_layer_sums: list = field(default_factory=list)   # (layer index, sum at layer input)
    diagnostics: list = field(default_factory=list)      # residual path-sum records


def _ratio(z_out, denom, cfg, layer, skip_exact_zero=False):
    """z/denom with the configured small-denominator policy.

    Entries with zero downstream contribution carry no flow and are left
    at 0 regardless of their denominator. With skip_exact_zero, an exactly
    zero denominator means "no terms of this sign exist" and is dropped
    instead of raising (the alpha/beta split case).
    """
    live = z_out != 0.0
    small = np.abs(denom) < cfg.denominator_guard
    if skip_exact_zero:
        bad = live & small & (denom != 0.0)
    else:
        bad = live & small
    if bad.any():
        raise GuardedDenominatorError(
            f"{int(bad.sum())} denominator(s) below guard {cfg.denominator_guard:g}",
            layer=layer, rule=cfg.rule,
        )
    safe = np.where(denom == 0.0, 1.0, denom)
    return np.where(live & (denom != 0.0), z_out / safe, 0.0)


def backward_dense(layer: mg.Dense, x_in, z_out, cfg: MethodConfig, where="dense"):
    w = layer.weights
    if x_in.shape != (w.shape[1],) or z_out.shape != (w.shape[0],):
        raise DimensionError(f"dense backward shapes inconsistent at {where}")
    if cfg.rule == "rlrp":
        return (w.T @ z_out) * x_in / w.shape[1]
    if cfg.rule in ("lrp0", "lrp_gamma"):
        wk = w if cfg.rule == "lrp0" else w + cfg.gamma * np.clip(w, 0.0, None)
        s = _ratio(z_out, wk @ x_in, cfg, where)
        return x_in * (wk.T @ s)
    if cfg.rule == "lrp_epsilon":
        with np.errstate(divide="ignore", invalid="ignore"):
            s = z_out / (cfg.epsilon + w @ x_in)
        return x_in * (w.T @ s)
    # alpha/beta: split w*x by sign; denominators cannot cancel within a sign
    wx = w * x_in[None, :]
    pos = np.clip(wx, 0.0, None)
    neg = np.clip(wx, None, 0.0)
    s_pos = cfg.alpha * _ratio(z_out, pos.sum(axis=1), cfg, where, skip_exact_zero=True)
    s_neg = cfg.beta * _ratio(z_out, neg.sum(axis=1), cfg, where, skip_exact_zero=True)
    return pos.T @ s_pos + neg.T @ s_neg


def _conv_constants(in_spatial, kernel_spatial, strides, padding, out_spatial_count):
    """Per-position constant card(J)/(N_out * P1 * P2), shape [H, W, 1].

    The output-channel factor in card(J) cancels against the one in the
    layer's neuron count, leaving the per-position covering-window count
    over the output grid size.
    """
    counts = tc.window_counts(in_spatial, kernel_spatial, strides, padding)
    denom = out_spatial_count * kernel_spatial[0] * kernel_spatial[1]
    return (counts / denom)[:, :, None]


def backward_conv(layer: mg.Conv2D, x_in, z_out, cfg: MethodConfig, where="conv"):
    k = layer.kernel
    strides, padding = layer.strides, layer.padding
    spatial = x_in.shape[:2]
    if cfg.rule == "rlrp":
        const = _conv_constants(spatial, k.shape[1:3], strides, padding,
                                z_out.shape[0] * z_out.shape[1])
        agg = tc.conv2d_transpose(z_out, k, strides, padding, out_spatial=spatial)
        return const * x_in * agg
    if cfg.rule in ("lrp0", "lrp_gamma"):
        kk = k if cfg.rule == "lrp0" else k + cfg.gamma * np.clip(k, 0.0, None)
        denom = tc.conv2d(x_in, kk, None, strides, padding)
        s = _ratio(z_out, denom, cfg, where)
        return x_in * tc.conv2d_transpose(s, kk, strides, padding, out_spatial=spatial)
    if cfg.rule == "lrp_epsilon":
        denom = cfg.epsilon + tc.conv2d(x_in, k, None, strides, padding)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = z_out / denom
        return x_in * tc.conv2d_transpose(s, k, strides, padding, out_spatial=spatial)
    # alpha/beta via the sign-split identity (w x)^+ = w^+ x^+ + w^- x^-
    kp = np.clip(k, 0.0, None)
    kn = np.clip(k, None, 0.0)
    xp = np.clip(x_in, 0.0, None)
    xn = np.clip(x_in, None, 0.0)
    d_pos = tc.conv2d(xp, kp, None, strides, padding) + tc.conv2d(xn, kn, None, strides, padding)
    d_neg = tc.conv2d(xp, kn, None, strides, padding) + tc.conv2d(xn, kp, None, strides, padding)
    s_pos = cfg.alpha * _ratio(z_out, d_pos, cfg, where, skip_exact_zero=True)
    s_neg = cfg.beta * _ratio(z_out, d_neg, cfg, where, skip_exact_zero=True)
    back = lambda s, kk: tc.conv2d_transpose(s, kk, strides, padding, out_spatial=spatial)
    return (xp * back(s_pos, kp) + xn * back(s_pos, kn)
            + xp * back(s_neg, kn) + xn * back(s_neg, kp))


def _backward_pool(pool, strides, weff, x_in, z_out, cfg: MethodConfig, where):
    """Shared pooling backward; weff is the per-window weight mask [H',W',P1,P2,C]."""
    spatial = x_in.shape[:2]
    if cfg.rule == "rlrp":
        const = _conv_constants(spatial, pool, strides, "valid",
                                z_out.shape[0] * z_out.shape[1])
        contrib = weff * z_out[:, :, None, None, :]
        return const * x_in * tc.scatter_windows(contrib, spatial, strides, "valid")
    windows = tc.conv_windows(x_in, pool, strides, "valid")
    if cfg.rule in ("lrp0", "lrp_gamma"):
        wk = weff if cfg.rule == "lrp0" else weff + cfg.gamma * np.clip(weff, 0.0, None)
        wx = wk * windows
        s = _ratio(z_out, wx.sum(axis=(2, 3)), cfg, where)
        return tc.scatter_windows(wx * s[:, :, None, None, :], spatial, strides, "valid")
    if cfg.rule == "lrp_epsilon":
        wx = weff * windows
        with np.errstate(divide="ignore", invalid="ignore"):
            s = z_out / (cfg.epsilon + wx.sum(axis=(2, 3)))
        return tc.scatter_windows(wx * s[:, :, None, None, :], spatial, strides, "valid")
    wx = weff * windows
    pos = np.clip(wx, 0.0, None)
    neg = np.clip(wx, None, 0.0)
    s_pos = cfg.alpha * _ratio(z_out, pos.sum(axis=(2, 3)), cfg, where, skip_exact_zero=True)
    s_neg = cfg.beta * _ratio(z_out, neg.sum(axis=(2, 3)), cfg, where, skip_exact_zero=True)
    contrib = pos * s_pos[:, :, None, None, :] + neg * s_neg[:, :, None, None, :]
    return tc.scatter_windows(contrib, spatial, strides, "valid")


def backward_maxpool(layer: mg.MaxPool2D, x_in, z_out, cfg: MethodConfig, where="maxpool"):
    windows = tc.conv_windows(x_in, layer.pool, layer.strides, "valid")
    maxima = windows.max(axis=(2, 3), keepdims=True)
    mask = (windows == maxima).astype(np.float64)  # ties keep every attaining position
    return _backward_pool(layer.pool, layer.strides, mask, x_in, z_out, cfg, where)


def backward_avgpool(layer: mg.AvgPool2D, x_in, z_out, cfg: MethodConfig, where="avgpool"):
    hh, ww, c = z_out.shape
    weff = np.full((hh, ww, layer.pool[0], layer.pool[1], c), 1.0 / (layer.pool[0] * layer.pool[1]))
    return _backward_pool(layer.pool, layer.strides, weff, x_in, z_out, cfg, where)


def _backward_chain(layers, traces, z, cfg, where, diagnostics):
    for i in reversed(range(len(layers))):
        z = _backward_layer(layers[i], traces[i], z, cfg, f"{where}[{i}]", diagnostics)
    return z


def backward_residual(block: mg.ResidualBlock, entry: mg.LayerTrace, z_out,
                      cfg: MethodConfig, where="residual", diagnostics=None):
    """Split the block output contribution over the skip and branch paths.

    Under the relative rule each path is propagated independently and then
    rescaled so its input-side sum matches its output-side sum before the
    two are added; a path whose input-side sum collapses toward zero is
    left unscaled and noted in the diagnostics.
    """
    if diagnostics is None:
        diagnostics = []
    if cfg.rule == "rlrp":
        z_branch_end, z_skip_end = z_out, z_out
    else:
        # classical rules treat the add junction as a two-input neuron
        a = entry.branch[-1].x_out if entry.branch else entry.x_in
        s = entry.skip.x_out if entry.skip is not None else entry.x_in
        z_branch_end, z_skip_end = _split_add_junction(a, s, z_out, cfg, where)
    z_branch = _backward_chain(block.branch, entry.branch, z_branch_end, cfg,
                               f"{where}.branch", diagnostics)
    if block.projection is None:
        z_skip = z_skip_end
    else:
        z_skip = backward_conv(block.projection, entry.x_in, z_skip_end, cfg,
                               f"{where}.projection")
    if cfg.rule != "rlrp":
        return z_branch + z_skip
    scaled = []
    for path, z_path, z_end in (("skip", z_skip, z_skip_end), ("branch", z_branch, z_branch_end)):
        s_out = float(z_end.sum())
        s_in = float(z_path.sum())
        degenerate = abs(s_in) < cfg.denominator_guard * max(1.0, abs(s_out))
        factor = 1.0 if degenerate else s_out / s_in
        diagnostics.append({
            "layer": where, "path": path, "sum_out": s_out, "sum_in_raw": s_in,
            "sum_in_scaled": s_in * factor, "degenerate": degenerate,
        })
        scaled.append(factor * z_path)
    return scaled[0] + scaled[1]


def _split_add_junction(a, s, z_out, cfg, where):
    if cfg.rule in ("lrp0", "lrp_gamma"):
        # gamma adds (1+gamma) to both unit weights, which cancels
        ratio = _ratio(z_out, a + s, cfg, where)
        return a * ratio, s * ratio
    if cfg.rule == "lrp_epsilon":
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = z_out / (cfg.epsilon + a + s)
        return a * ratio, s * ratio
    ap, an = np.clip(a, 0.0, None), np.clip(a, None, 0.0)
    sp, sn = np.clip(s, 0.0, None), np.clip(s, None, 0.0)
    r_pos = cfg.alpha * _ratio(z_out, ap + sp, cfg, where, skip_exact_zero=True)
    r_neg = cfg.beta * _ratio(z_out, an + sn, cfg, where, skip_exact_zero=True)
    return ap * r_pos + an * r_neg, sp * r_pos + sn * r_neg


def _backward_layer(layer, entry: mg.LayerTrace, z, cfg, where, diagnostics):
    if isinstance(layer, mg.ReLU):
        out = z
    elif isinstance(layer, mg.Flatten):
        out = z.reshape(entry.x_in.shape)
    elif isinstance(layer, mg.Dense):
        out = backward_dense(layer, entry.x_in, z, cfg, where)
    elif isinstance(layer, mg.Conv2D):
        out = backward_conv(layer, entry.x_in, z, cfg, where)
    elif isinstance(layer, mg.MaxPool2D):
        out = backward_maxpool(layer, entry.x_in, z, cfg, where)
    elif isinstance(layer, mg.AvgPool2D):
        out = backward_avgpool(layer, entry.x_in, z, cfg, where)
    elif isinstance(layer, mg.ResidualBlock):
        out = backward_residual(layer, entry, z, cfg, where, diagnostics)
    else:
        raise DomainError(f"unknown layer kind {type(layer).__name__}")
    if not np.isfinite(out).all():
        raise NumericError("non-finite contribution", layer=where, rule=cfg.rule)
    return out


def attribute(net: mg.Network, trace: mg.ForwardTrace, k: int, cfg: MethodConfig,
              seed_value: float | None = None) -> ContributionMap:
    """Propagate the selected logit back to an input-shaped contribution map.

    The downstream contribution at output k is seeded with the logit
    itself (or an explicit seed_value), then each layer's backward rule
    runs from the last layer to the input. ReLU and flatten pass
    contributions through positionally unchanged.
    """
    if not 0 <= k < net.num_outputs:
        raise DomainError(f"class index {k} outside [0, {net.num_outputs})")
    if len(trace.layers) != len(net.layers):
        raise DimensionError("trace does not match network layer count")
    seed = float(trace.logits[k]) if seed_value is None else float(seed_value)
    z = np.zeros(net.num_outputs)
    z[k] = seed
    sums = []
    diagnostics: list = []
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        z = _backward_layer(layer, trace.layers[i], z, cfg,
                            f"{i}:{type(layer).__name__}", diagnostics)
        sums.append((i, float(z.sum())))
    sums.reverse()
    if z.shape != tuple(net.input_shape):
        raise DimensionError(f"backward produced shape {z.shape}, expected {net.input_shape}")
    return ContributionMap(z, k, cfg, seed, sums, diagnostics)


def pixel_contributions(cmap: ContributionMap) -> np.ndarray:
    """Per-pixel contribution: channel sum of an image-shaped map, [H, W]."""
    if cmap.values.ndim != 3:
        raise DomainError(
            f"pixel contributions need an image-shaped map, got shape {cmap.values.shape}"
        )
    return cmap.values.sum(axis=2)
