"""Literal edge-level relevance propagation for verifying the engine.

Networks are exploded into explicit weighted edges between per-neuron
vertices, and contributions are propagated edge by edge with no
vectorization. Deliberately slow; only for small fixture networks.

Conventions shared with the engine: dense edges use the 1/fan-in factor,
convolution and pooling edges use the fixed 1/(spatial kernel size)
factor, and pooling layers are modelled as channel-diagonal convolutions
(zero-weight edges across channels) so edge counts match the conv case.
"""

import graphlib
from dataclasses import dataclass

import numpy as np

from . import model_graph as mg
from . import tensor_core as tc
from .errors import DomainError, GraphSizeError, GuardedDenominatorError

SCALE_IN_DEGREE = "indegree"
SCALE_FIXED = "fixed"


class EdgeGraph:
    """Layered DAG of neurons. Vertices are (layer, index) pairs.

    Edges may be declared between any vertices; construction rejects
    cycles and orphan vertices. Propagation additionally requires every
    edge to connect consecutive layers.
    """

    def __init__(self, layer_sizes, edges, gap_scales):
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.edges = list(edges)
        self.gap_scales = list(gap_scales)
        if len(self.gap_scales) != len(self.layer_sizes) - 1:
            raise DomainError("need one edge-scale entry per layer gap")
        self._validate()
        self.gap_edges = [[] for _ in range(len(self.layer_sizes) - 1)]
        self._layered = all(v[0] == u[0] + 1 for u, v, _ in self.edges)
        if self._layered:
            for (lu, i), (_, j), w in self.edges:
                self.gap_edges[lu].append((i, j, float(w)))

    def _validate(self):
        for u, v, _ in self.edges:
            for layer, idx in (u, v):
                if not 0 <= layer < len(self.layer_sizes):
                    raise DomainError(f"vertex {(layer, idx)} outside declared layers")
                if not 0 <= idx < self.layer_sizes[layer]:
                    raise DomainError(f"vertex {(layer, idx)} outside layer extent")
        preds: dict = {}
        touched = set()
        for u, v, _ in self.edges:
            preds.setdefault(v, set()).add(u)
            preds.setdefault(u, set())
            touched.add(u)
            touched.add(v)
        try:
            tuple(graphlib.TopologicalSorter(preds).static_order())
        except graphlib.CycleError as exc:
            raise DomainError("edge graph contains a cycle") from exc
        for layer, size in enumerate(self.layer_sizes):
            for idx in range(size):
                if (layer, idx) not in touched:
                    raise DomainError(f"vertex {(layer, idx)} belongs to no edge")


def _flat(shape, *idx) -> int:
    return int(np.ravel_multi_index(idx, shape))


def _conv_edges(in_shape, out_shape, kernel_fn, strides, padding, src_layer):
    """Edges of a (possibly channel-diagonal) convolution, weights via kernel_fn."""
    h, w, cin = in_shape
    hh, ww, cout = out_shape
    kh, kw = kernel_fn.spatial
    _, pt, _ = tc._axis_geometry(h, kh, strides[0], padding)
    _, pl, _ = tc._axis_geometry(w, kw, strides[1], padding)
    edges = []
    for j1 in range(hh):
        for j2 in range(ww):
            for co in range(cout):
                dst = ((src_layer + 1), _flat(out_shape, j1, j2, co))
                for p1 in range(kh):
                    i1 = j1 * strides[0] + p1 - pt
                    if not 0 <= i1 < h:
                        continue
                    for p2 in range(kw):
                        i2 = j2 * strides[1] + p2 - pl
                        if not 0 <= i2 < w:
                            continue
                        for ci in range(cin):
                            weight = kernel_fn(co, p1, p2, ci, j1, j2)
                            edges.append(((src_layer, _flat(in_shape, i1, i2, ci)), dst, weight))
    return edges


class _ConvKernel:
    def __init__(self, kernel):
        self.kernel = kernel
        self.spatial = kernel.shape[1:3]

    def __call__(self, co, p1, p2, ci, j1, j2):
        return float(self.kernel[co, p1, p2, ci])


class _PoolKernel:
    """Channel-diagonal pooling mask; masks may depend on the output position."""

    def __init__(self, pool, masks):
        self.spatial = tuple(pool)
        self.masks = masks  # [H', W', P1, P2, C]

    def __call__(self, co, p1, p2, ci, j1, j2):
        if ci != co:
            return 0.0
        return float(self.masks[j1, j2, p1, p2, ci])


def explode(net: mg.Network, trace: mg.ForwardTrace | None = None,
            vertex_cap: int = 5000) -> EdgeGraph:
    """Expand a small network into its explicit edge graph.

    Max-pool layers need a forward trace to pin their argmax masks.
    Residual blocks are out of the oracle's scope.
    """
    shapes = mg.infer_shapes(net.layers, net.input_shape)
    sizes = [int(np.prod(net.input_shape))]
    linear = []  # (layer, in_shape, out_shape, trace index)
    for i, (layer, (ins, outs)) in enumerate(zip(net.layers, shapes)):
        if isinstance(layer, mg.ResidualBlock):
            raise DomainError("residual blocks are not supported by the edge oracle")
        if isinstance(layer, (mg.Dense, mg.Conv2D, mg.MaxPool2D, mg.AvgPool2D)):
            sizes.append(int(np.prod(outs)))
            linear.append((layer, ins, outs, i))
        # relu and flatten neither add vertices nor edges
    if sum(sizes) > vertex_cap:
        raise GraphSizeError(f"{sum(sizes)} vertices exceed the cap of {vertex_cap}")
    edges = []
    scales = []
    for gap, (layer, ins, outs, ti) in enumerate(linear):
        if isinstance(layer, mg.Dense):
            w = layer.weights
            for j in range(w.shape[0]):
                for i in range(w.shape[1]):
                    edges.append(((gap, i), (gap + 1, j), float(w[j, i])))
            scales.append((SCALE_IN_DEGREE, None))
        elif isinstance(layer, mg.Conv2D):
            edges.extend(_conv_edges(ins, outs, _ConvKernel(layer.kernel),
                                     layer.strides, layer.padding, gap))
            scales.append((SCALE_FIXED, 1.0 / (layer.kernel.shape[1] * layer.kernel.shape[2])))
        else:
            p1, p2 = layer.pool
            hh, ww, c = outs
            if isinstance(layer, mg.AvgPool2D):
                masks = np.full((hh, ww, p1, p2, c), 1.0 / (p1 * p2))
            else:
                if trace is None:
                    raise DomainError("max-pool explosion needs a forward trace")
                win = tc.conv_windows(trace.layers[ti].x_in, layer.pool, layer.strides, "valid")
                masks = (win == win.max(axis=(2, 3), keepdims=True)).astype(np.float64)
            edges.extend(_conv_edges(ins, outs, _PoolKernel(layer.pool, masks),
                                     layer.strides, "valid", gap))
            scales.append((SCALE_FIXED, 1.0 / (p1 * p2)))
    return EdgeGraph(sizes, edges, scales)


def bind_activations(net: mg.Network, trace: mg.ForwardTrace) -> list[np.ndarray]:
    """Flattened per-vertex-layer activations matching explode's layering."""
    acts = []
    for layer, entry in zip(net.layers, trace.layers):
        if isinstance(layer, (mg.Dense, mg.Conv2D, mg.MaxPool2D, mg.AvgPool2D)):
            acts.append(entry.x_in.ravel(order="C"))
    acts.append(np.asarray(trace.logits, dtype=np.float64))
    return acts


def oracle_attribute(g: EdgeGraph, activations, k: int, rule: str = "rlrp",
                     denominator_guard: float = 1e-9) -> np.ndarray:
    """Per-source contributions by literal per-edge propagation."""
    if rule not in ("rlrp", "lrp0"):
        raise DomainError(f"oracle supports rlrp and lrp0, not {rule!r}")
    if not g._layered:
        raise DomainError("oracle propagation requires a layered graph")
    if len(activations) != len(g.layer_sizes):
        raise DomainError("activation list does not match graph layering")
    for act, size in zip(activations, g.layer_sizes):
        if len(act) != size:
            raise DomainError("activation extent does not match layer size")
    z = np.zeros(g.layer_sizes[-1])
    z[k] = activations[-1][k]
    for gap in reversed(range(len(g.layer_sizes) - 1)):
        x = activations[gap]
        edges = g.gap_edges[gap]
        n_next = g.layer_sizes[gap + 1]
        z_new = np.zeros(g.layer_sizes[gap])
        if rule == "rlrp":
            mode, fixed = g.gap_scales[gap]
            in_deg = np.zeros(n_next)
            out_deg = np.zeros(g.layer_sizes[gap])
            for i, j, _ in edges:
                in_deg[j] += 1
                out_deg[i] += 1
            acc = np.zeros(g.layer_sizes[gap])
            for i, j, w in edges:
                scale = fixed if mode == SCALE_FIXED else 1.0 / in_deg[j]
                acc[i] += scale * w * x[i] * z[j]
            z_new = out_deg / n_next * acc
        else:
            denom = np.zeros(n_next)
            for i, j, w in edges:
                denom[j] += w * x[i]
            bad = (z != 0.0) & (np.abs(denom) < denominator_guard)
            if bad.any():
                raise GuardedDenominatorError(
                    f"{int(bad.sum())} denominator(s) below guard", rule="lrp0"
                )
            for i, j, w in edges:
                if z[j] != 0.0:
                    z_new[i] += w * x[i] / denom[j] * z[j]
        z = z_new
    return z
