"""Masked-accuracy evaluation protocol and mask-quality metrics.

Given a model and a dataset manifest, the harness builds top-p% masks from
contribution maps, re-classifies the masked images, and aggregates
accuracy, pointing-game, and distance-to-mask statistics into CSV rows.
Per-image work items are independent and may fan out across processes;
aggregation always runs in image order so results are reproducible.
"""

import json
import math
from dataclasses import dataclass
from functools import partial
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import engine as eng
from . import model_graph as mg
from . import model_io as io
from . import tensor_core as tc
from .errors import DimensionError, DomainError, EngineError

DEFAULT_PERCENTAGES = (1, 5, 10, 15, 20, 25, 40, 50, 60, 75, 80, 85, 90, 95, 99)
MASK_MODES = ("input_signed", "input_abs", "pixel_signed", "pixel_abs")


@dataclass(frozen=True)
class DatasetRecord:
    image: str
    mask: str | None = None
    label: int | None = None


@dataclass(frozen=True)
class Dataset:
    records: tuple
    percentages: tuple = DEFAULT_PERCENTAGES


@dataclass(frozen=True)
class EvalRow:
    method: str
    mode: str
    percentage: float | None
    metric: str
    value: float
    n_images: int
    n_skipped: int


@dataclass
class CurveResult:
    rows: list
    skips: list  # (image index, reason)


def load_dataset(path) -> Dataset:
    """Read a dataset manifest (JSON) and resolve paths against its directory."""
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent
    records = []
    for rec in doc.get("records", []):
        records.append(DatasetRecord(
            image=str(base / rec["image"]),
            mask=str(base / rec["mask"]) if rec.get("mask") else None,
            label=rec.get("label"),
        ))
    percentages = tuple(float(p) for p in doc.get("percentages", DEFAULT_PERCENTAGES))
    _check_percentages(percentages, allow_hundred=False)
    return Dataset(tuple(records), percentages)


def _check_percentages(percentages, allow_hundred=True):
    if not percentages:
        raise DomainError("percentage list is empty")
    top = 100.0 if allow_hundred else 100.0 - 1e-12
    for p in percentages:
        if not 0.0 < p <= top:
            raise DomainError(f"percentage {p} outside the allowed range")
    if any(b <= a for a, b in zip(percentages, percentages[1:])):
        raise DomainError("percentages must be strictly increasing")


def make_mask(map_or_values, percent: float, mode: str) -> np.ndarray:
    """Binary mask of the top percent of inputs or pixels of a contribution map.

    Input modes rank every entry; pixel modes first sum channels, with the
    'abs' variants ranking magnitudes (of the channel sum, for pixels).
    """
    values = getattr(map_or_values, "values", map_or_values)
    if not 0.0 < percent <= 100.0:
        raise DomainError(f"percent must be in (0, 100], got {percent}")
    if mode not in MASK_MODES:
        raise DomainError(f"unknown mask mode {mode!r}")
    if mode.startswith("pixel"):
        if values.ndim != 3:
            raise DomainError(f"pixel modes need an image-shaped map, got shape {values.shape}")
        values = values.sum(axis=2)
    ordering = "absolute" if mode.endswith("_abs") else "signed"
    idx = tc.top_fraction_indices(values, percent / 100.0, ordering)
    mask = np.zeros(values.size, dtype=bool)
    mask[idx] = True
    return mask.reshape(values.shape)


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the unselected entries; a pixel mask broadcasts across channels."""
    if mask.ndim == image.ndim:
        if mask.shape != image.shape:
            raise DimensionError(f"mask shape {mask.shape} != image shape {image.shape}")
        full = mask
    elif mask.ndim == 2 and image.ndim == 3 and mask.shape == image.shape[:2]:
        full = mask[:, :, None]
    else:
        raise DimensionError(f"mask shape {mask.shape} incompatible with image {image.shape}")
    return np.where(full, image, 0.0)


# --- exact Euclidean distance transform ----------------------------------


def _edt_parabolas(f: np.ndarray) -> np.ndarray:
    """1-D squared distance transform: min_q (i-q)^2 + f[q], lower envelope."""
    n = f.shape[0]
    out = np.empty(n)
    v = np.zeros(n, dtype=np.int64)     # parabola vertices
    z = np.empty(n + 1)                 # envelope boundaries
    k = -1
    for q in range(n):
        if f[q] == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        out[:] = np.inf
        return out
    k = 0
    for i in range(n):
        while z[k + 1] < i:
            k += 1
        out[i] = (i - v[k]) ** 2 + f[v[k]]
    return out


def distance_transform(object_mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance to the nearest object pixel (0 inside).

    Two passes: per-column scans give vertical distances, then per-row
    lower envelopes of parabolas complete the exact squared transform.
    """
    if object_mask.ndim != 2:
        raise DimensionError(f"expected [H, W] mask, got shape {object_mask.shape}")
    if not object_mask.any():
        raise DomainError("object mask is empty")
    h, w = object_mask.shape
    d = np.where(object_mask, 0.0, np.inf)
    for r in range(1, h):
        d[r] = np.minimum(d[r], d[r - 1] + 1.0)
    for r in range(h - 2, -1, -1):
        d[r] = np.minimum(d[r], d[r + 1] + 1.0)
    g = d * d
    sq = np.empty_like(g)
    for r in range(h):
        sq[r] = _edt_parabolas(g[r])
    return np.sqrt(sq)


def pointing_game(mask_pred: np.ndarray, mask_object: np.ndarray) -> float:
    """Proportion of selected entries lying inside the object mask."""
    obj = mask_object
    if mask_pred.ndim == 3 and mask_object.ndim == 2:
        obj = np.broadcast_to(mask_object[:, :, None], mask_pred.shape)
    if mask_pred.shape != obj.shape:
        raise DimensionError(f"mask shapes differ: {mask_pred.shape} vs {mask_object.shape}")
    selected = int(mask_pred.sum())
    if selected == 0:
        raise DomainError("empty selection")
    return float(np.logical_and(mask_pred, obj).sum() / selected)


def avg_distance(mask_pred: np.ndarray, mask_object: np.ndarray) -> float:
    """Mean distance of selected pixels to the object, over the image diagonal."""
    dist = distance_transform(mask_object)
    if mask_pred.ndim == 3:
        dist = np.broadcast_to(dist[:, :, None], mask_pred.shape)
    if mask_pred.shape != dist.shape:
        raise DimensionError(f"mask shapes differ: {mask_pred.shape} vs {mask_object.shape}")
    if not mask_pred.any():
        raise DomainError("empty selection")
    diagonal = math.hypot(*mask_object.shape)
    return float(dist[mask_pred].mean() / diagonal)


# --- per-image evaluation drivers ----------------------------------------


def _run_images(worker, n: int, workers: int) -> list:
    if workers <= 1:
        return [worker(i) for i in range(n)]
    with get_context("fork").Pool(workers) as pool:
        return pool.map(worker, range(n))


def _accuracy_item(net, dataset, cfg, mode, percentages, index):
    rec = dataset.records[index]
    try:
        raw = io.load_image(rec.image)
        x = mg.prepare_input(net, raw)
        logits, trace = mg.forward(net, x)
        k = int(np.argmax(logits))
        cmap = eng.attribute(net, trace, k, cfg)
        hits = []
        for p in percentages:
            masked = apply_mask(raw, make_mask(cmap, p, mode))
            k2 = mg.predict_class(net, mg.prepare_input(net, masked))
            hits.append(k2 == k)
        return index, hits, None
    except EngineError as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def _random_item(net, dataset, mode, percentages, seed, index):
    rec = dataset.records[index]
    try:
        raw = io.load_image(rec.image)
        k = mg.predict_class(net, mg.prepare_input(net, raw))
        size = raw.shape[0] * raw.shape[1] if mode.startswith("pixel") else raw.size
        rng = np.random.default_rng([seed, index])
        order = rng.permutation(size)
        hits = []
        for p in percentages:
            count = math.ceil(p / 100.0 * size)
            mask = np.zeros(size, dtype=bool)
            mask[order[:count]] = True
            mask = mask.reshape(raw.shape[:2] if mode.startswith("pixel") else raw.shape)
            masked = apply_mask(raw, mask)
            k2 = mg.predict_class(net, mg.prepare_input(net, masked))
            hits.append(k2 == k)
        return index, hits, None
    except EngineError as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def _quality_item(net, dataset, cfg, mode, percentages, metric, index):
    rec = dataset.records[index]
    if rec.mask is None:
        return index, None, "no object mask"
    try:
        raw = io.load_image(rec.image)
        obj = io.load_mask(rec.mask)
        if obj.shape != raw.shape[:2]:
            raise DimensionError(f"object mask {obj.shape} != image {raw.shape[:2]}")
        x = mg.prepare_input(net, raw)
        logits, trace = mg.forward(net, x)
        cmap = eng.attribute(net, trace, int(np.argmax(logits)), cfg)
        scores = []
        for p in percentages:
            pred = make_mask(cmap, p, mode)
            if metric == "in_mask":
                scores.append(pointing_game(pred, obj))
            else:
                scores.append(avg_distance(pred, obj))
        return index, scores, None
    except EngineError as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def _cross_item(net_a, net_b, dataset, cfg, mode, percentages, index):
    rec = dataset.records[index]
    try:
        raw = io.load_image(rec.image)
        xa = mg.prepare_input(net_a, raw)
        logits_a, trace_a = mg.forward(net_a, xa)
        ka = int(np.argmax(logits_a))
        cmap = eng.attribute(net_a, trace_a, ka, cfg)
        kb = mg.predict_class(net_b, mg.prepare_input(net_b, raw))
        hits = []
        for p in percentages:
            masked = apply_mask(raw, make_mask(cmap, p, mode))
            k2 = mg.predict_class(net_b, mg.prepare_input(net_b, masked))
            hits.append(k2 == kb)
        return index, (hits, ka == kb), None
    except EngineError as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def _collect(results, percentages, method, mode, metric):
    ok = [r for r in results if r[1] is not None]
    skips = [(r[0], r[2]) for r in results if r[1] is None]
    rows = []
    for pi, p in enumerate(percentages):
        vals = [r[1][pi] for r in ok]  # index order, so float sums are reproducible
        value = float(np.mean(vals)) if vals else 0.0
        rows.append(EvalRow(method, mode, float(p), metric, value, len(ok), len(skips)))
    return CurveResult(rows, skips)


def accuracy_curve(net: mg.Network, dataset: Dataset, cfg: eng.MethodConfig,
                   mode: str, percentages=None, workers: int = 1) -> CurveResult:
    """Masked re-classification accuracy against each image's own prediction."""
    if not dataset.records:
        raise DomainError("dataset is empty")
    percentages = tuple(percentages) if percentages is not None else dataset.percentages
    _check_percentages(percentages)
    worker = partial(_accuracy_item, net, dataset, cfg, mode, percentages)
    results = _run_images(worker, len(dataset.records), workers)
    return _collect(results, percentages, cfg.label(), mode, "accuracy")


def random_mask_curve(net: mg.Network, dataset: Dataset, mode: str,
                      percentages=None, seed: int = 0, workers: int = 1) -> CurveResult:
    """Accuracy baseline with seeded random masks of the same sizes."""
    if not dataset.records:
        raise DomainError("dataset is empty")
    percentages = tuple(percentages) if percentages is not None else dataset.percentages
    _check_percentages(percentages)
    worker = partial(_random_item, net, dataset, mode, percentages, seed)
    results = _run_images(worker, len(dataset.records), workers)
    return _collect(results, percentages, "random", mode, "accuracy")


def quality_curve(net: mg.Network, dataset: Dataset, cfg: eng.MethodConfig, mode: str,
                  metric: str, percentages=None, workers: int = 1) -> CurveResult:
    """Pointing-game proportions ('in_mask') or normalized mean distances."""
    if metric not in ("in_mask", "mean_distance"):
        raise DomainError(f"unknown quality metric {metric!r}")
    if not dataset.records:
        raise DomainError("dataset is empty")
    percentages = tuple(percentages) if percentages is not None else dataset.percentages
    _check_percentages(percentages)
    worker = partial(_quality_item, net, dataset, cfg, mode, percentages, metric)
    results = _run_images(worker, len(dataset.records), workers)
    return _collect(results, percentages, cfg.label(), mode, metric)


def cross_compare(net_a: mg.Network, net_b: mg.Network, dataset: Dataset,
                  cfg: eng.MethodConfig, mode: str, percentages=None,
                  workers: int = 1) -> CurveResult:
    """Mask with net_a's maps, re-classify with net_b against net_b's predictions.

    Also reports how many images the two networks assign the same class
    unmasked (metric 'agreement', as a count).
    """
    if tuple(net_a.input_shape) != tuple(net_b.input_shape):
        raise DimensionError("networks disagree on input shape")
    if not dataset.records:
        raise DomainError("dataset is empty")
    percentages = tuple(percentages) if percentages is not None else dataset.percentages
    _check_percentages(percentages)
    worker = partial(_cross_item, net_a, net_b, dataset, cfg, mode, percentages)
    results = _run_images(worker, len(dataset.records), workers)
    ok = [r for r in results if r[1] is not None]
    skips = [(r[0], r[2]) for r in results if r[1] is None]
    rows = []
    for pi, p in enumerate(percentages):
        vals = [r[1][0][pi] for r in ok]
        rows.append(EvalRow(cfg.label(), mode, float(p), "accuracy",
                            float(np.mean(vals)) if vals else 0.0, len(ok), len(skips)))
    agreement = sum(1 for r in ok if r[1][1])
    rows.append(EvalRow(cfg.label(), mode, None, "agreement",
                        float(agreement), len(ok), len(skips)))
    return CurveResult(rows, skips)


# --- CSV report -----------------------------------------------------------

CSV_HEADER = ("method", "mode", "percentage", "metric", "value", "n_images", "n_skipped")


def format_csv(rows) -> str:
    """Deterministic CSV text for a list of EvalRows."""
    ordered = sorted(rows, key=lambda r: (r.method, r.mode, r.metric,
                                          r.percentage if r.percentage is not None else -1.0))
    lines = [",".join(CSV_HEADER)]
    for r in ordered:
        pct = "" if r.percentage is None else f"{r.percentage:g}"
        lines.append(
            f"{r.method},{r.mode},{pct},{r.metric},{r.value!r},{r.n_images},{r.n_skipped}"
        )
    return "\n".join(lines) + "\n"


def write_csv(rows, path) -> None:
    Path(path).write_text(format_csv(rows))
