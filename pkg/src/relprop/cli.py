"""Command-line front end.

Subcommands: explain (contribution map + masks for one image), eval
(masked-accuracy curves), pointing / distance (mask-quality metrics),
cross (two-network comparison), verify (self-checks on fixture models).
Exit codes: 0 success, 1 usage, 2 I/O or file format, 3 numeric/engine.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dag_oracle as oracle
from . import engine as eng
from . import harness
from . import model_graph as mg
from . import model_io as io
from .errors import EngineError, GuardedDenominatorError, ModelFormatError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_ENGINE = 3

METHOD_CHOICES = ("lrp0", "lrp-eps", "lrp-gamma", "lrp-ab", "rlrp")
MODE_CHOICES = ("input-signed", "input-abs", "pixel-signed", "pixel-abs")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _method_config(name: str, args) -> eng.MethodConfig:
    if name == "lrp0":
        return eng.MethodConfig("lrp0")
    if name == "lrp-eps":
        return eng.MethodConfig("lrp_epsilon", epsilon=args.eps)
    if name == "lrp-gamma":
        return eng.MethodConfig("lrp_gamma", gamma=args.gamma)
    if name == "lrp-ab":
        return eng.MethodConfig("lrp_alpha_beta", alpha=args.alpha, beta=args.beta)
    return eng.MethodConfig("rlrp")


def _parse_percentages(text: str | None):
    if text is None:
        return None
    return tuple(float(p) for p in text.split(","))


def _mode(args) -> str:
    return args.mode.replace("-", "_")


def _pct_tag(p: float) -> str:
    return f"{p:g}".replace(".", "_")


def _log_skips(result) -> None:
    for index, reason in result.skips:
        print(f"skipped image {index}: {reason}", file=sys.stderr)


def cmd_explain(args) -> int:
    net = io.load_model(args.model, args.blob)
    raw = io.load_image(args.image)
    x = mg.prepare_input(net, raw)
    logits, trace = mg.forward(net, x)
    k = args.cls if args.cls is not None else int(np.argmax(logits))
    cfg = _method_config(args.method, args)
    cmap = eng.attribute(net, trace, k, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "contributions.bin").write_bytes(
        np.ascontiguousarray(cmap.values, dtype="<f8").tobytes()
    )
    meta = {
        "shape": list(cmap.values.shape),
        "selected_output": cmap.selected_output,
        "method": cfg.label(),
        "seed_value": cmap.seed_value,
        "per_layer_sums": [[i, s] for i, s in cmap.per_layer_sums],
        "diagnostics": cmap.diagnostics,
    }
    (out / "contributions.json").write_text(json.dumps(meta, indent=2) + "\n")
    mode = _mode(args)
    percentages = _parse_percentages(args.percentages) or harness.DEFAULT_PERCENTAGES
    for p in percentages:
        mask = harness.make_mask(cmap, p, mode)
        if mask.ndim == 2:
            io.save_mask(mask, out / f"mask_p{_pct_tag(p)}.pgm")
        else:
            for c in range(mask.shape[2]):
                io.save_mask(mask[:, :, c], out / f"mask_p{_pct_tag(p)}_c{c}.pgm")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = io.load_model(args.model, args.blob)
    dataset = harness.load_dataset(args.dataset)
    percentages = _parse_percentages(args.percentages)
    mode = _mode(args)
    rows = []
    for name in args.method:
        result = harness.accuracy_curve(net, dataset, _method_config(name, args),
                                        mode, percentages, workers=args.workers)
        _log_skips(result)
        rows.extend(result.rows)
    if args.random_baseline:
        result = harness.random_mask_curve(net, dataset, mode, percentages,
                                           seed=args.seed, workers=args.workers)
        _log_skips(result)
        rows.extend(result.rows)
    harness.write_csv(rows, args.out)
    return EXIT_OK


def _cmd_quality(args, metric: str) -> int:
    net = io.load_model(args.model, args.blob)
    dataset = harness.load_dataset(args.dataset)
    percentages = _parse_percentages(args.percentages)
    rows = []
    for name in args.method:
        result = harness.quality_curve(net, dataset, _method_config(name, args),
                                       _mode(args), metric, percentages,
                                       workers=args.workers)
        _log_skips(result)
        rows.extend(result.rows)
    harness.write_csv(rows, args.out)
    return EXIT_OK


def cmd_cross(args) -> int:
    net_a = io.load_model(args.model_a, args.blob_a)
    net_b = io.load_model(args.model_b, args.blob_b)
    dataset = harness.load_dataset(args.dataset)
    result = harness.cross_compare(net_a, net_b, dataset, eng.MethodConfig("rlrp"),
                                   _mode(args), _parse_percentages(args.percentages),
                                   workers=args.workers)
    _log_skips(result)
    harness.write_csv(result.rows, args.out)
    return EXIT_OK


# --- verify ----------------------------------------------------------------


def _verify_input(net: mg.Network, name: str) -> np.ndarray:
    if "degenerate" in name:
        return np.full(net.input_shape, 0.5)
    rng = np.random.default_rng(0)
    return rng.uniform(0.1, 0.9, net.input_shape)


def _has_residual(net) -> bool:
    return any(isinstance(l, mg.ResidualBlock) for l in net.layers)


def _zero_bias(net) -> bool:
    for layer in net.layers:
        if isinstance(layer, (mg.Dense, mg.Conv2D)) and layer.bias is not None \
                and np.any(layer.bias != 0.0):
            return False
    return True


def _verify_model(path: Path, report) -> None:
    name = path.stem
    net = io.load_model(path, path.with_suffix(".bin"))
    x = _verify_input(net, name)
    logits, trace = mg.forward(net, x)
    k = int(np.argmax(logits))

    if "degenerate" in name:
        try:
            eng.attribute(net, trace, k, eng.MethodConfig("lrp0"))
            report(f"lrp0_guard:{name}", False, "expected a guarded-denominator error")
        except GuardedDenominatorError:
            report(f"lrp0_guard:{name}", True)
        cmap = eng.attribute(net, trace, k, eng.MethodConfig("rlrp"))
        report(f"rlrp_finite:{name}", bool(np.isfinite(cmap.values).all()))
        return

    cmap = eng.attribute(net, trace, k, eng.MethodConfig("rlrp"))
    report(f"rlrp_finite:{name}", bool(np.isfinite(cmap.values).all()))

    if _has_residual(net):
        bad = [d for d in cmap.diagnostics
               if not d["degenerate"]
               and abs(d["sum_in_scaled"] - d["sum_out"]) > 1e-9 * max(1.0, abs(d["sum_out"]))]
        report(f"residual_path_sums:{name}", not bad)
        return

    g = oracle.explode(net, trace)
    acts = oracle.bind_activations(net, trace)
    ref = oracle.oracle_attribute(g, acts, k, "rlrp").reshape(net.input_shape)
    scale = max(np.max(np.abs(ref)), 1e-30)
    report(f"oracle_rlrp:{name}", bool(np.max(np.abs(ref - cmap.values)) <= 1e-8 * scale))

    try:
        got = eng.attribute(net, trace, k, eng.MethodConfig("lrp0"))
        ref0 = oracle.oracle_attribute(g, acts, k, "lrp0").reshape(net.input_shape)
        scale0 = max(np.max(np.abs(ref0)), 1e-30)
        report(f"oracle_lrp0:{name}", bool(np.max(np.abs(ref0 - got.values)) <= 1e-8 * scale0))
        if _zero_bias(net):
            seed = got.seed_value
            ok = all(abs(s - seed) <= 1e-6 * max(1.0, abs(seed)) for _, s in got.per_layer_sums)
            report(f"conservation_lrp0:{name}", ok)
    except GuardedDenominatorError:
        pass  # degenerate denominators on this input; nothing to compare


def _verify_distance_transform(report) -> None:
    rng = np.random.default_rng(7)
    mask = rng.random((9, 9)) < 0.2
    mask[4, 4] = True
    got = harness.distance_transform(mask)
    obj = np.argwhere(mask)
    rows, cols = np.indices(mask.shape)
    brute = np.sqrt(np.min(
        (rows[:, :, None] - obj[:, 0]) ** 2 + (cols[:, :, None] - obj[:, 1]) ** 2, axis=2
    ).astype(np.float64))
    report("distance_transform", bool(np.array_equal(got, brute)))


def cmd_verify(args) -> int:
    fixtures = Path(args.fixtures)
    manifests = sorted(fixtures.glob("*.json"))
    if not manifests:
        print(f"no fixture manifests found under {fixtures}", file=sys.stderr)
        return EXIT_IO
    failures = []

    def report(check: str, ok: bool, detail: str = ""):
        print(f"{'PASS' if ok else 'FAIL'} {check}" + (f": {detail}" if detail and not ok else ""))
        if not ok:
            failures.append(check)

    for path in manifests:
        _verify_model(path, report)
    _verify_distance_transform(report)
    if failures:
        print(f"{len(failures)} check(s) failed", file=sys.stderr)
        return EXIT_ENGINE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relprop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, model=True):
        if model:
            p.add_argument("--model", required=True, help="model manifest path")
            p.add_argument("--blob", required=True, help="weight blob path")
        p.add_argument("--method", action="append", choices=METHOD_CHOICES,
                       help="attribution method (repeatable)")
        p.add_argument("--eps", type=float, default=0.01)
        p.add_argument("--gamma", type=float, default=0.25)
        p.add_argument("--alpha", type=float, default=2.0)
        p.add_argument("--beta", type=float, default=-1.0)
        p.add_argument("--mode", choices=MODE_CHOICES, default="pixel-abs")
        p.add_argument("--percentages", help="comma-separated percentage list")
        p.add_argument("--out", required=True)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("explain", help="write a contribution map and top-p%% masks")
    add_common(p)
    p.add_argument("--image", required=True, help="input image (PPM)")
    p.add_argument("--class", dest="cls", type=int, default=None,
                   help="output class (defaults to the predicted class)")
    p.set_defaults(func=cmd_explain, single_method=True)

    p = sub.add_parser("eval", help="masked re-classification accuracy curves")
    add_common(p)
    p.add_argument("--dataset", required=True, help="dataset manifest (JSON)")
    p.add_argument("--random-baseline", action="store_true",
                   help="also evaluate seeded random masks of equal size")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pointing", help="proportion of selected pixels inside object masks")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=lambda a: _cmd_quality(a, "in_mask"))

    p = sub.add_parser("distance", help="normalized mean distance to object masks")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=lambda a: _cmd_quality(a, "mean_distance"))

    p = sub.add_parser("cross", help="mask with one network, re-classify with another")
    p.add_argument("--model-a", required=True)
    p.add_argument("--blob-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--blob-b", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=MODE_CHOICES, default="pixel-abs")
    p.add_argument("--percentages")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cross)

    p = sub.add_parser("verify", help="run oracle-equivalence and conservation checks")
    p.add_argument("--fixtures", required=True, help="directory of fixture model files")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "method", None) is None and hasattr(args, "method"):
            args.method = ["rlrp"]
        if getattr(args, "single_method", False):
            args.method = args.method[-1]
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (OSError, json.JSONDecodeError, ModelFormatError) as exc:
        print(f"relprop: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except EngineError as exc:
        print(f"relprop: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ENGINE


if __name__ == "__main__":
    sys.exit(main())
