"""``hiernav`` command line: hierarchy prep, data, training, calibration, evaluation."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys

import numpy as np

from . import data as data_mod
from .bench import BenchConfig, run_bench
from .evaluation import (
    format_confusion,
    format_outcomes,
    format_sweep,
    granularity_auroc,
    hierarchical_outcomes,
    pool_ground_truth,
    tnr_sweep,
)
from .exceptions import HierNavError
from .hierarchy import (
    GRANULARITIES,
    entropy_prune,
    format_hierarchy,
    holdout_split,
    parse_hierarchy,
    prune_single_child,
)
from .inference import (
    calibrate_from_probabilities,
    format_threshold_table,
    infer_from_probabilities,
    parse_threshold_table,
)
from .model import (
    flat_forward,
    forward,
    init_params,
    load_model,
    node_path_probabilities,
    save_model,
)
from .scoring import HIERARCHICAL_METRICS, format_scores, msp_score, path_scores
from .training import LossConfig, TrainConfig, format_training_log, train_sgd

logger = logging.getLogger("hiernav")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(HierNavError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# io helpers


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _in_context(path: str, fn, *args):
    """Run a parser, prefixing its error with the file name."""
    try:
        return fn(_read(path), *args)
    except HierNavError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def _check_paths(args, inputs=(), outputs=(), out_dirs=()):
    ins = []
    for name in inputs:
        p = getattr(args, name, None)
        if p is None:
            continue
        if not os.path.isfile(p):
            raise UsageError(f"--{name.replace('_', '-')}: no such file {p}")
        ins.append(os.path.realpath(p))
    for name in outputs:
        p = getattr(args, name, None)
        if p is None:
            continue
        parent = os.path.dirname(os.path.abspath(p))
        if not os.path.isdir(parent):
            raise UsageError(f"--{name.replace('_', '-')}: directory {parent} does not exist")
        if os.path.realpath(p) in ins:
            raise UsageError(f"--{name.replace('_', '-')} would overwrite an input file")
    for name in out_dirs:
        p = getattr(args, name)
        if os.path.exists(p) and not os.path.isdir(p):
            raise UsageError(f"--{name.replace('_', '-')}: {p} is not a directory")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _band(text: str) -> data_mod.DepthBand:
    try:
        depths, p, gran = text.split(":")
        lo, _, hi = depths.partition("-")
        return data_mod.DepthBand(int(lo), int(hi or lo), float(p), gran)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO-HI:P:GRANULARITY, got {text!r}")


class _Context:
    """Hierarchy, optional holdout split and the derived ID tree."""

    def __init__(self, args):
        self.full = _in_context(args.hierarchy, parse_hierarchy)
        self.selection = None
        self.gt_map = None
        self.h = self.full
        if getattr(args, "split", None):
            self.selection = _in_context(args.split, data_mod.read_split)
            roots = {n: g for g, names in self.selection.items() for n in names}
            self.h, self.gt_map = holdout_split(self.full, roots)

    def load(self, path: str, split: str = "train"):
        """Dataset file -> (ID part relabelled to the ID tree, OOD part in the full tree)."""
        ds = _in_context(path, data_mod.read_dataset, self.full, split)
        if self.gt_map is None:
            return ds.relabel(self.h), None
        names = np.array(self.full.names, dtype=object)[ds.y]
        is_ood = np.isin(names, list(self.gt_map.mapping))
        return ds.subset(~is_ood).relabel(self.h), ds.subset(is_ood)

    def ood_truth(self, ood):
        gt = pool_ground_truth(self.h, self.full, ood.y, self.gt_map)
        gran = np.array(
            [self.gt_map.granularity[self.full.names[l]] for l in ood.y.tolist()], dtype=object
        )
        return gt, gran


# ---------------------------------------------------------------------------
# commands


def cmd_hierarchy_prune(args):
    _check_paths(args, ["in_"], ["out"])
    h = _in_context(args.in_, parse_hierarchy)
    _write(args.out, format_hierarchy(prune_single_child(h)))


def cmd_hierarchy_entropy_prune(args):
    _check_paths(args, ["in_", "data"], ["out"])
    h = _in_context(args.in_, parse_hierarchy)
    ds = _in_context(args.data, data_mod.read_dataset, h)
    _write(args.out, format_hierarchy(entropy_prune(h, ds.leaf_counts(), args.target)))


def cmd_hierarchy_stats(args):
    _check_paths(args, ["in_"], ["out"])
    h = _in_context(args.in_, parse_hierarchy)
    widths = [len(h.children[n]) for n in h.internals]
    lines = [
        f"nodes\t{len(h)}",
        f"leaves\t{len(h.leaves)}",
        f"internal\t{len(h.internals)}",
        f"max_depth\t{h.max_depth}",
        f"max_children\t{max(widths) if widths else 0}",
        f"single_child_nodes\t{sum(1 for w in widths if w == 1)}",
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_data_gen(args):
    _check_paths(args, ["hierarchy"], out_dirs=["out_dir"])
    if args.hierarchy:
        h = _in_context(args.hierarchy, parse_hierarchy)
    else:
        h = data_mod.generate_synthetic_hierarchy(args.branching)
    scales = args.level_scales or [1.0] * h.max_depth
    ds = data_mod.generate_synthetic_features(
        h, args.dim, scales, args.noise, args.per_leaf, args.seed
    )
    os.makedirs(args.out_dir, exist_ok=True)
    _write(os.path.join(args.out_dir, "hierarchy.tsv"), format_hierarchy(h))
    for split in data_mod.SPLITS:
        _write(os.path.join(args.out_dir, f"{split}.tsv"), data_mod.write_dataset(ds.select_split(split)))


def cmd_split_make(args):
    _check_paths(args, ["hierarchy"], ["out", "out_hierarchy"])
    h = _in_context(args.hierarchy, parse_hierarchy)
    bands = tuple(args.band) if args.band else data_mod.IMAGENET1K_BANDS
    sel = data_mod.select_holdout_subtrees(h, data_mod.SplitSpec(bands, args.seed))
    _write(args.out, data_mod.write_split(sel))
    if args.out_hierarchy:
        h_id, _ = data_mod.split_from_selection(h, sel)
        _write(args.out_hierarchy, format_hierarchy(h_id))


def cmd_train(args):
    _check_paths(args, ["hierarchy", "split", "train", "val"], ["out", "log"])
    ctx = _Context(args)
    train, _ = ctx.load(args.train, "train")
    val = ctx.load(args.val, "val")[0] if args.val else None
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        lr_decay_factor=args.lr_decay,
        lr_milestones=tuple(args.milestones),
        seed=args.seed,
    )
    params = init_params(ctx.h, train.dim, args.trunk_layers, args.hidden,
                         hierarchical=not args.flat, flat=args.flat, seed=args.seed)
    res = train_sgd(params, ctx.h, train.X, train.y, cfg, LossConfig(args.alpha, args.beta),
                    None if val is None else val.X, None if val is None else val.y)
    save_model(res.params, ctx.h, args.out)
    if args.log:
        _write(args.log, format_training_log(res.log))


def cmd_calibrate(args):
    _check_paths(args, ["model", "hierarchy", "split", "val"], ["out"])
    ctx = _Context(args)
    params = load_model(args.model, ctx.h)
    val, _ = ctx.load(args.val, "val")
    P = node_path_probabilities(forward(params, ctx.h, val.X))
    table = calibrate_from_probabilities(P, ctx.h, val.y, args.tnr, args.mode,
                                         "fallback" if args.fallback else "raise")
    if table.fallback_nodes:
        logger.warning("pooled threshold used at %d nodes", len(table.fallback_nodes))
    _write(args.out, format_threshold_table(table, ctx.h))


def cmd_score(args):
    _check_paths(args, ["model", "hierarchy", "split", "data"], ["out"])
    ctx = _Context(args)
    params = load_model(args.model, ctx.h)
    ds = _in_context(args.data, data_mod.read_dataset, ctx.full)
    msp = msp_score(params, ds.X) if params.has_flat else None
    if params.has_heads:
        text = format_scores(path_scores(forward(params, ctx.h, ds.X)), msp)
    else:
        leaves = np.array(ctx.h.leaves)
        pred = leaves[np.argmax(flat_forward(params, ds.X), axis=1)]
        rows = ["sample_index,predicted_leaf_name,msp"]
        rows += [f"{i},{ctx.h.names[p]},{float(m)!r}" for i, (p, m) in enumerate(zip(pred, msp))]
        text = "\n".join(rows) + "\n"
    _write(args.out, text)


def cmd_infer(args):
    _check_paths(args, ["model", "hierarchy", "split", "thresholds", "data"], ["out"])
    ctx = _Context(args)
    params = load_model(args.model, ctx.h)
    table = _in_context(args.thresholds, parse_threshold_table)
    ds = _in_context(args.data, data_mod.read_dataset, ctx.full)
    P = node_path_probabilities(forward(params, ctx.h, ds.X))
    nodes = infer_from_probabilities(P, ctx.h, table)
    leaves = np.array(ctx.h.leaves)[np.argmax(P[:, list(ctx.h.leaves)], axis=1)]
    rows = ["sample_index,label,predicted_leaf,inferred_node"]
    for i, (lab, leaf, node) in enumerate(zip(ds.y.tolist(), leaves.tolist(), nodes.tolist())):
        rows.append(f"{i},{ctx.full.names[lab]},{ctx.h.names[leaf]},{ctx.h.names[node]}")
    _write(args.out, "\n".join(rows) + "\n")


def _eval_inputs(args):
    if not args.split:
        raise UsageError("--split is required to define the OOD pools")
    ctx = _Context(args)
    params = load_model(args.model, ctx.h)
    val, _ = ctx.load(args.val, "val")
    test_id, test_ood = ctx.load(args.test, "test")
    gt_ood, gran = ctx.ood_truth(test_ood)
    return ctx, params, val, test_id, test_ood, gt_ood, gran


def cmd_eval(args):
    _check_paths(args, ["model", "flat_model", "hierarchy", "split", "val", "test"], out_dirs=["out"])
    ctx, params, val, test_id, test_ood, gt_ood, gran = _eval_inputs(args)
    h = ctx.h
    s_id = path_scores(forward(params, h, test_id.X))
    s_ood = path_scores(forward(params, h, test_ood.X))
    rows = [["model", "metric", *GRANULARITIES, "overall"]]
    for metric in HIERARCHICAL_METRICS:
        res = granularity_auroc(s_id.metric(metric),
                                {g: s_ood.metric(metric)[gran == g] for g in GRANULARITIES})
        rows.append(["hsc", metric] + ["" if res[g] is None else repr(res[g])
                                       for g in (*GRANULARITIES, "overall")])
    if args.flat_model:
        flat = load_model(args.flat_model, h)
        a, b = msp_score(flat, test_id.X), msp_score(flat, test_ood.X)
        res = granularity_auroc(a, {g: b[gran == g] for g in GRANULARITIES})
        rows.append(["flat", "msp"] + ["" if res[g] is None else repr(res[g])
                                       for g in (*GRANULARITIES, "overall")])

    P_val = node_path_probabilities(forward(params, h, val.X))
    table = calibrate_from_probabilities(P_val, h, val.y, args.tnr, args.mode, "fallback")
    outcome_rows = []
    settings = {
        "leaf": (s_id.predicted_leaf, s_ood.predicted_leaf),
        f"{table.mode}@{args.tnr:g}": (
            infer_from_probabilities(s_id.node_probability, h, table),
            infer_from_probabilities(s_ood.node_probability, h, table),
        ),
    }
    os.makedirs(args.out, exist_ok=True)
    for setting, (pid, pood) in settings.items():
        for pool, preds, gts in (("id", pid, test_id.y), ("ood", pood, gt_ood)):
            o = hierarchical_outcomes(preds, gts, h)
            outcome_rows.append((setting, pool, o))
            tag = setting.replace("@", "_tnr")
            _write(os.path.join(args.out, f"confusion_{pool}_{tag}.csv"), format_confusion(o.confusion))
    _write(os.path.join(args.out, "outcomes.csv"), format_outcomes(outcome_rows))
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    _write(os.path.join(args.out, "granularity_auroc.csv"), buf.getvalue())


def cmd_sweep(args):
    _check_paths(args, ["model", "hierarchy", "split", "val", "test"], ["out"])
    ctx, params, val, test_id, test_ood, gt_ood, _ = _eval_inputs(args)
    h = ctx.h
    P = [node_path_probabilities(forward(params, h, d.X)) for d in (val, test_id, test_ood)]
    modes = ("node_wise", "path_wise") if args.mode == "both" else (args.mode,)
    points = tnr_sweep(h, P[0], val.y, P[1], test_id.y, P[2], gt_ood, args.tnr_grid, modes)
    _write(args.out, format_sweep(points))


def cmd_bench(args):
    _check_paths(args, out_dirs=["out"])
    cfg = BenchConfig(n_seeds=args.n_seeds)
    result = run_bench(args.seed, args.out, cfg)
    for path in result.files:
        logger.info("wrote %s", path)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hiernav", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    hier = sub.add_parser("hierarchy", help="hierarchy preparation")
    hsub = hier.add_subparsers(dest="action", required=True, parser_class=_Parser)
    a = hsub.add_parser("prune", help="remove single-child nodes")
    a.add_argument("--in", dest="in_", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_hierarchy_prune)
    a = hsub.add_parser("entropy-prune", help="merge minimum-entropy nodes down to a target count")
    a.add_argument("--in", dest="in_", required=True)
    a.add_argument("--data", required=True, help="training dataset supplying leaf counts")
    a.add_argument("--target", type=int, required=True, help="number of internal nodes to keep")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_hierarchy_entropy_prune)
    a = hsub.add_parser("stats", help="print tree statistics")
    a.add_argument("--in", dest="in_", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_hierarchy_stats)

    d = sub.add_parser("data", help="dataset generation")
    dsub = d.add_subparsers(dest="action", required=True, parser_class=_Parser)
    a = dsub.add_parser("gen", help="synthetic hierarchical Gaussian features")
    src = a.add_mutually_exclusive_group(required=True)
    src.add_argument("--branching", type=_ints, help="per-level branching, e.g. 3,3,3,3")
    src.add_argument("--hierarchy", help="existing hierarchy file")
    a.add_argument("--dim", type=int, default=32)
    a.add_argument("--level-scales", type=_floats, help="per-depth step std (default all 1)")
    a.add_argument("--noise", type=float, default=1.0)
    a.add_argument("--per-leaf", type=int, default=100)
    a.add_argument("--seed", type=int, required=True)
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_data_gen)

    s = sub.add_parser("split", help="OOD holdout splits")
    ssub = s.add_subparsers(dest="action", required=True, parser_class=_Parser)
    a = ssub.add_parser("make", help="select holdout subtrees by depth band")
    a.add_argument("--hierarchy", required=True)
    a.add_argument("--band", type=_band, action="append",
                   help="LO-HI:P:GRANULARITY (repeatable); default is the 3-6/7-10/11-15 scheme")
    a.add_argument("--seed", type=int, required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--out-hierarchy", help="also write the pruned ID hierarchy")
    a.set_defaults(func=cmd_split_make)

    def common(a, split=True):
        a.add_argument("--hierarchy", required=True, help="full hierarchy file")
        if split:
            a.add_argument("--split", help="holdout split file; model lives on the ID tree")

    a = sub.add_parser("train", help="train a hierarchical (or flat) head")
    common(a)
    a.add_argument("--train", required=True)
    a.add_argument("--val")
    a.add_argument("--alpha", type=float, default=1.0)
    a.add_argument("--beta", type=float, default=0.0)
    a.add_argument("--flat", action="store_true", help="train the flat softmax baseline")
    a.add_argument("--trunk-layers", type=int, default=1)
    a.add_argument("--hidden", type=int)
    a.add_argument("--epochs", type=int, default=30)
    a.add_argument("--batch-size", type=int, default=64)
    a.add_argument("--lr", type=float, default=0.1)
    a.add_argument("--momentum", type=float, default=0.9)
    a.add_argument("--weight-decay", type=float, default=1e-4)
    a.add_argument("--lr-decay", type=float, default=0.1)
    a.add_argument("--milestones", type=_ints, default=[10, 20])
    a.add_argument("--seed", type=int, required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--log", help="per-epoch CSV log")
    a.set_defaults(func=cmd_train)

    a = sub.add_parser("calibrate", help="TNR thresholds from ID validation data")
    common(a)
    a.add_argument("--model", required=True)
    a.add_argument("--val", required=True)
    a.add_argument("--tnr", type=float, default=0.95)
    a.add_argument("--mode", choices=["node", "path"], default="node")
    a.add_argument("--fallback", action="store_true",
                   help="use the pooled threshold at nodes lacking calibration pairs")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_calibrate)

    a = sub.add_parser("score", help="path probability / entropy scores per sample")
    common(a)
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_score)

    a = sub.add_parser("infer", help="thresholded coarse-to-fine predictions")
    common(a)
    a.add_argument("--model", required=True)
    a.add_argument("--thresholds", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_infer)

    a = sub.add_parser("eval", help="AUROC by granularity and hierarchy-aware outcomes")
    common(a)
    a.add_argument("--model", required=True)
    a.add_argument("--flat-model")
    a.add_argument("--val", required=True)
    a.add_argument("--test", required=True)
    a.add_argument("--tnr", type=float, default=0.95)
    a.add_argument("--mode", choices=["node", "path"], default="node")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_eval)

    a = sub.add_parser("sweep", help="accuracy and hierarchy distance across TNR values")
    common(a)
    a.add_argument("--model", required=True)
    a.add_argument("--val", required=True)
    a.add_argument("--test", required=True)
    a.add_argument("--tnr-grid", type=_floats, default=[0.5, 0.8, 0.9, 0.95, 0.99])
    a.add_argument("--mode", choices=["node_wise", "path_wise", "both"], default="both")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_sweep)

    a = sub.add_parser("bench", help="end-to-end synthetic benchmark")
    a.add_argument("--seed", type=int, required=True)
    a.add_argument("--n-seeds", type=int, default=3)
    a.add_argument("--out", required=True, help="report directory")
    a.set_defaults(func=cmd_bench)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except HierNavError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME if isinstance(exc, RuntimeError) else EXIT_VALIDATION
    except argparse.ArgumentTypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
