"""Command-line entry point: train, fuse, prune, sweep, stats.

Every command is reproducible byte-for-byte for fixed flags and seeds;
wall-clock measurement is therefore off unless --timing is passed.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import analysis, data as datamod, fusion as fus, genprune as gp, netcore, train as trainmod
from .analysis import CSV_HEADER, RunRecord
from .netcore import PfnnFormatError, ShapeError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_alpha(text: str):
    parts = text.split(",")
    values = [float(p) for p in parts]
    return values[0] if len(values) == 1 else values


def _load_mnist_train(args):
    paths = datamod.find_mnist(Path(args.data_dir) if args.data_dir else None)
    if paths is None:
        raise FileNotFoundError(
            "MNIST IDX files not found; point --data-dir or the "
            f"{datamod.DATA_DIR_ENV} environment variable at a directory "
            "holding train-images-idx3-ubyte etc."
        )
    train = datamod.load_idx(paths["train_images"], paths["train_labels"])
    test = datamod.load_idx(paths["test_images"], paths["test_labels"])
    return train, test


def _manifest_path_pairs(manifest: Path):
    pairs = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        path, role = line.rsplit(" ", 1)
        side, idx = role[0], int(role[1:])
        pairs.setdefault(idx, {})[side] = manifest.parent / path
    out = []
    for idx in sorted(pairs):
        entry = pairs[idx]
        if "A" not in entry or "B" not in entry:
            raise UsageError(f"manifest pair {idx} is missing a side")
        out.append((idx, entry["A"], entry["B"]))
    return out


def _fusion_config(args, lam: float, alpha) -> fus.FusionConfig:
    return fus.FusionConfig(
        lam=lam,
        alpha=alpha,
        features=fus.FeatureKind(args.features),
        align=fus.AlignMethod(args.align),
    )


def cmd_train(args) -> int:
    train, _ = _load_mnist_train(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = [train.inputs.shape[1], *([args.width] * args.depth), int(train.labels.max()) + 1]
    lines = []
    for k in range(args.pairs):
        if args.split_digit is not None:
            spec = datamod.SplitSpec(args.split_digit, seed=args.seed_base + k)
            part_a, part_b = datamod.heterogeneous_split(train, spec)
        else:
            part_a = part_b = train
        for side, part, seed in (
            ("A", part_a, args.seed_base + 2 * k),
            ("B", part_b, args.seed_base + 2 * k + 1),
        ):
            cfg = trainmod.TrainConfig(epochs=args.epochs, seed=seed)
            net = trainmod.train_mlp(dims, part, cfg)
            name = f"pair{k}_{side}.pfnn"
            netcore.save(net, out_dir / name)
            lines.append(f"{name} {side}{k}")
            print(f"wrote {out_dir / name}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {out_dir / 'manifest.txt'}")
    return 0


def _append_record(path: Path, record: RunRecord):
    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write(CSV_HEADER + "\n")
        fh.write(record.csv_row() + "\n")


def cmd_fuse(args) -> int:
    pairs = _manifest_path_pairs(Path(args.manifest))
    chosen = [p for p in pairs if p[0] == args.pair]
    if not chosen:
        raise UsageError(f"pair {args.pair} not found in manifest")
    idx, path_a, path_b = chosen[0]
    net_a, net_b = netcore.load(path_a), netcore.load(path_b)
    alpha = _parse_alpha(args.alpha)
    feature_data = None
    eval_data = None
    if args.data_dir or datamod.data_dir():
        try:
            train, test = _load_mnist_train(args)
            feature_data = train.inputs
            eval_data = test
        except FileNotFoundError:
            pass
    needs_data = args.method in ("cluster",) or (
        args.method == "partial-ot" and args.features == "activations"
    )
    if needs_data and feature_data is None:
        raise UsageError(f"method {args.method}/{args.features} needs data for features")
    start = time.perf_counter()
    net = analysis.run_cell(
        net_a,
        net_b,
        args.method,
        alpha,
        args.lam,
        feature_data=feature_data,
        seed=idx,
        cfg_base=_fusion_config(args, args.lam, alpha),
        cluster_restarts=args.cluster_restarts,
    )
    wall = (time.perf_counter() - start) * 1000.0 if args.timing else 0.0
    if args.export_couplings:
        if args.method != "partial-ot":
            raise UsageError("--export-couplings applies to --method partial-ot only")
        cfg = _fusion_config(args, args.lam, alpha)
        result = fus.fixed_point_align(net_a, net_b, cfg, partial=True) \
            if cfg.align is fus.AlignMethod.FIXED_POINT \
            else fus.greedy_align(net_a, net_b, cfg, data=feature_data, partial=True)
        lines = ["layer,row,col,mass"]
        for layer, coupling in enumerate(result.couplings, start=1):
            mat = coupling.matrix
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    if mat[i, j] != 0.0:
                        lines.append(f"{layer},{i},{j},{mat[i, j]:.17g}")
        Path(args.export_couplings).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.export_couplings}")
    netcore.save(net, args.out)
    print(f"wrote {args.out} widths={net.hidden_dims}")
    report = analysis.count_params(net)
    acc = None if eval_data is None else netcore.evaluate_accuracy(net, eval_data)
    record = RunRecord(
        method=args.method,
        alpha=analysis._format_alpha(alpha),
        lam=args.lam,
        seed=idx,
        accuracy=acc,
        nonzero_params=report.total_nonzero,
        total_params=report.total_entries,
        widths=net.hidden_dims,
        wall_ms=wall,
    )
    if args.records:
        _append_record(Path(args.records), record)
    print(record.csv_row())
    return 0


def cmd_prune(args) -> int:
    net = netcore.load(args.net)
    if args.widths:
        widths = tuple(int(w) for w in args.widths.split(","))
    else:
        widths = tuple(max(1, round(args.factor * n)) for n in net.hidden_dims)
    feature_data = None
    if args.method == "cluster":
        train, _ = _load_mnist_train(args)
        feature_data = train.inputs
    spec = gp.PruneSpec(widths, gp.PruneMethod(args.method))
    if args.method == "cluster":
        pruned = gp.cluster_prune(
            net, spec, feature_data, restarts=args.cluster_restarts, seed=args.seed
        )
    elif args.method == "prune":
        pruned = gp.unstructured_prune(net, spec)
    else:
        pruned = gp.prune_with_postprocess(net, spec)
    netcore.save(pruned, args.out)
    print(f"wrote {args.out} widths={pruned.hidden_dims}")
    return 0


def cmd_sweep(args) -> int:
    pairs = _manifest_path_pairs(Path(args.manifest))
    train, test = _load_mnist_train(args)
    alphas = [_parse_alpha(a) for a in args.alphas.split(";") if a.strip()]
    lambdas = [float(p) for p in args.lambdas.split(",") if p.strip()]
    methods = [m for m in args.methods.split(",") if m.strip()]
    cfg_base = _fusion_config(args, 0.5, 0.0)

    def run_pair(item):
        idx, path_a, path_b = item
        net_a, net_b = netcore.load(path_a), netcore.load(path_b)
        return analysis.tradeoff_sweep(
            net_a,
            net_b,
            alphas,
            lambdas,
            methods,
            test,
            feature_data=train.inputs,
            seed=idx,
            cfg_base=cfg_base,
            cluster_restarts=args.cluster_restarts,
            measure_time=args.timing,
        )

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            per_pair = list(pool.map(run_pair, pairs))
    else:
        per_pair = [run_pair(p) for p in pairs]

    lines = [CSV_HEADER]
    if per_pair:
        cells = len(per_pair[0])
        # grid-major, seed (pair) innermost, independent of completion order
        for i in range(cells):
            for records in per_pair:
                lines.append(records[i].csv_row())
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_stats(args) -> int:
    net_a, net_b = netcore.load(args.net_a), netcore.load(args.net_b)
    train, _ = _load_mnist_train(args)
    sample = train.inputs[: args.sample_count]
    lines = ["block,layer,network,statistic,neuron,value"]
    reports = [
        analysis.similarity_stats(net_a, net_b, sample, layer)
        for layer in range(1, net_a.num_hidden + 1)
    ]
    key_map = {
        ("A", "nn_within"): "nn_within_a",
        ("B", "nn_within"): "nn_within_b",
        ("A", "nn_cross"): "nn_cross_ab",
        ("B", "nn_cross"): "nn_cross_ba",
        ("A", "mean_within"): "mean_within_a",
        ("B", "mean_within"): "mean_within_b",
        ("A", "mean_cross"): "mean_cross_ab",
        ("B", "mean_cross"): "mean_cross_ba",
    }
    for rep in reports:
        for (network, stat), key in key_map.items():
            for neuron, value in enumerate(rep.values[key]):
                lines.append(f"all,{rep.layer},{network},{stat},{neuron},{value:.9g}")
    for block, field in (("conditional80", "conditional80"), ("difference", "difference")):
        for rep in reports:
            for (network, stat), key in key_map.items():
                value = getattr(rep, field)[key]
                lines.append(f"{block},{rep.layer},{network},{stat},,{value:.9g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="partfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--data-dir", default=None, help="directory with MNIST IDX files")
        p.add_argument("--timing", action="store_true", help="measure wall time (breaks byte reproducibility)")
        p.add_argument("--cluster-restarts", type=int, default=1000)

    p_train = sub.add_parser("train", help="train seeded pairs of MLPs")
    add_common(p_train)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--pairs", type=int, default=5)
    p_train.add_argument("--split-digit", type=int, default=None, help="heterogeneous split; omit to train on the full data")
    p_train.add_argument("--width", type=int, default=100)
    p_train.add_argument("--depth", type=int, default=3)
    p_train.add_argument("--epochs", type=int, default=50)
    p_train.add_argument("--seed-base", type=int, default=0)

    p_fuse = sub.add_parser("fuse", help="fuse or ensemble-prune one checkpoint pair")
    add_common(p_fuse)
    p_fuse.add_argument("--manifest", required=True)
    p_fuse.add_argument("--pair", type=int, default=0)
    p_fuse.add_argument("--alpha", default="0", help="scalar or comma list per layer")
    p_fuse.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p_fuse.add_argument("--features", choices=["weights", "activations"], default="weights")
    p_fuse.add_argument("--align", choices=["greedy", "fixed-point"], default="fixed-point")
    p_fuse.add_argument("--method", choices=["partial-ot", "cluster", "prune", "prune-post"], default="partial-ot")
    p_fuse.add_argument("--out", required=True)
    p_fuse.add_argument("--records", default=None, help="CSV file to append the run record to")
    p_fuse.add_argument("--export-couplings", default=None, help="CSV file for the per-layer transport plans")

    p_prune = sub.add_parser("prune", help="generalized pruning of a single network")
    add_common(p_prune)
    p_prune.add_argument("--net", required=True)
    p_prune.add_argument("--method", choices=["cluster", "prune", "prune-post"], default="prune")
    p_prune.add_argument("--factor", type=float, default=0.5, help="kept fraction of each hidden layer")
    p_prune.add_argument("--widths", default=None, help="explicit comma list of target widths")
    p_prune.add_argument("--seed", type=int, default=0)
    p_prune.add_argument("--out", required=True)

    p_sweep = sub.add_parser("sweep", help="full grid over methods, alphas, lambdas, pairs")
    add_common(p_sweep)
    p_sweep.add_argument("--manifest", required=True)
    p_sweep.add_argument("--alphas", default="0;0.2;0.4;0.5;0.6;0.8;1", help="semicolon-separated alpha entries (each scalar or comma list)")
    p_sweep.add_argument("--lambdas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")
    p_sweep.add_argument("--methods", default="partial-ot")
    p_sweep.add_argument("--features", choices=["weights", "activations"], default="weights")
    p_sweep.add_argument("--align", choices=["greedy", "fixed-point"], default="fixed-point")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--out", default=None)

    p_stats = sub.add_parser("stats", help="neuron similarity report for two checkpoints")
    add_common(p_stats)
    p_stats.add_argument("--net-a", required=True)
    p_stats.add_argument("--net-b", required=True)
    p_stats.add_argument("--sample-count", type=int, default=1000)
    p_stats.add_argument("--out", default=None)

    return parser


_HANDLERS = {
    "train": cmd_train,
    "fuse": cmd_fuse,
    "prune": cmd_prune,
    "sweep": cmd_sweep,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ShapeError) as exc:
        if isinstance(exc, (PfnnFormatError, datamod.DataFormatError)):
            print(f"data error: {exc}", file=sys.stderr)
            return 2
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (trainmod.NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
