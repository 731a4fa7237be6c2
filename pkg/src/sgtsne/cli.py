"""``sg-embed``: load a graph, condition it, embed it and write the results."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__, conditioning, graph_core, nuconv, optimizer, recall
from .attractive import STRATEGIES, read_cluster_labels
from .oracle import DENSE_Q_CAP

log = logging.getLogger("sgtsne")

# run-record keys that define the run (everything but the output directory)
MANIFEST_KEYS = (
    "input", "format", "values", "mode", "param", "dim", "iters", "exag_iters", "alpha",
    "eta", "seed", "init", "init_scale", "reorder", "cluster_file", "block_size",
    "grid_h", "grid_cells", "interp_order", "grid_max", "repulsion", "kl_every", "k_eval",
    "threads", "strict",
)


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sg-embed", description=__doc__)
    p.add_argument("--input", help="graph file (.mtx or TSV edge list)")
    p.add_argument("--format", choices=("matrix-market", "edge-list-tsv"))
    p.add_argument("--values", choices=("weight", "squared-distance"), default=None,
                   help="meaning of the stored values (default: weight)")
    p.add_argument("--lambda", dest="lam", type=float, help="rescaling target per vertex")
    p.add_argument("--perplexity", type=float, help="perplexity target (squared-distance input)")
    p.add_argument("--dim", type=int, default=2, choices=(1, 2, 3))
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--exag-iters", type=int, default=250)
    p.add_argument("--alpha", type=float, default=12.0)
    p.add_argument("--eta", type=float, default=200.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=tuple(optimizer.INIT_SCALE), default="uniform")
    p.add_argument("--init-scale", type=float)
    p.add_argument("--reorder", choices=STRATEGIES, default="bfs-rcm")
    p.add_argument("--cluster-file", help="vertex<TAB>label file for --reorder cluster-hint")
    p.add_argument("--block-size", type=int, default=256)
    p.add_argument("--threads", type=int, help="worker thread cap (1 = bit-reproducible)")
    p.add_argument("--grid-h", type=float, help="largest grid spacing")
    p.add_argument("--grid-cells", type=int, help="grid cells across the data extent")
    p.add_argument("--interp-order", type=int)
    p.add_argument("--grid-max", type=int, help="grid points per axis cap")
    p.add_argument("--repulsion", choices=optimizer.REPULSION_MODES, default="auto",
                   help="auto: exact below %d vertices, grid above" % optimizer.AUTO_EXACT_BELOW)
    p.add_argument("--exact", action="store_true", help="same as --repulsion exact")
    p.add_argument("--kl-every", type=int, default=50)
    p.add_argument("--k-eval", type=int, default=90, help="neighbors for the recall report")
    p.add_argument("--no-recall", action="store_true", help="skip recall.tsv")
    p.add_argument("--labels", help="vertex<TAB>label file appended to embedding.tsv")
    p.add_argument("--strict", action="store_true", help="reject rows that are not stochastic")
    p.add_argument("--output-dir", default=".")
    p.add_argument("--manifest", help="repeat the run recorded in this manifest.json")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _settings(args) -> dict:
    if args.manifest:
        with open(args.manifest, encoding="utf-8") as fh:
            rec = json.load(fh)
        missing = [k for k in MANIFEST_KEYS if k not in rec]
        if missing:
            raise UsageError(f"manifest lacks {', '.join(missing)}")
        return {k: rec[k] for k in MANIFEST_KEYS}
    if not args.input:
        raise UsageError("--input is required")
    if (args.lam is None) == (args.perplexity is None):
        raise UsageError("give exactly one of --lambda and --perplexity")
    mode = "lambda" if args.lam is not None else "perplexity"
    values = args.values or "weight"
    if mode == "perplexity" and values != "squared-distance":
        raise UsageError("--perplexity needs distance input (--values squared-distance)")
    if mode == "lambda" and values != "weight":
        raise UsageError("--lambda expects stochastic weights (--values weight)")
    if args.reorder == "cluster-hint" and not args.cluster_file:
        raise UsageError("--reorder cluster-hint needs --cluster-file")
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return {
        "input": os.path.abspath(args.input), "format": args.format, "values": values,
        "mode": mode, "param": args.lam if mode == "lambda" else args.perplexity,
        "dim": args.dim, "iters": args.iters, "exag_iters": args.exag_iters,
        "alpha": args.alpha, "eta": args.eta, "seed": args.seed, "init": args.init,
        "init_scale": args.init_scale, "reorder": args.reorder,
        "cluster_file": os.path.abspath(args.cluster_file) if args.cluster_file else None,
        "block_size": args.block_size, "grid_h": args.grid_h, "grid_cells": args.grid_cells,
        "interp_order": args.interp_order, "grid_max": args.grid_max,
        "repulsion": "exact" if args.exact else args.repulsion,
        "kl_every": args.kl_every, "k_eval": None if args.no_recall else args.k_eval,
        "threads": args.threads, "strict": args.strict,
    }


def _grid(s) -> nuconv.GridConfig:
    base = optimizer.embedding_grid(s["dim"])
    return nuconv.GridConfig(
        h_max=s["grid_h"] if s["grid_h"] is not None else base.h_max,
        cells_per_extent=s["grid_cells"] if s["grid_cells"] is not None else base.cells_per_extent,
        min_per_axis=base.min_per_axis,
        max_per_axis=s["grid_max"] if s["grid_max"] is not None else base.max_per_axis,
        interp_order=s["interp_order"] if s["interp_order"] is not None else base.interp_order,
    )


def _set_threads(n):
    if n is None:
        return None
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


def _conditional(s) -> graph_core.SparseConditionalMatrix:
    if s["mode"] == "lambda":
        Pc = graph_core.load_graph(s["input"], s["format"], strict=s["strict"])
        return conditioning.rescale(Pc, conditioning.RescalingConfig(lam=s["param"]))
    knn = graph_core.load_distances(s["input"], s["format"])
    return conditioning.perplexity_equalize(knn, conditioning.PerplexityConfig(s["param"]))


def _read_labels(path, n):
    labels = [""] * n
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            v, _, lab = line.partition("\t")
            v = int(v)
            if not 0 <= v < n:
                raise graph_core.IndexRangeError(f"{path}: label for vertex {v} outside [0, {n})")
            labels[v] = lab
    return labels


def write_embedding(path, y, labels=None):
    with open(path, "w", encoding="ascii" if labels is None else "utf-8") as fh:
        for i, row in enumerate(y):
            coords = "\t".join(f"{v:.17g}" for v in row)
            tail = "" if labels is None else f"\t{labels[i]}"
            fh.write(f"{i}\t{coords}{tail}\n")


def write_kl_trace(path, trace):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("iter\tkl\testimator\n")
        for it, kl, how in trace:
            fh.write(f"{it}\t{kl:.17g}\t{how}\n")


def write_recall(path, rep: recall.RecallReport):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# k_eval={rep.k_eval} mean={rep.mean:.17g}\n")
        fh.write("# histogram " + " ".join(
            f"[{a:.2f},{b:.2f}):{c}" for a, b, c in zip(rep.edges[:-1], rep.edges[1:], rep.counts)) + "\n")
        fh.write("vertex\trecall\n")
        for i, r in enumerate(rep.recall):
            fh.write(f"{i}\t{r:.17g}\n")


def execute(s: dict, out_dir: str, labels_path=None) -> int:
    threads = _set_threads(s["threads"])
    Pc = _conditional(s)
    P = graph_core.symmetrize(Pc)
    cluster = read_cluster_labels(s["cluster_file"], P.n) if s["reorder"] == "cluster-hint" else None
    if s["repulsion"] == "exact" and P.n > DENSE_Q_CAP:
        raise UsageError(f"--exact is limited to n <= {DENSE_Q_CAP}")
    cfg = optimizer.EmbedConfig(
        d=s["dim"], max_iter=s["iters"], early_exag_iter=s["exag_iters"], alpha=s["alpha"],
        eta=s["eta"], init=s["init"], init_scale=s["init_scale"], seed=s["seed"],
        kl_log_every=s["kl_every"], reorder=s["reorder"], block_size=s["block_size"],
        labels=cluster, grid=_grid(s), repulsion=s["repulsion"], workers=threads,
    )
    res = optimizer.run(P, cfg)
    os.makedirs(out_dir, exist_ok=True)
    labels = _read_labels(labels_path, P.n) if labels_path else None
    write_embedding(os.path.join(out_dir, "embedding.tsv"), res.y, labels)
    write_kl_trace(os.path.join(out_dir, "kl_trace.tsv"), res.kl_trace)
    if s["k_eval"] is not None:
        k_eval = min(s["k_eval"], P.n - 1)
        if k_eval < s["k_eval"]:
            log.warning("k_eval %d reduced to %d for a %d-vertex graph", s["k_eval"], k_eval, P.n)
        write_recall(os.path.join(out_dir, "recall.tsv"), recall.recall_report(Pc, res.y, k_eval))
    record = dict(s, output_dir=os.path.abspath(out_dir), version=__version__, n=P.n,
                  kl_initial=res.kl_trace[0][1], kl_final=res.kl_trace[-1][1],
                  kl_estimator=res.kl_trace[-1][2])
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="ascii") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; usage errors are reported as 1
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        s = _settings(args)
        return execute(s, args.output_dir, args.labels)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sg-embed: error: {exc}", file=sys.stderr)
    except (graph_core.GraphError, conditioning.InfeasibleRowError, conditioning.ConvergenceError,
            optimizer.EmbeddingDivergedError, OSError, json.JSONDecodeError) as exc:
        print(f"sg-embed: error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
