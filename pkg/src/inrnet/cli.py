"""``inrnet`` command-line entry point.

Exit codes: 0 success, 1 internal error, 2 partial data failure, 3 config error.
All tabular output is CSV with a header row.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_INTERNAL, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2, 3
SUBCOMMAND_IO = {"train-cls": "inr->vector", "train-seg": "inr->inr", "train-gen": "vector->inr"}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _apply_thread_cap() -> None:
    """Honour INRNET_THREADS by capping the BLAS thread pools (before numpy work)."""
    cap = os.environ.get("INRNET_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise CliError(f"INRNET_THREADS must be a positive integer, got {cap!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = cap
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(int(cap))


def _int_list(text: str) -> list:
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _float_list(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _writer(stream=None):
    return csv.writer(stream or sys.stdout, lineterminator="\n")


def _num(x) -> str:
    return repr(float(x))


# ----------------------------------------------------------------------------
# fit
# ----------------------------------------------------------------------------


def cmd_fit(args) -> int:
    from . import inr as _inr
    from .data import DatasetStore, read_label_table, read_pnm
    from .errors import DivergenceError

    src = Path(args.images)
    if not src.is_dir():
        raise CliError(f"--images {src} is not a directory")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    labels = read_label_table(src / "labels.tsv") if (src / "labels.tsv").exists() else {}
    widths = tuple(args.widths)
    arch = _inr.ArchConfig(args.arch, widths)
    store = DatasetStore.create(args.out)
    out = _writer()
    out.writerow(["file", "final_mse", "converged"])
    skipped, failed = 0, 0
    for idx, path in enumerate(files):
        try:
            img = read_pnm(path)
        except Exception as exc:  # unreadable files are skipped, the rest still get fitted
            print(f"skipping {path.name}: {exc}", file=sys.stderr)
            skipped += 1
            continue
        try:
            model, mse = _inr.fit_inr(img, arch, steps=args.steps, lr=args.lr, seed=args.seed + idx)
        except DivergenceError as exc:
            print(f"fit diverged for {path.name}: {exc}", file=sys.stderr)
            failed += 1
            continue
        ok = mse < args.tol
        failed += 0 if ok else 1
        tag = labels.get(path.name, "")
        dense = None
        if tag.startswith("@"):
            from .data import check_dense_labels, read_dense_labels

            dense = read_dense_labels(src / tag[1:])
            check_dense_labels(dense, idx)
        store.add(model, label=int(tag) if tag and dense is None else None, dense_labels=dense,
                  source_id=path.name)
        out.writerow([path.name, _num(mse), int(ok)])
    return EXIT_PARTIAL if skipped or failed else EXIT_OK


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


def cmd_train(args) -> int:
    from . import train as _train
    from .config import load_config
    from .data import DatasetStore
    from .layers.graph import save_graph

    cfg = load_config(args.config)
    want = SUBCOMMAND_IO[args.command]
    if cfg["net.io"] != want:
        raise CliError(f"net.io = {cfg['net.io']} does not match {args.command} (needs {want})")
    print("# resolved config", file=sys.stderr)
    sys.stderr.write(cfg.resolved())
    records = DatasetStore.open(args.data).records()
    tcfg = cfg.train_config()
    graph = cfg.build_net()
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    Path(str(args.out) + ".config").write_text(cfg.resolved(), encoding="utf-8")
    with open(log_path, "w", encoding="utf-8") as log:
        if args.command == "train-cls":
            _train.train_classifier(graph, records, tcfg, log=log)
        elif args.command == "train-seg":
            _train.train_dense(graph, records, tcfg, log=log)
        else:
            _train.train_generator(graph, records, tcfg, _train.energy_distance, log=log)
    save_graph(graph, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import train as _train
    from .data import DatasetStore
    from .layers.graph import load_graph

    graph = load_graph(args.ckpt)
    records = DatasetStore.open(args.data).records()
    cfg = _train.TrainConfig(steps=0, n_points=16, seed=args.seed)
    out = _writer()
    out.writerow(["n_points", "sampler", "top1", f"top{args.k}", "miou", "pixacc"])
    for n in args.n_points:
        m = _train.evaluate_metrics(graph, records, cfg, n_points=n, sampler=args.sampler, k=args.k)
        out.writerow([m.n_points, m.sampler, _num(m.top1), _num(m.top_k), _num(m.miou), _num(m.pixel_accuracy)])
    return EXIT_OK


# ----------------------------------------------------------------------------
# report commands
# ----------------------------------------------------------------------------


def cmd_discrepancy(args) -> int:
    from .pointset import Domain, make_points, star_discrepancy

    out = _writer()
    out.writerow(["n", "star_discrepancy", "method"])
    for n in args.n:
        ps = make_points(args.sampler, args.d, n, Domain.cube(args.d, 0.0, 1.0), args.seed)
        rep = star_discrepancy(ps, seed=args.seed or 0)
        out.writerow([ps.n, _num(rep.star_discrepancy), rep.method])
    return EXIT_OK


def cmd_convert_check(args) -> int:
    from .convert import convert_network, grid_equivalence_check, interpolation_deviation, random_spec

    dtype = np.float64 if args.fp64 else np.float32
    tol = args.tol if args.tol is not None else (1e-8 if args.fp64 else 1e-4)
    spec = random_spec(args.seed, (args.resolution, args.resolution), pool=args.pool)
    graph = convert_network(spec)
    rng = np.random.default_rng(args.seed)
    out = _writer()
    out.writerow(["image", "max_abs_diff"])
    worst = 0.0
    images = [rng.uniform(-1, 1, size=(args.resolution, args.resolution, 1)) for _ in range(args.images)]
    for i, img in enumerate(images):
        diff = grid_equivalence_check(spec, graph, img, dtype)
        worst = max(worst, diff)
        out.writerow([i, _num(diff)])
    if args.alphas:
        print()
        out.writerow(["alpha", "max_abs_diff"])
        for alpha, dist in interpolation_deviation(spec, graph, images[0], args.alphas, seed=args.seed):
            out.writerow([_num(alpha), _num(dist)])
    return EXIT_OK if worst < tol else EXIT_INTERNAL


def cmd_approx_demo(args) -> int:
    from .theory import approx_demo

    cover, _, est = approx_demo(args.target, args.eps, n=args.n, n_samples=args.n_samples, seed=args.seed)
    out = _writer()
    out.writerow(["target", "eps", "delta_pos", "delta_neg", "l1_error", "stderr", "n_samples"])
    out.writerow([args.target, _num(args.eps), _num(cover.delta_pos), _num(cover.delta_neg),
                  _num(est.error), _num(est.stderr), est.n_samples])
    return EXIT_OK if est.error < args.eps else EXIT_INTERNAL


GRADCHECK_GROUPS = {
    "conv": ("conv", "conv_mlp", "conv_gauss"),
    "pool": ("maxpool", "avgpool", "global_pool", "adaptive_pool"),
}


def cmd_gradcheck(args) -> int:
    from .layers.gradcheck import LAYER_CASES, check_layer

    if args.layer == "all":
        names = list(LAYER_CASES)
    else:
        names = list(GRADCHECK_GROUPS.get(args.layer, (args.layer,)))
        unknown = [n for n in names if n not in LAYER_CASES]
        if unknown:
            raise CliError(f"unknown layer {unknown[0]!r}; choose from {sorted(LAYER_CASES)} or all")
    out = _writer()
    out.writerow(["layer", "config", "max_relative_error"])
    worst = 0.0
    for name in names:
        for i in range(args.configs):
            err = check_layer(name, args.seed * 1000 + i)
            worst = max(worst, err)
            out.writerow([name, i, _num(err)])
    if args.study:
        from .layers.kernels import GaussianKernel, Support
        from .theory import StudyLayer, gradient_convergence_study

        sup = Support((-0.2, -0.2), (0.2, 0.2))
        ker = GaussianKernel(1, 1, 0.1, sup, width=1.5, amplitude=np.ones((1, 1)))
        print()
        out.writerow(["n", "empirical", "directional", "gap"])
        f = lambda p: np.sin(2 * p[:, 0]) * np.cos(p[:, 1]) + 0.5  # noqa: E731
        for row in gradient_convergence_study(StudyLayer("conv", ker), f, seed=args.seed):
            out.writerow([row[0]] + [_num(v) for v in row[1:]])
    return EXIT_OK if worst < 1e-3 else EXIT_INTERNAL


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inrnet", description="Networks on implicit neural representations.")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit one INR per PGM/PPM image into a dataset store")
    f.add_argument("--images", required=True)
    f.add_argument("--arch", choices=("siren", "fourier"), default="siren")
    f.add_argument("--out", required=True)
    f.add_argument("--steps", type=int, default=2000)
    f.add_argument("--lr", type=float, default=1e-4)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--widths", type=_int_list, default=[128, 128, 128])
    f.add_argument("--tol", type=float, default=1e-2, help="final MSE counted as converged")
    f.set_defaults(func=cmd_fit)

    for name in SUBCOMMAND_IO:
        t = sub.add_parser(name, help=f"train a {SUBCOMMAND_IO[name]} network")
        t.add_argument("--data", required=True)
        t.add_argument("--config", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--log", default=None, help="CSV log path (default: <out>.log)")
        t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint on a dataset store")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--n-points", type=_int_list, default=[1024])
    e.add_argument("--sampler", choices=("sobol", "grid", "shrunk"), default="sobol")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--k", type=int, default=3)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("discrepancy", help="star discrepancy of a sampler")
    d.add_argument("--sampler", default="sobol")
    d.add_argument("--d", type=int, default=2)
    d.add_argument("--n", type=_int_list, required=True)
    d.add_argument("--seed", type=int, default=None)
    d.set_defaults(func=cmd_discrepancy)

    c = sub.add_parser("convert-check", help="grid equivalence of a converted random network")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--images", type=int, default=50)
    c.add_argument("--resolution", type=int, default=16)
    c.add_argument("--pool", choices=("max", "avg"), default="max")
    c.add_argument("--fp64", action="store_true")
    c.add_argument("--tol", type=float, default=None)
    c.add_argument("--alphas", type=_float_list, default=None,
                   help="also report the grid-to-Sobol interpolation curve at these alphas")
    c.set_defaults(func=cmd_convert_check)

    a = sub.add_parser("approx-demo", help="rectangle-cover ReLU approximation of a target")
    a.add_argument("--target", default="quadrant")
    a.add_argument("--eps", type=float, default=0.1)
    a.add_argument("--n", type=int, default=2)
    a.add_argument("--n-samples", type=int, default=100_000)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_approx_demo)

    g = sub.add_parser("gradcheck", help="tape gradients against finite differences")
    g.add_argument("--layer", default="conv")
    g.add_argument("--configs", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--study", action="store_true", help="also print the bump-function study")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .errors import ConfigError, FormatError, InrNetError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        _apply_thread_cap()
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            warnings.showwarning = _show_warning
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InrNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # last resort: report instead of a traceback
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
