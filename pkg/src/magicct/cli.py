"""Command-line harness.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime error
(including training divergence), 4 I/O or file-format error.  Failures
print exactly one line to stderr::

    magicct: error code=2 kind=config message="network.patch_step: step 9 exceeds patch size 6; ..."
"""
from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from pathlib import Path

from . import experiment
from .config import describe_defaults, load_config, validate_config
from .data import load_image
from .errors import ConfigError, FormatError, MagicError

log = logging.getLogger("magicct")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", type=Path, help="TOML experiment configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration key (repeatable)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out-dir", type=Path, default=Path("magicct-run"), help="run directory")
    p.add_argument("--threads", type=int, help="cap BLAS and numba threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="magicct", description="Low-dose CT reconstruction with graph-augmented unrolled networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="phantoms -> ground truth, noisy sinograms and FBP per dose tier")
    _common(p)

    p = sub.add_parser("train", help="train one network (supervised or semi-supervised per config)")
    _common(p)
    p.add_argument("--data", type=Path, help="simulated dataset directory (default: simulate into the run dir)")

    p = sub.add_parser("reconstruct", help="checkpoint + sinogram -> image")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sinogram", type=Path, required=True)
    p.add_argument("--output", type=Path, help="output raw image (default: <out-dir>/reconstruction.raw)")

    p = sub.add_parser("evaluate", help="metrics CSV and difference images")
    _common(p)
    p.add_argument("--data", type=Path, help="simulated dataset directory")
    p.add_argument("--checkpoint", action="append", default=[], metavar="TAG=PATH",
                   help="network to score alongside FBP (repeatable)")
    p.add_argument("--pred", type=Path, action="append", default=[], help="raw prediction image (repeatable)")
    p.add_argument("--ref", type=Path, action="append", default=[], help="raw reference image, paired with --pred")

    p = sub.add_parser("compare", help="train MAGIC and LEARN on one dataset and score both against FBP")
    _common(p)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("sweep", help="one MAGIC network per value of sweep.parameter")
    _common(p)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("validate", help="check a configuration and list the applied defaults")
    _common(p)

    p = sub.add_parser("graph", help="export the patch graph of a raw image as an edge list")
    _common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--output", type=Path, help="edge CSV (default: <out-dir>/edges.csv)")
    return parser


def _setup_run(args, cfg):
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml())
    (out / "command.txt").write_text(shlex.join(["magicct", *args.argv]) + "\n")
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("magicct").addHandler(handler)
    for line in describe_defaults(cfg):
        log.info(line)
    return handler


def _threads(n):
    if n is None:
        return None
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    import numba
    from threadpoolctl import threadpool_limits

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return threadpool_limits(n)


def _cmd_simulate(args, cfg):
    manifest = experiment.simulate_dataset(cfg, args.out_dir / "data")
    print(manifest)


def _cmd_train(args, cfg):
    data = args.data
    if data is None:
        data = args.out_dir / "data"
        experiment.simulate_dataset(cfg, data)
    experiment.train_from_config(cfg, data, args.out_dir, name="model")
    print(args.out_dir / "model.npz")


def _cmd_reconstruct(args, cfg):
    if not args.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} does not exist")
    out = args.output or args.out_dir / "reconstruction.raw"
    experiment.reconstruct_file(args.checkpoint, args.sinogram, out, cfg["fbp.filter"])
    print(out)


def _cmd_evaluate(args, cfg):
    if args.pred or args.ref:
        if len(args.pred) != len(args.ref):
            raise UsageError("--pred and --ref must be given in pairs")
        # each prediction stands in for the FBP slot of a test item
        items = [experiment.Item(p.stem, "test", False, load_image(r).astype(float), None,
                                 load_image(p).astype(float))
                 for p, r in zip(args.pred, args.ref)]
        rows = experiment.evaluate_methods(cfg, items, {}, args.out_dir)
        for row in rows:
            row["method"] = "pred"
    else:
        if args.data is None:
            raise UsageError("evaluate needs --data or --pred/--ref pairs")
        methods = {}
        from .unrolled import load_checkpoint

        for spec in args.checkpoint:
            tag, sep, path = spec.partition("=")
            if not sep:
                raise UsageError(f"--checkpoint expects TAG=PATH, got {spec!r}")
            if not Path(path).exists():
                raise FileNotFoundError(f"checkpoint {path} does not exist")
            methods[tag] = load_checkpoint(path)
        items, _ = experiment.load_items(args.data, cfg["dose.train_tier"])
        rows = experiment.evaluate_methods(cfg, items, methods, args.out_dir)
    experiment.write_metrics(rows, args.out_dir / "metrics.csv")
    experiment.write_summary(experiment.summarize(rows), args.out_dir / "summary.csv")
    print(args.out_dir / "metrics.csv")


def _cmd_compare(args, cfg):
    summary = experiment.compare(cfg, args.out_dir, args.data)
    print(json.dumps(summary, indent=2))


def _cmd_sweep(args, cfg):
    experiment.sweep(cfg, args.out_dir, args.data)
    print((args.out_dir / "sweep.csv").read_text(), end="")


def _cmd_graph(args, cfg):
    from .patchgraph import build_graph, degree_histogram, export_edges, extract_patches

    img = load_image(args.image).astype(float)
    X, _ = extract_patches(img, cfg["network.patch_size"], i0=cfg["network.patch_step"])
    g = build_graph(X, cfg["network.k"])
    out = args.output or args.out_dir / "edges.csv"
    n = export_edges(g, out)
    print(json.dumps({"nodes": g.n_nodes, "edges": n, "sigma": g.sigma,
                      "degree_histogram": degree_histogram(g)}))


COMMANDS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "reconstruct": _cmd_reconstruct,
    "evaluate": _cmd_evaluate,
    "compare": _cmd_compare,
    "sweep": _cmd_sweep,
    "graph": _cmd_graph,
}


def _fail(code, kind, exc) -> int:
    msg = " ".join(str(exc).split())
    print(f'magicct: error code={code} kind={kind} message="{msg}"', file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_CONFIG, "usage", exc)
    args.argv = argv
    if not logging.getLogger("magicct").handlers:
        console = logging.StreamHandler(sys.stderr)
        console.setFormatter(logging.Formatter("%(message)s"))
        logging.getLogger("magicct").addHandler(console)
    logging.getLogger("magicct").setLevel(logging.INFO)
    try:
        if args.command == "validate":
            ok, lines = validate_config(args.config, args.overrides)
            for line in lines:
                print(line)
            return EXIT_OK if ok else EXIT_CONFIG
        cfg = load_config(args.config, args.overrides, args.seed)
        limits = _threads(args.threads)
        handler = None
        try:
            handler = _setup_run(args, cfg)
            COMMANDS[args.command](args, cfg)
        finally:
            if handler is not None:
                logging.getLogger("magicct").removeHandler(handler)
                handler.close()
            if limits is not None:
                limits.restore_original_limits()
    except UsageError as exc:
        return _fail(EXIT_CONFIG, "usage", exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (OSError, FormatError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except MagicError as exc:
        return _fail(EXIT_RUNTIME, "runtime", exc)
    return EXIT_OK
