"""Command line entry point: ``siagcn {gen,train,eval,gradcheck,inspect}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (including a failed gradient check).
"""

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .errors import ConfigError, DataError, NumericalError, ShapeError, SiaGcnError
from .graph import build_chain, build_hand_skeleton, load_graph
from .model import init_model, ModelConfig
from .objective import LossConfig, format_report, report_json
from .synth import SPLITS, PoseSample, generate_split, read_dataset, read_manifest, write_dataset
from .train import evaluate, evaluate_inputs, gradcheck, load_checkpoint, select_params, train_loop

logger = logging.getLogger("siagcn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_args(p):
    p.add_argument("--config", type=Path, help="INI config file")
    p.add_argument("--preset", default="desk", choices=sorted(C.PRESETS), help="defaults to start from")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")


def _load(args, seed_key=None):
    overrides = list(args.overrides)
    if seed_key and getattr(args, "seed", None) is not None:
        overrides.append(f"{seed_key}={args.seed}")
    return C.load_config(args.config, overrides, args.preset)


def _prepare_out(out, force, owned):
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
        for name in owned:
            target = out / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args):
    cfg = _load(args, "synth.seed")
    synth, corruption = C.synth_config(cfg), C.corruption_config(cfg)
    skeleton = C.model_graph(cfg)
    out = _prepare_out(args.out, args.force, ["manifest.json", "config.ini", *SPLITS])
    splits = {s: generate_split(synth, corruption, s, skeleton) for s in SPLITS}
    write_dataset(out, splits, synth, corruption, skeleton)
    (out / "config.ini").write_text(C.format_config(cfg), encoding="utf-8")
    total = sum(len(d) for d in splits.values())
    if total == 0:
        print("warning: all split counts are zero; wrote the manifest only", file=sys.stderr)
    print(f"wrote {total} samples to {out} ({', '.join(f'{s}={len(d)}' for s, d in splits.items())})")
    print(f"maps {synth.height}x{synth.width}, {skeleton.node_count} nodes, gt sigma {synth.gt_sigma}")
    print("corruption: " + ", ".join(f"{k}={v}" for k, v in cfg["corruption"].items()))
    return 0


def _check_graphs(model_graph, data_graph):
    if model_graph.node_count != data_graph.node_count:
        raise ShapeError(f"dataset has {data_graph.node_count} nodes but the model graph has {model_graph.node_count}")
    if model_graph.digest() != data_graph.digest():
        logger.warning("dataset and model graphs differ in names or bones; node counts agree")


def cmd_train(args):
    cfg = _load(args, "train.seed")
    tcfg = C.train_config(cfg)
    manifest = read_manifest(args.data)
    if args.resume:
        model, state, info = load_checkpoint(args.resume)
        if state is None:
            raise ConfigError(f"{args.resume} has no optimizer state to resume from")
        start, best = info["epoch"] + 1, (info["best_mpck"], info["best_epoch"])
    else:
        graph = C.model_graph(cfg)
        _check_graphs(graph, manifest["graph_obj"])
        synth = manifest["synth"]
        mcfg = C.model_config(cfg, (synth["height"], synth["width"]))
        model, state, start, best = init_model(graph, mcfg, cfg["model"]["seed"]), None, 0, (-1.0, -1)
    _check_graphs(model.graph, manifest["graph_obj"])
    train = read_dataset(args.data, "train", model.graph, require_coords=True)
    val_split = cfg["train"]["val_split"]
    val = None
    if val_split and manifest["counts"].get(val_split, 0) > 0:
        val = read_dataset(args.data, val_split, model.graph, require_coords=True)
    if tuple(train.map_shape) != model.config.map_shape:
        raise ShapeError(f"dataset maps are {tuple(train.map_shape)}, model expects {model.config.map_shape}")

    owned = [] if args.resume else ["config.ini", "train_log.jsonl", "best.ckpt", "last.ckpt"]
    out = _prepare_out(args.out, args.force or bool(args.resume), owned)
    (out / "config.ini").write_text(C.format_config(cfg), encoding="utf-8")
    print(f"training {model.n_parameters()} parameters on {len(train)} samples from epoch {start}")
    result = train_loop(model, train, tcfg, val, state=state, start_epoch=start,
                        log_path=out / "train_log.jsonl", checkpoint_dir=out, best=best)
    print(f"done; best val mPCK {100 * result.best_mpck:.2f} at epoch {result.best_epoch}")
    return 0


def cmd_eval(args):
    cfg = _load(args)
    deltas = cfg["eval"]["deltas"]
    split = args.split or cfg["eval"]["split"]
    model, _, _ = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.data)
    _check_graphs(model.graph, manifest["graph_obj"])
    data = read_dataset(args.data, split, model.graph, require_coords=True)
    if len(data) == 0:
        raise DataError(f"split {split!r} is empty")
    if tuple(data.map_shape) != model.config.map_shape:
        raise ShapeError(f"dataset maps are {tuple(data.map_shape)}, model expects {model.config.map_shape}")
    bs = cfg["eval"]["batch_size"]
    systems = {"input": evaluate_inputs(data, deltas)}
    if args.shared:
        shared, _, _ = load_checkpoint(args.shared)
        _check_graphs(shared.graph, manifest["graph_obj"])
        systems["shared"] = evaluate(shared, data, deltas, batch_size=bs)
    systems["sia"] = evaluate(model, data, deltas, batch_size=bs)
    header = [f"split={split} samples={len(data)} s={data.map_shape[1]}"]
    text = format_report(systems, deltas, header)
    meta = {"split": split, "samples": len(data), "s": int(data.map_shape[1])}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
        (out / "report.json").write_text(report_json(systems, deltas, meta), encoding="utf-8")
        (out / "config.ini").write_text(C.format_config(cfg), encoding="utf-8")
    print(text, end="")
    return 0


def gradcheck_setup(cfg):
    """Random small model and sample described by the ``[gradcheck]`` section."""
    g = cfg["gradcheck"]
    graph = build_chain(g["nodes"])
    size = g["map_size"]
    mcfg = ModelConfig(n_heads=g["n_heads"], n_layers=g["n_layers"], kernel_size=g["kernel_size"],
                       map_shape=(size, size), tied=cfg["model"]["tied"],
                       hidden_activation=cfg["model"]["hidden_activation"],
                       final_activation=cfg["model"]["final_activation"],
                       pointer_mode=cfg["model"]["pointer_mode"], init_noise=g["init_noise"])
    model = init_model(graph, mcfg, g["seed"])
    rng = np.random.Generator(np.random.PCG64(g["seed"] + 1))
    model.pointer.W[...] = 0.5 * rng.standard_normal(model.pointer.W.shape)
    model.pointer.b[...] = 0.5 * rng.standard_normal(model.pointer.b.shape)
    # inputs kept away from zero so no ReLU sits on its kink
    sample = PoseSample(None, rng.uniform(0.0, 1.0, (g["nodes"], size, size)),
                        rng.uniform(0.1, 1.0, (g["nodes"], size, size)))
    return model, sample


def cmd_gradcheck(args):
    cfg = _load(args)
    g = cfg["gradcheck"]
    tol = args.tol if args.tol is not None else g["tolerance"]
    eps = args.eps if args.eps is not None else g["epsilon"]
    model, sample = gradcheck_setup(cfg)
    chosen = select_params(model, args.params)
    count = sum(a.size for n, a in model.parameters() if n in chosen)
    if count > g["max_params"] and args.subsample is None:
        raise ConfigError(f"{count} parameters exceed gradcheck.max_params={g['max_params']}; "
                          "use --subsample N to check a random subset")
    dtype = np.longdouble if args.precision == "extended" else np.float64
    report = gradcheck(model, sample, eps, LossConfig(cfg["loss"]["alpha_schedule"]), params=args.params,
                       max_checks=args.subsample, seed=g["seed"], fd_dtype=dtype)
    print(report.format(tol))
    return 0 if report.passed(tol) else NumericalError.exit_code


def cmd_inspect(args):
    graph = load_graph(args.graph) if args.graph else build_hand_skeleton()
    mats = graph.matrices
    names = graph.node_names
    print(f"nodes ({graph.node_count}):")
    for i, n in enumerate(names):
        print(f"  {i:3d} {n}  in-degree {mats.in_degree[i]}")
    print(f"bones ({len(graph.bones)}):")
    for a, b in graph.bones:
        print(f"  {names[a]} - {names[b]}")
    print(f"directed edges in kernel order ({mats.n_edges}):")
    for e, (s, t) in enumerate(mats.edge_order):
        print(f"  {e:3d} {names[s]} -> {names[t]}")
    if not args.no_matrices:
        with np.printoptions(linewidth=200, threshold=sys.maxsize, precision=3, suppress=True):
            print("B =")
            print(mats.B.astype(int))
            print("A_hat =")
            print(mats.A_hat)
    return 0


def build_parser():
    p = _Parser(prog="siagcn", description="Edge-aware graph convolution for keypoint heatmap refinement")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_config_args(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a refinement model")
    _add_config_args(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--resume", type=Path, help="continue from a checkpoint")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PCK/mPCK report")
    _add_config_args(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--shared", type=Path, help="tied-kernel checkpoint to report alongside")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", choices=SPLITS)
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_config_args(c)
    c.add_argument("--tol", type=float)
    c.add_argument("--eps", type=float)
    c.add_argument("--params", default="all", help="all, kernels, pointer, or a parameter name prefix")
    c.add_argument("--subsample", type=int)
    c.add_argument("--precision", choices=("extended", "double"), default="extended",
                   help="dtype of the finite-difference oracle")
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="print a graph, its edge order and B / A_hat")
    i.add_argument("--graph", type=Path)
    i.add_argument("--no-matrices", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            threadpool_limits(max(1, args.threads))
        return args.func(args)
    except SiaGcnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
