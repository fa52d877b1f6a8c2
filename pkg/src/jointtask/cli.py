"""Command line entry point: gen-data, train, infer, eval, gradcheck, sample-diag.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  The output
directory defaults to ``$JOINTTASK_OUT_DIR/<command>`` (or ``out/<command>``);
an explicit ``--out`` wins.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

OUT_ENV = "JOINTTASK_OUT_DIR"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("jointtask")


class UsageError(Exception):
    pass


def _init_std(v: str):
    try:
        return float(v)
    except ValueError:
        if v != "he":
            raise argparse.ArgumentTypeError("init-std must be a number or 'he'")
        return v


CHOICES = {"latent_mode": ("mcmc", "enumerate", "zero"), "alternation": ("epoch", "batch"),
           "profile": ("desk", "paper"), "dtype": ("float32", "float64")}


def _add_train_flags(p: argparse.ArgumentParser):
    from .trainer import TrainConfig

    g = p.add_argument_group("training config (flags override --config)")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if isinstance(default, bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=argparse.SUPPRESS)
        elif f.name == "init_std":
            g.add_argument(flag, dest=f.name, type=_init_std, default=argparse.SUPPRESS)
        else:
            g.add_argument(flag, dest=f.name, type=type(default), default=argparse.SUPPRESS,
                           choices=CHOICES.get(f.name),
                           metavar=None if f.name in CHOICES else f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; 1 (default) is the bit-reproducible mode")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="jointtask", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")
    p.add_argument("--n", type=int, default=500, help="training images")
    p.add_argument("--n-test", type=int, default=200, help="test images (0: single directory)")
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("train", parents=[common], help="EM training of both networks")
    p.add_argument("data", type=Path, help="dataset directory (images/, masks/)")
    p.add_argument("--test", type=Path, help="optional test set evaluated after training")
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    p.add_argument("--net-config", type=Path, help="JSON network configs (overrides profile)")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.add_argument("--cache-dir", type=Path, help="superpixel cache (default <out>/superpixels)")
    p.add_argument("--chain-log", action="store_true", help="write every chain move to chains.csv")
    p.add_argument("--no-plots", action="store_true")
    _add_train_flags(p)

    p = sub.add_parser("infer", parents=[common], help="predict box + mask for images")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("input", type=Path, help="PNG image or directory of PNG images")
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("data", type=Path)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--configs", type=int, default=20, help="random cases per layer kind")
    p.add_argument("--corrupt", choices=("conv", "relu", "rn", "maxpool", "fc", "logistic"),
                   help=argparse.SUPPRESS)

    p = sub.add_parser("sample-diag", parents=[common], help="chain vs enumeration diagnostics")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("data", type=Path)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--K", type=int, default=20, dest="K")
    p.add_argument("--mode", choices=("chain", "enumerate"), default="chain")
    p.add_argument("--cache-dir", type=Path)
    p.add_argument("--no-plots", action="store_true")
    return parser


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "out")) / args.command


def _seed(args) -> int:
    return getattr(args, "seed", 0)


def _need_dir(path: Path, what: str):
    if not path.is_dir():
        raise UsageError(f"{what} {path} does not exist or is not a directory")


def _manifest(out: Path, args, config: dict, data: Path | None, extra: dict | None = None,
              seed: int | None = None):
    from . import __version__
    from .dataset import dataset_hash

    m = {"command": args.command, "config": config, "seed": _seed(args) if seed is None else seed,
         "threads": args.threads, "dataset": str(data) if data else None,
         "dataset_hash": dataset_hash(data) if data else None, "code_version": __version__,
         "argv": args.argv, "started": time.strftime("%Y-%m-%dT%H:%M:%S"), **(extra or {})}
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(m, indent=2, default=str))
    return m


def _finish_manifest(out: Path, **fields):
    path = out / "manifest.json"
    m = json.loads(path.read_text())
    m.update(fields, finished=time.strftime("%Y-%m-%dT%H:%M:%S"))
    path.write_text(json.dumps(m, indent=2, default=str))


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .dataset import SyntheticSpec, write_synthetic

    if args.n < 1 or args.n_test < 0:
        raise UsageError("--n must be >= 1 and --n-test >= 0")
    out = _out_dir(args)
    dirs = write_synthetic(out, args.n, _seed(args), args.n_test, SyntheticSpec(size=args.size))
    for k, v in dirs.items():
        print(f"{k}: {v}")
    return 0


def _train_config(args):
    from .trainer import TrainConfig

    cfg = {}
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file {args.config} not found")
        try:
            cfg.update(json.loads(args.config.read_text()))
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {args.config} is not valid JSON: {e}") from e
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    cfg.update({k: v for k, v in vars(args).items() if k in names and k != "seed"})
    if hasattr(args, "seed"):
        cfg["seed"] = args.seed
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad training config: {e}") from e


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .metrics import evaluate, write_results
    from .networks import load_network_configs, profile_configs
    from .plotting import plot_costs, plot_jaccard
    from .trainer import em_train

    _need_dir(args.data, "dataset")
    if args.test is not None:
        _need_dir(args.test, "test set")
    config = _train_config(args)
    nets = (load_network_configs(args.net_config) if args.net_config
            else profile_configs(config.profile))
    frame = float(nets[0].input_shape[0])
    out = _out_dir(args)
    samples, warnings = load_dataset(args.data, frame)
    _manifest(out, args, config.to_dict(), args.data,
              {"networks": [n.to_dict() for n in nets], "warnings": warnings}, seed=config.seed)
    chain_log = [] if args.chain_log else None
    res = em_train(samples, config, out, nets, cache_dir=args.cache_dir or out / "superpixels",
                   resume=args.resume, reproducible=args.threads == 1, chain_log=chain_log)
    if chain_log:
        _write_rows(out / "chains.csv", chain_log)
    if not args.no_plots:
        plot_costs(res.history, out / "costs.png", f"training cost ({config.latent_mode})")
    last = res.history[-1]
    print(f"epochs {last['epoch']} total {last['total']:.6f} loc {last['loc_term']:.6f} "
          f"seg {last['seg_term']:.6f}" + (" (early stop)" if res.stopped_early else ""))
    extra = {}
    if args.test is not None:
        test, _ = load_dataset(args.test, frame)
        ev = evaluate(test, res.model)
        write_results(ev, out / "test_eval")
        if not args.no_plots:
            plot_jaccard(ev.rows, out / "test_eval" / "jaccard.png")
        print(f"test precision {ev.precision:.4f} jaccard {ev.jaccard:.4f}")
        extra = {"test_precision": ev.precision, "test_jaccard": ev.jaccard}
    _finish_manifest(out, final_cost=last["total"], epochs_run=last["epoch"], **extra)
    return 0


def _load_model(path: Path):
    from .networks import JointModel

    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    return JointModel.load(path)


def cmd_infer(args) -> int:
    import numpy as np

    from .dataset import read_image, write_mask
    from .networks import box_to_pixels, extract

    model, _, _ = _load_model(args.checkpoint)
    if args.input.is_dir():
        inputs = sorted(p for p in args.input.iterdir() if p.suffix.lower() == ".png")
        if not inputs:
            raise UsageError(f"no PNG images in {args.input}")
    elif args.input.is_file():
        inputs = [args.input]
    else:
        raise UsageError(f"input {args.input} not found")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    times = []
    for path in inputs:
        image = read_image(path)
        t0 = time.perf_counter()
        ex = extract(image, model, args.threshold)
        times.append(time.perf_counter() - t0)
        h, w = image.shape[:2]
        px = box_to_pixels(ex.box, model.frame, h, w)
        write_mask(out / f"{path.stem}.png", ex.full_mask)
        # x1 y1 x2 y2 in source pixel coordinates
        (out / f"{path.stem}.txt").write_text(" ".join(f"{v:.4f}" for v in px) + "\n")
        print(f"{path.name}: box {np.round(px, 2).tolist()} {times[-1] * 1000:.2f} ms"
              + (" (expanded)" if ex.expanded else ""))
    print(f"mean time per image: {1000 * sum(times) / len(times):.3f} ms")
    return 0


def cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .metrics import evaluate, write_results
    from .plotting import plot_jaccard

    _need_dir(args.data, "dataset")
    model, meta, _ = _load_model(args.checkpoint)
    samples, warnings = load_dataset(args.data, model.frame)
    out = _out_dir(args)
    _manifest(out, args, {"checkpoint": str(args.checkpoint), "threshold": args.threshold,
                          "train_config": meta.get("config")}, args.data, {"warnings": warnings})
    res = evaluate(samples, model, args.threshold)
    csv_path, summary = write_results(res, out)
    if not args.no_plots:
        plot_jaccard(res.rows, out / "jaccard.png")
    print(summary.read_text(), end="")
    _finish_manifest(out, precision=res.precision, jaccard=res.jaccard,
                     mean_time_ms=res.mean_time_ms)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    if args.configs < 1:
        raise UsageError("--configs must be >= 1")
    t0 = time.perf_counter()
    report = run_gradcheck(args.configs, _seed(args), corrupt=args.corrupt)
    bad = [k for k, v in report.items() if not v < TOLERANCE]
    for kind, err in report.items():
        print(f"{kind:9s} max_rel_err {err:.3e} {'FAIL' if kind in bad else 'ok'}")
    print(f"{args.configs} configurations per kind, {time.perf_counter() - t0:.1f} s")
    if bad:
        print("gradient check failed for: " + ", ".join(bad), file=sys.stderr)
        return 1
    return 0


def _write_rows(path: Path, rows: list[dict]):
    import csv

    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_sample_diag(args) -> int:
    import numpy as np

    from .dataset import load_dataset
    from .latent_sampler import (LATTICE, LatentProblem, ProposalStats, enumerate_best,
                                 percentile_of, run_chain)
    from .plotting import plot_percentiles
    from .trainer import STREAM_SAMPLER, TrainConfig, compute_boundary_tables, substream

    _need_dir(args.data, "dataset")
    if args.K < 1 or args.samples < 1:
        raise UsageError("--K and --samples must be >= 1")
    model, meta, _ = _load_model(args.checkpoint)
    cfg = TrainConfig.from_dict(meta["config"]) if "config" in meta else TrainConfig()
    samples, _ = load_dataset(args.data, model.frame)
    samples = samples[:args.samples]
    out = _out_dir(args)
    _manifest(out, args, {"checkpoint": str(args.checkpoint), "K": args.K, "mode": args.mode,
                          "samples": len(samples)}, args.data)
    pc = compute_boundary_tables(samples, cfg, args.cache_dir or out / "superpixels")
    eps_pc = 1.0 / cfg.perimeter_samples
    traces, tables, summary = [], [], []
    chain_s = enum_s = 0.0
    for i, s in enumerate(samples):
        stats = ProposalStats(sigma0=cfg.sigma0)
        t0 = time.perf_counter()
        ref = LatentProblem(s, model, pc[i], stats, eps_pc)
        _, k_best, values = enumerate_best(ref)
        enum_s += time.perf_counter() - t0
        if args.mode == "enumerate":
            best, best_lp = k_best, float(values[k_best])
        else:
            t0 = time.perf_counter()
            prob = LatentProblem(s, model, pc[i], stats, eps_pc)
            res = run_chain(prob, args.K, substream(_seed(args), STREAM_SAMPLER, 0, i))
            chain_s += time.perf_counter() - t0
            best, best_lp = res.best_index, res.best_log_pi
            for r in res.trace:
                dl = LATTICE[r["proposal"]]
                traces.append({"sample": s.id, "step": r["step"],
                               "proposal": " ".join(f"{v:g}" for v in dl),
                               "proposal_log_pi": r["proposal_log_pi"],
                               "accepted": int(r["accepted"]),
                               "current_log_pi": r["current_log_pi"],
                               "best_log_pi": r["best_log_pi"]})
        for k, v in enumerate(values):
            tables.append({"sample": s.id, "index": k,
                           **{f"d{j}": LATTICE[k, j] for j in range(4)}, "log_pi": v})
        summary.append({"sample": s.id, "best_index": best, "best_log_pi": best_lp,
                        "enum_max_log_pi": float(values.max()),
                        "percentile": percentile_of(best_lp, values)})
    _write_rows(out / "traces.csv", traces)
    _write_rows(out / "enumeration.csv", tables)
    _write_rows(out / "percentiles.csv", summary)
    pct = np.array([r["percentile"] for r in summary])
    if not args.no_plots:
        plot_percentiles(pct, out / "percentiles.png")
    print(f"samples {len(samples)} median percentile {np.median(pct):.1f} "
          f">=90th: {np.mean(pct >= 90) * 100:.1f}%")
    if args.mode == "chain" and chain_s > 0:
        print(f"enumeration / chain runtime ratio {enum_s / chain_s:.1f} (K={args.K})")
    _finish_manifest(out, median_percentile=float(np.median(pct)),
                     fraction_ge_90=float(np.mean(pct >= 90)))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "sample-diag": cmd_sample_diag}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    for var in THREAD_VARS:
        # only effective before numpy is first imported (i.e. from the console script)
        os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        print(f"jointtask {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        from .dataset import DatasetError
        from .tensor_core import ConfigError

        if isinstance(e, (DatasetError, ConfigError, ValueError, OSError, RuntimeError)):
            print(f"jointtask {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
            return 1
        raise


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
