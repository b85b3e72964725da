"""Command-line surface.

Subcommands: synth-data, make-episodes, train, eval, phases, ssim,
collision. Contract violations exit nonzero with a one-line JSON error
record on stderr. Commands that write an output directory echo their
fully-resolved configuration there before doing any work, and reporting
commands render figures next to their delimited output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskmix",
        description="Unsupervised in-context meta-learning lab",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic labeled dataset")
    p.add_argument("--classes", type=int, default=25)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unlabeled", action="store_true",
                   help="strip labels from the manifest")
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-episodes", help="synthesize episodes to a bundle directory")
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--n-query", type=int, default=10)
    p.add_argument("--aug-count", type=int, default=3)
    p.add_argument("--mode", choices=["mix", "augment"], default="mix")
    p.add_argument("--mix-mode", choices=["pixel", "patch"], default="pixel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable; wins over the file)")

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="labeled dataset directory")
    p.add_argument("--n-tasks", type=int, default=500)
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--n-query", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-embeddings", type=int, default=0, metavar="N",
                   help="export extractor- and transformer-space embeddings "
                        "for the first N evaluation episodes")
    p.add_argument("--out", required=True)

    p = sub.add_parser("phases", help="logistic fit and phase boundaries of a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--column", default=None,
                   help="accuracy column to analyse (default: first acc_*)")
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ssim", help="structural similarity of two CMLT images")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--window", type=int, default=11)
    p.add_argument("--sigma", type=float, default=1.5)

    p = sub.add_parser("collision", help="same-class probability of N uniform draws")
    p.add_argument("classes", type=int)
    p.add_argument("per_class", type=int)
    p.add_argument("draws", type=int)

    return parser


def _cap_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print(json.dumps({"error": "ConfigError",
                              "message": "--threads must be >= 1"}), file=sys.stderr)
            return 2
        _cap_threads(args.threads)
    handler = {
        "synth-data": _cmd_synth_data,
        "make-episodes": _cmd_make_episodes,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "phases": _cmd_phases,
        "ssim": _cmd_ssim,
        "collision": _cmd_collision,
    }[args.command]
    try:
        handler(args)
        return 0
    except Exception as exc:  # contract errors become machine-readable output
        record = {"error": type(exc).__name__, "message": str(exc)}
        prov = getattr(exc, "provenance", None)
        if prov is not None:
            record["provenance"] = prov
        print(json.dumps(record), file=sys.stderr)
        return 1


def _cmd_synth_data(args) -> None:
    from pathlib import Path

    from .datasets import gen_synthetic_dataset, save_dataset

    ds = gen_synthetic_dataset(args.classes, args.per_class, size=args.size,
                               channels=args.channels, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_args(args, out / "resolved_config.txt",
               ["classes", "per_class", "size", "channels", "seed", "unlabeled"])
    save_dataset(ds, out, unlabeled=args.unlabeled)
    print(f"{len(ds)} items -> {out}")


def _cmd_make_episodes(args) -> None:
    import json as _json
    from pathlib import Path

    from .container import write_bundle
    from .datasets import load_dataset
    from .episodes import MixConfig, build_episode, build_episode_augment_only
    from .rng import derive

    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_args(args, out / "resolved_config.txt",
               ["data", "count", "n_way", "k_shot", "n_query", "aug_count",
                "mode", "mix_mode", "seed"])
    records = []
    for t in range(args.count):
        seed = derive(args.seed, "episode", t)
        if args.mode == "augment":
            ep = build_episode_augment_only(ds, args.n_way, args.k_shot,
                                            args.n_query, aug_count=args.aug_count,
                                            seed=seed)
        else:
            ep = build_episode(ds, args.n_way, args.k_shot, args.n_query,
                               mix=MixConfig(mode=args.mix_mode),
                               aug_count=args.aug_count, seed=seed)
        fname = f"episode_{t:04d}.cmlt"
        write_bundle(out / fname, {
            "support_images": ep.support_images,
            "support_labels": ep.support_labels.astype(float),
            "query_images": ep.query_images,
            "query_labels": ep.query_labels.astype(float),
        }, meta={"provenance": ep.provenance})
        records.append({"file": fname, "n_way": ep.n_way, "k_shot": ep.k_shot,
                        "n_query": ep.n_query})
    (out / "episodes.json").write_text(_json.dumps(
        {"dataset": ds.id, "episodes": records}, indent=1))
    print(f"{args.count} episodes -> {out}")


def _cmd_train(args) -> None:
    import json as _json
    from pathlib import Path

    from . import config as cfgmod
    from .datasets import load_dataset
    from .model import load_checkpoint
    from .plots import plot_training_curves
    from .train import MetricsLog, train

    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    file_values = cfgmod.parse_config_file(args.config) if args.config else {}
    resolved = cfgmod.resolve(file_values, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.echo(resolved, out / "resolved_config.txt")
    train_cfg = cfgmod.to_train_config(resolved)
    if not resolved["train_data"]:
        raise SystemExit("config needs train_data")
    train_sets = [load_dataset(p) for p in resolved["train_data"]]
    val_sets = [load_dataset(p) for p in resolved["val_data"]]

    model = adam = None
    start_epoch = 0
    model_cfg = cfgmod.to_model_config(resolved)
    if args.resume:
        model, header, adam = load_checkpoint(args.resume)
        start_epoch = header.get("meta", {}).get("epoch", 0)
        model_cfg = model.cfg

    t0 = time.monotonic()

    def log_fn(row, elapsed):
        parts = [f"epoch {row['epoch']:3d}", f"loss {row['loss']:.4f}",
                 f"lr {row['lr']:.2e}", f"{elapsed:.1f}s"]
        parts += [f"{k}={row[k]:.3f}" for k in row if k.startswith("acc_")]
        print("  ".join(parts), flush=True)

    model, metrics = train(train_cfg, train_sets, val_sets, out_dir=out,
                           model=model, model_cfg=model_cfg, adam=adam,
                           start_epoch=start_epoch, log_fn=log_fn)
    (out / "run_info.json").write_text(_json.dumps({
        "wall_clock_total": time.monotonic() - t0,
        "wall_clock_per_epoch": metrics.wall_clock,
    }, indent=1))
    if metrics.rows:
        plot_training_curves(MetricsLog.read_csv(out / "metrics.csv"),
                             out / "metrics.svg")
    print(f"final checkpoint -> {out / 'checkpoint_final.cmlt'}")


def _cmd_eval(args) -> None:
    import json as _json
    from pathlib import Path

    import numpy as np

    from .container import write_bundle
    from .datasets import load_dataset
    from .episodes import build_test_episode
    from .model import episode_embeddings, forward, load_checkpoint
    from .rng import derive
    from .train import evaluate

    model, _, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_args(args, out / "resolved_config.txt",
               ["checkpoint", "data", "n_tasks", "n_way", "k_shot", "n_query",
                "seed", "dump_embeddings"])
    acc, se = evaluate(model, ds, n_tasks=args.n_tasks, n_way=args.n_way,
                       k_shot=args.k_shot, n_query=args.n_query, seed=args.seed)
    result = {"dataset": ds.id, "n_tasks": args.n_tasks, "n_way": args.n_way,
              "k_shot": args.k_shot, "n_query": args.n_query, "seed": args.seed,
              "mean_accuracy": acc, "std_error": se}
    (out / "eval.json").write_text(_json.dumps(result, indent=1))
    for t in range(args.dump_embeddings):
        episode = build_test_episode(ds, args.n_way, args.k_shot, args.n_query,
                                     seed=derive(args.seed, "eval-task", t))
        sup_feat, qr_feat = episode_embeddings(model, episode)
        _, tokens = forward(model, episode, embeddings=(sup_feat, qr_feat),
                            return_tokens=True)
        ctx = tokens.data  # (Q, NK+1, d_model)
        write_bundle(out / f"embeddings_{t:04d}.cmlt", {
            "support_features": sup_feat,
            "query_features": qr_feat,
            "support_context": ctx[0, :-1, :],
            "query_context": ctx[:, -1, :],
            "support_labels": episode.support_labels.astype(float),
            "query_labels": episode.query_labels.astype(float),
        }, meta={"episode_seed": derive(args.seed, "eval-task", t)})
    print(f"accuracy {acc:.4f} +/- {se:.4f} over {args.n_tasks} tasks")


def _cmd_phases(args) -> None:
    import json as _json
    from pathlib import Path

    from .analysis import fit_logistic, phase_boundaries
    from .errors import ContractError
    from .plots import plot_phase_fit
    from .train import MetricsLog, relative_accuracy

    cols = MetricsLog.read_csv(args.metrics)
    column = args.column
    if column is None:
        acc_cols = [c for c in cols if c.startswith("acc_")]
        if not acc_cols:
            raise ContractError(f"{args.metrics} has no acc_* column")
        column = acc_cols[0]
    if column not in cols:
        raise ContractError(f"{args.metrics} has no column {column!r}")
    xs = cols["epoch"] + 1.0  # epochs counted from 1
    ys = relative_accuracy(cols[column])
    fit = fit_logistic(xs, ys)
    bounds = phase_boundaries(fit, fraction=args.fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "column": column, "a": fit.a, "b": fit.b, "c": fit.c, "d": fit.d,
        "x0": fit.x0, "residual": fit.residual,
        "fraction": bounds.fraction,
        "learn_x": bounds.learn_x, "gen_x": bounds.gen_x,
        "learn_start": bounds.learn_epoch, "gen_start": bounds.gen_epoch,
    }
    (out / "phases.json").write_text(_json.dumps(payload, indent=1))
    plot_phase_fit(xs, ys, fit, bounds, out / "phases.svg")
    print(_json.dumps(payload))


def _cmd_ssim(args) -> None:
    from .container import read_tensor
    from .ssim import SsimConfig, ssim

    cfg = SsimConfig(window=args.window, sigma=args.sigma)
    value = ssim(read_tensor(args.a), read_tensor(args.b), cfg)
    print(f"{value:.12g},{cfg.window},{cfg.sigma},{cfg.c1},{cfg.c2}")


def _cmd_collision(args) -> None:
    from .episodes import collision_probability

    print(f"{collision_probability(args.classes, args.per_class, args.draws):.6g}")


def _echo_args(args, path, keys) -> None:
    lines = [f"{key} = {getattr(args, key)}" for key in keys]
    path.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    sys.exit(main())
