"""Command-line front end: ``graybox {generate,train,eval,export-mu}``.

Configuration precedence is flags > ``--config`` JSON file > built-in
defaults. The JSON file may hold the sections ``dynamics``, ``gen`` and
``train`` (field names as in the config dataclasses) plus ``hidden``.
Every command writes ``manifest.json`` into its output directory before
doing any work.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint import MASK_MODES, simulate
from .datagen import (GenConfig, SPLITS, generate_corpus, load_corpus, save_corpus,
                      write_stats_csv)
from .dynamics import BioreactorConfig, fmt, haldane_mu
from .errors import BlowupError, GrayboxError
from .experiments import desk_init, loss_ranked_samples
from .nn import InitSpec, GroupInit, load_checkpoint, mlp_forward, save_checkpoint
from .training import (TrainConfig, TrainingAborted, evaluate, grid_axes, mu_surface_error,
                       train_two_stage, visited_cells, visited_region)

CORPUS_FILE = "corpus.gbx"
STATS_FILE = "corpus_stats.csv"


def _load_config_file(path):
    if path is None:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    unknown = set(data) - {"dynamics", "gen", "train", "hidden", "init"}
    if unknown:
        raise GrayboxError(f"unknown config sections: {sorted(unknown)}")
    return data


def _build(cls, section, overrides):
    names = {f.name for f in fields(cls)}
    bad = set(section) - names
    if bad:
        raise GrayboxError(f"unknown {cls.__name__} fields: {sorted(bad)}")
    values = dict(section)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)


def _write_manifest(out: Path, command, config, corpus_seed):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "argv": sys.argv[1:], "config": config,
                "corpus_seed": corpus_seed, "version": __version__,
                "output_dir": str(out)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_generate(args) -> int:
    conf = _load_config_file(args.config)
    dyn = _build(BioreactorConfig, conf.get("dynamics", {}),
                 {"n_steps": args.steps, "dt": args.dt})
    sizes = {} if args.samples is None else {
        "n_train": args.samples, "n_validation": args.samples, "n_test": args.samples}
    gen = _build(GenConfig, conf.get("gen", {}), sizes)
    if args.coarsen_check is not None and dyn.n_steps % args.coarsen_check:
        print(f"error: coarsening factor {args.coarsen_check} does not divide "
              f"steps={dyn.n_steps}", file=sys.stderr)
        return 2
    out = Path(args.out)
    _write_manifest(out, "generate", {"dynamics": asdict(dyn), "gen": asdict(gen)}, args.seed)
    corpus = generate_corpus(args.seed, dyn, gen)
    save_corpus(corpus, out / CORPUS_FILE)
    write_stats_csv(corpus.test, out / STATS_FILE)
    sizes = " ".join(f"{s}={len(corpus.split(s))}" for s in SPLITS)
    print(f"{sizes} steps={dyn.n_steps} rejections={corpus.rejections}")
    return 0


def _init_spec(conf, seed):
    if "init" not in conf:
        return desk_init(seed)
    groups = {k: GroupInit(**v) for k, v in conf["init"].items() if k in ("w1", "b1", "w2", "b2")}
    extra = {k: v for k, v in conf["init"].items() if k in ("seed", "clamp")}
    extra.setdefault("seed", seed)
    return InitSpec(**groups, **extra)


def cmd_train(args) -> int:
    conf = _load_config_file(args.config)
    corpus = load_corpus(args.corpus)
    overrides = {"learning_rate": args.lr, "batch_size": args.batch_size,
                 "epochs_max": args.epochs_max, "seed": args.seed,
                 "stage1_coarsen_factor": args.coarsen, "mask_mode": args.mask}
    if args.clip_norm is not None:
        overrides["clip_norm"] = None if args.clip_norm <= 0 else args.clip_norm
    if args.stage2_only:
        overrides["two_stage"] = False
    tcfg = _build(TrainConfig, conf.get("train", {}), overrides)
    hidden = args.hidden or conf.get("hidden", 16)
    init = _init_spec(conf, tcfg.seed)
    out = Path(args.out)
    _write_manifest(out, "train", {"train": asdict(tcfg), "hidden": hidden,
                                   "init": asdict(init), "corpus": str(args.corpus),
                                   "init_checkpoint": args.init_checkpoint,
                                   "dynamics": asdict(corpus.cfg), "gen": asdict(corpus.gen)},
                    corpus.seed)
    start = load_checkpoint(args.init_checkpoint) if args.init_checkpoint else init

    log = open(out / "train_log.csv", "w", newline="")
    writer = csv.writer(log)
    writer.writerow(["stage", "epoch", "train_loss", "train_ratio", "val_loss", "val_ratio",
                     "wall_seconds"])

    def on_epoch(stage, epoch, p, rec, improved_val):
        writer.writerow([stage, epoch, fmt(rec.train.per_sample_per_step),
                         fmt(rec.train.loss_ratio), fmt(rec.val.per_sample_per_step),
                         fmt(rec.val.loss_ratio), "%.3f" % rec.wall_seconds])
        if improved_val:
            save_checkpoint(p, out / f"stage{stage}_best_val.ckpt")

    try:
        with log:
            params, history = train_two_stage(corpus, tcfg, start, hidden=hidden,
                                              callback=on_epoch)
    except TrainingAborted as exc:
        exc.history.write_csv(out / "history.csv")
        _write_terminations(out, exc.history)
        print(f"error: training aborted on blowup: {exc}", file=sys.stderr)
        return 3
    history.write_csv(out / "history.csv")
    _write_terminations(out, history)
    save_checkpoint(params, out / "final.ckpt")
    for stage in sorted(history.terminations):
        print(f"stage {stage}: {history.terminations[stage]}, final loss ratio "
              f"{history.final(stage).train.loss_ratio:.4g}")
    return 0


def _write_terminations(out, history):
    lines = history.termination_lines()
    (out / "termination.txt").write_text("".join(line + "\n" for line in lines))


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    _write_manifest(out, "eval", {"checkpoint": str(args.checkpoint),
                                  "corpus": str(args.corpus)}, corpus.seed)
    split = corpus.test
    picks, ratios = loss_ranked_samples(params, split, corpus.cfg)
    with open(out / "per_sample_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "loss_ratio"])
        for i, r in enumerate(ratios):
            w.writerow([i, fmt(r)])
    for label, i in picks.items():
        states, _ = simulate(params, split.x0[i:i + 1], split.s_in[i:i + 1], corpus.cfg)
        _write_comparison(out / f"trajectory_{label}.csv", states[0], split.truth[i],
                          split.s_in[i], corpus.cfg.dt)
    report = evaluate(params, split, corpus.cfg)
    print(f"test loss ratio {report.loss_ratio:.6g} "
          + " ".join(f"{k}={v}" for k, v in picks.items()))
    return 0


def _write_comparison(path, pred, truth, s_in, dt):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "X_pred", "X_true", "S_pred", "S_true", "V_pred", "V_true", "S_in"])
        n = len(s_in)
        for t in range(n + 1):
            w.writerow([fmt(t * dt), fmt(pred[t, 0]), fmt(truth[t, 0]), fmt(pred[t, 1]),
                        fmt(truth[t, 1]), fmt(pred[t, 2]), fmt(truth[t, 2]),
                        fmt(s_in[t]) if t < n else ""])


def cmd_export_mu(args) -> int:
    params = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    _write_manifest(out, "export-mu", {"checkpoint": str(args.checkpoint),
                                       "corpus": str(args.corpus),
                                       "resolution": args.resolution}, corpus.seed)
    xs, ss = grid_axes(corpus.test, args.resolution)
    hit = visited_cells(corpus.test, args.resolution)
    region = visited_region(corpus.test, args.resolution)
    rmse = mu_surface_error(params, corpus.cfg, region)
    with open(out / "mu_grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["X", "S", "mu_hat", "mu_g", "difference", "visited"])
        for i, x in enumerate(xs):
            mu_hat = mlp_forward(params, np.full(ss.shape, x), ss)
            mu_g = haldane_mu(ss, corpus.cfg)
            for j, s in enumerate(ss):
                w.writerow([fmt(x), fmt(s), fmt(mu_hat[j]), fmt(mu_g[j]),
                            fmt(mu_hat[j] - mu_g[j]), int(hit[i, j])])
    (out / "mu_summary.txt").write_text(
        f"rmse={fmt(rmse)}\nregion_points={len(region)}\nmu_star={fmt(corpus.cfg.mu_star)}\n")
    print(f"mu RMSE over {len(region)} visited grid points: {rmse:.6g}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="graybox", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a seeded corpus and its statistics")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, help="samples per split (default 1024)")
    g.add_argument("--steps", type=int, help="time steps per series (default 2048)")
    g.add_argument("--dt", type=float)
    g.add_argument("--coarsen-check", type=int, help="fail unless this factor divides steps")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the rate network on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--mask", choices=MASK_MODES)
    t.add_argument("--coarsen", type=int)
    t.add_argument("--epochs-max", type=int)
    t.add_argument("--clip-norm", type=float, help="<= 0 disables clipping")
    t.add_argument("--init-checkpoint")
    t.add_argument("--stage2-only", action="store_true")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-sample test losses and trajectory exports")
    e.add_argument("--checkpoint", "--init-checkpoint", dest="checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("export-mu", help="learned vs true rate over the visited region")
    m.add_argument("--checkpoint", "--init-checkpoint", dest="checkpoint", required=True)
    m.add_argument("--corpus", required=True)
    m.add_argument("--resolution", type=int, default=64)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_export_mu)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GrayboxError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
