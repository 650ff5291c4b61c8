"""Command-line entry point: data generation, training, evaluation,
navigation, benchmarking, and plot-ready exports, all driven by one
sectioned YAML config with flag overrides.

Exit codes: 0 success, 2 usage error, 3 data/file error, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, augment, evalharness, model, mppi, plots, trainer, worldsim
from .config import RunConfig
from .dataio import (FileFormatError, load_checkpoint, load_dataset,
                     save_checkpoint, save_dataset, write_blob)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.default()
    for kv in args.set or []:
        if "=" not in kv:
            raise DataError(f"--set needs key=value, got {kv!r}")
        key, val = kv.split("=", 1)
        cfg.override(key, val)
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    if args.output:
        cfg.data["output_root"] = args.output
    else:
        env = os.environ.get("PIAUG_OUTPUT_ROOT")
        if env and cfg.data["output_root"] == RunConfig.default().data["output_root"]:
            cfg.data["output_root"] = env
    return cfg


def _root(cfg: RunConfig, sub: str) -> Path:
    p = Path(cfg.data["output_root"]) / sub
    p.mkdir(parents=True, exist_ok=True)
    return p


def _terrain_from_meta(meta: dict) -> worldsim.Terrain:
    t = meta["terrain"]
    return worldsim.generate_terrain(seed=t["seed"], size=t["size"],
                                     roughness=t["roughness"],
                                     resolution=t["resolution"])


def _terrain_meta(seed: int, cfg: RunConfig, roughness: float | None = None) -> dict:
    w = cfg.data["worldsim"]
    return {"seed": seed, "size": w["size"], "resolution": w["resolution"],
            "roughness": w["roughness"] if roughness is None else roughness}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _root(cfg, "data")
    train_path, eval_path = out / "train.bin", out / "eval.bin"
    if (train_path.exists() or eval_path.exists()) and not args.force:
        raise DataError(f"{train_path} exists; pass --force to overwrite")
    w = cfg.data["worldsim"]
    sim_params = cfg.sim_params()
    results = {}
    for tag, stream, terr_seed, policy in (
            ("train", 1, w["terrain_seed_train"], cfg.train_policy()),
            ("eval", 2, w["terrain_seed_eval"], cfg.eval_policy())):
        terrain = worldsim.generate_terrain(terr_seed, w["size"], w["roughness"],
                                            w["resolution"])
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.data["seed"], stream]))
        seqs = worldsim.collect_dataset(terrain, policy, rng, sim_params)
        meta = dict(cfg.meta_dict())
        meta.update(tag=tag, terrain=_terrain_meta(terr_seed, cfg),
                    policy={"n_sequences": policy.n_sequences, "T": policy.T,
                            "speed_cap": policy.speed_cap, "balanced": policy.balanced},
                    dt=sim_params.dt)
        save_dataset(out / f"{tag}.bin", seqs, meta)
        write_blob(out / f"terrain_{tag}.bin",
                   dict(kind="terrain", **_terrain_meta(terr_seed, cfg)),
                   {"height": terrain.height, "friction": terrain.friction})
        results[tag] = len(seqs)
    print(f"gen-data: wrote {results['train']} train / {results['eval']} eval "
          f"sequences under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    mode = args.mode or cfg.data["train"]["mode"]
    data_dir = _root(cfg, "data")
    out = _root(cfg, "train")
    try:
        seqs, meta = load_dataset(data_dir / "train.bin", expect_tag="train")
    except FileNotFoundError as e:
        raise DataError(str(e))
    terrain = _terrain_from_meta(meta)
    tcfg = cfg.train_config(mode)
    ckpt_path = out / f"ckpt_{mode}.bin"

    start = None
    start_epoch = 0
    if args.resume and ckpt_path.exists():
        params, cmeta, extra = load_checkpoint(ckpt_path)
        opt = trainer.Adam(params, tcfg.learning_rate)
        if "adam_t" in extra:
            opt.load_state_arrays(extra)
        log = [(int(r[0]), model.LossBreakdown(r[1], r[2], cmeta.get("lambda", 0.0)))
               for r in extra.get("loss_log", np.zeros((0, 4)))]
        start = trainer.TrainResult(params=params, log=log, optimizer=opt)
        start_epoch = int(cmeta.get("epoch", -1)) + 1
        print(f"resuming {mode} from epoch {start_epoch}")

    result = trainer.train(
        seqs, tcfg, terrain_pitch=terrain.pitch_at,
        aug_cfg=cfg.augment_config(), kbm_params=cfg.kbm_params(),
        tag=meta.get("tag", "train"), start=start, start_epoch=start_epoch)

    log_rows = np.array([[e, b.l_data, b.l_phys, b.l_total] for e, b in result.log])
    ckpt_meta = dict(cfg.meta_dict())
    ckpt_meta.update(mode=mode, epoch=int(result.log[-1][0]) if result.log else -1,
                     **{"lambda": tcfg.effective_lambda})
    extra = result.optimizer.state_arrays()
    extra["loss_log"] = log_rows
    save_checkpoint(ckpt_path, result.params, ckpt_meta, extra)
    trainer.write_loss_log_csv(out / f"loss_{mode}.csv", result.log, cfg.meta_string())
    if len(log_rows):
        plots.plot_loss_log(log_rows, out / f"loss_{mode}.png")

    if mode == "piaug":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.data["seed"], 777]))
        aug, _ = augment.augment_batch(seqs, cfg.augment_config(), terrain.pitch_at,
                                       rng, cfg.kbm_params())
        edges, ri, rm = augment.speed_histogram(seqs)
        _, ai, am = augment.speed_histogram(aug)
        augment.write_histogram_csv(out / "aug_hist_piaug.csv", edges, ri, rm, ai, am,
                                    cfg.meta_string())
        plots.plot_speed_histogram(edges, ri, rm, ai, am, out / "aug_hist_piaug.png")

    if result.aborted:
        print(f"train[{mode}]: diverged; kept last good checkpoint at {ckpt_path}")
        return EXIT_DIVERGENCE
    print(f"train[{mode}]: {len(result.log)} epochs, "
          f"final l_total={result.log[-1][1].l_total:.4f} -> {ckpt_path}")
    return EXIT_OK


def _named_checkpoints(args) -> dict[str, Path]:
    out = {}
    for spec in args.checkpoint or []:
        if "=" not in spec:
            raise DataError(f"--checkpoint needs NAME=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        out[name] = Path(path)
    return out


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    data_dir = _root(cfg, "data")
    out = _root(cfg, "eval")
    eval_path = Path(args.dataset) if args.dataset else data_dir / "eval.bin"
    try:
        seqs, meta = load_dataset(eval_path, expect_tag="eval")
    except FileNotFoundError as e:
        raise DataError(str(e))
    dt = float(meta.get("dt", 0.1))

    predictors = []
    if not args.no_kbm:
        predictors.append(evalharness.KbmPredictor(cfg.kbm_params()))
    for name, path in _named_checkpoints(args).items():
        params, _, _ = load_checkpoint(path)
        predictors.append(evalharness.NeuralPredictor(params, name=name))
    if not predictors:
        raise DataError("nothing to evaluate: no checkpoints and --no-kbm")

    reports = {}
    flagged_frac = {}
    heat_by_model = {}
    for pred in predictors:
        reps, flagged = evalharness.prediction_errors(pred, seqs)
        reports[pred.name] = reps
        flagged_frac[pred.name] = flagged / len(seqs)
        rows = evalharness.bin_and_aggregate(reps, seqs, dt=dt)
        heat_by_model[pred.name] = rows
        evalharness.write_heatmap_csv(out / f"heatmap_{pred.name}.csv", rows,
                                      cfg.meta_string())
    shift_rows = evalharness.domain_shift_report(reports, seqs, dt=dt)
    evalharness.write_domain_shift_csv(out / "domain_shift.csv", shift_rows,
                                       cfg.meta_string())
    plots.plot_domain_shift(shift_rows, out / "domain_shift.png")
    for metric in ("dp", "dpsi", "dv"):
        plots.plot_heatmaps(heat_by_model, metric, out / f"heatmap_{metric}.png")
    for name, frac in flagged_frac.items():
        print(f"eval[{name}]: flagged {frac * 100:.1f}% of sequences")
    print(f"eval: wrote reports for {list(reports)} -> {out}")
    if any(frac > 0.05 for frac in flagged_frac.values()):
        return EXIT_DIVERGENCE
    return EXIT_OK


def cmd_navigate(args) -> int:
    cfg = _load_config(args)
    out = _root(cfg, "navigate")
    w = cfg.data["worldsim"]
    terrain = worldsim.generate_terrain(w["terrain_seed_nav"], w["size"],
                                        w["nav_roughness"], w["resolution"])
    sim_params = cfg.sim_params()
    nav = cfg.data["nav"]
    radius = args.goal_radius if args.goal_radius is not None else nav["goal_radius"]
    trials = args.trials if args.trials is not None else nav["trials"]
    mcfg = cfg.mppi_config(n_samples=nav["n_samples"])

    if args.model == "kbm":
        dyn = mppi.KbmMppiModel(cfg.kbm_params())
        name = "kbm"
    else:
        params, _, _ = load_checkpoint(Path(args.model))
        dyn = mppi.NeuralMppiModel(params)
        name = Path(args.model).stem.replace("ckpt_", "")
    result = evalharness.figure8_experiment(
        dyn, radius, trials, terrain, sim_params, mcfg,
        time_budget=nav["time_budget"], trial_seeds=nav["trial_seeds"][:trials])
    evalharness.figure8_summary_json(
        out / f"figure8_{name}_r{radius:g}.json", {name: {radius: result}},
        meta=cfg.meta_dict())
    traces = {}
    for k, tr in enumerate(result.per_trial):
        evalharness.write_trace_csv(out / f"trace_{name}_r{radius:g}_t{k}.csv",
                                    tr.trace, cfg.meta_string())
        traces[f"{name} trial {k}"] = tr.trace
    center = (terrain.extent / 2.0, terrain.extent / 2.0 - 10.0)
    plan = mppi.figure_eight_plan(radius, center=center)
    plots.plot_figure8(traces, plan.points, radius,
                       out / f"figure8_{name}_r{radius:g}.png")
    speed = "n/a" if not np.isfinite(result.mean_speed) else f"{result.mean_speed:.2f}"
    print(f"navigate[{name}] r={radius:g}: {result.successes}/{trials} successes, "
          f"mean cruise speed {speed} m/s")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    out = _root(cfg, "bench")
    params, _, _ = load_checkpoint(Path(args.checkpoint))
    w = cfg.data["worldsim"]
    terrain = worldsim.generate_terrain(w["terrain_seed_nav"], w["size"],
                                        w["nav_roughness"], w["resolution"])
    counts = args.counts or cfg.data["bench"]["sample_counts"]
    rows = evalharness.benchmark_rollout(
        params, cfg.kbm_params(), terrain, cfg.sim_params(),
        sample_counts=[int(c) for c in counts], reps=cfg.data["bench"]["reps"],
        seed=cfg.data["seed"])
    evalharness.write_benchmark_csv(out / "benchmark.csv", rows, cfg.meta_string())
    plots.plot_benchmark(rows, out / "benchmark.png")
    for r in rows:
        print(f"bench n={r['n_samples']}: naive {r['t_naive']:.3f}s, "
              f"shared {r['t_shared']:.3f}s ({r['speedup']:.2f}x), "
              f"kbm {r['t_kbm']:.3f}s")
    return EXIT_OK


def _read_csv_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    header, rows = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if not header:
                header = line.split(",")
            else:
                rows.append(line.split(","))
    return header, rows


def cmd_plot_data(args) -> int:
    cfg = _load_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else Path(cfg.data["output_root"])
    out = run_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    emitted = []

    shift = run_dir / "eval" / "domain_shift.csv"
    if shift.exists():
        header, rows = _read_csv_rows(shift)
        with open(out / "long_domain_shift.csv", "w") as fh:
            fh.write(f"# {cfg.meta_string()}\n")
            fh.write("metric,model,v_bin,value\n")
            for r in rows:
                rec = dict(zip(header, r))
                for metric in ("dp", "dpsi", "dv"):
                    fh.write(f"{metric},{rec['model']},{rec['v_bin']},{rec[metric]}\n")
        emitted.append("long_domain_shift.csv")

    for heat in sorted((run_dir / "eval").glob("heatmap_*.csv")) if (run_dir / "eval").exists() else []:
        name = heat.stem.replace("heatmap_", "")
        header, rows = _read_csv_rows(heat)
        with open(out / f"long_heatmap_{name}.csv", "w") as fh:
            fh.write(f"# {cfg.meta_string()}\n")
            fh.write("metric,model,v_bin,theta_bin,psi_bin,n,value\n")
            for r in rows:
                rec = dict(zip(header, r))
                for metric in ("dp", "dpsi", "dv"):
                    fh.write(f"{metric},{name},{rec['v_bin']},{rec['theta_bin']},"
                             f"{rec['psi_bin']},{rec['n']},{rec[metric]}\n")
        emitted.append(f"long_heatmap_{name}.csv")

    for loss in sorted((run_dir / "train").glob("loss_*.csv")) if (run_dir / "train").exists() else []:
        mode = loss.stem.replace("loss_", "")
        header, rows = _read_csv_rows(loss)
        with open(out / f"long_loss_{mode}.csv", "w") as fh:
            fh.write(f"# {cfg.meta_string()}\n")
            fh.write("metric,mode,epoch,value\n")
            for r in rows:
                rec = dict(zip(header, r))
                for metric in ("l_data", "l_phys", "l_total"):
                    fh.write(f"{metric},{mode},{rec['epoch']},{rec[metric]}\n")
        emitted.append(f"long_loss_{mode}.csv")

    if not emitted:
        raise DataError(f"no report CSVs found under {run_dir}")
    print(f"plot-data: wrote {', '.join(emitted)} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="piaug",
                                description=__doc__.split("\n")[0] if __doc__ else "")
    p.add_argument("--version", action="version", version=f"piaug {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="YAML config path (defaults built in)")
        sp.add_argument("--output", help="output root directory")
        sp.add_argument("--seed", type=int, help="global seed override")
        sp.add_argument("--threads", type=int, default=0,
                        help="cap numeric library worker threads")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry (dotted path)")

    sp = sub.add_parser("gen-data", help="generate train/eval datasets")
    common(sp)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a dynamics model")
    common(sp)
    sp.add_argument("--mode", choices=trainer.MODES)
    sp.add_argument("--resume", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="prediction-error reports")
    common(sp)
    sp.add_argument("--dataset", help="evaluation dataset path")
    sp.add_argument("--checkpoint", action="append", metavar="NAME=PATH")
    sp.add_argument("--no-kbm", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("navigate", help="closed-loop figure-8 trials")
    common(sp)
    sp.add_argument("--model", required=True, help="'kbm' or a checkpoint path")
    sp.add_argument("--goal-radius", type=float)
    sp.add_argument("--trials", type=int)
    sp.set_defaults(func=cmd_navigate)

    sp = sub.add_parser("bench", help="rollout timing benchmark")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--counts", nargs="*", type=int)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("plot-data", help="long-format CSV exports for plotting")
    common(sp)
    sp.add_argument("--run-dir")
    sp.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = getattr(args, "threads", 0) or 0
        if threads > 0:
            import threadpoolctl
            with threadpoolctl.threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except (DataError, FileFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
