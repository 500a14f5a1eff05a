"""``emkit`` command line.

Every subcommand accepts ``--config file.json``; explicit flags win over the
file, which wins over built-in defaults. Commands that write into a directory
also drop a ``manifest.json`` there (resolved config, seeds, git revision).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import subprocess
import sys
from pathlib import Path

import numpy as np

import emkit

log = logging.getLogger("emkit")


# config plumbing

def _resolve(args, defaults: dict) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _add(p, defaults: dict, help_: dict | None = None):
    """Register one flag per default; flags default to None so the config file can fill in."""
    help_ = help_ or {}
    for k, v in defaults.items():
        flag = "--" + k.replace("_", "-")
        if isinstance(v, bool):
            p.add_argument(flag, dest=k, action="store_const", const=True, default=None, help=help_.get(k))
            p.add_argument("--no-" + k.replace("_", "-"), dest=k, action="store_const", const=False)
        else:
            typ = type(v) if v is not None else str
            p.add_argument(flag, dest=k, type=typ, default=None, help=help_.get(k, f"default {v!r}"))
    p.add_argument("--config", help="JSON file with any of the flags above")


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(directory, command: str, cfg: dict, seeds=None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    m = {"command": command, "config": cfg, "seeds": seeds if seeds is not None else cfg.get("seed"),
         "git": git_revision(), "emkit": emkit.__version__, "numpy": np.__version__}
    path = d / "manifest.json"
    with open(path, "w") as fh:
        json.dump(m, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _emit(text: str, out: str | None):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("-" if r.get(k) is None else (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]))
                    for k in columns})
    return buf.getvalue()


# harness commands

GEN_DEFAULTS = dict(out="data", steps=200, seed=0, n_lat=16, n_lon=32, diffusion=0.01, forcing=0.0,
                    velocity="1,2,-1,1")


def cmd_gen_data(args):
    from emkit.harness.data import SyntheticSystem, generate_dataset, save_dataset
    c = _resolve(args, GEN_DEFAULTS)
    vel = tuple(float(v) for v in str(c["velocity"]).split(","))
    system = SyntheticSystem(n_lat=c["n_lat"], n_lon=c["n_lon"], velocity=vel, diffusion=c["diffusion"],
                             forcing=c["forcing"], seed=c["seed"])
    ds = generate_dataset(system, c["steps"])
    save_dataset(ds, c["out"])
    write_manifest(c["out"], "gen-data", c)
    print(f"wrote {len(ds)} snapshots of {ds.fields.shape[1:]} to {c['out']}")


TRAIN_DEFAULTS = dict(data="data", out="run/pretrain", preset="tiny", epochs=10, batch_size=4, lr=2e-4,
                      loss="blend", swapped=False, loss_lr=1e-2, n_train=160, seed=0)


def _model_config(preset: str, ds):
    from emkit.emformer.model import ModelConfig
    V, H, W = ds.fields.shape[1:]
    if preset == "tiny":
        return ModelConfig.tiny(variables=V, height=H, width=W)
    if preset == "default":
        return ModelConfig(variables=V, height=H, width=W)
    p = Path(preset)
    if p.exists():
        return ModelConfig(**json.loads(p.read_text()))
    raise SystemExit(f"unknown model preset {preset!r} (tiny, default, or a JSON file)")


def cmd_train(args):
    from emkit.harness.data import NormStats, load_dataset
    from emkit.harness.train import Forecaster, TrainConfig, pretrain, save_forecaster
    c = _resolve(args, TRAIN_DEFAULTS)
    ds = load_dataset(c["data"])
    train, held = ds.split(min(c["n_train"], len(ds) - 2))
    stats = NormStats.fit(train)
    model = Forecaster.create(_model_config(c["preset"], ds), stats, c["seed"])
    tc = TrainConfig(epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"], loss=c["loss"],
                     swapped=c["swapped"], loss_lr=c["loss_lr"], seed=c["seed"])
    res = pretrain(model, train, tc, heldout=held)
    save_forecaster(c["out"], res.model, {"train": tc.to_dict()})
    write_manifest(c["out"], "train", c)
    with open(Path(c["out"]) / "curve.csv", "w") as fh:
        cols = ["epoch", "loss", "theta", "sin_theta", "alpha", "beta", "w_mean", "heldout_rmse"]
        fh.write(_csv(res.curve, cols))
    for row in res.curve:
        log.info("epoch %d loss %.5f theta %.4f heldout %.5f", row["epoch"], row["loss"], row["theta"],
                 row.get("heldout_rmse", float("nan")))
    print(f"saved checkpoint to {c['out']}")


FT_DEFAULTS = dict(checkpoint="run/pretrain", data="data", out="run/finetune", strategy="accumulative",
                   K=10, updates=40, batch_size=2, lr=5e-5, lam=0.9, N=5, granularity="token",
                   detach_cache=False, n_train=160, seed=0)


def cmd_finetune(args):
    from emkit.harness.data import load_dataset
    from emkit.harness.train import TrainConfig, finetune, load_forecaster, save_forecaster
    from emkit.kvmemory import CachePolicy
    c = _resolve(args, FT_DEFAULTS)
    model = load_forecaster(c["checkpoint"])
    ds = load_dataset(c["data"])
    train, _ = ds.split(min(c["n_train"], len(ds) - 2))
    policy = CachePolicy(lam=c["lam"], N=c["N"], granularity=c["granularity"], detach=c["detach_cache"])
    tc = TrainConfig.finetune_defaults(c["strategy"], K=c["K"], updates=c["updates"], batch_size=c["batch_size"],
                                       lr=c["lr"], seed=c["seed"],
                                       policy=policy if c["strategy"] == "accumulative" else None)
    res = finetune(model, train, tc)
    save_forecaster(c["out"], res.model, {"finetune": tc.to_dict()})
    write_manifest(c["out"], "finetune", c)
    if res.cache_sizes:
        log.info("max cache tokens %d", max(max(s) for s in res.cache_sizes))
    print(f"saved finetuned ({c['strategy']}) checkpoint to {c['out']}")


RO_DEFAULTS = dict(checkpoint="run/pretrain", data="data", out="run/rollout", start=160, steps=10,
                   with_cache=False, lam=0.9, N=5, label="")


def cmd_rollout(args):
    from emkit.harness.data import load_dataset
    from emkit.harness.rollout import rollout
    from emkit.harness.train import load_forecaster
    from emkit.kvmemory import CachePolicy
    from emkit.tensor.io import save_tensor
    c = _resolve(args, RO_DEFAULTS)
    model = load_forecaster(c["checkpoint"])
    ds = load_dataset(c["data"])
    s, n = c["start"], c["steps"]
    avail = len(ds) - 1 - s
    truth = ds.fields[s + 1:s + 1 + n] if avail >= n else None
    res = rollout(model, ds.fields[s], n, with_cache=c["with_cache"], truth=truth, lats=ds.lats,
                  policy=CachePolicy(lam=c["lam"], N=c["N"]))
    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "preds", res.preds[:, 0], dtype="float32", names=["lead", "variable", "lat", "lon"])
    label = c["label"] or ("accumulative" if c["with_cache"] else "plain")
    metrics = {"strategy": label, "rmse": res.rmse, "acc": res.acc, "cache_sizes": res.cache_sizes}
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2)
        fh.write("\n")
    write_manifest(out, "rollout", c)
    print(f"rolled out {n} steps from t={s} into {out}")


def cmd_report(args):
    from emkit.harness.report import write_report
    runs = {}
    for p in args.inputs:
        m = json.loads(Path(p).read_text())
        runs[m.get("strategy") or Path(p).parent.name] = {"rmse": m.get("rmse", []), "acc": m.get("acc", [])}
    csv_path, md_path = write_report(runs, args.out, args.stem)
    print(csv_path.read_text() if args.print else f"wrote {csv_path} and {md_path}")


EXP_DEFAULTS = dict(out="run/experiment", seeds="0,1,2", pretrain_epochs=10, finetune_updates=120,
                    finetune_lr=5e-6, K=10, horizon=10, detach_cache=False)


def cmd_experiment(args):
    from emkit.harness.experiment import ExperimentConfig, run_experiment
    c = _resolve(args, EXP_DEFAULTS)
    seeds = tuple(int(s) for s in str(c["seeds"]).split(","))
    cfg = ExperimentConfig(seeds=seeds, pretrain_epochs=c["pretrain_epochs"], finetune_updates=c["finetune_updates"],
                           finetune_lr=c["finetune_lr"], K=c["K"], horizon=c["horizon"],
                           detach_cache=c["detach_cache"])
    res = run_experiment(cfg, log=log.info)
    res.write(c["out"])
    write_manifest(c["out"], "experiment", cfg.to_dict(), list(seeds))
    s = res.summary()
    print(json.dumps({k: s[k] for k in ("step1_ratio", "mean_rmse", "step1_within_5pct",
                                        "accumulative_le_plain")}, indent=2))


# module-level commands

def cmd_equiv(args):
    from emkit.multiconv.equiv import sweep
    res = sweep(args.trials, args.seed, args.precision, grads=not args.forward_only)
    print("\n".join(res.lines()))


BENCH_DEFAULTS = dict(b=8, cin=64, cout=64, h=56, w=56, repeats=5, warmup=1, workers=1, dtype="f32",
                      seed=0, backend="")


def cmd_bench(args):
    from emkit.multiconv.bench import BenchConfig, benchmark, compare_backends
    c = _resolve(args, BENCH_DEFAULTS)
    cfg = BenchConfig(B=c["b"], Cin=c["cin"], Cout=c["cout"], H=c["h"], W=c["w"], repeats=c["repeats"],
                      warmup=c["warmup"], workers=c["workers"], dtype=c["dtype"], seed=c["seed"],
                      backend=c["backend"] or None)
    if args.compare_backends:
        r = compare_backends(cfg)
        _emit(_csv([r], list(r)), args.out)
        return
    _emit(benchmark(cfg).csv(header=True), args.out)


def cmd_grad_check(args):
    from emkit.multiconv.ops import ConvKernelSet, multiconv
    from emkit.tensor import ops
    from emkit.tensor.core import seeded_tensor
    from emkit.tensor.tape import grad_check
    x = seeded_tensor([1, args.channels, args.size, args.size], args.seed, dist="normal", dtype="f64")
    k1, k3, k5 = ConvKernelSet.seeded(args.channels, args.channels, args.seed + 1, dtype="f64").branches()
    sq = lambda y: ops.sum(y * y)
    checks = {"input": (lambda t: sq(multiconv(t, k1, k3, k5)), x),
              "k1": (lambda t: sq(multiconv(x, t, k3, k5)), k1),
              "k3": (lambda t: sq(multiconv(x, k1, t, k5)), k3),
              "k5": (lambda t: sq(multiconv(x, k1, k3, t)), k5)}
    worst = 0.0
    for name, (f, at) in checks.items():
        err = grad_check(f, at, eps=args.eps)
        worst = max(worst, err)
        print(f"{name}_max_rel_error={err:.3e}")
    return 0 if worst < args.tol else 1


def cmd_loss_dynamics(args):
    from emkit.loss import dynamics_sim, parse_schedule
    tr = dynamics_sim(parse_schedule(args.error_schedule), eta=args.eta, steps=args.steps,
                      theta0=args.theta0, w0=args.w0, mode=args.mode)
    cols = ["step", "theta", "alpha", "beta", "A", "B", "w_mean"]
    _emit(_csv(list(tr.rows()), cols), args.out)
    log.info("converged_step=%s monotone=%s", tr.converged_step, tr.monotone_after_converged)


def _load_field(path):
    from emkit.tensor.io import load_array
    return load_array(path)[0].astype(np.float64)


def cmd_metrics(args):
    from emkit.loss import lat_centers
    from emkit.metrics import EvalGrid, score_table
    pred, truth = _load_field(args.pred), _load_field(args.truth)
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    mean = std = None
    if args.stats:
        st = json.loads(Path(args.stats).read_text())
        mean, std = np.asarray(st["mean"], dtype=np.float64), np.asarray(st["std"], dtype=np.float64)
    H, W = pred.shape[-2:]
    grid = EvalGrid(lat_centers(H), np.arange(W) * 360.0 / W, mean=mean, std=std)
    names = args.names.split(",") if args.names else None
    rows = score_table(pred, truth, grid, names)
    _emit(_csv(rows, ["variable", "rmse", "nrmse", "acc"]), args.out)


def cmd_track(args):
    from emkit.loss import lat_centers
    from emkit.tracking import TrackerConfig, track_cyclone
    d = Path(args.fields)
    msl, u, v = (_load_field(d / n) for n in ("msl", "u10", "v10"))
    grid_file = d / "grid.json"
    if grid_file.exists():
        g = json.loads(grid_file.read_text())
        lats, lons = np.asarray(g["lats"]), np.asarray(g["lons"])
    else:
        lats, lons = lat_centers(msl.shape[1]), np.arange(msl.shape[2]) * 360.0 / msl.shape[2]
    snaps = [{"msl": msl[t], "u10": u[t], "v10": v[t]} for t in range(msl.shape[0])]
    cfg = TrackerConfig(args.radius_km, args.pmax, args.wmin, args.dmax)
    tr = track_cyclone(snaps, lats, lons, args.init_lat, args.init_lon, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tr.write_csv(out)
    print(f"{len(tr)} fixes, stopped on {tr.stop_reason}; wrote {out}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emkit", description="multi-scale conv forecasting toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"emkit {emkit.__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    _add(p, GEN_DEFAULTS)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="single-step pretraining")
    _add(p, TRAIN_DEFAULTS, {"preset": "tiny, default, or a model-config JSON"})
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", parents=[common], help="multi-step finetuning (none/plain/accumulative)")
    _add(p, FT_DEFAULTS)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("rollout", parents=[common], help="autoregressive rollout with per-lead scores")
    _add(p, RO_DEFAULTS)
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("report", parents=[common], help="merge rollout metrics into CSV and markdown tables")
    p.add_argument("inputs", nargs="+", help="metrics.json files from rollout")
    p.add_argument("--out", default="run/report")
    p.add_argument("--stem", default="report")
    p.add_argument("--print", action="store_true")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("experiment", parents=[common], help="3-seed plain vs accumulative finetuning comparison")
    _add(p, EXP_DEFAULTS)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("equiv", parents=[common], help="fused vs plain agreement over random shapes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")
    p.add_argument("--forward-only", action="store_true")
    p.set_defaults(fn=cmd_equiv)

    p = sub.add_parser("bench", parents=[common], help="plain vs fused fwd+bwd timing")
    _add(p, BENCH_DEFAULTS)
    p.add_argument("--compare-backends", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("grad-check", parents=[common], help="tape vs finite differences through the fused conv")
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("loss-dynamics", parents=[common], help="simulate (theta, w) descent")
    p.add_argument("--eta", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--error-schedule", default=f"const:{math.exp(-3)}")
    p.add_argument("--theta0", type=float, default=-math.pi / 2 + 1e-3)
    p.add_argument("--w0", type=float, default=0.0)
    p.add_argument("--mode", choices=["adiabatic", "coupled"], default="adiabatic")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_loss_dynamics)

    p = sub.add_parser("metrics", parents=[common], help="per-variable RMSE / NRMSE / ACC")
    p.add_argument("--pred", required=True, help="tensor file [V,H,W] or [H,W]")
    p.add_argument("--truth", required=True)
    p.add_argument("--stats", help="JSON with per-variable mean and std")
    p.add_argument("--names")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("track", parents=[common], help="follow a cyclone centre through MSL/wind fields")
    p.add_argument("--fields", required=True, help="dir with msl, u10, v10 tensors [T,H,W] (+ grid.json)")
    p.add_argument("--init-lat", type=float, required=True)
    p.add_argument("--init-lon", type=float, required=True)
    p.add_argument("--radius-km", type=float, default=278.0)
    p.add_argument("--pmax", type=float, default=101200.0)
    p.add_argument("--wmin", type=float, default=10.2)
    p.add_argument("--dmax", type=float, default=400.0)
    p.add_argument("--out", default="track.csv")
    p.set_defaults(fn=cmd_track)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from emkit.errors import EmkitError
    try:
        rc = args.fn(args)
    except EmkitError as e:
        print(f"emkit: error: {e}", file=sys.stderr)
        return 2
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
