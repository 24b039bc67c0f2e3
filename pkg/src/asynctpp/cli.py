"""Command-line surface: data synthesis, training, forecasting, evaluation
and schedule inspection.

Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.
Logs are line-oriented key=value pairs. Heavy imports happen inside the
command handlers so the --threads cap can be applied before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asynctpp")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap (default 1, for determinism)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic JSONL dataset")
    p.add_argument("--kind", choices=("hawkes", "poisson"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-seqs", type=int, default=50)
    p.add_argument("--T", type=float, default=100.0, dest="horizon")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--rate", type=float, default=1.0, help="poisson rate")
    p.add_argument("--num-types", type=int, default=2, help="hawkes type count")
    p.add_argument("--mu", type=float, default=0.2, help="hawkes base rate per type")
    p.add_argument("--alpha-self", type=float, default=1.6)
    p.add_argument("--alpha-cross", type=float, default=0.0)
    p.add_argument("--beta-decay", type=float, default=2.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-vae", help="fit the event autoencoder")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_vae)

    p = sub.add_parser("train-dm", help="fit the denoiser via flow matching")
    p.add_argument("--config", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_dm)

    p = sub.add_parser("predict", help="forecast events on a dataset")
    p.add_argument("--task", choices=("next", "horizon"), required=True)
    p.add_argument("--h", type=int, default=1, dest="horizon")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the seed stored in the checkpoint")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="score a prediction file")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("schedule", help="inspect noise schedules")
    ssub = p.add_subparsers(dest="schedule_command", required=True)
    d = ssub.add_parser("dump", help="emit (s, a_1..a_N) CSV")
    d.add_argument("--kind", choices=("async", "disjoint", "sync"), required=True)
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--grid", type=int, default=1001)
    d.add_argument("--out", required=True)
    d.set_defaults(func=_cmd_schedule_dump)
    c = ssub.add_parser("check", help="run schedule invariant checks")
    c.add_argument("--kind", choices=("async", "disjoint", "sync", "broken"),
                   required=True, help="'broken' is a self-test hook")
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--grid", type=int, default=2001)
    c.set_defaults(func=_cmd_schedule_check)
    return parser


def _log(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()), flush=True)


def _cmd_synth(args) -> int:
    import numpy as np

    from .data import (HawkesParams, save_raw_jsonl, simulate_hawkes,
                       simulate_poisson)

    rng = np.random.default_rng(args.seed)
    if args.kind == "poisson":
        num_types = 1
        draw = lambda: simulate_poisson(args.rate, args.horizon, rng)
    else:
        k = num_types = args.num_types
        alpha = np.full((k, k), args.alpha_cross)
        np.fill_diagonal(alpha, args.alpha_self)
        params = HawkesParams(np.full(k, args.mu), alpha,
                              np.full((k, k), args.beta_decay))
        draw = lambda: simulate_hawkes(params, args.horizon, rng)
    sequences = []
    retries = 0
    while len(sequences) < args.n_seqs:
        seq = draw()
        if len(seq) >= 1:
            sequences.append(seq)
        else:
            retries += 1
            if retries > 100 * args.n_seqs:
                raise RuntimeError("generator keeps producing empty sequences; "
                                   "increase --T")
    save_raw_jsonl(args.out, sequences, num_types, args.max_len)
    _log(command="synth", kind=args.kind, sequences=len(sequences), out=args.out)
    return 0


def _load_standardized(data_path, num_types=None, max_len=None, scaler=None):
    from .data import Dataset, Event, EventSequence, load_jsonl, standardize_tau

    ds = load_jsonl(data_path)
    if num_types is not None and ds.num_types != num_types:
        raise ValueError(f"dataset has {ds.num_types} types, config expects {num_types}")
    if max_len is not None and ds.max_len != max_len:
        raise ValueError(f"dataset has max_len {ds.max_len}, config expects {max_len}")
    if scaler is None:
        return standardize_tau(ds)
    seqs = [EventSequence([Event(float(scaler.apply(e.tau)), e.k) for e in s.events])
            for s in ds.sequences]
    return Dataset(seqs, ds.num_types, ds.max_len, scaler), scaler


def _cmd_train_vae(args) -> int:
    import numpy as np

    from . import tensor as T
    from .config import parse_config
    from .training import Checkpoint, save_checkpoint
    from .vae import VaeConfig, VaeTrainConfig, train_vae

    cfg = parse_config(args.config)
    T.set_default_dtype(cfg.dtype)
    ds, scaler = _load_standardized(cfg.data_path, cfg.data_num_types, cfg.data_max_len)
    vae_cfg = VaeConfig(ds.num_types, cfg.vae_d_latent)
    train_cfg = VaeTrainConfig(steps=cfg.vae_steps, beta_min=cfg.vae_beta_min,
                               beta_max=cfg.vae_beta_max, seed=cfg.seed)
    _log(command="train-vae", steps=train_cfg.steps, d_latent=vae_cfg.d_latent,
         events=int(ds.all_events()[0].size))
    params = train_vae(ds, vae_cfg, train_cfg)
    echo = {"kind": "vae", "num_types": vae_cfg.num_types, "d_latent": vae_cfg.d_latent,
            "hidden": vae_cfg.hidden, "tau_scaler": [scaler.mean, scaler.std],
            "seed": cfg.seed, "dtype": cfg.dtype, "data_path": cfg.data_path}
    save_checkpoint(args.out, Checkpoint(1, {k: params[k].data for k in sorted(params)},
                                         echo))
    _log(command="train-vae", status="done", out=args.out)
    return 0


def _load_vae(path):
    from .data import TauScaler
    from .training import load_checkpoint, params_from_checkpoint
    from .vae import VaeConfig

    ckpt = load_checkpoint(path)
    if ckpt.config.get("kind") != "vae":
        raise ValueError(f"{path}: not an autoencoder checkpoint")
    cfg = VaeConfig(ckpt.config["num_types"], ckpt.config["d_latent"],
                    ckpt.config["hidden"])
    scaler = TauScaler(*ckpt.config["tau_scaler"])
    return params_from_checkpoint(ckpt), cfg, scaler, ckpt.config


def _cmd_train_dm(args) -> int:
    from . import tensor as T
    from .config import parse_config
    from .dit import DitConfig
    from .training import TrainConfig, make_checkpoint, save_checkpoint, train_dm
    from .vae import encode_dataset

    cfg = parse_config(args.config)
    T.set_default_dtype(cfg.dtype)
    vae_params, vae_cfg, scaler, _ = _load_vae(args.vae)
    if cfg.vae_d_latent != vae_cfg.d_latent:
        raise ValueError(f"config vae.d_latent={cfg.vae_d_latent} does not match "
                         f"checkpoint d_latent={vae_cfg.d_latent}")
    ds, _ = _load_standardized(cfg.data_path, cfg.data_num_types, cfg.data_max_len,
                               scaler)
    if ds.num_types != vae_cfg.num_types:
        raise ValueError(f"dataset has {ds.num_types} types, autoencoder was trained "
                         f"with {vae_cfg.num_types}")
    latents = encode_dataset(vae_params, vae_cfg, ds)
    dit_cfg = DitConfig(ds.max_len, vae_cfg.d_latent, d_model=cfg.dm_d_model,
                        num_layers=cfg.dm_layers, num_heads=cfg.dm_heads)
    train_cfg = TrainConfig(batch_size=cfg.dm_batch, total_steps=cfg.dm_steps,
                            seed=cfg.seed, schedule_kind=cfg.dm_schedule,
                            dtype=cfg.dtype)
    echo = {"kind": "dm", "schedule": cfg.dm_schedule, "n_max": ds.max_len,
            "d_latent": vae_cfg.d_latent, "d_model": cfg.dm_d_model,
            "num_layers": cfg.dm_layers, "num_heads": cfg.dm_heads,
            "num_types": ds.num_types, "solver_kind": cfg.solver_kind,
            "solver_substeps": cfg.solver_substeps, "seed": cfg.seed,
            "dtype": cfg.dtype, "tau_scaler": [scaler.mean, scaler.std]}
    _log(command="train-dm", steps=train_cfg.total_steps, schedule=cfg.dm_schedule,
         sequences=len(latents))
    result = train_dm(latents, dit_cfg, train_cfg, vae_params=vae_params,
                      checkpoint_path=args.out, config_echo=echo)
    for step in range(0, len(result.losses), max(1, len(result.losses) // 10)):
        _log(step=step, loss=f"{result.losses[step]:.6f}")
    save_checkpoint(args.out, make_checkpoint(result.params, echo))
    _log(command="train-dm", status="done", out=args.out,
         final_loss=f"{result.losses[-1]:.6f}")
    return 0


def _load_dm(path):
    from .dit import DitConfig
    from .training import load_checkpoint, params_from_checkpoint

    ckpt = load_checkpoint(path)
    if ckpt.config.get("kind") != "dm":
        raise ValueError(f"{path}: not a denoiser checkpoint")
    cfg = DitConfig(ckpt.config["n_max"], ckpt.config["d_latent"],
                    d_model=ckpt.config["d_model"], num_layers=ckpt.config["num_layers"],
                    num_heads=ckpt.config["num_heads"])
    return params_from_checkpoint(ckpt), cfg, ckpt.config


def _cmd_predict(args) -> int:
    import numpy as np

    from . import tensor as T
    from .forecast import predict_horizon_dataset, predict_next_dataset
    from .schedule import NoiseSchedule

    vae_params, vae_cfg, scaler, vae_echo = _load_vae(args.vae)
    dit_params, dit_cfg, dm_echo = _load_dm(args.ckpt)
    if dm_echo["d_latent"] != vae_cfg.d_latent:
        raise ValueError(f"latent dimension mismatch: denoiser {dm_echo['d_latent']} "
                         f"vs autoencoder {vae_cfg.d_latent}")
    T.set_default_dtype(dm_echo.get("dtype", "f32"))
    ds, _ = _load_standardized(args.data, scaler=scaler)
    if ds.num_types != vae_cfg.num_types:
        raise ValueError(f"dataset has {ds.num_types} types, checkpoints expect "
                         f"{vae_cfg.num_types}")
    if ds.max_len != dit_cfg.n_max:
        raise ValueError(f"dataset max_len {ds.max_len} does not match denoiser "
                         f"N={dit_cfg.n_max}")
    seed = args.seed if args.seed is not None else dm_echo["seed"]
    rng = np.random.default_rng(seed)
    schedule = NoiseSchedule(dm_echo["schedule"], dit_cfg.n_max)
    solver = dm_echo["solver_kind"]
    substeps = dm_echo["solver_substeps"]
    if args.task == "next":
        records = predict_next_dataset(dit_params, dit_cfg, vae_params, vae_cfg,
                                       schedule, ds.sequences, scaler, rng,
                                       solver, substeps)
        horizon = 1
    else:
        records = predict_horizon_dataset(dit_params, dit_cfg, vae_params, vae_cfg,
                                          schedule, ds.sequences, args.horizon,
                                          scaler, rng, solver, substeps)
        horizon = args.horizon
    meta = {"task": args.task, "horizon": horizon, "seed": seed, "dataset": args.data,
            "num_types": ds.num_types}
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta) + "\n")
        for rec in records:
            fh.write(json.dumps({"pred_taus": rec.pred_taus,
                                 "pred_types": rec.pred_types,
                                 "true_taus": rec.true_taus,
                                 "true_types": rec.true_types}) + "\n")
    _log(command="predict", task=args.task, records=len(records), out=args.out)
    return 0


def _cmd_eval(args) -> int:
    from .metrics import OtdConfig, error_rate, events_to_times, otd, rmse

    with open(args.pred, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines:
        raise ValueError(f"{args.pred}: empty prediction file")
    meta, records = lines[0], lines[1:]
    pred_taus, pred_types, true_taus, true_types = [], [], [], []
    otds = []
    cfg = OtdConfig()
    for rec in records:
        pred_taus.extend(rec["pred_taus"])
        pred_types.extend(rec["pred_types"])
        true_taus.extend(rec["true_taus"])
        true_types.extend(rec["true_types"])
        if meta["task"] == "horizon":
            pred_events = list(zip(events_to_times(rec["pred_taus"]), rec["pred_types"]))
            true_events = list(zip(events_to_times(rec["true_taus"]), rec["true_types"]))
            otds.append(otd(pred_events, true_events, cfg))
        else:
            # next-event task: each prediction is its own one-event window
            for pt, pk, tt, tk in zip(rec["pred_taus"], rec["pred_types"],
                                      rec["true_taus"], rec["true_types"]):
                otds.append(otd([(pt, pk)], [(tt, tk)], cfg))
    r = rmse(pred_taus, true_taus)
    e = error_rate(pred_types, true_types)
    o = sum(otds) / len(otds)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("dataset,task,horizon,seed,rmse,error_rate,otd\n")
        fh.write(f"{meta['dataset']},{meta['task']},{meta['horizon']},{meta['seed']},"
                 f"{r:.6f},{e:.6f},{o:.6f}\n")
    _log(command="eval", rmse=f"{r:.6f}", error_rate=f"{e:.6f}", otd=f"{o:.6f}",
         out=args.out)
    return 0


def _cmd_schedule_dump(args) -> int:
    import numpy as np

    from .schedule import NoiseSchedule

    schedule = NoiseSchedule(args.kind, args.n)
    grid = np.linspace(0.0, 1.0, args.grid)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("s," + ",".join(f"a_{i}" for i in range(1, args.n + 1)) + "\n")
        for s in grid:
            a = schedule.a_diag(float(s))
            fh.write(f"{s:.10g}," + ",".join(f"{v:.10g}" for v in a) + "\n")
    _log(command="schedule-dump", kind=args.kind, n=args.n, rows=args.grid, out=args.out)
    return 0


def _cmd_schedule_check(args) -> int:
    import numpy as np

    from .schedule import (NoiseSchedule, field_equivalence_check, interpolate,
                           inverse_flow, validate_schedule)

    schedule = NoiseSchedule(args.kind, args.n)
    report = validate_schedule(schedule, args.grid)
    failures = [str(v) for v in report.violations]

    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((args.n, 4))
    eps = rng.standard_normal((args.n, 4))
    dev = field_equivalence_check(x0, eps, schedule, 200, rng, mode="f64")
    if dev > 1e-9:
        failures.append(f"field equivalence deviation {dev:.3g} > 1e-9")
    for s in rng.uniform(0.0, 1.0, size=50):
        x_s = interpolate(x0, eps, schedule, float(s))
        back = interpolate(inverse_flow(x_s, eps, schedule, float(s)), eps, schedule,
                           float(s))
        err = float(np.max(np.abs(back - x_s)))
        if err > 1e-9:
            failures.append(f"inverse-flow round trip error {err:.3g} at s={s:.6f}")
    if failures:
        for f in failures:
            print(f"violation: {f}", file=sys.stderr)
        return 1
    _log(command="schedule-check", kind=args.kind, n=args.n, status="ok")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # runtime/validation failures exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
