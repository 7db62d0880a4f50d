"""Command-line interface: gradient certification, training, ablations,
receptive-field sweeps, metric evaluation, and visualization exports.

Exit codes: 0 success, 1 check or assertion failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checks import run_checks
from .config import ConfigError, ExperimentConfig, load_config
from .data import gen_sample, write_dataset
from .dtc import ReceptiveField, receptive_field_to_lambda
from .fileio import export_pgm, read_checkpoint, write_checkpoint
from .tensor import Tensor
from .train import TrainJob, run_training_jobs, train_loop
from .unet import DTC_KINDS, UPSAMPLER_KINDS, UNetConfig, UNetParams, count_params_flops, unet_forward_grids


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_lines(path: Path, lines: list[str]) -> None:
    path.write_text("".join(line + "\n" for line in lines))


def cmd_gradcheck(args) -> int:
    ops = [s for s in (args.ops.split(",") if args.ops else []) if s]
    reports = run_checks(
        ops_filter=ops or None,
        trials=args.trials,
        tol_rel=args.tol_rel,
        seed=args.seed,
        inject_failure=args.inject_failure,
    )
    if not reports:
        print(f"no registered op matches filter {args.ops!r}", file=sys.stderr)
        return 2
    for r in reports:
        print(r.line())
    return 0 if all(r.passed for r in reports) else 1


def _run_training(cfg: ExperimentConfig, seed: int | None = None):
    return train_loop(
        cfg.unet_config(),
        cfg.dataset_spec(),
        iters=cfg.iters,
        seed=cfg.seed if seed is None else seed,
        batch_size=cfg.batch,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        val_every=cfg.val_every,
        nsd_tau=cfg.nsd_tau,
    )


def _job(cfg: ExperimentConfig) -> TrainJob:
    return TrainJob(
        cfg=cfg.unet_config(),
        data=cfg.dataset_spec(),
        iters=cfg.iters,
        seed=cfg.seed,
        batch_size=cfg.batch,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        val_every=cfg.val_every,
        nsd_tau=cfg.nsd_tau,
    )


def _final_metrics(history) -> tuple[float, float]:
    if not history.rows:
        return 0.0, 0.0
    _, _, dice, nsd = history.rows[-1]
    return dice, nsd


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    out = _out_dir(args)
    params, history = _run_training(cfg)
    _write_lines(out / "history.csv", history.csv_lines())
    dice, nsd = _final_metrics(history)
    _write_lines(out / "metrics.txt", [f"dice={dice:.6f}", f"nsd={nsd:.6f}"])
    write_checkpoint(out / "params.bin", out / "params.manifest", params.entries())
    (out / "config.txt").write_text(cfg.text())
    print(f"trained {cfg.iters} iters: val dice {dice:.4f}, nsd {nsd:.4f}")
    print(f"artifacts in {out}")
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    upsamplers = [u for u in args.upsamplers.split(",") if u]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if not upsamplers or not seeds:
        raise ConfigError("compare needs at least one upsampler and one seed")
    for u in upsamplers:
        if u not in UPSAMPLER_KINDS:
            raise ConfigError(f"unknown upsampler {u!r}")
    out = _out_dir(args)
    pairs = [(u, seed) for u in upsamplers for seed in seeds]
    jobs = [
        _job(load_config(args.config, list(args.set) + [f"model.upsampler={u}"], seed))
        for u, seed in pairs
    ]
    histories = run_training_jobs(jobs, processes=args.jobs)
    results = {pair: _final_metrics(h) for pair, h in zip(pairs, histories)}
    run_rows = ["upsampler,seed,dice,nsd"]
    table_rows = ["upsampler,mean_dice,std_dice,mean_nsd,std_nsd"]
    lines = []
    for u in upsamplers:
        dices = [results[(u, s)][0] for s in seeds]
        nsds = [results[(u, s)][1] for s in seeds]
        for seed, dice, nsd in zip(seeds, dices, nsds):
            run_rows.append(f"{u},{seed},{dice:.6f},{nsd:.6f}")
        sd = float(np.std(dices, ddof=1)) if len(dices) > 1 else 0.0
        sn = float(np.std(nsds, ddof=1)) if len(nsds) > 1 else 0.0
        md, mn = float(np.mean(dices)), float(np.mean(nsds))
        table_rows.append(f"{u},{md:.6f},{sd:.6f},{mn:.6f},{sn:.6f}")
        lines.append(f"{u:<18} dice {100 * md:6.2f} +/- {100 * sd:5.2f}   nsd {100 * mn:6.2f} +/- {100 * sn:5.2f}")
    print("\n".join(lines))
    _write_lines(out / "runs.csv", run_rows)
    _write_lines(out / "compare.csv", table_rows)
    return 0


def cmd_sweep_rf(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    if cfg.upsampler not in DTC_KINDS:
        raise ConfigError(f"sweep-rf needs a DTC upsampler, got {cfg.upsampler!r}")
    r_values = [ReceptiveField.parse(t) for t in args.r.split(",") if t]
    if len({rv.r for rv in r_values}) != len(r_values):
        raise ConfigError(f"duplicate receptive-field values in {args.r!r}")
    if not r_values:
        raise ConfigError("sweep-rf needs at least one receptive-field value")
    out = _out_dir(args)
    ucfg = cfg.unet_config()
    levels = list(reversed(range(ucfg.depth - 1)))
    header = "r,dice,nsd," + ",".join(f"lambda_dec{i}" for i in levels)
    rows = [header]
    lines = []
    for rv in r_values:
        run_cfg = load_config(args.config, list(args.set) + [f"dtc.r={rv}"], args.seed)
        _, history = _run_training(run_cfg)
        dice, nsd = _final_metrics(history)
        lams = [
            receptive_field_to_lambda(rv, ucfg.level_extent(i + 1)[0]) for i in levels
        ]
        lam_txt = ",".join(f"{l:.6f}" for l in lams)
        rows.append(f"{rv},{dice:.6f},{nsd:.6f},{lam_txt}")
        lines.append(
            f"r={str(rv):>5}  dice {100 * dice:6.2f}  nsd {100 * nsd:6.2f}  lambda [{lam_txt}]"
        )
    print("\n".join(lines))
    _write_lines(out / "sweep_rf.csv", rows)
    return 0


def cmd_ablate_coordgen(args) -> int:
    from .dtc import ABLATION_ROWS

    cfg = load_config(args.config, args.set, args.seed)
    if cfg.upsampler not in DTC_KINDS:
        raise ConfigError(f"ablate-coordgen needs a DTC upsampler, got {cfg.upsampler!r}")
    out = _out_dir(args)
    rows = ["weight,sigmoid,offset,tanh,dice,nsd,final_loss"]
    lines = []
    for sw in ABLATION_ROWS:
        overrides = list(args.set) + [
            f"dtc.use_weight={'true' if sw.use_weight else 'false'}",
            f"dtc.use_sigmoid={'true' if sw.use_sigmoid else 'false'}",
            f"dtc.use_tanh={'true' if sw.use_tanh else 'false'}",
        ]
        run_cfg = load_config(args.config, overrides, args.seed)
        _, history = _run_training(run_cfg)
        dice, nsd = _final_metrics(history)
        loss = history.rows[-1][1] if history.rows else float("nan")
        mark = lambda b: "x" if b else ""
        rows.append(
            f"{mark(sw.use_weight)},{mark(sw.use_sigmoid)},x,{mark(sw.use_tanh)},"
            f"{dice:.6f},{nsd:.6f},{loss:.6f}"
        )
        lines.append(f"{sw.label():<28} dice {100 * dice:6.2f}  nsd {100 * nsd:6.2f}  loss {loss:.4f}")
    print("\n".join(lines))
    _write_lines(out / "ablate_coordgen.csv", rows)
    return 0


def cmd_export_coords(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = ckpt / "config.txt"
    if not cfg_path.exists():
        raise ConfigError(f"no config.txt in checkpoint directory {ckpt}")
    cfg = load_config(cfg_path, [])
    if cfg.upsampler not in DTC_KINDS:
        raise ConfigError(f"checkpoint upsampler {cfg.upsampler!r} is not a DTC variant")
    if cfg.rank != 2:
        raise ConfigError("coordinate export renders PGM images and needs a 2D checkpoint")
    ucfg = cfg.unet_config()
    if not 0 <= args.level < ucfg.depth - 1:
        raise ConfigError(f"level must be in [0, {ucfg.depth - 2}], got {args.level}")
    params = UNetParams(read_checkpoint(ckpt / "params.bin", ckpt / "params.manifest"))
    sample = gen_sample(cfg.dataset_spec(), args.sample, dtype=np.float32)
    _, grids = unet_forward_grids(params, ucfg, Tensor(sample.image.data[None]))
    grid = grids[args.level]
    in_sp = ucfg.level_extent(args.level + 1)
    coords = grid.coords.data.reshape(-1, 2)
    hits = np.zeros(in_sp, dtype=np.float32)
    for a, s in enumerate(in_sp):
        u = np.rint(((coords[:, a] + 1.0) * s - 1.0) / 2.0).astype(int)
        coords[:, a] = np.clip(u, 0, s - 1)
    hits[coords[:, 0].astype(int), coords[:, 1].astype(int)] = 1.0
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    export_pgm(out_path, Tensor(hits))
    print(f"wrote coordinate scatter ({int(hits.sum())}/{hits.size} pixels hit) to {out_path}")
    return 0


def cmd_count(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    out = _out_dir(args)
    base_cfg = cfg.unet_config()
    counts = {}
    for kind in UPSAMPLER_KINDS:
        ucfg = UNetConfig(
            spatial_rank=base_cfg.spatial_rank,
            extent=base_cfg.extent,
            depth=base_cfg.depth,
            base_channels=base_cfg.base_channels,
            upsampler=kind,
            r=base_cfg.r,
            switches=base_cfg.switches,
        )
        counts[kind] = count_params_flops(ucfg)
    ref_params, ref_madds = counts["linear"]
    rows = ["upsampler,params,mult_adds,params_overhead_pct,mult_adds_overhead_pct"]
    print(f"{'upsampler':<18} {'params':>12} {'mult-adds':>14} {'d params':>9} {'d madds':>9}")
    for kind in UPSAMPLER_KINDS:
        p, m = counts[kind]
        dp = 100.0 * (p - ref_params) / ref_params
        dm = 100.0 * (m - ref_madds) / ref_madds
        rows.append(f"{kind},{p},{m},{dp:.4f},{dm:.4f}")
        print(f"{kind:<18} {p:>12} {m:>14} {dp:>8.2f}% {dm:>8.2f}%")
    _write_lines(out / "count.csv", rows)
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    out = _out_dir(args)
    manifest = write_dataset(cfg.dataset_spec(), out)
    print(f"wrote {cfg.n_train + cfg.n_val} samples, manifest {manifest}")
    return 0


def _add_common(p: argparse.ArgumentParser, config=True) -> None:
    if config:
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtcup",
        description="Deformable transposed-convolution upsampling: training, ablations, checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="certify analytic gradients against finite differences")
    p.add_argument("--ops", default=None, help="comma-separated op-name prefixes to check")
    p.add_argument("--trials", type=int, default=None, help="random instances per op")
    p.add_argument("--tol-rel", type=float, default=None, help="override relative tolerance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-failure", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("train", help="train one model and write artifacts")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("compare", help="train several upsamplers over several seeds")
    _add_common(p)
    p.add_argument("--upsamplers", default="linear,dtc_over_linear")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("sweep-rf", help="sweep the receptive-field parameter")
    _add_common(p)
    p.add_argument("--r", default="inf,10,2,1", help="comma-separated r values (inf allowed)")
    p.set_defaults(fn=cmd_sweep_rf)

    p = sub.add_parser("ablate-coordgen", help="train the six coordinate-generation variants")
    _add_common(p)
    p.set_defaults(fn=cmd_ablate_coordgen)

    p = sub.add_parser("export-coords", help="render a sampling-coordinate scatter image")
    p.add_argument("--checkpoint", required=True, help="directory written by `train`")
    p.add_argument("--sample", type=int, default=0, help="dataset sample index")
    p.add_argument("--level", type=int, default=0, help="decoder level")
    p.add_argument("--out", default="coords.pgm", help="output PGM path")
    p.set_defaults(fn=cmd_export_coords)

    p = sub.add_parser("count", help="parameter and mult-add accounting per upsampler")
    _add_common(p)
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("gen-data", help="write the synthetic dataset to disk")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
