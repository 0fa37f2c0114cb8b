"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 unreadable or unwritable file, 3 malformed
or incompatible file, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import diffusion as dif
from . import io
from . import network as net
from .localization import ConfigurationError as LocConfigError
from .localization import OraclePowerModel, SurrogatePowerModel, localization_sweep, localize_rx
from .raysim import SceneSpec, Tracer, generate_dataset, generate_scene, link_statistics
from .scene import Antenna
from .surrogate import Surrogate
from .training import TRANSFORMS, LinkTable, TrainConfig, data_efficiency_sweep, evaluate, split_by_scene, train

EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("WGATR_THREADS")
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise UsageError(f"WGATR_THREADS must be an integer, got {env!r}")


def _range(text: str, cast=int) -> tuple:
    parts = text.split("-") if cast is int else text.split(":")
    try:
        vals = [cast(p) for p in parts]
    except ValueError:
        raise UsageError(f"bad range {text!r}")
    if len(vals) == 1:
        return (vals[0], vals[0])
    if len(vals) != 2:
        raise UsageError(f"bad range {text!r}")
    return tuple(vals)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _model_config(args, variant: str) -> net.ModelConfig:
    return net.ModelConfig(variant, blocks=args.blocks, mv_channels=args.mv_channels, scalar_channels=args.scalar_channels, heads=args.heads)


def _add_model_args(p, blocks=8, mv=16, s=32, heads=8):
    p.add_argument("--blocks", type=int, default=blocks)
    p.add_argument("--mv-channels", type=int, default=mv)
    p.add_argument("--scalar-channels", type=int, default=s)
    p.add_argument("--heads", type=int, default=heads)


# ---------------------------------------------------------------------------
# commands


def cmd_genscenes(args):
    spec = SceneSpec(rooms=_range(args.rooms), tx_per_scene=args.tx_per_scene, rx_per_scene=args.rx_per_scene)
    path = generate_dataset(args.seed, args.n, args.out, spec, threads=_threads(args))
    print(f"wrote {path}")


def cmd_train(args):
    table = LinkTable.from_dataset(io.read_dataset(args.dataset))
    tc = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed, eval_every=args.eval_every)
    log = args.log or str(Path(args.out).with_suffix(".csv"))
    res = train(table, _model_config(args, args.variant), tc, log_path=log)
    res.surrogate.save(args.out)
    last = res.log[-1]
    print(f"step {last['step']} train_loss {last['train_loss']:.6g} val_mae_db {last['val_mae_db']:.6g}")


def cmd_eval(args):
    sur = Surrogate.load(args.ckpt)
    table = LinkTable.from_dataset(io.read_dataset(args.dataset))
    idx = None
    if args.split != "all":
        tr, va = split_by_scene(table, args.val_fraction, args.split_seed)
        idx = tr if args.split == "train" else va
    mae = evaluate(sur, table, idx, args.transform, seed=args.seed)
    if not np.isfinite(mae):
        raise FloatingPointError("MAE is not finite")
    report = {"checkpoint": str(args.ckpt), "dataset": str(args.dataset), "transform": args.transform, "split": args.split, "links": len(table) if idx is None else int(len(idx)), "mae_db": mae}
    print(f"MAE ({args.transform}): {mae:.6f} dB")
    if args.out:
        _write_json(args.out, report)


def _load_power_model(args, scene):
    if args.oracle:
        return OraclePowerModel(scene)
    if not args.ckpt:
        raise LocConfigError("give --ckpt or --oracle")
    return SurrogatePowerModel(Surrogate.load(args.ckpt), scene)


def cmd_heatmap(args):
    scene = io.read_scene(args.scene)
    if not 0 <= args.tx_index < len(scene.tx):
        raise UsageError(f"--tx-index {args.tx_index} out of range ({len(scene.tx)} transmitters)")
    if args.res <= 0:
        raise UsageError("--res must be positive")
    tx = scene.tx[args.tx_index]
    if scene.n_faces:
        lo, hi = scene.vertices.reshape(-1, 3).min(0), scene.vertices.reshape(-1, 3).max(0)
    else:
        lo, hi = tx.pos - args.extent, tx.pos + args.extent
    # cell centers of the whole cells that fit in the box
    cells = lambda a, b: max(1, int(np.floor((b - a) / args.res + 1e-9)))
    xs = lo[0] + args.res * (np.arange(cells(lo[0], hi[0])) + 0.5)
    ys = lo[1] + args.res * (np.arange(cells(lo[1], hi[1])) + 0.5)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, args.z)], axis=1)
    ori = np.array([0.0, 0.0, 1.0])
    if args.oracle:
        tracer = Tracer(scene)
        imgs = tracer.images(tx.pos)
        vals = np.array([link_statistics(tracer, tx.pos, p, 25, imgs)[0] for p in pts])
    else:
        sur = Surrogate.load(args.ckpt)
        scenes = [scene.with_antennas(tx=[tx], rx=[Antenna(p, ori)]) for p in pts]
        vals = sur.predict_power(scenes, dtype=np.float32)
    grid = vals.reshape(gx.shape)[::-1]  # north up
    out = Path(args.out)
    io.write_grid_csv(out.with_suffix(".csv"), xs, ys[::-1], grid)
    io.write_ppm(out.with_suffix(".ppm"), grid)
    print(f"wrote {out.with_suffix('.csv')} and {out.with_suffix('.ppm')} ({grid.shape[1]}x{grid.shape[0]})")


def _read_measurements(path) -> list[tuple[int, float]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        meas = [(int(r["tx_index"]), float(r["power_db"])) for r in rows]
    except (KeyError, ValueError, TypeError) as exc:
        raise io.FormatError(f"{path}: expected columns tx_index,power_db ({exc!r})")
    return meas


def cmd_localize(args):
    scene = io.read_scene(args.scene)
    meas = _read_measurements(args.measurements)
    if not meas:
        raise UsageError("measurement file has no rows")
    for i, _ in meas:
        if not 0 <= i < len(scene.tx):
            raise UsageError(f"measurement refers to transmitter {i}, scene has {len(scene.tx)}")
    model = _load_power_model(args, scene)
    res = localize_rx(model, scene, meas, restarts=args.restarts, steps=args.steps, lr=args.lr, optimize_orientation=args.optimize_orientation, seed=args.seed)
    report = res.to_dict()
    print(f"position {np.round(res.position, 4).tolist()} residual {res.residual:.6g} dB^2 ({len(res.candidates)} candidates)")
    if args.out:
        _write_json(args.out, report)


def cmd_diffuse_train(args):
    table = LinkTable.from_dataset(io.read_dataset(args.dataset))
    cfg = dif.denoiser_config(blocks=args.blocks, mv_channels=args.mv_channels, scalar_channels=args.scalar_channels, heads=args.heads)
    dcfg = dif.DiffusionConfig(T=args.T, ddim_steps=min(args.ddim_steps, args.T))
    tc = dif.DiffusionTrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed, log_every=args.log_every)
    log = args.log or str(Path(args.out).with_suffix(".csv"))
    model = dif.train_diffusion(table, cfg, dcfg, tc, log_path=log)
    model.save(args.out)
    print(f"wrote {args.out}")


def cmd_diffuse_sample(args):
    model = dif.DiffusionModel.load(args.ckpt)
    scene = io.read_scene(args.scene)
    if not 0 <= args.tx_index < len(scene.tx):
        raise UsageError(f"--tx-index {args.tx_index} out of range ({len(scene.tx)} transmitters)")
    if args.rx is not None:
        rx = Antenna(_floats(args.rx))
    elif scene.rx:
        rx = scene.rx[0]
    elif args.mask in ("rx", "none"):
        rx = Antenna(0.5 * np.add(*scene.bounds()))  # placeholder, generated anyway
    else:
        raise UsageError("give --rx x,y,z (the scene has no receiver)")
    if args.power is None and args.mask not in ("signal", "none"):
        raise UsageError(f"--power is required with --mask {args.mask}")
    scene = scene.with_antennas(tx=[scene.tx[args.tx_index]], rx=[rx])
    samples, _ = dif.sample(model, scene, args.power, args.mask, args.n, args.seed, args.sampler, args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, (s, h) in enumerate(samples):
        name = f"sample_{k:04d}.json"
        io.write_scene(out / name, s)
        lines.append(io.dumps_line({"scene": name, "power_db": h, "rx": s.rx[0].pos.tolist(), "mask": args.mask}))
    (out / "samples.jsonl").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(samples)} samples to {out}")


def cmd_vlb(args):
    model = dif.DiffusionModel.load(args.ckpt)
    table = LinkTable.from_dataset(io.read_dataset(args.dataset))
    rng = np.random.default_rng([args.seed, 23])
    idx = np.arange(len(table))[: args.n_links] if args.n_links else np.arange(len(table))
    ts = None
    if args.timesteps:
        ts = np.unique(np.round(np.linspace(2, model.dcfg.T, args.timesteps)).astype(int))
    rows = []
    for i in idx:
        b = dif.collate_raw(dif.raw_items(table, [i], model.normalizer, model.dcfg.coord_scale))
        rows.append(dif.vlb(model, b, dif.token_mask(b, args.mask), rng, ts))
    keys = ("L_T", "L_mid", "L_0", "total")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    if not all(np.isfinite(v) for v in mean.values()):
        raise FloatingPointError(f"non-finite bound {mean}")
    report = {"mask": args.mask, "links": len(rows), "nats_per_dim": mean}
    print(json.dumps(report, sort_keys=True))
    if args.out:
        _write_json(args.out, report)


def cmd_sweep_data(args):
    table = LinkTable.from_dataset(io.read_dataset(args.dataset))
    cfgs = {v: _model_config(args, v) for v in args.variants.split(",")}
    tc = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    rows = data_efficiency_sweep(table, _floats(args.fractions), _ints(args.seeds), cfgs, tc, out_csv=args.out)
    for r in rows:
        print(f"{r['variant']:12s} fraction {r['fraction']:.3g} seed {r['seed']} mae {r['val_mae_db']:.4f}")


def cmd_sweep_loc(args):
    counts = _ints(args.tx_counts)
    if not counts:
        raise UsageError("--tx-counts is empty")
    spec = SceneSpec(rooms=_range(args.rooms), tx_per_scene=max(counts), rx_per_scene=1)
    scenes = [generate_scene(np.random.default_rng(np.random.SeedSequence([args.seed, i])), spec) for i in range(args.n_scenes)]
    if args.oracle:
        factory = OraclePowerModel
    else:
        if not args.ckpt:
            raise LocConfigError("give --ckpt or --oracle")
        sur = Surrogate.load(args.ckpt)
        factory = lambda s: SurrogatePowerModel(sur, s)
    rows = localization_sweep(factory, scenes, counts, args.trials, seed=args.seed, spec=spec, out_csv=args.out, restarts=args.restarts, steps=args.steps, lr=args.lr, optimize_orientation=args.optimize_orientation)
    for r in rows:
        print(f"{r['n_tx']} tx: mean {r['mean_error_m']:.4f} m +- {r['stderr_m']:.4f} (median {r['median_error_m']:.4f}, n={r['trials']})")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="wigatr", description="Geometric-algebra surrogates for indoor radio propagation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="worker count (default: WGATR_THREADS or 1)")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("genscenes", parents=[common], help="generate scenes and an oracle dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--rooms", default="1-3", help="room count or range, e.g. 2 or 1-3")
    p.add_argument("--tx-per-scene", type=int, default=2)
    p.add_argument("--rx-per-scene", type=int, default=25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_genscenes)

    p = sub.add_parser("train", parents=[common], help="train a power surrogate")
    p.add_argument("--dataset", required=True)
    p.add_argument("--variant", choices=("gatr", "transformer"), default="gatr")
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--eval-every", type=int, default=500)
    _add_model_args(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV log (default: checkpoint path with .csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="mean absolute error of a surrogate")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--transform", choices=TRANSFORMS, default="none")
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--split-seed", type=int, default=0, help="seed used for the scene split at training time")
    p.add_argument("--out", help="JSON report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", parents=[common], help="received power over an x-y grid")
    p.add_argument("--ckpt")
    p.add_argument("--oracle", action="store_true", help="use the ray tracer instead of a checkpoint")
    p.add_argument("--scene", required=True)
    p.add_argument("--tx-index", type=int, default=0)
    p.add_argument("--z", type=float, default=1.5)
    p.add_argument("--res", type=float, default=0.25, help="grid spacing in meters")
    p.add_argument("--extent", type=float, default=5.0, help="half width around the transmitter for empty scenes")
    p.add_argument("--out", required=True, help="output prefix; writes .csv and .ppm")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("localize", parents=[common], help="receiver localization from power measurements")
    p.add_argument("--ckpt")
    p.add_argument("--oracle", action="store_true", help="use the differentiable ray tracer")
    p.add_argument("--scene", required=True)
    p.add_argument("--measurements", required=True, help="CSV with columns tx_index,power_db")
    p.add_argument("--restarts", type=int, default=16)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--optimize-orientation", action="store_true")
    p.add_argument("--out", help="result JSON")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("diffuse-train", parents=[common], help="train a masked diffusion model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--steps", type=int, default=50_000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--ddim-steps", type=int, default=100)
    p.add_argument("--log-every", type=int, default=500)
    _add_model_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_diffuse_train)

    p = sub.add_parser("diffuse-sample", parents=[common], help="conditional samples by inpainting")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True, help="scene supplying the mesh and transmitter")
    p.add_argument("--tx-index", type=int, default=0)
    p.add_argument("--rx", help="receiver position x,y,z (default: first receiver in the scene)")
    p.add_argument("--power", type=float, help="measured power in dB (needed unless --mask signal or none)")
    p.add_argument("--mask", choices=dif.MASK_TYPES, default="signal")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--sampler", choices=("ddpm", "ddim"), default="ddim")
    p.add_argument("--steps", type=int, help="DDIM steps (default from the checkpoint)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_diffuse_sample)

    p = sub.add_parser("vlb", parents=[common], help="variational bound on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mask", choices=dif.MASK_TYPES, default="signal")
    p.add_argument("--n-links", type=int, default=0, help="first N links only (0: all)")
    p.add_argument("--timesteps", type=int, default=0, help="evaluate this many evenly spaced terms (0: all)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_vlb)

    p = sub.add_parser("sweep-data-efficiency", parents=[common], help="MAE against training-set fraction")
    p.add_argument("--dataset", required=True)
    p.add_argument("--fractions", default="0.1,0.3,1.0")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default="gatr,transformer")
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    _add_model_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_data)

    p = sub.add_parser("sweep-localization", parents=[common], help="localization error against transmitter count")
    p.add_argument("--ckpt")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--n-scenes", type=int, default=10)
    p.add_argument("--rooms", default="1")
    p.add_argument("--trials", type=int, default=10, help="receivers per scene")
    p.add_argument("--tx-counts", default="1,4,8")
    p.add_argument("--restarts", type=int, default=16)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--optimize-orientation", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_loc)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"wigatr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.FormatError, LocConfigError, dif.ConfigurationError) as exc:
        print(f"wigatr: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"wigatr: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"wigatr: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"wigatr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
