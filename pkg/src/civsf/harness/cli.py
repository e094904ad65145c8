"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
Flags override config-file values; `--set key=value` overrides any field.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from civsf.datamodel import load_container, split
from civsf.errors import (CompatibilityError, ConfigError, DataFormatError,
                          DomainError, NumericError, ShapeError)
from civsf.harness import config as config_mod
from civsf.harness import report
from civsf.harness.config import FRAMEWORKS, Config
from civsf.harness.metrics import bucket_means
from civsf.harness.ppm import write_ppm
from civsf.masking import build_mask, render_mask, verify_mask
from civsf.numerics import RngStream, no_grad
from civsf.numerics.gradcheck import grad_check


def _overrides(args) -> dict[str, str]:
    out: dict[str, str] = {}
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise ConfigError(f"--set expects key=value, got '{kv}'")
        key, value = kv.split("=", 1)
        out[key.strip()] = value.strip()
    if getattr(args, "framework", None):
        out["framework"] = args.framework
    if getattr(args, "seed", None) is not None:
        out["seed"] = str(args.seed)
    return out


def _load_cfg(args) -> Config:
    ov = _overrides(args)
    if getattr(args, "config", None):
        return config_mod.from_file(args.config, ov)
    return config_mod.from_overrides(ov)


def _load_data(path: str):
    if not path or not os.path.exists(path):
        raise DataFormatError(f"dataset not found: {path!r}")
    return load_container(path)


def _ckpt_model(path: str):
    from civsf.training.pretrain import load_model
    if not path or not os.path.exists(path):
        raise DataFormatError(f"checkpoint not found: {path!r}")
    return load_model(path)


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from civsf.synthworld import WorldConfig, gen_dataset
    cfg = _load_cfg(args)
    world = WorldConfig(side=cfg.side, n_regions=cfg.world_regions,
                        crop_classes=cfg.crop_classes, gap_min=cfg.world_gap_min,
                        gap_max=cfg.world_gap_max, sigma=cfg.world_sigma)
    samples = gen_dataset(cfg.world_samples, world, cfg.seed, args.out,
                          config_note=f"config: {cfg.hash()} seed: {cfg.seed}")
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    from civsf.training.pretrain import run_framework
    cfg = _load_cfg(args)
    samples = _load_data(args.data)
    train_idx, _, _ = split(len(samples), (cfg.train_frac, cfg.val_frac, cfg.test_frac),
                            cfg.seed)
    train = [samples[i] for i in train_idx]
    os.makedirs(args.out, exist_ok=True)
    tag = f"{cfg.framework}-seed{cfg.seed}"
    ckpt = os.path.join(args.out, f"{tag}.ckpt")
    path, records = run_framework(cfg.framework, train, cfg, cfg.seed, ckpt,
                                  resume_from=args.resume, verbose=not args.quiet)
    report.write_log(os.path.join(args.out, f"{tag}-log.csv"),
                     records, cfg.hash(), cfg.seed)
    print(f"checkpoint: {path}")
    return 0


_FT_TASKS = ("soil", "estimate", "estimate-cross", "crop", "missing", "future")
_FT_METRIC = {"soil": "MAE", "estimate": "MAE", "estimate-cross": "MAE",
              "crop": "F1", "missing": "MSE", "future": "MSE"}


def _run_finetune(task: str, model, samples, cfg: Config, seed: int):
    from civsf.training import finetune as ft
    if task == "soil":
        return ft.finetune_soil_forecast(model, samples, cfg, seed)
    if task == "estimate":
        return ft.finetune_estimate(model, samples, cfg, seed, protocol="in-region")
    if task == "estimate-cross":
        return ft.finetune_estimate(model, samples, cfg, seed, protocol="cross-region")
    if task == "crop":
        return ft.finetune_crop(model, samples, cfg, seed)
    if task == "missing":
        return ft.finetune_missing(model, samples, cfg, seed)
    if task == "future":
        return ft.finetune_future_image(model, samples, cfg, seed)
    raise ConfigError(f"unknown fine-tune task '{task}'")


def cmd_finetune(args) -> int:
    from civsf.harness.checkpoint import save_checkpoint
    model, cfg, _ = _ckpt_model(args.ckpt)
    ov = _overrides(args)
    if ov:
        pairs = {f: str(getattr(cfg, f)) for f in cfg.__dataclass_fields__}
        pairs.update(ov)
        cfg = Config(**config_mod.parse_pairs(pairs))
    samples = _load_data(args.data)
    seed = cfg.seed if args.seed is None else args.seed
    result = _run_finetune(args.task, model, samples, cfg, seed)

    table = report.from_metrics(f"{result.task} ({model.kind})", _FT_METRIC[args.task],
                                model.kind, result.metrics, cfg.hash(), seed)
    print(table.render_text())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        tag = f"{args.task}-{model.kind}-seed{seed}"
        with open(os.path.join(args.out, f"{tag}.txt"), "w") as fh:
            fh.write(table.render_text())
        with open(os.path.join(args.out, f"{tag}.csv"), "w") as fh:
            fh.write(table.render_csv())
        if result.head_state:
            save_checkpoint(os.path.join(args.out, f"{tag}-head.ckpt"),
                            result.head_state,
                            {"task": result.task, "framework": model.kind,
                             "seed": str(seed), "config_hash": cfg.hash()})
    return 0


def cmd_evaluate(args) -> int:
    if args.reference:
        for table in report.render_reference_tables():
            print(table.render_text())
        return 0
    from civsf.training import finetune as ft
    from civsf.training.pretrain import _phase1c_batch
    model, cfg, _ = _ckpt_model(args.ckpt)
    samples = _load_data(args.data)
    _, _, test_idx = split(len(samples), (cfg.train_frac, cfg.val_frac, cfg.test_frac),
                           cfg.seed)
    stream = RngStream(cfg.seed)
    from civsf.datamodel import context_windows
    windows = [(si, s) for si in test_idx
               for s in context_windows(samples[si], cfg.context_len)]
    windows = windows[:cfg.ft_max_eval] if cfg.ft_max_eval else windows
    if not windows:
        raise DomainError("no evaluation windows in the test split")
    rng = stream.generator("eval/mask")
    total, seen = 0.0, 0
    with no_grad():
        for lo in range(0, len(windows), cfg.ft_batch):
            chunk = windows[lo:lo + cfg.ft_batch]
            loss = _phase1c_batch(model, samples, chunk, cfg, rng)
            total += float(loss.data) * len(chunk)
            seen += len(chunk)
    print(f"reconstruction objective on test split: {total / seen:.6f} "
          f"({seen} windows, config {cfg.hash()}, seed {cfg.seed})")

    if model.forecaster is not None:
        from civsf.numerics import Tensor
        _, insts = ft._instance_pools(samples, cfg, stream, "eval")
        femb, truth, deltas = ft._forecast_cache(model, samples, insts, cfg)
        with no_grad():
            pred = model.decoder(Tensor(femb)).data
        per_inst = ((pred - truth) ** 2).mean(axis=(1, 2))
        table = report.ReportTable("Forecast MSE on test-split instances (no fine-tune)",
                                   "MSE", (model.kind,),
                                   {"config": cfg.hash(), "seed": str(cfg.seed)})
        for row, value in bucket_means(per_inst, deltas).items():
            table.set(row, model.kind, value)
        print(table.render_text())
    return 0


def cmd_forecast(args) -> int:
    model, cfg, _ = _ckpt_model(args.ckpt)
    samples = _load_data(args.data)
    if not 0 <= args.sample < len(samples):
        raise DomainError(f"sample index {args.sample} outside [0, {len(samples)})")
    s = samples[args.sample]
    c = cfg.context_len
    if not 0 <= args.start <= s.t_steps - c:
        raise DomainError(f"window start {args.start} outside [0, {s.t_steps - c}]")
    last_doy = int(s.doys[args.start + c - 1])
    if args.target_doy <= last_doy:
        raise DomainError(f"target doy {args.target_doy} not after context end {last_doy}")
    if model.forecaster is None:
        raise CompatibilityError(f"forecast needs a *-VSF checkpoint, got '{model.kind}'")
    targets = np.flatnonzero(s.doys == args.target_doy)
    femb = _forecast_at(model, s, args.start, args.target_doy, cfg)
    from civsf.encoders import unpatchify
    with no_grad():
        from civsf.numerics import Tensor
        patches = model.decoder(Tensor(femb)).data
    img = unpatchify(patches[0], model.enc.side, model.enc.patch)
    write_ppm(args.out, img, config_hash=cfg.hash(), seed=cfg.seed)
    print(f"wrote forecast composite to {args.out}")
    if targets.size:
        truth_path = args.out + ".truth.ppm"
        write_ppm(truth_path, s.images[int(targets[0])],
                  config_hash=cfg.hash(), seed=cfg.seed)
        print(f"wrote observed composite to {truth_path}")
    return 0


def _forecast_at(model, s, start_idx: int, target_doy: int, cfg: Config) -> np.ndarray:
    """Frozen forecast embedding for one window of one sample at any DOY
    after the context (observed or not)."""
    from civsf.forecast_decode import forecast_embed
    from civsf.training.model import trivial_plans
    c = cfg.context_len
    imgs = s.images[start_idx:start_idx + c][None]
    doys = s.doys[start_idx:start_idx + c][None]
    start = int(s.start_doy)
    tgt = np.array([target_doy])
    if target_doy - start + 1 > s.weather.shape[0]:
        raise DomainError(f"target doy {target_doy} beyond weather span")
    plans = trivial_plans(c, model.enc.grid, 1)
    with no_grad():
        h = None
        w_t = None
        if model.weather is not None:
            h = model.encode_weather(s.weather[None], steps=target_doy - start + 1)
            w_t = h[np.arange(1), tgt - start]
        emb = model.encode_series(imgs, doys, h, start, plans, mask_pixels=True)
        femb = forecast_embed(model.forecaster, emb[:, -1], w_t,
                              model.doy(tgt), model.delta(tgt - doys[:, -1]))
    return femb.data


def cmd_inspect_mask(args) -> int:
    rng = RngStream(args.seed).generator("inspect-mask")
    plan = build_mask(args.t, args.g, args.ratio, rng)
    verify_mask(plan)
    print(render_mask(plan))
    print(f"rows masked: {plan.masked.sum(axis=1).tolist()}")
    print(f"cols masked: {plan.masked.sum(axis=0).tolist()}")
    return 0


def run_gradcheck(seed: int, max_coords: int = 4) -> float:
    """Finite-difference check of the full forecasting loss in float64."""
    from civsf.datamodel import Instance, Sample
    from civsf.training.model import FrameworkModel
    from civsf.training.pretrain import _phase2_batch
    cfg = Config(framework="ci-vsf", side=8, patch=4, hidden=16, vit_heads=4,
                 temporal_heads=4, context_len=3, mask_ratio=0.0)
    rng = RngStream(seed).generator("gradcheck/data")
    doys = np.array([10, 25, 40, 60, 85], dtype=np.int64)
    wx = np.stack([rng.uniform(-5, 15, 100), rng.uniform(0, 25, 100),
                   rng.uniform(0, 8, 100), rng.uniform(-4, 4, 100),
                   rng.uniform(-4, 4, 100)], axis=1).astype(np.float32)
    sample = Sample(images=rng.uniform(0, 1, (5, 6, 8, 8)).astype(np.float32),
                    doys=doys, weather=wx, start_doy=1)
    inst = Instance(0, 0, 3, 4, int(doys[4] - doys[2]))
    model = FrameworkModel("ci-vsf", cfg, seed, dtype=np.float64)

    def loss_fn():
        return _phase2_batch(model, [sample], [inst], cfg,
                             RngStream(seed).generator("gradcheck/mask"))

    return grad_check(loss_fn, model.named_parameters(),
                      max_coords_per_param=max_coords,
                      rng=RngStream(seed).generator("gradcheck/coords"))


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for seed in range(args.seed, args.seed + args.repeats):
        err = run_gradcheck(seed, args.coords)
        worst = max(worst, err)
        print(f"seed {seed}: max relative error {err:.3e}")
    if worst > args.threshold:
        print(f"FAIL: {worst:.3e} > {args.threshold:.1e}", file=sys.stderr)
        return 4
    print(f"OK: worst {worst:.3e} <= {args.threshold:.1e}")
    return 0


# -- parser and dispatch -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="civsf")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, ckpt=False):
        p.add_argument("--config", help="config file of key = value lines")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config field")
        p.add_argument("--seed", type=int, default=None)
        if data:
            p.add_argument("--data", required=True, help="dataset container path")
        if ckpt:
            p.add_argument("--ckpt", help="checkpoint path")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset container")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain one framework")
    common(p, data=True)
    p.add_argument("--framework", choices=FRAMEWORKS)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="resume from this checkpoint")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a downstream head")
    common(p, data=True, ckpt=True)
    p.add_argument("--task", choices=_FT_TASKS, required=True)
    p.add_argument("--out", help="directory for tables and head weights")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", help="frozen-model diagnostics or reference tables")
    common(p, data=False, ckpt=True)
    p.add_argument("--data", help="dataset container path")
    p.add_argument("--reference", action="store_true",
                   help="print the published reference tables and exit")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("forecast", help="decode one forecast to a PPM composite")
    common(p, data=True, ckpt=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--start", type=int, default=0, help="context window start index")
    p.add_argument("--target-doy", type=int, required=True)
    p.add_argument("--out", required=True, help="output PPM path")
    p.set_defaults(fn=cmd_forecast)

    p = sub.add_parser("inspect-mask", help="print one spatiotemporal mask plan")
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--g", type=int, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_inspect_mask)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--coords", type=int, default=4, help="coordinates per parameter")
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataFormatError, DomainError, CompatibilityError, ShapeError,
            FileNotFoundError, IsADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericError, OSError) as e:
        print(f"numeric/io error: {e}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(cli(sys.argv[1:]))
