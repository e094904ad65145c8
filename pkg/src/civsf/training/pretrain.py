"""Pretraining phases and the per-framework runner.

Phase 1a reconstructs single images from unmasked patches, 1b reconstructs
masked daily weather through the LSTM, 1c reconstructs image series with
embeddings masked at the temporal stage, and phase 2 trains variable-step
forecasting on next-step chains with a sampled final horizon K. Frameworks
run their subset: sm-mr 1a+1c, mm-mr 1a+1b+1c (plus the auxiliary weather
head in 1c), sm-vsf 1a+1c+2, ci-vsf all four.

Every random draw comes from a stream labeled by phase, epoch and purpose,
so a resumed run replays the exact draws of an uninterrupted one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from civsf.datamodel import Instance, Sample, build_instances, context_windows
from civsf.encoders import WeatherEncoder, patchify, temporal_match
from civsf.errors import CompatibilityError, DomainError, NumericError, ShapeError
from civsf.forecast_decode import forecast_embed, repopulate
from civsf.fusion import causal_temporal_encode, fuse_add
from civsf.harness.checkpoint import load_checkpoint, save_checkpoint
from civsf.harness.config import Config
from civsf.masking import build_mask, build_weather_mask
from civsf.numerics import RngStream, optim
from civsf.training.model import FrameworkModel, uses_forecaster, uses_weather

PHASES = {
    "sm-mr": ("1a", "1c"),
    "mm-mr": ("1a", "1b", "1c"),
    "sm-vsf": ("1a", "1c", "2"),
    "ci-vsf": ("1a", "1b", "1c", "2"),
}


@dataclass
class EpochRecord:
    epoch: int          # global index across phases
    phase: str
    framework: str
    loss: float
    seconds: float


def phase_schedule(kind: str, cfg: Config) -> list[tuple[str, int]]:
    epochs = {"1a": cfg.epochs_1a, "1b": cfg.epochs_1b,
              "1c": cfg.epochs_1c, "2": cfg.epochs_2}
    return [(p, epochs[p]) for p in PHASES[kind] if epochs[p] > 0]


# -- epoch pools -------------------------------------------------------------

def image_pool(samples: list[Sample]) -> list[tuple[int, int]]:
    return [(si, t) for si, s in enumerate(samples) for t in range(s.t_steps)]


def window_pool(samples: list[Sample], context_len: int) -> list[tuple[int, int]]:
    return [(si, start) for si, s in enumerate(samples)
            for start in context_windows(s, context_len)]


def phase2_window_pool(samples: list[Sample], cfg: Config) -> list[list[Instance]]:
    """Instances grouped by context window, so K can be resampled per window
    each epoch."""
    pool: list[list[Instance]] = []
    for si, s in enumerate(samples):
        by_start: dict[int, list[Instance]] = {}
        for inst in build_instances(s, si, cfg.context_len, cfg.gap_min, cfg.gap_max):
            by_start.setdefault(inst.start, []).append(inst)
        pool.extend(by_start.values())
    return pool


def epoch_selection(n: int, cap: int, stream: RngStream, label: str) -> np.ndarray:
    perm = stream.generator(label).permutation(n)
    return perm[:cap] if cap else perm


def phase2_epoch_instances(pool: list[list[Instance]], cfg: Config,
                           stream: RngStream, epoch: int) -> list[Instance]:
    """One instance per selected window, horizon K drawn fresh this epoch."""
    take = epoch_selection(len(pool), cfg.instances_per_epoch, stream,
                           f"2/epoch{epoch}/order")
    g = stream.generator(f"2/epoch{epoch}/horizon")
    return [pool[i][int(g.integers(len(pool[i])))] for i in take]


def _common_start(samples: list[Sample], idxs) -> int:
    starts = {int(samples[i].start_doy) for i in idxs}
    if len(starts) != 1:
        raise ShapeError(f"mixed start_doy values in one batch: {sorted(starts)}")
    return starts.pop()


# -- per-batch losses --------------------------------------------------------

def _phase1a_batch(model: FrameworkModel, samples, rows, cfg: Config, rng):
    imgs = np.stack([samples[si].images[t] for si, t in rows])
    b = imgs.shape[0]
    g = model.enc.grid
    n_mask = round(cfg.mask_ratio * g)
    kept = np.empty((b, g - n_mask), dtype=np.int64)
    for i in range(b):
        hidden = rng.choice(g, size=n_mask, replace=False)
        keep = np.ones(g, dtype=bool)
        keep[hidden] = False
        kept[i] = np.flatnonzero(keep)

    patches = patchify(imgs, model.enc.patch)                       # (B, G, P)
    sel = np.take_along_axis(patches, kept[..., None], axis=1)
    tokens = model.vit(sel[:, None].astype(model.dtype), kept[:, None])
    tokens = tokens.reshape(b, kept.shape[1], model.enc.hidden)
    pred = model.decoder(repopulate(tokens, kept, g))               # (B, G, P)
    truth = patches
    if cfg.loss_scope == "unmasked":
        pred = pred[np.arange(b)[:, None], kept]
        truth = sel
    return ((pred - truth) ** 2).mean()


def _phase1b_batch(model: FrameworkModel, wx: np.ndarray, cfg: Config, rng):
    b, length, _ = wx.shape
    mask = np.stack([build_weather_mask(length, cfg.weather_mask_ratio, rng)
                     for _ in range(b)])
    h = model.weather(wx, day_mask=mask)
    pred = model.weather.reconstruct(h)
    return ((pred - WeatherEncoder.normalize(wx)) ** 2).mean()


def _phase1c_batch(model: FrameworkModel, samples, rows, cfg: Config, rng):
    c = cfg.context_len
    imgs = np.stack([samples[si].images[s:s + c] for si, s in rows])
    doys = np.stack([samples[si].doys[s:s + c] for si, s in rows])
    start = _common_start(samples, [si for si, _ in rows])
    b = len(rows)
    g = model.enc.grid
    plans = [build_mask(c, g, cfg.mask_ratio, rng) for _ in range(b)]

    # the ViT sees every patch; the plans mask embeddings at the temporal stage
    patches = patchify(imgs, model.enc.patch)
    grid_all = np.broadcast_to(np.arange(g), (b, c, g))
    tokens = model.vit(patches.astype(model.dtype, copy=False), grid_all)
    weather_t = None
    wx = None
    if model.weather is not None:
        wx = np.stack([samples[si].weather for si, _ in rows])
        h = model.encode_weather(wx, steps=int(doys.max()) - start + 1)
        weather_t = temporal_match(h, doys, start)
    fused = fuse_add(tokens, weather_t, model.doy(doys))
    emb = causal_temporal_encode(model.temporal, fused, plans, full_grid=True)

    grid_idx = np.stack([p.unmasked_patches for p in plans])       # (B, C, U)
    pred = model.decoder(repopulate(emb, grid_idx, g))             # (B, C, G, P)
    truth = patches
    if cfg.loss_scope == "unmasked":
        bi = np.arange(b)[:, None, None]
        ci = np.arange(c)[None, :, None]
        pred = pred[bi, ci, grid_idx]
        truth = np.take_along_axis(truth, grid_idx[..., None], axis=2)
    loss = ((pred - truth) ** 2).mean()

    if model.wx_head is not None:
        # auxiliary recon of same-day weather from patch-pooled fused tokens
        wx_pred = model.wx_head(fused.mean(axis=2))                # (B, C, 5)
        truth_w = WeatherEncoder.normalize(wx)[np.arange(b)[:, None], doys - start]
        loss = loss + ((wx_pred - truth_w) ** 2).mean()
    return loss


def _phase2_batch(model: FrameworkModel, samples, insts: list[Instance],
                  cfg: Config, rng):
    c = cfg.context_len
    b = len(insts)
    g = model.enc.grid
    imgs = np.stack([samples[i.sample_idx].images[i.start:i.start + c] for i in insts])
    doys = np.stack([samples[i.sample_idx].doys[i.start:i.start + c] for i in insts])
    tgt_doy = np.array([int(samples[i.sample_idx].doys[i.target]) for i in insts])
    start = _common_start(samples, [i.sample_idx for i in insts])
    plans = [build_mask(c, g, cfg.mask_ratio, rng) for _ in range(b)]

    weather_h = None
    if model.weather is not None:
        wx = np.stack([samples[i.sample_idx].weather for i in insts])
        weather_h = model.encode_weather(wx, steps=int(tgt_doy.max()) - start + 1)
    emb = model.encode_series(imgs, doys, weather_h, start, plans, mask_pixels=True)

    grid_idx = np.stack([p.unmasked_patches for p in plans])       # (B, C, U)
    b_rows = np.arange(b)
    step_losses = []
    for i in range(c):
        if i < c - 1:
            step_doy = doys[:, i + 1]
            truth_imgs = imgs[:, i + 1]
        else:
            step_doy = tgt_doy
            truth_imgs = np.stack([samples[j.sample_idx].images[j.target] for j in insts])
        w_t = weather_h[b_rows, step_doy - start] if weather_h is not None else None
        femb = forecast_embed(model.forecaster, emb[:, i], w_t,
                              model.doy(step_doy), model.delta(step_doy - doys[:, i]))
        pred = model.decoder(repopulate(femb, grid_idx[:, i], g))  # (B, G, P)
        truth = patchify(truth_imgs, model.enc.patch)
        if cfg.loss_scope == "unmasked":
            pred = pred[b_rows[:, None], grid_idx[:, i]]
            truth = np.take_along_axis(truth, grid_idx[:, i][..., None], axis=1)
        step_losses.append(((pred - truth) ** 2).mean())
    loss = step_losses[0]
    for term in step_losses[1:]:
        loss = loss + term
    return loss / float(c)


# -- epoch loops ---------------------------------------------------------------

def _optim_step(opt, loss, phase: str, epoch: int) -> None:
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss in phase {phase} at epoch {epoch}")
    opt.zero_grad()
    loss.backward()
    opt.step()


def _mask_rng(stream: RngStream, cfg: Config, phase: str, epoch: int, step: int):
    if cfg.mask_resample == "step":
        return stream.generator(f"{phase}/epoch{epoch}/step{step}/mask")
    return None  # caller keeps the per-epoch generator


def run_epoch(phase: str, model: FrameworkModel, samples, pools, cfg: Config,
              stream: RngStream, opt, epoch: int) -> float:
    if phase == "1a":
        pool, batch, fn = pools["images"], cfg.batch_size, _phase1a_batch
        cap = cfg.images_per_epoch
    elif phase == "1b":
        pool, batch, fn = pools["samples"], cfg.batch_size, _phase1b_batch
        cap = 0
    elif phase == "1c":
        pool, batch, fn = pools["windows"], cfg.seq_batch_size, _phase1c_batch
        cap = cfg.instances_per_epoch
    elif phase == "2":
        pool, batch, fn = pools["phase2"], cfg.seq_batch_size, _phase2_batch
        cap = cfg.instances_per_epoch
    else:
        raise DomainError(f"unknown phase '{phase}'")
    if not pool:
        raise DomainError(f"phase {phase} has no training items "
                          f"(context_len {cfg.context_len}, gaps [{cfg.gap_min}, {cfg.gap_max}])")

    if phase == "2":
        items = phase2_epoch_instances(pool, cfg, stream, epoch)
    else:
        take = epoch_selection(len(pool), cap, stream, f"{phase}/epoch{epoch}/order")
        items = [pool[i] for i in take]

    epoch_rng = stream.generator(f"{phase}/epoch{epoch}/mask")
    total, seen = 0.0, 0
    for k, lo in enumerate(range(0, len(items), batch)):
        chunk = items[lo:lo + batch]
        rng = _mask_rng(stream, cfg, phase, epoch, k) or epoch_rng
        if phase == "1b":
            wx = np.stack([samples[si].weather for si in chunk])
            loss = fn(model, wx, cfg, rng)
        else:
            loss = fn(model, samples, chunk, cfg, rng)
        _optim_step(opt, loss, phase, epoch)
        total += float(loss.data) * len(chunk)
        seen += len(chunk)
    return total / seen


# -- checkpointing and the runner ----------------------------------------------

def _save(path: str, model: FrameworkModel, opt, kind: str, cfg: Config,
          seed: int, phase: str, epochs_done: int, global_epoch: int) -> None:
    tensors = {f"model/{n}": a for n, a in model.state_arrays().items()}
    tensors.update({f"opt/{n}": a for n, a in opt.state_arrays().items()})
    meta = {"framework": kind, "seed": str(seed), "phase": phase,
            "epochs_done": str(epochs_done), "global_epoch": str(global_epoch),
            "config_hash": cfg.hash()}
    meta.update({f"cfg/{k}": str(v) for k, v in
                 ((f, getattr(cfg, f)) for f in cfg.__dataclass_fields__)})
    save_checkpoint(path, tensors, meta)


def load_model(path: str) -> tuple[FrameworkModel, Config, dict[str, str]]:
    """Rebuild the exact model a checkpoint was saved from."""
    tensors, meta = load_checkpoint(path)
    cfg_pairs = {k[len("cfg/"):]: v for k, v in meta.items() if k.startswith("cfg/")}
    if "framework" not in meta or "seed" not in meta:
        raise CompatibilityError(f"{path} lacks framework/seed metadata")
    from civsf.harness.config import parse_pairs
    cfg = Config(**parse_pairs(cfg_pairs))
    model = FrameworkModel(meta["framework"], cfg, int(meta["seed"]))
    model.load_state({k[len("model/"):]: v for k, v in tensors.items()
                      if k.startswith("model/")})
    return model, cfg, meta


def run_framework(kind: str, samples: list[Sample], cfg: Config, seed: int,
                  out_path: str, resume_from: str | None = None,
                  verbose: bool = False) -> tuple[str, list[EpochRecord]]:
    """Train one framework end to end; returns (checkpoint path, epoch log).

    resume_from restarts at the epoch after the checkpoint's last completed
    one and replays the identical stream draws, so the result is bitwise
    equal to an uninterrupted run.
    """
    model = FrameworkModel(kind, cfg, seed)
    stream = RngStream(seed)
    sched = phase_schedule(kind, cfg)

    pools = {"images": image_pool(samples), "samples": list(range(len(samples)))}
    if any(p == "1c" for p, _ in sched):
        pools["windows"] = window_pool(samples, cfg.context_len)
    if uses_forecaster(kind):
        pools["phase2"] = phase2_window_pool(samples, cfg)

    start_pi, start_epoch, global_epoch = 0, 0, 0
    pending_opt = None
    if resume_from is not None:
        tensors, meta = load_checkpoint(resume_from)
        if meta.get("framework") != kind:
            raise CompatibilityError(
                f"checkpoint trained framework '{meta.get('framework')}', not '{kind}'")
        if meta.get("config_hash") != cfg.hash():
            raise CompatibilityError("checkpoint config does not match this run's config")
        model.load_state({k[len("model/"):]: v for k, v in tensors.items()
                          if k.startswith("model/")})
        names = [p for p, _ in sched]
        phase = meta.get("phase")
        if phase not in names:
            raise CompatibilityError(f"checkpoint phase '{phase}' not in schedule {names}")
        pi = names.index(phase)
        done = int(meta["epochs_done"])
        global_epoch = int(meta["global_epoch"])
        if done >= sched[pi][1]:
            start_pi, start_epoch = pi + 1, 0
        else:
            start_pi, start_epoch = pi, done
            pending_opt = {k[len("opt/"):]: v for k, v in tensors.items()
                           if k.startswith("opt/")}

    records: list[EpochRecord] = []
    for pi, (phase, n_epochs) in enumerate(sched):
        if pi < start_pi:
            continue
        opt = optim.Adam(model.phase_params(phase), lr=cfg.lr)
        first = start_epoch if pi == start_pi else 0
        if pending_opt is not None and pi == start_pi and first > 0:
            opt.load_state(pending_opt)
            pending_opt = None
        for e in range(first, n_epochs):
            t0 = time.monotonic()
            loss = run_epoch(phase, model, samples, pools, cfg, stream, opt, e)
            dt = time.monotonic() - t0
            records.append(EpochRecord(global_epoch, phase, kind, loss, dt))
            global_epoch += 1
            if verbose:
                print(f"[{kind}] phase {phase} epoch {e + 1}/{n_epochs}: "
                      f"loss {loss:.6f} ({dt:.1f}s)", flush=True)
            if e + 1 == n_epochs or (cfg.ckpt_every and (e + 1) % cfg.ckpt_every == 0):
                _save(out_path, model, opt, kind, cfg, seed, phase, e + 1, global_epoch)
    if not records and resume_from is None:
        raise DomainError(f"framework '{kind}' has an empty phase schedule")
    if resume_from is not None and start_pi >= len(sched):
        # already finished; the source checkpoint is the result
        return resume_from, records
    return out_path, records
