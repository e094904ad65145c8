"""Downstream fine-tuning: five frozen-encoder procedures.

Every procedure freezes the pretrained encoder, so the expensive encode runs
once per dataset under no_grad and heads train against cached embeddings.
Forecast-flavored heads (soil forecast, future image) require a *-VSF
checkpoint; reconstruction and estimation heads accept all four kinds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from civsf.datamodel import Instance, Sample, build_instances, context_windows, split
from civsf.encoders import patchify, unpatchify
from civsf.errors import CompatibilityError, DomainError, NumericError
from civsf.forecast_decode import forecast_embed
from civsf.harness.config import Config
from civsf.harness.metrics import bucket_means, macro_f1, mse
from civsf.numerics import RngStream, Tensor, log_softmax, nn, no_grad, optim, softmax
from civsf.training.model import FrameworkModel, trivial_plans, uses_forecaster


@dataclass
class FinetuneResult:
    task: str
    metrics: dict[str, float]
    losses: list[float] = field(default_factory=list)
    head_state: dict[str, np.ndarray] = field(default_factory=dict)


# -- heads ---------------------------------------------------------------------

class SoilForecastHead(nn.Module):
    """LSTM over past soil values; its final hidden state joins the pooled
    embedding and the target-date embeddings, then linear-ReLU-linear."""

    def __init__(self, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.lstm = nn.Lstm(1, hidden, rng, dtype=dtype)
        self.l1 = nn.Linear(hidden, hidden, rng, dtype=dtype)
        self.l2 = nn.Linear(hidden, 1, rng, dtype=dtype)

    def __call__(self, soil_series: np.ndarray, z_const: np.ndarray) -> Tensor:
        """soil_series (B, C); z_const (B, D) is the frozen sum of pooled
        final embedding plus target doy/delta (and weather) embeddings."""
        h = self.lstm(soil_series[..., None].astype(np.float32))
        z = h[:, -1] + Tensor(z_const)
        return self.l2(self.l1(z).relu())[:, 0]


class EstimateHead(nn.Module):
    """Shared linear-ReLU stack mapping each pooled embedding to a scalar."""

    def __init__(self, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.l1 = nn.Linear(hidden, hidden, rng, dtype=dtype)
        self.l2 = nn.Linear(hidden, 1, rng, dtype=dtype)

    def __call__(self, pooled: np.ndarray) -> Tensor:
        out = self.l2(self.l1(Tensor(pooled)).relu())
        return out.reshape(*pooled.shape[:-1])


class CropHead(nn.Module):
    """Timestamp attention over Emb_STW, then two upsample+conv stages and a
    pixel-shuffled linear classifier to per-pixel logits."""

    def __init__(self, hidden: int, n_classes: int, grid_side: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.score = nn.Linear(hidden, 1, rng, dtype=dtype)
        self.conv1 = nn.Conv3x3(hidden, hidden, rng, dtype=dtype)
        self.conv2 = nn.Conv3x3(hidden, hidden, rng, dtype=dtype)
        self.out = nn.Linear(hidden, 4 * n_classes, rng, dtype=dtype)
        self.n_classes = n_classes
        self.grid_side = grid_side

    def attention(self, pooled: Tensor) -> Tensor:
        """(B, T, D) -> per-timestamp weights (B, T, 1) summing to 1 over T."""
        return softmax(self.score(pooled), axis=1)

    def __call__(self, emb: np.ndarray, pooled: np.ndarray) -> Tensor:
        b, t, g, d = emb.shape
        n = self.grid_side
        alpha = self.attention(Tensor(pooled))
        agg = (Tensor(emb) * alpha.reshape(b, t, 1, 1)).sum(axis=1)   # (B, G, D)
        x = agg.reshape(b, n, n, d).transpose((0, 3, 1, 2))
        x = self.conv1(nn.upsample2x(x)).relu()
        x = self.conv2(nn.upsample2x(x)).relu()
        x = self.out(x.transpose((0, 2, 3, 1)))                        # (B, 4n, 4n, 4K)
        x = x.transpose((0, 3, 1, 2))
        return nn.pixel_shuffle(x, 2)                                  # (B, K, 8n, 8n)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """logits (B, K, H, W) vs integer labels (B, H, W), mean over pixels."""
    ls = log_softmax(logits, axis=1)
    b, _, h, w = logits.shape
    bi = np.arange(b)[:, None, None]
    hi = np.arange(h)[None, :, None]
    wi = np.arange(w)[None, None, :]
    picked = ls[bi, labels.astype(np.int64), hi, wi]
    return -(picked.mean())


# -- shared plumbing -------------------------------------------------------------

def _require_vsf(model: FrameworkModel, task: str) -> None:
    if not uses_forecaster(model.kind):
        raise CompatibilityError(
            f"{task} fine-tuning needs a *-VSF checkpoint, got '{model.kind}'")


def _split_idx(samples: list[Sample], cfg: Config) -> tuple[list[int], list[int]]:
    train, _, test = split(len(samples), (cfg.train_frac, cfg.val_frac, cfg.test_frac),
                           cfg.seed)
    return train, test


def _cap(items: list, cap: int, stream: RngStream, label: str) -> list:
    if cap and len(items) > cap:
        take = stream.generator(label).permutation(len(items))[:cap]
        return [items[i] for i in take]
    return items


def _start_doy(samples: list[Sample], idxs) -> int:
    starts = {int(samples[i].start_doy) for i in idxs}
    if len(starts) != 1:
        raise DomainError(f"mixed start_doy values across fine-tune items: {sorted(starts)}")
    return starts.pop()


def _frozen_embed(model: FrameworkModel, imgs: np.ndarray, doys: np.ndarray,
                  start: int, weathers: np.ndarray | None) -> np.ndarray:
    """Encode with r=0 plans; returns Emb_STW (B, T, G, D) as plain arrays."""
    b, t = imgs.shape[:2]
    plans = trivial_plans(t, model.enc.grid, b)
    with no_grad():
        h = None
        if model.weather is not None and weathers is not None:
            h = model.encode_weather(weathers, steps=int(doys.max()) - start + 1)
        return model.encode_series(imgs, doys, h, start, plans, mask_pixels=True).data


def _window_arrays(samples, windows, length):
    imgs = np.stack([samples[si].images[s:s + length] for si, s in windows])
    doys = np.stack([samples[si].doys[s:s + length] for si, s in windows])
    return imgs, doys


def _embed_windows(model: FrameworkModel, samples, windows, length, cfg,
                   images_override: np.ndarray | None = None) -> np.ndarray:
    """Chunked frozen encode of C-length windows -> (N, C, G, D)."""
    out = []
    for lo in range(0, len(windows), cfg.ft_batch):
        chunk = windows[lo:lo + cfg.ft_batch]
        if images_override is not None:
            imgs = images_override[lo:lo + cfg.ft_batch]
            doys = np.stack([samples[si].doys[s:s + length] for si, s in chunk])
        else:
            imgs, doys = _window_arrays(samples, chunk, length)
        start = _start_doy(samples, [si for si, _ in chunk])
        wx = None
        if model.weather is not None:
            wx = np.stack([samples[si].weather for si, _ in chunk])
        out.append(_frozen_embed(model, imgs, doys, start, wx))
    return np.concatenate(out)


def _epoch_perm(n: int, stream: RngStream, label: str) -> np.ndarray:
    return stream.generator(label).permutation(n)


def _check_loss(value: float, task: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss in {task} fine-tuning at epoch {epoch}")


# -- missing-image reconstruction ------------------------------------------------

def corrupt_series(imgs: np.ndarray, patch: int, pct: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Blacken patch-aligned blocks covering pct of 2 images per series.

    imgs (B, C, 6, H, H). The corrupted patch set is a contiguous row-major
    run of round(pct * G) patches (at most two rectangles), drawn per image.
    Returns (corrupted copy, corrupted timestamp indices (B, 2), run starts
    (B, 2)). The first timestamp is never corrupted.
    """
    b, c = imgs.shape[:2]
    if c < 3:
        raise DomainError(f"missing-image series needs >= 3 timestamps, got {c}")
    side = imgs.shape[-1]
    g = (side // patch) ** 2
    n_corrupt = round(pct * g)
    if not 0 < n_corrupt <= g:
        raise DomainError(f"corruption fraction {pct} covers {n_corrupt} of {g} patches")
    out = imgs.copy()
    t_hit = np.empty((b, 2), dtype=np.int64)
    runs = np.empty((b, 2), dtype=np.int64)
    for i in range(b):
        t_hit[i] = np.sort(rng.choice(np.arange(1, c), size=2, replace=False))
        for j, t in enumerate(t_hit[i]):
            start = int(rng.integers(0, g - n_corrupt + 1))
            runs[i, j] = start
            patches = patchify(out[i, t], patch)
            patches[start:start + n_corrupt] = 0.0
            out[i, t] = unpatchify(patches, side, patch)
    return out, t_hit, runs


def finetune_missing(model: FrameworkModel, samples: list[Sample], cfg: Config,
                     seed: int) -> FinetuneResult:
    stream = RngStream(seed)
    c = cfg.context_len
    train_s, test_s = _split_idx(samples, cfg)
    tr_windows = _cap([(si, s) for si in train_s for s in context_windows(samples[si], c)],
                      cfg.ft_max_train, stream, "ft/missing/cap/train")
    te_windows = _cap([(si, s) for si in test_s for s in context_windows(samples[si], c)],
                      cfg.ft_max_eval, stream, "ft/missing/cap/eval")
    if not tr_windows or not te_windows:
        raise DomainError("missing-image fine-tune has empty train or eval windows")

    def prepare(windows, label):
        imgs, _ = _window_arrays(samples, windows, c)
        rng = stream.generator(f"ft/missing/corrupt/{label}")
        corrupted, t_hit, _ = corrupt_series(imgs, model.enc.patch, cfg.missing_pct, rng)
        emb = _embed_windows(model, samples, windows, c, cfg, images_override=corrupted)
        truth = patchify(imgs, model.enc.patch)          # clean targets (N, C, G, P)
        rows = np.arange(len(windows))[:, None]
        return emb, truth[rows, t_hit], t_hit            # truth at hit steps (N, 2, G, P)

    emb_tr, truth_tr, hit_tr = prepare(tr_windows, "train")
    emb_te, truth_te, hit_te = prepare(te_windows, "eval")

    model.decoder.reinit(stream.generator("ft/missing/reinit"))
    opt = optim.Adam(model.decoder.named_parameters(), lr=cfg.ft_lr)
    losses = []
    rows = np.arange(emb_tr.shape[0])[:, None]
    for epoch in range(cfg.ft_epochs_missing):
        perm = _epoch_perm(len(tr_windows), stream, f"ft/missing/epoch{epoch}/order")
        total, seen = 0.0, 0
        for lo in range(0, len(perm), cfg.ft_batch):
            take = perm[lo:lo + cfg.ft_batch]
            hit = Tensor(emb_tr[rows[take], hit_tr[take]])    # (B, 2, G, D)
            pred = model.decoder(hit)
            loss = ((pred - truth_tr[take]) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(take)
            seen += len(take)
        losses.append(total / seen)
        _check_loss(losses[-1], "missing-image", epoch)

    rows_te = np.arange(emb_te.shape[0])[:, None]
    with no_grad():
        pred = model.decoder(Tensor(emb_te[rows_te, hit_te]))
    result_mse = mse(pred.data, truth_te)
    return FinetuneResult("missing-image", {"mse": result_mse}, losses,
                          model.decoder.state_arrays())


# -- future-image forecasting -----------------------------------------------------

def _instance_pools(samples, cfg, stream, task) -> tuple[list[Instance], list[Instance]]:
    train_s, test_s = _split_idx(samples, cfg)
    def pool(idxs):
        out = []
        for si in idxs:
            out.extend(build_instances(samples[si], si, cfg.context_len,
                                       cfg.gap_min, cfg.gap_max))
        return out
    tr = _cap(pool(train_s), cfg.ft_max_train, stream, f"ft/{task}/cap/train")
    te = _cap(pool(test_s), cfg.ft_max_eval, stream, f"ft/{task}/cap/eval")
    if not tr or not te:
        raise DomainError(f"{task} fine-tune has empty train or eval instances")
    return tr, te


def _forecast_cache(model: FrameworkModel, samples, insts: list[Instance],
                    cfg: Config) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frozen forecast embeddings for the final (K-step) target.

    Returns (femb (N, G, D), truth patches (N, G, P), deltas (N,)).
    """
    c = cfg.context_len
    fembs, truths, deltas = [], [], []
    for lo in range(0, len(insts), cfg.ft_batch):
        chunk = insts[lo:lo + cfg.ft_batch]
        imgs = np.stack([samples[i.sample_idx].images[i.start:i.start + c] for i in chunk])
        doys = np.stack([samples[i.sample_idx].doys[i.start:i.start + c] for i in chunk])
        tgt_doy = np.array([int(samples[i.sample_idx].doys[i.target]) for i in chunk])
        tgt_img = np.stack([samples[i.sample_idx].images[i.target] for i in chunk])
        start = _start_doy(samples, [i.sample_idx for i in chunk])
        b = len(chunk)
        plans = trivial_plans(c, model.enc.grid, b)
        with no_grad():
            h = None
            w_t = None
            if model.weather is not None:
                wx = np.stack([samples[i.sample_idx].weather for i in chunk])
                h = model.encode_weather(wx, steps=int(tgt_doy.max()) - start + 1)
                w_t = h[np.arange(b), tgt_doy - start]
            emb = model.encode_series(imgs, doys, h, start, plans, mask_pixels=True)
            femb = forecast_embed(model.forecaster, emb[:, -1], w_t,
                                  model.doy(tgt_doy), model.delta(tgt_doy - doys[:, -1]))
        fembs.append(femb.data)
        truths.append(patchify(tgt_img, model.enc.patch))
        deltas.append(tgt_doy - doys[:, -1])
    return np.concatenate(fembs), np.concatenate(truths), np.concatenate(deltas)


def finetune_future_image(model: FrameworkModel, samples: list[Sample], cfg: Config,
                          seed: int) -> FinetuneResult:
    _require_vsf(model, "future-image")
    stream = RngStream(seed)
    tr, te = _instance_pools(samples, cfg, stream, "future")
    femb_tr, truth_tr, _ = _forecast_cache(model, samples, tr, cfg)
    femb_te, truth_te, delta_te = _forecast_cache(model, samples, te, cfg)

    model.decoder.reinit(stream.generator("ft/future/reinit"))
    opt = optim.Adam(model.decoder.named_parameters(), lr=cfg.ft_lr)
    losses = []
    for epoch in range(cfg.ft_epochs_future):
        perm = _epoch_perm(len(tr), stream, f"ft/future/epoch{epoch}/order")
        total, seen = 0.0, 0
        for lo in range(0, len(perm), cfg.ft_batch):
            take = perm[lo:lo + cfg.ft_batch]
            pred = model.decoder(Tensor(femb_tr[take]))
            loss = ((pred - truth_tr[take]) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(take)
            seen += len(take)
        losses.append(total / seen)
        _check_loss(losses[-1], "future-image", epoch)

    with no_grad():
        pred = model.decoder(Tensor(femb_te)).data
    per_inst = ((pred - truth_te) ** 2).mean(axis=(1, 2))
    buckets = bucket_means(per_inst, delta_te)
    return FinetuneResult("future-image", {f"mse/{k}": v for k, v in buckets.items()},
                          losses, model.decoder.state_arrays())


# -- soil-moisture forecasting ------------------------------------------------------

def _soil_cache(model: FrameworkModel, samples, insts: list[Instance], cfg: Config):
    """Frozen constants for the soil head: z_const (N, D), soil context
    series (N, C), targets (N,), deltas (N,)."""
    c = cfg.context_len
    z_out, soils, targets, deltas = [], [], [], []
    for lo in range(0, len(insts), cfg.ft_batch):
        chunk = insts[lo:lo + cfg.ft_batch]
        for i in chunk:
            if samples[i.sample_idx].soil is None:
                raise DomainError("soil fine-tune needs samples with a soil series")
        imgs = np.stack([samples[i.sample_idx].images[i.start:i.start + c] for i in chunk])
        doys = np.stack([samples[i.sample_idx].doys[i.start:i.start + c] for i in chunk])
        tgt_doy = np.array([int(samples[i.sample_idx].doys[i.target]) for i in chunk])
        start = _start_doy(samples, [i.sample_idx for i in chunk])
        b = len(chunk)
        plans = trivial_plans(c, model.enc.grid, b)
        with no_grad():
            h = None
            w_t = None
            if model.weather is not None:
                wx = np.stack([samples[i.sample_idx].weather for i in chunk])
                h = model.encode_weather(wx, steps=int(tgt_doy.max()) - start + 1)
                w_t = h[np.arange(b), tgt_doy - start]
            emb = model.encode_series(imgs, doys, h, start, plans, mask_pixels=True)
            z = emb[:, -1].mean(axis=1) + model.doy(tgt_doy) \
                + model.delta(tgt_doy - doys[:, -1])
            if w_t is not None:
                z = z + w_t
        z_out.append(z.data)
        soils.append(np.stack([samples[i.sample_idx].soil[i.start:i.start + c]
                               for i in chunk]))
        targets.append(np.array([float(samples[i.sample_idx].soil[i.target])
                                 for i in chunk], dtype=np.float32))
        deltas.append(tgt_doy - doys[:, -1])
    return (np.concatenate(z_out), np.concatenate(soils),
            np.concatenate(targets), np.concatenate(deltas))


def finetune_soil_forecast(model: FrameworkModel, samples: list[Sample], cfg: Config,
                           seed: int) -> FinetuneResult:
    _require_vsf(model, "soil forecast")
    stream = RngStream(seed)
    tr, te = _instance_pools(samples, cfg, stream, "soil")
    z_tr, soil_tr, y_tr, _ = _soil_cache(model, samples, tr, cfg)
    z_te, soil_te, y_te, delta_te = _soil_cache(model, samples, te, cfg)

    head = SoilForecastHead(model.enc.hidden, stream.generator("ft/soil/init"))
    opt = optim.adamw(head.named_parameters(), lr=cfg.ft_lr)
    losses = []
    for epoch in range(cfg.ft_epochs_soil):
        perm = _epoch_perm(len(tr), stream, f"ft/soil/epoch{epoch}/order")
        total, seen = 0.0, 0
        for lo in range(0, len(perm), cfg.ft_batch):
            take = perm[lo:lo + cfg.ft_batch]
            pred = head(soil_tr[take], z_tr[take])
            loss = (pred - y_tr[take]).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(take)
            seen += len(take)
        losses.append(total / seen)
        _check_loss(losses[-1], "soil forecast", epoch)

    with no_grad():
        pred = head(soil_te, z_te).data
    buckets = bucket_means(np.abs(pred - y_te), delta_te)
    return FinetuneResult("soil-forecast", {f"mae/{k}": v for k, v in buckets.items()},
                          losses, head.state_arrays())


# -- per-timestamp estimation -----------------------------------------------------

def region_of(sample_idx: int, n_regions: int) -> int:
    """Datasets assign climate regions round-robin by sample index."""
    return sample_idx % n_regions


def _estimate_windows(samples, idxs, cfg):
    return [(si, s) for si in idxs for s in context_windows(samples[si], cfg.context_len)]


def _estimate_cache(model, samples, windows, cfg):
    c = cfg.context_len
    for si, _ in windows:
        if samples[si].soil is None:
            raise DomainError("estimation fine-tune needs samples with a soil series")
    emb = _embed_windows(model, samples, windows, c, cfg)
    pooled = emb.mean(axis=2)                                   # (N, C, D)
    truth = np.stack([samples[si].soil[s:s + c] for si, s in windows])
    return pooled, truth.astype(np.float32)


def _train_estimate(model, pooled_tr, y_tr, cfg, stream, tag):
    head = EstimateHead(model.enc.hidden, stream.generator(f"ft/estimate/{tag}/init"))
    opt = optim.adamw(head.named_parameters(), lr=cfg.ft_lr)
    losses = []
    n = pooled_tr.shape[0]
    for epoch in range(cfg.ft_epochs_estimate):
        perm = _epoch_perm(n, stream, f"ft/estimate/{tag}/epoch{epoch}/order")
        total, seen = 0.0, 0
        for lo in range(0, n, cfg.ft_batch):
            take = perm[lo:lo + cfg.ft_batch]
            pred = head(pooled_tr[take])
            loss = (pred - y_tr[take]).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(take)
            seen += len(take)
        losses.append(total / seen)
        _check_loss(losses[-1], "estimation", epoch)
    return head, losses


def finetune_estimate(model: FrameworkModel, samples: list[Sample], cfg: Config,
                      seed: int, protocol: str = "in-region") -> FinetuneResult:
    if protocol not in ("in-region", "cross-region"):
        raise DomainError(f"unknown estimation protocol '{protocol}'")
    stream = RngStream(seed)

    if protocol == "in-region":
        train_s, test_s = _split_idx(samples, cfg)
        tr_w = _cap(_estimate_windows(samples, train_s, cfg), cfg.ft_max_train,
                    stream, "ft/estimate/cap/train")
        te_w = _cap(_estimate_windows(samples, test_s, cfg), cfg.ft_max_eval,
                    stream, "ft/estimate/cap/eval")
        if not tr_w or not te_w:
            raise DomainError("estimation fine-tune has empty train or eval windows")
        pooled_tr, y_tr = _estimate_cache(model, samples, tr_w, cfg)
        pooled_te, y_te = _estimate_cache(model, samples, te_w, cfg)
        head, losses = _train_estimate(model, pooled_tr, y_tr, cfg, stream, "in")
        with no_grad():
            pred = head(pooled_te).data
        err = np.abs(pred - y_te)
        metrics = {"mae/all": float(err.mean())}
        for r in sorted({region_of(si, cfg.world_regions) for si, _ in te_w}):
            hit = np.array([region_of(si, cfg.world_regions) == r for si, _ in te_w])
            metrics[f"mae/region{r}"] = float(err[hit].mean())
        return FinetuneResult("estimate", metrics, losses, head.state_arrays())

    # cross-region: hold one region out at a time, train on the rest
    metrics: dict[str, float] = {}
    all_losses: list[float] = []
    held_means = []
    last_head = None
    for r in range(cfg.world_regions):
        tr_idx = [i for i in range(len(samples)) if region_of(i, cfg.world_regions) != r]
        te_idx = [i for i in range(len(samples)) if region_of(i, cfg.world_regions) == r]
        if not te_idx:
            continue
        tr_w = _cap(_estimate_windows(samples, tr_idx, cfg), cfg.ft_max_train,
                    stream, f"ft/estimate/cap/train{r}")
        te_w = _cap(_estimate_windows(samples, te_idx, cfg), cfg.ft_max_eval,
                    stream, f"ft/estimate/cap/eval{r}")
        pooled_tr, y_tr = _estimate_cache(model, samples, tr_w, cfg)
        pooled_te, y_te = _estimate_cache(model, samples, te_w, cfg)
        head, losses = _train_estimate(model, pooled_tr, y_tr, cfg, stream, f"x{r}")
        with no_grad():
            pred = head(pooled_te).data
        held = float(np.abs(pred - y_te).mean())
        metrics[f"mae/region{r}"] = held
        held_means.append(held)
        all_losses.extend(losses)
        last_head = head
    if not held_means:
        raise DomainError("cross-region estimation found no populated regions")
    metrics["mae/all"] = float(np.mean(held_means))
    return FinetuneResult("estimate-cross", metrics, all_losses,
                          last_head.state_arrays() if last_head else {})


# -- crop-type mapping ---------------------------------------------------------------

def finetune_crop(model: FrameworkModel, samples: list[Sample], cfg: Config,
                  seed: int) -> FinetuneResult:
    stream = RngStream(seed)
    t_ft = cfg.crop_timestamps
    train_s, test_s = _split_idx(samples, cfg)
    for si in train_s + test_s:
        if samples[si].crops is None:
            raise DomainError("crop fine-tune needs samples with crop grids")
    tr_w = _cap([(si, s) for si in train_s for s in context_windows(samples[si], t_ft)],
                cfg.ft_max_train, stream, "ft/crop/cap/train")
    te_w = _cap([(si, s) for si in test_s for s in context_windows(samples[si], t_ft)],
                cfg.ft_max_eval, stream, "ft/crop/cap/eval")
    if not tr_w or not te_w:
        raise DomainError("crop fine-tune has empty train or eval windows")

    emb_tr = _embed_windows(model, samples, tr_w, t_ft, cfg)
    emb_te = _embed_windows(model, samples, te_w, t_ft, cfg)
    y_tr = np.stack([samples[si].crops for si, _ in tr_w])
    y_te = np.stack([samples[si].crops for si, _ in te_w])

    n_side = model.enc.side // model.enc.patch
    head = CropHead(model.enc.hidden, cfg.crop_classes, n_side,
                    stream.generator("ft/crop/init"))
    opt = optim.Adam(head.named_parameters(), lr=cfg.ft_lr)
    losses = []
    for epoch in range(cfg.ft_epochs_crop):
        perm = _epoch_perm(len(tr_w), stream, f"ft/crop/epoch{epoch}/order")
        total, seen = 0.0, 0
        for lo in range(0, len(perm), cfg.ft_batch):
            take = perm[lo:lo + cfg.ft_batch]
            logits = head(emb_tr[take], emb_tr[take].mean(axis=2))
            loss = cross_entropy(logits, y_tr[take])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(take)
            seen += len(take)
        losses.append(total / seen)
        _check_loss(losses[-1], "crop mapping", epoch)

    preds = []
    with no_grad():
        for lo in range(0, len(te_w), cfg.ft_batch):
            logits = head(emb_te[lo:lo + cfg.ft_batch],
                          emb_te[lo:lo + cfg.ft_batch].mean(axis=2))
            preds.append(np.argmax(logits.data, axis=1))
    pred = np.concatenate(preds)
    score = macro_f1(pred, y_te, cfg.crop_classes)
    return FinetuneResult("crop-map", {"macro_f1": score}, losses, head.state_arrays())
