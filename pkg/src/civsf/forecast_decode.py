"""The forecaster head and the shared per-patch MLP decoder with repopulation.

The forecaster morphs a source timestamp's patch embeddings to a target date:
sum of (source embedding, weather embedding at the target DOY, target DOY
embedding, delta embedding) through a two-hidden-layer tanh MLP. The decoder
is one shared MLP mapping D to 6*p*p per patch; masked grid slots hold zero
vectors, so they all decode to one constant patch by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from civsf.errors import DomainError, ShapeError
from civsf.encoders import fold_patches
from civsf.masking import MaskPlan
from civsf.numerics import Tensor, nn, put


@dataclass(frozen=True)
class ForecastSpec:
    src_index: int
    target_doy: int
    delta: int


def next_step_targets(doys: np.ndarray, k_doy: int) -> list[ForecastSpec]:
    """Phase-2 target list: embedding i forecasts image i+1; the last context
    embedding forecasts the sampled K'th timestamp k_doy."""
    doys = np.asarray(doys)
    c = len(doys)
    if c < 2:
        raise DomainError(f"next-step targets need C >= 2 context images, got {c}")
    if k_doy <= int(doys[-1]):
        raise DomainError(f"forecast DOY {k_doy} not after last context DOY {int(doys[-1])}")
    specs = [ForecastSpec(i, int(doys[i + 1]), int(doys[i + 1] - doys[i]))
             for i in range(c - 1)]
    specs.append(ForecastSpec(c - 1, int(k_doy), int(k_doy - doys[-1])))
    return specs


class Forecaster(nn.Module):
    """Two hidden tanh layers of width 2D, linear output back to D."""

    def __init__(self, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.l1 = nn.Linear(hidden, 2 * hidden, rng, dtype=dtype)
        self.l2 = nn.Linear(2 * hidden, 2 * hidden, rng, dtype=dtype)
        self.l3 = nn.Linear(2 * hidden, hidden, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l3(self.l2(self.l1(x).tanh()).tanh())


def forecast_embed(forecaster: Forecaster, src: Tensor, weather: Tensor | None,
                   doy: Tensor, delta: Tensor) -> Tensor:
    """src (B, U, D) patch embeddings; weather/doy/delta (B, D) broadcast over
    patches; weather=None is the SM variant (addend contributes nothing)."""
    b, u, d = src.shape
    for name, t in (("doy", doy), ("delta", delta)):
        if t.shape != (b, d):
            raise ShapeError(f"{name} embedding shape {t.shape} != ({b}, {d})")
    x = src + doy.reshape(b, 1, d) + delta.reshape(b, 1, d)
    if weather is not None:
        if weather.shape != (b, d):
            raise ShapeError(f"weather embedding shape {weather.shape} != ({b}, {d})")
        x = x + weather.reshape(b, 1, d)
    return forecaster(x)


class PatchDecoder(nn.Module):
    """Shared light-weight MLP decoder, D -> 2D -> 6*p*p per patch."""

    def __init__(self, hidden: int, patch: int, rng: np.random.Generator, dtype=np.float32):
        self.l1 = nn.Linear(hidden, 2 * hidden, rng, dtype=dtype)
        self.l2 = nn.Linear(2 * hidden, 6 * patch * patch, rng, dtype=dtype)
        self.hidden = hidden
        self.patch = patch

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(self.l1(x).tanh())

    def reinit(self, rng: np.random.Generator) -> None:
        """Fresh weights in place (fine-tunes that retrain the decoder)."""
        for _, p in self.named_parameters():
            d_in, d_out = (p.data.shape if p.data.ndim == 2 else (p.data.shape[0], p.data.shape[0]))
            if p.data.ndim == 2:
                p.data = nn.xavier_uniform(rng, p.data.shape, d_in, d_out, p.data.dtype)
            else:
                p.data = np.zeros_like(p.data)
            p.grad = None


def repopulate(tokens: Tensor, grid_idx: np.ndarray, g_total: int) -> Tensor:
    """Place tokens (..., U, D) at their grid positions in (..., G, D) zeros.

    grid_idx carries each token's patch id; positions never repeat, masked
    slots stay zero.
    """
    *lead, u, d = tokens.shape
    lead_idx = np.ix_(*[np.arange(n) for n in lead]) if lead else ()
    idx = tuple(a[..., None] for a in lead_idx) + (grid_idx,)
    return put(tokens, idx, (*lead, g_total, d))


def decode_series(decoder: PatchDecoder, emb_stw: Tensor, plans: list[MaskPlan],
                  side: int) -> Tensor:
    """Emb_STW (B, T, U, D) -> reconstructed images (B, T, 6, H, H)."""
    b, t, u, d = emb_stw.shape
    if len(plans) != b:
        raise ShapeError(f"{len(plans)} plans for batch of {b}")
    g = plans[0].g_patches
    grid_idx = np.stack([p.unmasked_patches for p in plans])    # (B, T, U)
    full = repopulate(emb_stw, grid_idx, g)                     # (B, T, G, D)
    patches = decoder(full)
    return fold_patches(patches, side, decoder.patch)


def decode_forecast(decoder: PatchDecoder, target_emb: Tensor,
                    grid_idx: np.ndarray, g_total: int, side: int) -> Tensor:
    """Forecast embeddings (B, U, D) at the source row's grid positions
    (B, U) -> one image (B, 6, H, H)."""
    if target_emb.shape[:2] != grid_idx.shape:
        raise ShapeError(f"embeddings {target_emb.shape} do not match grid index {grid_idx.shape}")
    full = repopulate(target_emb, grid_idx, g_total)
    patches = decoder(full)
    return fold_patches(patches, side, decoder.patch)
