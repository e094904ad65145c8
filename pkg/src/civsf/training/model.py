"""Framework model assembly and the shared encode path.

One FrameworkModel carries every component its framework kind needs and
nothing else: SM-* kinds have no weather encoder at all (so weather values
cannot be read even by accident), *-MR kinds have no forecaster or delta
embedder. Components are initialized from per-component derived streams, so
two kinds built from the same seed share identical initial weights for the
components they have in common.
"""

from __future__ import annotations

import numpy as np

from civsf.datamodel import Sample
from civsf.encoders import (
    DeltaEmbed,
    DoyEmbed,
    EncoderConfig,
    VitEncoder,
    WeatherEncoder,
    gather_unmasked,
    patchify,
    temporal_match,
)
from civsf.errors import CompatibilityError, ConfigError
from civsf.forecast_decode import Forecaster, PatchDecoder
from civsf.fusion import TemporalEncoder, causal_temporal_encode, fuse_add
from civsf.harness.config import FRAMEWORKS, Config
from civsf.masking import MaskPlan
from civsf.numerics import RngStream, Tensor, nn


def uses_weather(kind: str) -> bool:
    return kind in ("mm-mr", "ci-vsf")


def uses_forecaster(kind: str) -> bool:
    return kind in ("sm-vsf", "ci-vsf")


class FrameworkModel(nn.Module):
    def __init__(self, kind: str, cfg: Config, seed: int, dtype=np.float32):
        if kind not in FRAMEWORKS:
            raise ConfigError(f"unknown framework '{kind}'")
        enc = EncoderConfig(hidden=cfg.hidden, patch=cfg.patch, side=cfg.side,
                            vit_depth=cfg.vit_depth, vit_heads=cfg.vit_heads,
                            temporal_depth=cfg.temporal_depth,
                            temporal_heads=cfg.temporal_heads,
                            ff_expansion=cfg.ff_expansion)
        stream = RngStream(seed)
        self.vit = VitEncoder(enc, stream.generator("init/vit"), dtype=dtype)
        self.doy = DoyEmbed(enc.hidden, stream.generator("init/doy"), dtype=dtype)
        self.temporal = TemporalEncoder(enc.hidden, enc.temporal_depth, enc.temporal_heads,
                                        enc.ff_expansion, stream.generator("init/temporal"),
                                        dtype=dtype)
        self.decoder = PatchDecoder(enc.hidden, enc.patch, stream.generator("init/decoder"),
                                    dtype=dtype)
        if uses_weather(kind):
            self.weather = WeatherEncoder(enc, stream.generator("init/weather"), dtype=dtype)
        else:
            self.weather = None
        if kind == "mm-mr":
            self.wx_head = nn.Linear(enc.hidden, 5, stream.generator("init/wx_head"), dtype=dtype)
        else:
            self.wx_head = None
        if uses_forecaster(kind):
            self.delta = DeltaEmbed(enc.hidden, stream.generator("init/delta"), dtype=dtype)
            self.forecaster = Forecaster(enc.hidden, stream.generator("init/forecaster"),
                                         dtype=dtype)
        else:
            self.delta = None
            self.forecaster = None
        self.kind = kind
        self.enc = enc
        self.dtype = dtype

    # -- parameter subsets per phase -------------------------------------------

    def phase_params(self, phase: str) -> list[tuple[str, Tensor]]:
        prefixes = {
            "1a": ("vit", "decoder"),
            "1b": ("weather",),
            "1c": ("vit", "doy", "temporal", "decoder", "weather", "wx_head"),
            "2": ("vit", "doy", "temporal", "decoder", "weather", "delta", "forecaster"),
        }[phase]
        return [(n, p) for n, p in self.named_parameters()
                if n.split(".", 1)[0] in prefixes]

    # -- forward paths -----------------------------------------------------------

    def encode_weather(self, weather: np.ndarray, steps: int | None = None,
                       day_mask: np.ndarray | None = None) -> Tensor | None:
        if self.weather is None:
            return None
        return self.weather(weather, day_mask=day_mask, steps=steps)

    def encode_series(self, images: np.ndarray, doys: np.ndarray,
                      weather_h: Tensor | None, start_doy: int,
                      plans: list[MaskPlan], mask_pixels: bool) -> Tensor:
        """Full encode path to compact Emb_STW (B, T, U, D).

        mask_pixels=True: the ViT sees only unmasked patches (phases 1a/2).
        mask_pixels=False: the ViT sees the whole grid and the plan masks
        embeddings at the temporal stage instead (phase 1c).
        """
        b, t = images.shape[:2]
        patches = patchify(images, self.enc.patch)
        if mask_pixels:
            sel, idx = gather_unmasked(patches, plans)
        else:
            sel = patches
            idx = np.broadcast_to(np.arange(self.enc.grid), (b, t, self.enc.grid))
        tokens = self.vit(sel.astype(self.dtype, copy=False), idx)
        weather_t = None
        if weather_h is not None:
            weather_t = temporal_match(weather_h, doys, start_doy)
        fused = fuse_add(tokens, weather_t, self.doy(doys))
        return causal_temporal_encode(self.temporal, fused, plans,
                                      full_grid=not mask_pixels)

def trivial_plans(t_steps: int, g_patches: int, n: int) -> list[MaskPlan]:
    """r=0 plans (nothing masked), shared across a batch of n rows."""
    masked = np.zeros((t_steps, g_patches), dtype=bool)
    plan = MaskPlan(t_steps, g_patches, 0.0, masked,
                    np.arange(t_steps), np.arange(g_patches))
    return [plan] * n


def batch_weather(samples: list[Sample], idxs: np.ndarray) -> np.ndarray:
    return np.stack([samples[i].weather for i in idxs])
