"""Physical weather degradation model and procedural generators.

A degraded frame is composed from a clean scene Y as

    X = T * (Y + P) + (1 - T) * A

with transmission map T (single channel, broadcast over RGB), additive
particle layer P, and atmospheric light A.  The additive degradation pattern
of a frame,

    G(X) = P + (1/T - 1) * (A - X),

satisfies X - G(X) = Y, which is the label the restoration network learns to
predict and subtract.

T is floored at T_MIN so the element-wise inverse stays bounded.  Composition
and pattern extraction are carried out in float64 internally and cast back to
the input dtype, which keeps the X -> G -> Y round trip well inside 1e-6 for
float32 data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import DomainError, ParameterError, ShapeError
from .imaging import ensure_image

T_MIN = 0.05


@dataclass
class DegradationField:
    """The (T, P, A) triple describing one frame's degradation."""

    transmission: np.ndarray  # (H, W, 1), values in [T_MIN, 1]
    particles: np.ndarray  # (H, W, C) or (H, W, 1), values >= 0
    light: Union[float, np.ndarray]  # scalar or (H, W, 1|C) in [0, 1]

    def validate(self) -> "DegradationField":
        ensure_image(self.transmission, "transmission")
        ensure_image(self.particles, "particles")
        if np.any(self.transmission < T_MIN - 1e-9):
            raise DomainError(f"transmission below floor {T_MIN}")
        if np.any(self.particles < 0):
            raise DomainError("particle layer has negative entries")
        return self


@dataclass
class RainConfig:
    density: float = 1.2  # streaks per kilopixel
    length_px: float = 9.0
    angle_deg: float = 15.0  # from vertical; +-10 deg jitter per streak
    intensity: float = 0.7

    def validate(self) -> "RainConfig":
        if self.density < 0:
            raise ParameterError("rain density must be >= 0")
        if not 0.0 <= self.intensity <= 1.0:
            raise ParameterError("rain intensity must be in [0, 1]")
        if self.length_px <= 0:
            raise ParameterError("rain streak length must be positive")
        return self


@dataclass
class SnowConfig:
    count: float = 2.0  # flakes per kilopixel
    radius_min: float = 1.0
    radius_max: float = 2.5
    opacity: float = 0.8

    def validate(self) -> "SnowConfig":
        if self.count < 0:
            raise ParameterError("snow count must be >= 0")
        if not 0.0 <= self.opacity <= 1.0:
            raise ParameterError("snow opacity must be in [0, 1]")
        if not 0 < self.radius_min <= self.radius_max:
            raise ParameterError("snow radius range must satisfy 0 < min <= max")
        return self


@dataclass
class FogConfig:
    beta: float = 1.0  # attenuation coefficient
    depth_profile: str = "ramp"  # "ramp" (vertical) or "radial" (bowl)
    light: float = 0.85

    def validate(self) -> "FogConfig":
        if self.beta < 0:
            raise ParameterError("fog beta must be >= 0")
        if self.depth_profile not in ("ramp", "radial"):
            raise ParameterError(f"unknown depth profile {self.depth_profile!r}")
        if not 0.0 <= self.light <= 1.0:
            raise ParameterError("fog light must be in [0, 1]")
        return self


Component = Union[RainConfig, SnowConfig, FogConfig]

_COMPONENT_TYPES = {"rain": RainConfig, "snow": SnowConfig, "fog": FogConfig}
_TYPE_NAMES = {RainConfig: "rain", SnowConfig: "snow", FogConfig: "fog"}


@dataclass
class WeatherSpec:
    """An ordered combination of weather components plus the condition seed."""

    components: list = field(default_factory=list)
    seed: int = 0

    def validate(self) -> "WeatherSpec":
        if not self.components:
            raise ParameterError("weather spec needs at least one component")
        for comp in self.components:
            comp.validate()
        return self

    def to_dict(self) -> dict:
        out = []
        for comp in self.components:
            d = {"type": _TYPE_NAMES[type(comp)]}
            d.update(vars(comp))
            out.append(d)
        return {"components": out, "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, data: dict) -> "WeatherSpec":
        comps = []
        for entry in data["components"]:
            entry = dict(entry)
            kind = entry.pop("type")
            if kind not in _COMPONENT_TYPES:
                raise ParameterError(f"unknown weather component type {kind!r}")
            comps.append(_COMPONENT_TYPES[kind](**entry))
        return cls(components=comps, seed=int(data.get("seed", 0))).validate()


@dataclass
class Composite:
    """compose_degraded output: the clipped frame plus the unclipped value."""

    image: np.ndarray
    raw: np.ndarray


def compose_degraded(clean: np.ndarray, fld: DegradationField) -> Composite:
    """Apply the degradation model X = T*(Y+P) + (1-T)*A.

    Returns both the [0,1]-clipped frame (what gets stored) and the raw
    unclipped composite (what the analytic pattern inverts exactly).
    """
    ensure_image(clean, "clean")
    fld.validate()
    t = fld.transmission.astype(np.float64)
    p = fld.particles.astype(np.float64)
    a = fld.light if np.isscalar(fld.light) else fld.light.astype(np.float64)
    if t.shape[:2] != clean.shape[:2] or p.shape[:2] != clean.shape[:2]:
        raise ShapeError(
            f"field shapes {t.shape}/{p.shape} incompatible with clean {clean.shape}"
        )
    raw64 = t * (clean.astype(np.float64) + p) + (1.0 - t) * a
    raw = raw64.astype(clean.dtype)
    return Composite(image=np.clip(raw, 0.0, 1.0), raw=raw)


def degradation_pattern_analytic(degraded: np.ndarray, fld: DegradationField) -> np.ndarray:
    """Evaluate G(X) = P + (1/T - 1) * (A - X); unclipped, same dtype as X."""
    ensure_image(degraded, "degraded")
    if np.any(fld.transmission < T_MIN - 1e-9):
        raise DomainError(f"transmission below floor {T_MIN}")
    t = fld.transmission.astype(np.float64)
    p = fld.particles.astype(np.float64)
    a = fld.light if np.isscalar(fld.light) else fld.light.astype(np.float64)
    g = p + (1.0 / t - 1.0) * (a - degraded.astype(np.float64))
    return g.astype(degraded.dtype)


def residual_pattern(degraded: np.ndarray, clean: np.ndarray) -> np.ndarray:
    """X - Y: the supervision label for support values and query targets."""
    if degraded.shape != clean.shape:
        raise ShapeError(f"shape mismatch: {degraded.shape} vs {clean.shape}")
    return degraded - clean


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def gen_rain(seed, cfg: RainConfig, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Anti-aliased rain streak layer; deterministic in (seed, cfg, h, w)."""
    cfg.validate()
    layer = np.zeros((h, w), dtype=np.float64)
    n = int(round(cfg.density * h * w / 1000.0))
    rng = _rng(seed)
    for _ in range(n):
        cy = rng.uniform(0, h - 1)
        cx = rng.uniform(0, w - 1)
        ang = np.deg2rad(cfg.angle_deg + rng.uniform(-10.0, 10.0))
        dy, dx = np.cos(ang), np.sin(ang)  # angle measured from vertical
        half = cfg.length_px / 2.0
        y0, y1 = cy - half * dy, cy + half * dy
        x0, x1 = cx - half * dx, cx + half * dx
        lo_y = max(int(np.floor(min(y0, y1))) - 1, 0)
        hi_y = min(int(np.ceil(max(y0, y1))) + 2, h)
        lo_x = max(int(np.floor(min(x0, x1))) - 1, 0)
        hi_x = min(int(np.ceil(max(x0, x1))) + 2, w)
        if lo_y >= hi_y or lo_x >= hi_x:
            continue
        yy, xx = np.meshgrid(
            np.arange(lo_y, hi_y, dtype=np.float64),
            np.arange(lo_x, hi_x, dtype=np.float64),
            indexing="ij",
        )
        # distance from each pixel center to the streak segment
        py, px = yy - y0, xx - x0
        sy, sx = y1 - y0, x1 - x0
        seg_len2 = sy * sy + sx * sx
        tproj = np.clip((py * sy + px * sx) / max(seg_len2, 1e-12), 0.0, 1.0)
        dist = np.hypot(py - tproj * sy, px - tproj * sx)
        cover = np.clip(1.0 - dist, 0.0, 1.0) * cfg.intensity
        region = layer[lo_y:hi_y, lo_x:hi_x]
        np.maximum(region, cover, out=region)
    return layer.astype(dtype)[:, :, None]


def gen_snow(seed, cfg: SnowConfig, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Soft-disc snow layer; each flake kernel peaks at 1 so max <= opacity."""
    cfg.validate()
    layer = np.zeros((h, w), dtype=np.float64)
    n = int(round(cfg.count * h * w / 1000.0))
    rng = _rng(seed)
    for _ in range(n):
        cy = rng.uniform(0, h - 1)
        cx = rng.uniform(0, w - 1)
        radius = rng.uniform(cfg.radius_min, cfg.radius_max)
        reach = radius * 2.5
        lo_y = max(int(np.floor(cy - reach)), 0)
        hi_y = min(int(np.ceil(cy + reach)) + 1, h)
        lo_x = max(int(np.floor(cx - reach)), 0)
        hi_x = min(int(np.ceil(cx + reach)) + 1, w)
        if lo_y >= hi_y or lo_x >= hi_x:
            continue
        yy, xx = np.meshgrid(
            np.arange(lo_y, hi_y, dtype=np.float64),
            np.arange(lo_x, hi_x, dtype=np.float64),
            indexing="ij",
        )
        r = np.hypot(yy - cy, xx - cx)
        # flat core with a Gaussian skirt; kernel peak is exactly 1
        tail = np.maximum(r - radius, 0.0)
        sigma = 0.5 * radius
        kern = np.exp(-(tail * tail) / (2.0 * sigma * sigma))
        region = layer[lo_y:hi_y, lo_x:hi_x]
        np.maximum(region, kern, out=region)
    return (layer * cfg.opacity).astype(dtype)[:, :, None]


def _depth_map(profile: str, h: int, w: int) -> np.ndarray:
    if profile == "ramp":
        d = np.linspace(0.0, 1.0, h, dtype=np.float64)[:, None]
        return np.broadcast_to(d, (h, w)).copy()
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    r = np.hypot(yy - cy, xx - cx)
    return r / max(float(r.max()), 1e-12)


def gen_fog(seed, cfg: FogConfig, h: int, w: int, dtype=np.float32):
    """Transmission map T = max(exp(-beta * depth), T_MIN) plus scalar light."""
    cfg.validate()
    depth = _depth_map(cfg.depth_profile, h, w)
    t = np.maximum(np.exp(-cfg.beta * depth), T_MIN)
    return t.astype(dtype)[:, :, None], float(cfg.light)


def gen_clean_scene(seed, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Procedural clean scene: layered gradients, shapes, mild texture noise.

    Per-channel variance is kept >= 0.005 (mild contrast stretch when the
    random draw comes out too flat) so restoration targets are non-trivial.
    """
    rng = _rng(seed)
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, h, dtype=np.float64),
        np.linspace(0.0, 1.0, w, dtype=np.float64),
        indexing="ij",
    )
    img = np.zeros((h, w, 3), dtype=np.float64)
    for ch in range(3):
        ang = rng.uniform(0, 2 * np.pi)
        s = (np.cos(ang) * yy + np.sin(ang) * xx + 1.0) / 2.0
        lo, hi = rng.uniform(0.0, 0.35), rng.uniform(0.65, 1.0)
        if rng.uniform() < 0.5:
            lo, hi = hi, lo
        img[:, :, ch] = lo + (hi - lo) * s
    for _ in range(rng.integers(4, 8)):
        color = rng.uniform(0.0, 1.0, size=3)
        alpha = rng.uniform(0.5, 1.0)
        if rng.uniform() < 0.5:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            hh = int(rng.integers(h // 8 + 1, h // 2 + 1))
            ww = int(rng.integers(w // 8 + 1, w // 2 + 1))
            mask = np.zeros((h, w), dtype=bool)
            mask[y0 : min(y0 + hh, h), x0 : min(x0 + ww, w)] = True
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            ry = rng.uniform(h / 10.0, h / 3.0)
            rx = rng.uniform(w / 10.0, w / 3.0)
            gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            mask = ((gy - cy) / ry) ** 2 + ((gx - cx) / rx) ** 2 <= 1.0
        img[mask] = (1 - alpha) * img[mask] + alpha * color
    img += rng.normal(0.0, 0.015, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    for ch in range(3):
        var = img[:, :, ch].var()
        if var < 0.012:
            mean = img[:, :, ch].mean()
            gain = np.sqrt(0.012 / max(var, 1e-6))
            img[:, :, ch] = np.clip(mean + (img[:, :, ch] - mean) * gain, 0.0, 1.0)
    return img.astype(dtype)


def make_pair(spec: WeatherSpec, scene_seed, h: int = 64, w: int = 64, dtype=np.float32):
    """Generate (degraded Composite, clean Y, analytic field) for one scene.

    Particle/transmission randomness is derived from both the condition seed
    and the scene seed, so every scene of a condition gets fresh streak and
    flake placement while sharing the condition's statistics.
    """
    spec.validate()
    clean = gen_clean_scene(scene_seed, h, w, dtype=dtype)
    particles = np.zeros((h, w, 1), dtype=clean.dtype)
    transmission = np.ones((h, w, 1), dtype=clean.dtype)
    light = 0.0
    root = np.random.SeedSequence([int(spec.seed), int(scene_seed)])
    children = root.spawn(len(spec.components))
    for comp, child in zip(spec.components, children):
        if isinstance(comp, RainConfig):
            particles = particles + gen_rain(child, comp, h, w, dtype=clean.dtype)
        elif isinstance(comp, SnowConfig):
            particles = particles + gen_snow(child, comp, h, w, dtype=clean.dtype)
        elif isinstance(comp, FogConfig):
            transmission, light = gen_fog(child, comp, h, w, dtype=clean.dtype)
        else:
            raise ParameterError(f"unknown component {type(comp).__name__}")
    fld = DegradationField(transmission=transmission, particles=particles, light=light)
    composite = compose_degraded(clean, fld)
    return composite, clean, fld
