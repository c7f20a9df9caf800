"""Deterministic synthetic paired RGB-D face surrogate corpus.

Each identity is a parametric smooth height field: a sum of 2-4 anisotropic
Gaussian bumps with identity-specific centers, scales, and orientations.
The depth map is the normalized height field; the RGB image is a Lambertian
shading of the same surface under an identity-specific light direction with
an identity-specific albedo tint, so RGB and depth are genuinely correlated
per identity.  Subset tags are assigned round-robin and apply their named
perturbation: NU jitters the light, FE jitters bump amplitudes, OC pastes a
rectangle occluder on both maps, PS warps the sampling grid (pose), and TM
drifts the identity parameters globally (and marks the session as S2).

Per-sample RNG streams are derived from (seed, identity, sample) spawn keys,
so output is bit-identical for equal arguments and independent of any
evaluation order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .types import (
    Dataset,
    DataError,
    RgbdSample,
    Session,
    Subset,
    VariationSpec,
)

MAX_SEED = 2**63


@dataclass
class _Identity:
    amps: np.ndarray        # (k,)
    centers: np.ndarray     # (k, 2) in grid units [-1, 1]
    scales: np.ndarray      # (k, 2)
    angles: np.ndarray      # (k,)
    light: np.ndarray       # (3,) unnormalized
    albedo: np.ndarray      # (3,)
    ambient: float
    norm_ref: float         # canonical field max * 1.15, fixed per identity
    # consistent "aging" deltas used by the TM subset
    drift_amps: np.ndarray
    drift_centers: np.ndarray
    drift_light: np.ndarray
    drift_albedo: np.ndarray


def _field(params: _Identity, gx: np.ndarray, gy: np.ndarray,
           amp_scale: np.ndarray | None = None) -> np.ndarray:
    amps = params.amps if amp_scale is None else params.amps * amp_scale
    out = np.zeros_like(gx)
    for k in range(len(amps)):
        cx, cy = params.centers[k]
        sx, sy = params.scales[k]
        c, s = np.cos(params.angles[k]), np.sin(params.angles[k])
        dx, dy = gx - cx, gy - cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        out += amps[k] * np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
    return out


def _identity_params(rng: np.random.Generator) -> _Identity:
    k = int(rng.integers(2, 5))
    return _Identity(
        amps=rng.uniform(0.35, 1.0, size=k),
        centers=rng.uniform(-0.55, 0.55, size=(k, 2)),
        scales=rng.uniform(0.12, 0.45, size=(k, 2)),
        angles=rng.uniform(0.0, np.pi, size=k),
        light=np.array([rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45),
                        rng.uniform(0.9, 1.3)]),
        albedo=rng.uniform(0.45, 0.95, size=3),
        ambient=float(rng.uniform(0.08, 0.22)),
        norm_ref=0.0,  # filled in once the grid resolution is known
        drift_amps=rng.uniform(-1.0, 1.0, size=k),
        drift_centers=rng.uniform(-1.0, 1.0, size=(k, 2)),
        drift_light=rng.uniform(-1.0, 1.0, size=3),
        drift_albedo=rng.uniform(-1.0, 1.0, size=3),
    )


def _shade(depth: np.ndarray, ys: np.ndarray, xs: np.ndarray,
           light: np.ndarray, albedo: np.ndarray, ambient: float) -> np.ndarray:
    gy, gx = np.gradient(depth, ys, xs)
    light = light / np.linalg.norm(light)
    # n = normalize([-dz/dx, -dz/dy, 1]); shade = max(0, n . l)
    inv_norm = 1.0 / np.sqrt(gx**2 + gy**2 + 1.0)
    shade = np.clip((-gx * light[0] - gy * light[1] + light[2]) * inv_norm, 0.0, None)
    rgb = ambient + albedo[:, None, None] * shade[None, :, :]
    return np.clip(rgb, 0.0, 1.0)


def _render_sample(ident: _Identity, subset: Subset, mag: float,
                   rng: np.random.Generator, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys = np.linspace(-1.0, 1.0, h)
    xs = np.linspace(-1.0, 1.0, w)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")

    amps = None
    light = ident.light.copy()
    albedo = ident.albedo.copy()
    centers_shift = None

    if subset is Subset.NU:
        light = light + np.append(rng.uniform(-1.0, 1.0, size=2) * mag, 0.0)
    elif subset is Subset.FE:
        amps = 1.0 + rng.uniform(-1.0, 1.0, size=len(ident.amps)) * mag
    elif subset is Subset.PS:
        angle = rng.uniform(-1.0, 1.0) * mag * 0.9
        shift = rng.uniform(-1.0, 1.0, size=2) * mag * 0.4
        c, s = np.cos(angle), np.sin(angle)
        rx = c * (gx - shift[0]) + s * (gy - shift[1])
        ry = -s * (gx - shift[0]) + c * (gy - shift[1])
        gx, gy = rx, ry
    elif subset is Subset.TM:
        amps = 1.0 + ident.drift_amps * mag * 0.5
        centers_shift = ident.drift_centers * mag * 0.25
        light = light + ident.drift_light * mag
        albedo = np.clip(albedo + ident.drift_albedo * mag * 0.3, 0.05, 1.0)

    params = ident
    if centers_shift is not None:
        params = _Identity(**{**ident.__dict__, "centers": ident.centers + centers_shift})

    field = _field(params, gx, gy, amp_scale=amps)
    depth = np.clip(field / params.norm_ref, 0.0, 1.0)
    rgb = _shade(depth, ys, xs, light, albedo, ident.ambient)

    if subset is Subset.OC:
        frac = 0.12 + rng.uniform(0.3, 1.0) * mag
        rh = max(1, min(h - 1, int(round(frac * h))))
        rw = max(1, min(w - 1, int(round(frac * w))))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        depth[r0:r0 + rh, c0:c0 + rw] = 0.9
        rgb[:, r0:r0 + rh, c0:c0 + rw] = rng.uniform(0.1, 0.2)

    return rgb.astype(np.float32), depth[None, :, :].astype(np.float32)


def _digest(num_identities: int, samples_per_identity: int,
            spec: VariationSpec, h: int, w: int, seed: int) -> str:
    mags = ",".join(f"{s.value}={spec.magnitudes[s]!r}" for s in spec.subsets)
    text = (f"synth:v1:ids={num_identities}:per={samples_per_identity}"
            f":res={h}x{w}:seed={seed}:spec={mags}")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def generate_synthetic_dataset(
    num_identities: int,
    samples_per_identity: int,
    variation_spec: VariationSpec | None = None,
    resolution: tuple[int, int] = (64, 64),
    seed: int = 0,
) -> Dataset:
    """Synthesize a deterministic paired RGB-D corpus.

    Returns num_identities * samples_per_identity samples ordered
    identity-major; subset tags cycle round-robin through the variation
    spec's subsets.  Equal (seed, args) yield bit-identical pixels.
    """
    if num_identities < 1:
        raise DataError(f"num_identities must be >= 1, got {num_identities}")
    if samples_per_identity < 1:
        raise DataError(f"samples_per_identity must be >= 1, got {samples_per_identity}")
    h, w = resolution
    if h % 32 != 0 or w % 32 != 0 or h <= 0 or w <= 0:
        raise DataError(f"resolution dims must be positive multiples of 32, got {h}x{w}")
    if not (0 <= seed < MAX_SEED):
        raise DataError(f"seed must lie in [0, 2**63), got {seed}")
    spec = variation_spec if variation_spec is not None else VariationSpec()
    subsets = spec.subsets
    if not subsets:
        raise DataError("variation spec lists no subsets")

    samples = []
    for ident_idx in range(num_identities):
        id_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(ident_idx,)))
        ident = _identity_params(id_rng)
        ys = np.linspace(-1.0, 1.0, h)
        xs = np.linspace(-1.0, 1.0, w)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        ident.norm_ref = float(_field(ident, gx, gy).max()) * 1.15
        for j in range(samples_per_identity):
            subset = subsets[j % len(subsets)]
            rng = np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(ident_idx, j)))
            rgb, depth = _render_sample(ident, subset, spec.magnitudes[subset], rng, h, w)
            samples.append(RgbdSample(
                rgb=rgb,
                depth=depth,
                identity=ident_idx,
                subset=subset,
                session=Session.S2 if subset is Subset.TM else Session.S1,
            ))

    return Dataset(
        samples=tuple(samples),
        identity_count=num_identities,
        manifest_digest=_digest(num_identities, samples_per_identity, spec, h, w, seed),
    )
