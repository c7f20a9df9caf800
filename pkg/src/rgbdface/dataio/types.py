"""Core sample/dataset model shared by synthesis, disk I/O, and evaluation.

Array conventions: RGB images are float32 arrays of shape (3, h, w) and
depth maps are float32 arrays of shape (1, h, w), both with values in
[0, 1].  Heights and widths are multiples of 32 so the recognition
backbones produce integral spatial dims.  Arrays are frozen (read-only)
once a sample is built; datasets are safe to share across readers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class Subset(str, Enum):
    """Probe variation category: neutral, expression, occlusion, pose, time."""

    NU = "NU"
    FE = "FE"
    OC = "OC"
    PS = "PS"
    TM = "TM"


class Session(str, Enum):
    S1 = "S1"
    S2 = "S2"


SUBSET_ORDER = (Subset.NU, Subset.FE, Subset.OC, Subset.PS, Subset.TM)


class DataError(ValueError):
    """Raised when a sample or dataset violates its structural contract."""


def check_rgb(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise DataError(f"rgb image must have shape (3, h, w), got {pixels.shape}")
    _check_pixels(pixels, "rgb")
    return pixels


def check_depth(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim != 3 or pixels.shape[0] != 1:
        raise DataError(f"depth map must have shape (1, h, w), got {pixels.shape}")
    _check_pixels(pixels, "depth")
    return pixels


def _check_pixels(pixels: np.ndarray, kind: str) -> None:
    h, w = pixels.shape[1], pixels.shape[2]
    if h % 32 != 0 or w % 32 != 0:
        raise DataError(f"{kind} dims must be divisible by 32, got {h}x{w}")
    if not np.isfinite(pixels).all():
        raise DataError(f"{kind} contains non-finite values")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise DataError(
            f"{kind} values must lie in [0, 1], got range "
            f"[{pixels.min():.4g}, {pixels.max():.4g}]"
        )


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class RgbdSample:
    """One paired RGB image + depth map with identity and variation tags."""

    rgb: np.ndarray
    depth: np.ndarray
    identity: int
    subset: Subset
    session: Session

    def __post_init__(self):
        object.__setattr__(self, "rgb", _freeze(self.rgb))
        object.__setattr__(self, "depth", _freeze(self.depth))
        check_rgb(self.rgb)
        check_depth(self.depth)
        if self.rgb.shape[1:] != self.depth.shape[1:]:
            raise DataError(
                f"rgb dims {self.rgb.shape[1:]} do not match depth dims "
                f"{self.depth.shape[1:]}"
            )
        if self.identity < 0:
            raise DataError(f"identity label must be >= 0, got {self.identity}")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of samples with a provenance digest."""

    samples: tuple[RgbdSample, ...]
    identity_count: int
    manifest_digest: str

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        for i, s in enumerate(self.samples):
            if s.identity >= self.identity_count:
                raise DataError(
                    f"sample {i} has identity {s.identity} outside declared "
                    f"range [0, {self.identity_count})"
                )
            seen.add(s.identity)
        missing = set(range(self.identity_count)) - seen
        if missing:
            raise DataError(
                f"identities {sorted(missing)} declared but have no samples; "
                "labels must be contiguous from 0"
            )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int) -> RgbdSample:
        return self.samples[idx]

    def __iter__(self):
        return iter(self.samples)

    @property
    def resolution(self) -> tuple[int, int]:
        if not self.samples:
            raise DataError("empty dataset has no resolution")
        return self.samples[0].resolution

    def indices_of_identity(self, identity: int) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.identity == identity]


@dataclass(frozen=True)
class VariationSpec:
    """Per-subset perturbation magnitudes driving synthetic sample variation.

    Each magnitude scales its subset's named perturbation: NU light jitter
    only, FE bump-amplitude jitter, OC rectangle occlusion extent, PS affine
    pose warp, TM global identity-parameter drift.
    """

    magnitudes: dict[Subset, float] = field(
        default_factory=lambda: {
            Subset.NU: 0.03,
            Subset.FE: 0.30,
            Subset.OC: 0.30,
            Subset.PS: 0.20,
            Subset.TM: 0.25,
        }
    )

    def __post_init__(self):
        for subset, mag in self.magnitudes.items():
            if mag < 0:
                raise DataError(f"magnitude for {subset.value} must be >= 0, got {mag}")

    @property
    def subsets(self) -> tuple[Subset, ...]:
        # round-robin assignment order follows the canonical tag order
        return tuple(s for s in SUBSET_ORDER if s in self.magnitudes)
