"""Model size profiles.

The full profile matches the published geometry: 256x256 inputs, a
512-channel terminal feature map at 1/32 resolution (512x8x8, flattened to
32768), and 512-d separation embeddings.  The desk profile quarters every
channel width and runs at 64x64 so the whole pipeline trains on a laptop
CPU while preserving all structural invariants (terminal map Cx2x2).
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Profile:
    name: str
    input_hw: tuple[int, int]
    stage_widths: tuple[int, int, int, int]  # residual stage channels, stem = stage_widths[0]
    gen_base: int                            # generator encoder base width
    embed_dim: int = 512

    @property
    def feature_channels(self) -> int:
        return self.stage_widths[-1]

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.input_hw[0] // 32, self.input_hw[1] // 32

    @property
    def flat_dim(self) -> int:
        h, w = self.feature_hw
        return self.feature_channels * h * w


FULL = Profile(name="full", input_hw=(256, 256),
               stage_widths=(64, 128, 256, 512), gen_base=64)
DESK = Profile(name="desk", input_hw=(64, 64),
               stage_widths=(16, 32, 64, 128), gen_base=16)

PROFILES = {p.name: p for p in (FULL, DESK)}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r} "
                         f"(expected one of {sorted(PROFILES)})") from None
