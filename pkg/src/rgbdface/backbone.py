"""Residual feature backbone shared by both pipeline stages.

An 18-layer residual CNN: 7x7 stride-2 stem, 3x3 stride-2 max pool, four
stages of two basic blocks (stages 2-4 downsample), so the terminal feature
map sits at 1/32 of the input resolution.  Group normalization is used
throughout instead of batch normalization: it keeps forward passes pure
(no running statistics), batch-size independent, and bitwise reproducible,
which the training determinism contract depends on.

Shallow taps for multi-level feature comparison: level 1 is the stem
output (1/2 res), level 2 is stage 1 (1/4 res, after the pool), level 3 is
stage 2 (1/8 res), level 4 is stage 3 (1/16 res).
"""

from __future__ import annotations

import torch
import torch.nn as nn

MAX_TAP_LEVELS = 4


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = group_norm(cout)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), group_norm(cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResidualBackbone(nn.Module):
    """Four-stage residual trunk with optional classification head.

    ``num_classes=None`` builds a pure feature extractor (no head).
    """

    def __init__(self, in_channels: int, stage_widths: tuple[int, int, int, int],
                 num_classes: int | None = None):
        super().__init__()
        w1, w2, w3, w4 = stage_widths
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, w1, 7, stride=2, padding=3, bias=False),
            group_norm(w1), nn.ReLU(inplace=True))
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.stage1 = nn.Sequential(BasicBlock(w1, w1), BasicBlock(w1, w1))
        self.stage2 = nn.Sequential(BasicBlock(w1, w2, stride=2), BasicBlock(w2, w2))
        self.stage3 = nn.Sequential(BasicBlock(w2, w3, stride=2), BasicBlock(w3, w3))
        self.stage4 = nn.Sequential(BasicBlock(w3, w4, stride=2), BasicBlock(w4, w4))
        self.feature_channels = w4
        if num_classes is not None:
            self.head = nn.Linear(w4, num_classes)
        else:
            self.head = None

    def taps(self, x: torch.Tensor, n: int) -> list[torch.Tensor]:
        """Activations of the first ``n`` shallow levels (1 <= n <= 4)."""
        if not 1 <= n <= MAX_TAP_LEVELS:
            raise ValueError(f"tap count must lie in [1, {MAX_TAP_LEVELS}], got {n}")
        t1 = self.stem(x)
        out = [t1]
        if n >= 2:
            out.append(self.stage1(self.pool(t1)))
        if n >= 3:
            out.append(self.stage2(out[1]))
        if n >= 4:
            out.append(self.stage3(out[2]))
        return out

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        # (b, in, h, w) -> (b, w4, h/32, w/32)
        t = self.stage1(self.pool(self.stem(x)))
        return self.stage4(self.stage3(self.stage2(t)))

    def classify(self, x: torch.Tensor) -> torch.Tensor:
        if self.head is None:
            raise RuntimeError("backbone was built without a classification head")
        feat = self.feature_map(x).mean(dim=(2, 3))
        return self.head(feat)

    def forward(self, x):
        return self.classify(x) if self.head is not None else self.feature_map(x)
