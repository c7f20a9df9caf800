"""Stage 1: fine-grained facial depth generation.

An encoder-decoder generator with skip connections converts RGB to a
single-channel depth map squashed into [0, 1].  Supervision combines a
pixel similarity loss, a multi-level feature similarity loss computed
through a weight-shared pair of identity backbones (the classification
branch sees generated depth, the feature branch sees ground truth; their
convolutional parameters are the same storage), and a softmax identity
loss on the generated depth.  The three terms are combined with dynamic
weights proportional to each term's share of the unweighted sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ResidualBackbone, group_norm
from .profiles import Profile


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False), group_norm(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False), group_norm(cout),
            nn.ReLU(inplace=True))

    def forward(self, x):
        return self.net(x)


class DepthGenerator(nn.Module):
    """Encoder-decoder depth generator (3-channel in, 1-channel out).

    Three encoder stages halve the spatial dims and double the channels;
    the mirrored decoder upsamples with transposed convs and concatenates
    the matching encoder activation.  A sigmoid bounds the output to (0, 1)
    so the pixel loss and MAE live on the same scale as stored depth.
    """

    def __init__(self, base: int = 16):
        super().__init__()
        self.enc1 = _ConvBlock(3, base)
        self.enc2 = _ConvBlock(base, base * 2)
        self.enc3 = _ConvBlock(base * 2, base * 4)
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _ConvBlock(base * 4, base * 8)
        self.up3 = nn.ConvTranspose2d(base * 8, base * 4, 2, stride=2)
        self.dec3 = _ConvBlock(base * 8, base * 4)
        self.up2 = nn.ConvTranspose2d(base * 4, base * 2, 2, stride=2)
        self.dec2 = _ConvBlock(base * 4, base * 2)
        self.up1 = nn.ConvTranspose2d(base * 2, base, 2, stride=2)
        self.dec1 = _ConvBlock(base * 2, base)
        self.out = nn.Conv2d(base, 1, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        b = self.bottleneck(self.pool(e3))
        d3 = self.dec3(torch.cat([self.up3(b), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return torch.sigmoid(self.out(d1))


class IdentityBackbone(nn.Module):
    """Weight-shared classification/feature backbone pair for depth maps.

    Both branches read the same convolutional trunk (aliased, not copied);
    only the classification branch owns the linear identity head.
    """

    def __init__(self, profile: Profile, identity_count: int):
        super().__init__()
        if identity_count < 1:
            raise ValueError(f"identity_count must be >= 1, got {identity_count}")
        self.trunk = ResidualBackbone(1, profile.stage_widths, num_classes=identity_count)
        self.identity_count = identity_count

    @property
    def classification_trunk(self) -> ResidualBackbone:
        return self.trunk

    @property
    def feature_trunk(self) -> ResidualBackbone:
        # same module object as classification_trunk: sharing by aliasing
        return self.trunk

    def classify(self, depth: torch.Tensor) -> torch.Tensor:
        return self.trunk.classify(depth)


def generate_depth(rgb: torch.Tensor, gen: DepthGenerator) -> torch.Tensor:
    """Map a (b, 3, h, w) RGB batch to (b, 1, h, w) depth in [0, 1]."""
    if rgb.dim() != 4 or rgb.shape[0] < 1 or rgb.shape[1] != 3:
        raise ValueError(f"expected a (b, 3, h, w) batch with b >= 1, got {tuple(rgb.shape)}")
    if rgb.shape[2] % 32 != 0 or rgb.shape[3] % 32 != 0:
        raise ValueError(f"input dims must be divisible by 32, got "
                         f"{rgb.shape[2]}x{rgb.shape[3]}")
    return gen(rgb)


def ps_loss(gen_depth: torch.Tensor, gt_depth: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference between generated and GT depth."""
    if gen_depth.shape != gt_depth.shape:
        raise ValueError(f"shape mismatch: {tuple(gen_depth.shape)} vs "
                         f"{tuple(gt_depth.shape)}")
    return (gen_depth - gt_depth).abs().mean()


def shallow_features(depth: torch.Tensor, backbone: IdentityBackbone,
                     n: int = 3) -> list[torch.Tensor]:
    """First ``n`` shallow feature maps of the (shared-weight) trunk."""
    return backbone.trunk.taps(depth, n)


def mfs_loss(feats_gen: list[torch.Tensor], feats_gt: list[torch.Tensor]) -> torch.Tensor:
    """Mean over levels of the per-level mean absolute feature difference.

    Gradients flow through both branches (no stop-gradient on the GT side)
    and, via the generated-depth branch, back into the generator.
    """
    if len(feats_gen) != len(feats_gt):
        raise ValueError(f"level count mismatch: {len(feats_gen)} vs {len(feats_gt)}")
    if not feats_gen:
        raise ValueError("feature lists are empty")
    levels = []
    for l, (a, b) in enumerate(zip(feats_gen, feats_gt), start=1):
        if a.shape != b.shape:
            raise ValueError(f"level {l} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        levels.append((a - b).abs().mean())
    return torch.stack(levels).mean()


def depth_identity_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy of identity logits over the batch."""
    if logits.dim() != 2:
        raise ValueError(f"logits must be (batch, classes), got {tuple(logits.shape)}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"labels must lie in [0, {logits.shape[1]}), got "
                         f"range [{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels)


def _as_float(value) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


def dynamic_weights(l_ps, l_mfs, l_dis) -> tuple[float, float]:
    """Proportional loss weights from the current detached loss values.

    lambda1 = l_ps / (l_ps + l_mfs + l_dis) and lambda2 likewise for the
    feature term; the denominator is the unweighted sum, and a vanishing
    denominator falls back to (1/3, 1/3).  The weights are plain floats,
    so no gradient flows through them.
    """
    vals = [_as_float(l_ps), _as_float(l_mfs), _as_float(l_dis)]
    for name, v in zip(("l_ps", "l_mfs", "l_dis"), vals):
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v}")
        if v < 0:
            raise ValueError(f"{name} must be >= 0, got {v}")
    total = sum(vals)
    if total < 1e-12:
        return (1.0 / 3.0, 1.0 / 3.0)
    return (vals[0] / total, vals[1] / total)


@dataclass
class DepthgenLossBreakdown:
    """Stage-1 loss components, their dynamic weights, and the weighted total."""

    l_ps: torch.Tensor
    l_mfs: torch.Tensor
    l_dis: torch.Tensor
    lambda1: float
    lambda2: float
    l_total: torch.Tensor


def depthgen_total_loss(l_ps, l_mfs, l_dis) -> DepthgenLossBreakdown:
    """Combine the three stage-1 terms: lambda1*ps + lambda2*mfs + dis."""
    lambda1, lambda2 = dynamic_weights(l_ps, l_mfs, l_dis)
    total = lambda1 * l_ps + lambda2 * l_mfs + l_dis
    return DepthgenLossBreakdown(l_ps=l_ps, l_mfs=l_mfs, l_dis=l_dis,
                             lambda1=lambda1, lambda2=lambda2, l_total=total)
