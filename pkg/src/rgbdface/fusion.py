"""Stage 2: two-stream complementary feature learning.

Two independent residual branches (one per modality) produce terminal
feature maps that are flattened (channel-major, then row-major within each
channel) and projected by four affine heads into RGB-specific, RGB-shared,
depth-shared, and depth-specific embeddings.  The shared pair is pulled
together by an L1 consistency loss, the specific pair is pushed apart by
a rescaled-cosine exclusion loss, and per-modality additive-angular-margin
classifiers keep the concatenated (specific, shared) embedding
discriminative.  Test-time matching uses the 4-way concatenation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ResidualBackbone
from .profiles import Profile


class TwoStreamExtractor(nn.Module):
    """Independent RGB (3-channel) and depth (1-channel) residual branches."""

    def __init__(self, profile: Profile):
        super().__init__()
        self.rgb_branch = ResidualBackbone(3, profile.stage_widths)
        self.depth_branch = ResidualBackbone(1, profile.stage_widths)

    def forward(self, rgb: torch.Tensor, depth: torch.Tensor):
        return self.rgb_branch.feature_map(rgb), self.depth_branch.feature_map(depth)


@dataclass
class SeparatedEmbeddings:
    """Per-sample 512-d projections into the four feature subspaces."""

    rgb_specific: torch.Tensor
    rgb_shared: torch.Tensor
    depth_shared: torch.Tensor
    depth_specific: torch.Tensor

    def parts(self) -> tuple[torch.Tensor, ...]:
        return (self.rgb_specific, self.rgb_shared, self.depth_shared, self.depth_specific)


class SeparationHeads(nn.Module):
    """Four affine maps from the flattened feature dim to the embedding dim."""

    def __init__(self, flat_dim: int, embed_dim: int = 512):
        super().__init__()
        self.flat_dim = flat_dim
        self.embed_dim = embed_dim
        self.rgb_specific = nn.Linear(flat_dim, embed_dim)
        self.rgb_shared = nn.Linear(flat_dim, embed_dim)
        self.depth_shared = nn.Linear(flat_dim, embed_dim)
        self.depth_specific = nn.Linear(flat_dim, embed_dim)

    def forward(self, flat_rgb: torch.Tensor, flat_depth: torch.Tensor) -> SeparatedEmbeddings:
        return SeparatedEmbeddings(
            rgb_specific=self.rgb_specific(flat_rgb),
            rgb_shared=self.rgb_shared(flat_rgb),
            depth_shared=self.depth_shared(flat_depth),
            depth_specific=self.depth_specific(flat_depth))


def extract_and_separate(rgb: torch.Tensor, depth: torch.Tensor,
                         streams: TwoStreamExtractor,
                         heads: SeparationHeads) -> SeparatedEmbeddings:
    """Run both branches and project into the four subspaces.

    Flatten order is torch's native (b, c, h, w) -> (b, c*h*w): channel-major,
    row-major within each channel, so flat index = c*h*w + r*w + col.  The
    order is fixed; checkpoints rely on it staying stable.
    """
    if rgb.dim() != 4 or depth.dim() != 4 or rgb.shape[0] != depth.shape[0]:
        raise ValueError(f"expected paired 4-d batches, got rgb {tuple(rgb.shape)} "
                         f"and depth {tuple(depth.shape)}")
    feat_r, feat_d = streams(rgb, depth)
    flat_r, flat_d = feat_r.flatten(1), feat_d.flatten(1)
    if flat_r.shape[1] != heads.flat_dim:
        raise ValueError(
            f"branch output flattens to {flat_r.shape[1]}, but the separation "
            f"heads expect {heads.flat_dim}; input resolution does not match "
            "the configured profile")
    return heads(flat_r, flat_d)


def cic_loss(rgb_shared: torch.Tensor, depth_shared: torch.Tensor) -> torch.Tensor:
    """Cross-modal identity consistency: mean |shared_r - shared_d|."""
    if rgb_shared.shape != depth_shared.shape:
        raise ValueError(f"shape mismatch: {tuple(rgb_shared.shape)} vs "
                         f"{tuple(depth_shared.shape)}")
    return (rgb_shared - depth_shared).abs().mean()


def cfe_loss(rgb_specific: torch.Tensor, depth_specific: torch.Tensor) -> torch.Tensor:
    """Cross-modal feature exclusion: batch mean of 0.5*cos + 0.5.

    The value lives in [0, 1]: 1 for parallel pairs, 0.5 for orthogonal,
    0 for anti-parallel, so minimizing pushes the modality-specific
    embeddings of a pair apart.  Zero-norm rows are an error (no silent
    epsilon); callers may pre-check.
    """
    if rgb_specific.shape != depth_specific.shape or rgb_specific.dim() != 2:
        raise ValueError(f"expected equal (batch, dim) shapes, got "
                         f"{tuple(rgb_specific.shape)} vs {tuple(depth_specific.shape)}")
    norms_r = rgb_specific.norm(dim=1)
    norms_d = depth_specific.norm(dim=1)
    for name, norms in (("rgb_specific", norms_r), ("depth_specific", norms_d)):
        zero = (norms == 0).nonzero()
        if zero.numel():
            raise ValueError(f"{name} sample {int(zero[0])} has zero norm; "
                             "cosine similarity is undefined")
    cos = (rgb_specific * depth_specific).sum(dim=1) / (norms_r * norms_d)
    return (cos * 0.5 + 0.5).mean()


class ArcMarginClassifier(nn.Module):
    """Identity classifier with an additive angular margin on cosine logits.

    Rows of ``weight`` and input embeddings are L2-normalized inside the
    loss; the target-class cosine cos(theta) becomes cos(theta + margin),
    everything is scaled by ``scale`` before softmax cross-entropy.
    """

    def __init__(self, num_classes: int, in_dim: int, scale: float = 30.0,
                 margin: float = 0.5):
        super().__init__()
        if scale <= 0:
            raise ValueError(f"scale must be > 0, got {scale}")
        if not 0 <= margin < math.pi / 2:
            raise ValueError(f"margin must lie in [0, pi/2), got {margin}")
        self.weight = nn.Parameter(torch.empty(num_classes, in_dim))
        nn.init.xavier_uniform_(self.weight)
        self.scale = scale
        self.margin = margin

    def cosines(self, embeddings: torch.Tensor) -> torch.Tensor:
        return torch.clamp(
            F.normalize(embeddings, dim=1) @ F.normalize(self.weight, dim=1).t(),
            -1.0, 1.0)

    def margin_logits(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cos = self.cosines(embeddings)
        if labels.min() < 0 or labels.max() >= cos.shape[1]:
            raise ValueError(f"labels must lie in [0, {cos.shape[1]}), got "
                             f"range [{int(labels.min())}, {int(labels.max())}]")
        sin = torch.sqrt(torch.clamp(1.0 - cos * cos, min=0.0))
        phi = cos * math.cos(self.margin) - sin * math.sin(self.margin)
        # easy-margin fallback: leave the cosine untouched once theta passes
        # pi/2, where adding the margin would stop being monotone
        phi = torch.where(cos > 0, phi, cos)
        one_hot = F.one_hot(labels, num_classes=cos.shape[1]).to(cos.dtype)
        return self.scale * (one_hot * phi + (1.0 - one_hot) * cos)


def arc_identity_loss(embeddings: SeparatedEmbeddings, labels: torch.Tensor,
                      classifiers: tuple[ArcMarginClassifier, ArcMarginClassifier]
                      ) -> torch.Tensor:
    """Average the margin cross-entropy of both modalities.

    Each modality classifies cat(specific, shared); the two losses are
    combined with the 1/2 factor.
    """
    clf_r, clf_d = classifiers
    if (clf_r.scale, clf_r.margin) != (clf_d.scale, clf_d.margin):
        raise ValueError("both classifiers must share (scale, margin), got "
                         f"({clf_r.scale}, {clf_r.margin}) vs ({clf_d.scale}, {clf_d.margin})")
    emb_r = torch.cat([embeddings.rgb_specific, embeddings.rgb_shared], dim=1)
    emb_d = torch.cat([embeddings.depth_specific, embeddings.depth_shared], dim=1)
    loss_r = F.cross_entropy(clf_r.margin_logits(emb_r, labels), labels)
    loss_d = F.cross_entropy(clf_d.margin_logits(emb_d, labels), labels)
    return 0.5 * (loss_r + loss_d)


def fusion_total_loss(l_cic, l_cfe, l_dis, lambda_dis: float):
    """Stage-2 objective: l_cic + l_cfe + lambda * l_dis."""
    if lambda_dis < 0:
        raise ValueError(f"lambda must be >= 0, got {lambda_dis}")
    for name, v in (("l_cic", l_cic), ("l_cfe", l_cfe), ("l_dis", l_dis)):
        fv = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(fv):
            raise ValueError(f"{name} must be finite, got {fv}")
    return l_cic + l_cfe + lambda_dis * l_dis


def test_embedding(embeddings: SeparatedEmbeddings) -> torch.Tensor:
    """Concatenate [rgb_specific, rgb_shared, depth_shared, depth_specific]."""
    parts = embeddings.parts()
    if any(p is None for p in parts):
        raise ValueError("all four embedding parts are required")
    return torch.cat(parts, dim=-1)
