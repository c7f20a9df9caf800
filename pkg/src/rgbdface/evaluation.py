"""Depth MAE, cosine matching, and rank-1 identification scoring.

All functions here are pure over numpy inputs.  The rank report carries
both AVG conventions: the unweighted mean of per-subset accuracies and the
pooled accuracy over all probes (the two differ whenever subsets have
unequal sizes), clearly labeled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio.types import Subset

SUBSET_COLUMNS = ("NU", "FE", "OC", "PS", "TM")


def mae(gen_depth: np.ndarray, gt_depth: np.ndarray, scale: float = 255.0) -> float:
    """Mean absolute pixel difference on the 0-255 scale (inputs in [0, 1])."""
    gen_depth = np.asarray(gen_depth, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    if gen_depth.shape != gt_depth.shape:
        raise ValueError(f"shape mismatch: {gen_depth.shape} vs {gt_depth.shape}")
    return float(np.abs(gen_depth - gt_depth).mean() * scale)


def similarity_matrix(probe_embeddings: np.ndarray,
                      gallery_embeddings: np.ndarray) -> np.ndarray:
    """Cosine similarity of every probe (rows) against every gallery entry."""
    probes = np.asarray(probe_embeddings, dtype=np.float64)
    gallery = np.asarray(gallery_embeddings, dtype=np.float64)
    if probes.ndim != 2 or gallery.ndim != 2 or probes.shape[1] != gallery.shape[1]:
        raise ValueError(f"embedding dims mismatch: probes {probes.shape}, "
                         f"gallery {gallery.shape}")
    for name, emb in (("probe", probes), ("gallery", gallery)):
        norms = np.linalg.norm(emb, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise ValueError(f"{name} embedding {int(zero[0])} has zero norm; "
                             "cosine similarity is undefined")
    pn = probes / np.linalg.norm(probes, axis=1, keepdims=True)
    gn = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    return np.clip(pn @ gn.T, -1.0, 1.0)


@dataclass
class RankReport:
    """Rank-1 identification results with per-subset breakdown.

    ``overall_accuracy`` is the pooled percentage over every probe;
    ``subset_mean_accuracy`` is the unweighted mean of the per-subset
    percentages (only over subsets that have probes).
    """

    overall_accuracy: float
    subset_mean_accuracy: float
    per_subset: dict[str, float]
    n_correct: dict[str, int]
    n_total: dict[str, int]
    overall_correct: int = 0
    overall_total: int = 0
    extras: dict[str, float] = field(default_factory=dict)

    def to_key_values(self) -> str:
        lines = [f"overall={self.overall_accuracy:.4f}"]
        for tag in SUBSET_COLUMNS:
            if tag in self.per_subset:
                lines.append(f"subset.{tag}={self.per_subset[tag]:.4f}")
        lines.append(f"avg_subset_mean={self.subset_mean_accuracy:.4f}")
        lines.append(f"avg_pooled={self.overall_accuracy:.4f}")
        lines.append(f"n_correct={self.overall_correct}")
        lines.append(f"n_total={self.overall_total}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        header = "\t".join(SUBSET_COLUMNS + ("AVG",))
        cells = [f"{self.per_subset[t]:.2f}" if t in self.per_subset else "-"
                 for t in SUBSET_COLUMNS]
        cells.append(f"{self.subset_mean_accuracy:.2f}")
        return header + "\n" + "\t".join(cells) + "\n"


def rank1_report(matrix: np.ndarray, probe_labels, gallery_labels,
                 subset_of) -> RankReport:
    """Score rank-1 identification: probe i is correct iff the gallery entry
    with the highest similarity (ties broken by lowest gallery index) carries
    the probe's identity.

    ``subset_of`` maps probe row index to a subset tag (Subset or string).
    """
    matrix = np.asarray(matrix)
    probe_labels = np.asarray(probe_labels)
    gallery_labels = np.asarray(gallery_labels)
    if matrix.ndim != 2:
        raise ValueError(f"matrix must be 2-d, got shape {matrix.shape}")
    if matrix.shape != (len(probe_labels), len(gallery_labels)):
        raise ValueError(f"matrix shape {matrix.shape} does not match "
                         f"{len(probe_labels)} probes x {len(gallery_labels)} gallery")
    if len(set(gallery_labels.tolist())) != len(gallery_labels):
        raise ValueError("gallery labels must be distinct (one entry per identity)")

    # np.argmax returns the first maximal column: lowest-index tie break
    best = np.argmax(matrix, axis=1)
    correct = gallery_labels[best] == probe_labels

    def tag_of(i: int) -> str:
        tag = subset_of[i]
        return tag.value if isinstance(tag, Subset) else str(tag)

    n_correct: dict[str, int] = {}
    n_total: dict[str, int] = {}
    for i in range(len(probe_labels)):
        tag = tag_of(i)
        n_total[tag] = n_total.get(tag, 0) + 1
        n_correct[tag] = n_correct.get(tag, 0) + int(correct[i])

    per_subset = {tag: 100.0 * n_correct[tag] / n_total[tag] for tag in n_total}
    overall_total = int(len(probe_labels))
    overall_correct = int(correct.sum())
    overall = 100.0 * overall_correct / overall_total if overall_total else 0.0
    subset_mean = float(np.mean(list(per_subset.values()))) if per_subset else 0.0
    return RankReport(
        overall_accuracy=overall,
        subset_mean_accuracy=subset_mean,
        per_subset=per_subset,
        n_correct=n_correct,
        n_total=n_total,
        overall_correct=overall_correct,
        overall_total=overall_total,
    )
