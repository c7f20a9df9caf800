"""Gallery/probe assignment for rank-1 identification.

Each identity enrolls exactly one gallery sample, preferring a neutral
(NU) capture from session S1 and falling back to its lowest-index sample;
every other sample becomes a probe.
"""

from __future__ import annotations

from dataclasses import dataclass

from .types import Dataset, Session, Subset


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class EvalProtocol:
    gallery_indices: tuple[int, ...]   # one sample index per identity
    probe_indices: tuple[int, ...]     # all remaining indices, ascending
    subset_of: dict[int, Subset]       # probe index -> variation tag

    def __post_init__(self):
        overlap = set(self.gallery_indices) & set(self.probe_indices)
        if overlap:
            raise ProtocolError(f"gallery and probe sets overlap at {sorted(overlap)}")


def build_protocol(dataset: Dataset, allow_gallery_only: bool = False) -> EvalProtocol:
    """Pick one gallery sample per identity, (NU, S1) preferred, else lowest index."""
    by_identity: dict[int, list[int]] = {i: [] for i in range(dataset.identity_count)}
    for idx, sample in enumerate(dataset):
        by_identity[sample.identity].append(idx)

    gallery = []
    for identity in range(dataset.identity_count):
        indices = by_identity[identity]
        if not indices:
            raise ProtocolError(f"identity {identity} has no samples")
        if len(indices) < 2 and not allow_gallery_only:
            raise ProtocolError(
                f"identity {identity} has a single sample; its probe set would be "
                "empty (pass allow_gallery_only=True to accept)")
        chosen = next(
            (i for i in indices
             if dataset[i].subset is Subset.NU and dataset[i].session is Session.S1),
            indices[0])
        gallery.append(chosen)

    gallery_set = set(gallery)
    probes = tuple(i for i in range(len(dataset)) if i not in gallery_set)
    return EvalProtocol(
        gallery_indices=tuple(gallery),
        probe_indices=probes,
        subset_of={i: dataset[i].subset for i in probes},
    )
