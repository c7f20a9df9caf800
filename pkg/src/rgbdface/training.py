"""Two-stage training: SGD with plateau learning-rate decay.

Stage 1 fits the depth generator plus the shared identity backbone under
the dynamically weighted pixel/feature/identity objective, scheduling on
held-out MAE.  Stage 2 fits the two-stream fusion network under the
consistency/exclusion/margin objective, scheduling on held-out rank-1
accuracy.  The last ceil(10%) of identities (by label) are held out for
validation; stage-2 validation scores those identities' probes against a
gallery spanning every identity, so chance level is 1/identity_count.

Everything is a pure function of (seed, config, dataset): batch order is
drawn from a per-epoch generator seeded by (seed, epoch), model init from
the torch seed, and no op with scheduling nondeterminism is used, so two
runs produce identical histories and checkpoints.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import depthgen as dg
from . import fusion as fu
from .dataio.protocol import build_protocol
from .dataio.types import Dataset, RgbdSample
from .evaluation import mae, rank1_report, similarity_matrix
from .profiles import Profile, get_profile

VAL_FRACTION = 0.1

STAGE_DEFAULTS = {
    "depthgen": {"batch_size": 32, "lr": 0.01},
    "fusion": {"batch_size": 4, "lr": 0.001},
}


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Optimizer, schedule, and loss-toggle settings for either stage.

    ``batch_size`` and ``lr`` default per stage (32 / 0.01 for depthgen,
    4 / 0.001 for fusion) when left unset.
    """

    stage: str
    max_epochs: int = 30
    batch_size: int | None = None
    lr: float | None = None
    momentum: float = 0.9
    decay_factor: float = 0.5
    patience: int = 5
    seed: int = 0
    profile: str = "full"
    mfs_on: bool = True
    mfs_levels: int = 3
    cic_on: bool = True
    cfe_on: bool = True
    lambda_dis: float = 0.5
    arc_scale: float = 30.0
    arc_margin: float = 0.5

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise TrainError(f"stage must be one of {sorted(STAGE_DEFAULTS)}, "
                             f"got {self.stage!r}")
        if self.batch_size is None:
            self.batch_size = STAGE_DEFAULTS[self.stage]["batch_size"]
        if self.lr is None:
            self.lr = STAGE_DEFAULTS[self.stage]["lr"]
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.decay_factor < 1:
            raise TrainError(f"decay_factor must lie in (0, 1), got {self.decay_factor}")
        if self.patience < 1:
            raise TrainError(f"patience must be >= 1, got {self.patience}")
        if self.lambda_dis < 0:
            raise TrainError(f"lambda_dis must be >= 0, got {self.lambda_dis}")
        if self.max_epochs < 1:
            raise TrainError(f"max_epochs must be >= 1, got {self.max_epochs}")
        get_profile(self.profile)

    @property
    def metric_mode(self) -> str:
        # stage 1 schedules on MAE (lower is better), stage 2 on rank-1
        return "min" if self.stage == "depthgen" else "max"


@dataclass
class EpochRecord:
    epoch: int
    l_ps: float = 0.0
    l_mfs: float = 0.0
    l_dis: float = 0.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    l_cic: float = 0.0
    l_cfe: float = 0.0
    total: float = 0.0
    val_metric: float = 0.0
    lr: float = 0.0


HISTORY_COLUMNS = ("epoch", "l_ps", "l_mfs", "l_dis", "lambda1", "lambda2",
                   "l_cic", "l_cfe", "total", "val_metric", "lr")


@dataclass
class TrainHistory:
    """Per-epoch loss components, validation metric, and the lr in effect."""

    metric_mode: str
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def val_metrics(self) -> list[float]:
        return [r.val_metric for r in self.records]

    def to_table(self) -> str:
        lines = [",".join(HISTORY_COLUMNS)]
        for r in self.records:
            lines.append(",".join(
                str(r.epoch) if c == "epoch" else repr(getattr(r, c))
                for c in HISTORY_COLUMNS))
        return "\n".join(lines) + "\n"


class PlateauScheduler:
    """Halve-on-stall learning-rate rule.

    The metric must strictly improve on the best seen value; after
    ``patience`` consecutive non-improving epochs the lr is multiplied by
    ``factor`` and the stall counter resets (the best value persists).
    """

    def __init__(self, lr: float, patience: int, factor: float, mode: str = "min"):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        if not 0 < factor < 1:
            raise ValueError(f"factor must lie in (0, 1), got {factor}")
        if mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.mode = mode
        self.best: float | None = None
        self.stall = 0

    def _improved(self, metric: float) -> bool:
        if self.best is None:
            return True
        return metric < self.best if self.mode == "min" else metric > self.best

    def step(self, metric: float) -> float:
        """Record one epoch's validation metric; returns the lr to use next."""
        if self._improved(metric):
            self.best = metric
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.patience:
                self.lr *= self.factor
                self.stall = 0
        return self.lr


def plateau_schedule(metric_sequence, current_lr: float, patience: int,
                     factor: float, mode: str = "min") -> float:
    """Replay the plateau rule over a metric history; returns the final lr."""
    metrics = list(metric_sequence)
    if not metrics:
        raise ValueError("metric history is empty")
    sched = PlateauScheduler(current_lr, patience, factor, mode)
    for m in metrics:
        sched.step(m)
    return sched.lr


def _val_split(dataset: Dataset) -> tuple[list[int], list[int], set[int]]:
    n_val_ids = math.ceil(dataset.identity_count * VAL_FRACTION)
    val_ids = set(range(dataset.identity_count - n_val_ids, dataset.identity_count))
    train_idx = [i for i, s in enumerate(dataset) if s.identity not in val_ids]
    val_idx = [i for i, s in enumerate(dataset) if s.identity in val_ids]
    return train_idx, val_idx, val_ids


def _stack(dataset: Dataset, indices) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    rgb = torch.from_numpy(np.stack([dataset[i].rgb for i in indices]))
    depth = torch.from_numpy(np.stack([dataset[i].depth for i in indices]))
    labels = torch.tensor([dataset[i].identity for i in indices], dtype=torch.long)
    return rgb, depth, labels


def _epoch_batches(train_idx: list[int], batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng((seed, epoch)).permutation(len(train_idx))
    shuffled = [train_idx[int(i)] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def _check_profile(dataset: Dataset, profile: Profile) -> None:
    if dataset.resolution != profile.input_hw:
        raise TrainError(f"dataset resolution {dataset.resolution} does not match "
                         f"profile {profile.name!r} input {profile.input_hw}")


def train_depthgen(dataset: Dataset, config: TrainConfig
                   ) -> tuple[dg.DepthGenerator, dg.IdentityBackbone, TrainHistory]:
    """Stage-1 loop: minimize the dynamically weighted depth objective."""
    if config.stage != "depthgen":
        raise TrainError(f"config.stage must be 'depthgen', got {config.stage!r}")
    if len(dataset) == 0:
        raise TrainError("dataset is empty")
    profile = get_profile(config.profile)
    _check_profile(dataset, profile)
    train_idx, val_idx, _ = _val_split(dataset)
    if not train_idx:
        raise TrainError(f"dataset too small: no training samples remain after "
                         f"holding out validation identities ({len(dataset)} samples)")

    torch.manual_seed(config.seed)
    gen = dg.DepthGenerator(base=profile.gen_base)
    backbone = dg.IdentityBackbone(profile, dataset.identity_count)
    params = list(gen.parameters()) + list(backbone.parameters())
    optimizer = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    scheduler = PlateauScheduler(config.lr, config.patience, config.decay_factor,
                                 mode=config.metric_mode)
    val_rgb, val_depth, _ = _stack(dataset, val_idx)
    history = TrainHistory(metric_mode=config.metric_mode)

    lr_now = config.lr
    for epoch in range(1, config.max_epochs + 1):
        sums = {"l_ps": 0.0, "l_mfs": 0.0, "l_dis": 0.0,
                "lambda1": 0.0, "lambda2": 0.0, "total": 0.0}
        seen = 0
        for batch in _epoch_batches(train_idx, config.batch_size, config.seed, epoch):
            rgb, gt, labels = _stack(dataset, batch)
            optimizer.zero_grad()
            gen_depth = dg.generate_depth(rgb, gen)
            l_ps = dg.ps_loss(gen_depth, gt)
            if config.mfs_on:
                feats_gen = dg.shallow_features(gen_depth, backbone, config.mfs_levels)
                feats_gt = dg.shallow_features(gt, backbone, config.mfs_levels)
                l_mfs = dg.mfs_loss(feats_gen, feats_gt)
            else:
                l_mfs = torch.zeros(())
            l_dis = dg.depth_identity_loss(backbone.classify(gen_depth), labels)
            breakdown = dg.depthgen_total_loss(l_ps, l_mfs, l_dis)
            breakdown.l_total.backward()
            optimizer.step()

            n = len(batch)
            seen += n
            sums["l_ps"] += float(l_ps.detach()) * n
            sums["l_mfs"] += float(l_mfs.detach()) * n
            sums["l_dis"] += float(l_dis.detach()) * n
            sums["lambda1"] += breakdown.lambda1 * n
            sums["lambda2"] += breakdown.lambda2 * n
            sums["total"] += float(breakdown.l_total.detach()) * n

        with torch.no_grad():
            val_mae = mae(gen(val_rgb).numpy(), val_depth.numpy())
        history.append(EpochRecord(
            epoch=epoch,
            l_ps=sums["l_ps"] / seen, l_mfs=sums["l_mfs"] / seen,
            l_dis=sums["l_dis"] / seen,
            lambda1=sums["lambda1"] / seen, lambda2=sums["lambda2"] / seen,
            total=sums["total"] / seen,
            val_metric=val_mae, lr=lr_now))
        lr_now = scheduler.step(val_mae)
        for group in optimizer.param_groups:
            group["lr"] = lr_now

    return gen, backbone, history


def export_generated_depth(dataset: Dataset, generator: dg.DepthGenerator,
                           profile: Profile | None = None,
                           batch_size: int = 16) -> Dataset:
    """Replace every sample's depth with the generator's output.

    Labels and tags are preserved; the digest marks the derivation so the
    result is distinguishable from its source.
    """
    if profile is not None:
        _check_profile(dataset, profile)
    new_samples = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            indices = range(start, min(start + batch_size, len(dataset)))
            rgb, _, _ = _stack(dataset, indices)
            gen_depth = dg.generate_depth(rgb, generator).numpy()
            for k, i in enumerate(indices):
                s = dataset[i]
                new_samples.append(RgbdSample(
                    rgb=s.rgb, depth=gen_depth[k],
                    identity=s.identity, subset=s.subset, session=s.session))
    digest = hashlib.sha256(f"gen-depth:{dataset.manifest_digest}".encode()).hexdigest()
    return Dataset(samples=tuple(new_samples),
                   identity_count=dataset.identity_count,
                   manifest_digest=digest)


def embed_dataset(dataset: Dataset, streams: fu.TwoStreamExtractor,
                  heads: fu.SeparationHeads, indices=None,
                  batch_size: int = 16) -> np.ndarray:
    """Test embeddings (concatenated four-way) for the given sample indices."""
    if indices is None:
        indices = range(len(dataset))
    indices = list(indices)
    out = np.zeros((len(indices), 4 * heads.embed_dim), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            rgb, depth, _ = _stack(dataset, chunk)
            embs = fu.extract_and_separate(rgb, depth, streams, heads)
            out[start:start + len(chunk)] = fu.test_embedding(embs).numpy()
    return out


def _heldout_rank1(dataset: Dataset, streams, heads, val_ids: set[int]) -> float:
    """Rank-1 of held-out identities' probes against an all-identity gallery."""
    protocol = build_protocol(dataset, allow_gallery_only=True)
    probe_idx = [i for i in protocol.probe_indices
                 if dataset[i].identity in val_ids]
    if not probe_idx:
        raise TrainError("validation identities contribute no probe samples")
    gallery_idx = list(protocol.gallery_indices)
    gallery_emb = embed_dataset(dataset, streams, heads, gallery_idx)
    probe_emb = embed_dataset(dataset, streams, heads, probe_idx)
    matrix = similarity_matrix(probe_emb, gallery_emb)
    report = rank1_report(
        matrix,
        probe_labels=[dataset[i].identity for i in probe_idx],
        gallery_labels=[dataset[i].identity for i in gallery_idx],
        subset_of={k: dataset[i].subset for k, i in enumerate(probe_idx)})
    return report.overall_accuracy


def train_fusion(dataset: Dataset, config: TrainConfig
                 ) -> tuple[fu.TwoStreamExtractor, fu.SeparationHeads,
                            tuple[fu.ArcMarginClassifier, fu.ArcMarginClassifier],
                            TrainHistory]:
    """Stage-2 loop: minimize cic + cfe + lambda * margin identity loss.

    The dataset is expected to pair RGB with generated depth (see
    ``export_generated_depth``); whatever depth it carries is consumed.
    """
    if config.stage != "fusion":
        raise TrainError(f"config.stage must be 'fusion', got {config.stage!r}")
    if len(dataset) == 0:
        raise TrainError("dataset is empty")
    if dataset.identity_count < 2:
        raise TrainError("fusion training needs >= 2 identities "
                         "(rank-1 is degenerate otherwise)")
    profile = get_profile(config.profile)
    _check_profile(dataset, profile)
    train_idx, _, val_ids = _val_split(dataset)
    if not train_idx:
        raise TrainError("dataset too small: no training samples remain after "
                         "holding out validation identities")

    torch.manual_seed(config.seed)
    streams = fu.TwoStreamExtractor(profile)
    heads = fu.SeparationHeads(profile.flat_dim, profile.embed_dim)
    clf_r = fu.ArcMarginClassifier(dataset.identity_count, 2 * profile.embed_dim,
                                   scale=config.arc_scale, margin=config.arc_margin)
    clf_d = fu.ArcMarginClassifier(dataset.identity_count, 2 * profile.embed_dim,
                                   scale=config.arc_scale, margin=config.arc_margin)
    params = (list(streams.parameters()) + list(heads.parameters())
              + list(clf_r.parameters()) + list(clf_d.parameters()))
    optimizer = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    scheduler = PlateauScheduler(config.lr, config.patience, config.decay_factor,
                                 mode=config.metric_mode)
    history = TrainHistory(metric_mode=config.metric_mode)

    lr_now = config.lr
    for epoch in range(1, config.max_epochs + 1):
        sums = {"l_cic": 0.0, "l_cfe": 0.0, "l_dis": 0.0, "total": 0.0}
        seen = 0
        for batch in _epoch_batches(train_idx, config.batch_size, config.seed, epoch):
            rgb, depth, labels = _stack(dataset, batch)
            optimizer.zero_grad()
            embs = fu.extract_and_separate(rgb, depth, streams, heads)
            l_cic = fu.cic_loss(embs.rgb_shared, embs.depth_shared) \
                if config.cic_on else torch.zeros(())
            l_cfe = fu.cfe_loss(embs.rgb_specific, embs.depth_specific) \
                if config.cfe_on else torch.zeros(())
            l_dis = fu.arc_identity_loss(embs, labels, (clf_r, clf_d))
            total = fu.fusion_total_loss(l_cic, l_cfe, l_dis, config.lambda_dis)
            total.backward()
            optimizer.step()

            n = len(batch)
            seen += n
            sums["l_cic"] += float(l_cic.detach()) * n
            sums["l_cfe"] += float(l_cfe.detach()) * n
            sums["l_dis"] += float(l_dis.detach()) * n
            sums["total"] += float(total.detach()) * n

        val_acc = _heldout_rank1(dataset, streams, heads, val_ids)
        history.append(EpochRecord(
            epoch=epoch,
            l_dis=sums["l_dis"] / seen,
            l_cic=sums["l_cic"] / seen, l_cfe=sums["l_cfe"] / seen,
            total=sums["total"] / seen,
            val_metric=val_acc, lr=lr_now))
        lr_now = scheduler.step(val_acc)
        for group in optimizer.param_groups:
            group["lr"] = lr_now

    return streams, heads, (clf_r, clf_d), history
