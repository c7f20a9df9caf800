"""Manifest-driven on-disk dataset format.

Layout: a UTF-8 manifest with header ``rgb,depth,identity,subset,session``
and comma-separated rows of relative image paths, an integer identity, a
subset tag in {NU,FE,OC,PS,TM}, and a session in {S1,S2}.  RGB images are
8-bit 3-channel PNGs; depth maps are 8-bit or 16-bit single-channel PNGs,
both scaled to [0, 1] on load.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

from .types import Dataset, RgbdSample, Session, Subset

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = "rgb,depth,identity,subset,session"


class ManifestError(ValueError):
    """Raised when a manifest or one of its referenced images is invalid."""


def save_dataset(dataset: Dataset, out_dir, depth_bits: int = 8) -> Path:
    """Write a dataset tree (manifest + PNG pairs); returns the manifest path.

    Output bytes depend only on the dataset contents, so re-writing the same
    dataset yields an identical tree.
    """
    if depth_bits not in (8, 16):
        raise ManifestError(f"depth_bits must be 8 or 16, got {depth_bits}")
    out_dir = Path(out_dir)
    (out_dir / "rgb").mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)

    depth_max = (1 << depth_bits) - 1
    lines = [MANIFEST_HEADER]
    for i, sample in enumerate(dataset):
        rgb_rel, depth_rel = f"rgb/{i:05d}.png", f"depth/{i:05d}.png"
        rgb8 = np.round(sample.rgb * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb8).save(out_dir / rgb_rel)
        dq = np.round(sample.depth[0] * depth_max)
        # dtype picks the PNG bit depth: uint8 -> L, uint16 -> I;16
        dtype = np.uint8 if depth_bits == 8 else np.uint16
        Image.fromarray(dq.astype(dtype)).save(out_dir / depth_rel)
        lines.append(f"{rgb_rel},{depth_rel},{sample.identity},"
                     f"{sample.subset.value},{sample.session.value}")

    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return manifest


def _load_rgb(path: Path, row: int) -> np.ndarray:
    if not path.exists():
        raise ManifestError(f"row {row}: rgb file not found: {path}")
    img = Image.open(path)
    if img.mode != "RGB":
        raise ManifestError(f"row {row}: rgb image must be 8-bit 3-channel, "
                            f"got mode {img.mode}: {path}")
    arr = np.asarray(img, dtype=np.uint8)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def _load_depth(path: Path, row: int) -> np.ndarray:
    if not path.exists():
        raise ManifestError(f"row {row}: depth file not found: {path}")
    img = Image.open(path)
    if img.mode == "L":
        arr = np.asarray(img).astype(np.float32) / 255.0
    elif img.mode in ("I", "I;16"):
        arr = np.asarray(img).astype(np.float32) / 65535.0
    else:
        raise ManifestError(f"row {row}: depth image must be 8- or 16-bit "
                            f"single-channel, got mode {img.mode}: {path}")
    return arr[None, :, :]


def load_dataset(manifest_path) -> Dataset:
    """Load a dataset in manifest order, scaling pixels to [0, 1]."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")

    raw = manifest_path.read_bytes()
    text = raw.decode("utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"manifest header must be '{MANIFEST_HEADER}', "
                            f"got {lines[0].strip()!r}" if lines else "manifest is empty")
    root = manifest_path.parent

    samples = []
    for row, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ManifestError(f"row {row}: expected 5 comma-separated fields, "
                                f"got {len(parts)}: {line!r}")
        rgb_rel, depth_rel, ident_s, subset_s, session_s = (p.strip() for p in parts)
        try:
            identity = int(ident_s)
        except ValueError:
            raise ManifestError(f"row {row}: identity must be an integer, got {ident_s!r}")
        if identity < 0:
            raise ManifestError(f"row {row}: identity must be >= 0, got {identity}")
        try:
            subset = Subset(subset_s)
        except ValueError:
            raise ManifestError(f"row {row}: unknown subset tag {subset_s!r} "
                                f"(expected one of {[s.value for s in Subset]})")
        try:
            session = Session(session_s)
        except ValueError:
            raise ManifestError(f"row {row}: unknown session {session_s!r} "
                                f"(expected S1 or S2)")

        rgb = _load_rgb(root / rgb_rel, row)
        depth = _load_depth(root / depth_rel, row)
        if rgb.shape[1:] != depth.shape[1:]:
            raise ManifestError(f"row {row}: rgb dims {rgb.shape[1:]} do not match "
                                f"depth dims {depth.shape[1:]}")
        try:
            samples.append(RgbdSample(rgb=rgb, depth=depth, identity=identity,
                                      subset=subset, session=session))
        except ValueError as exc:
            raise ManifestError(f"row {row}: {exc}")

    identity_count = max((s.identity for s in samples), default=-1) + 1
    return Dataset(
        samples=tuple(samples),
        identity_count=identity_count,
        manifest_digest=hashlib.sha256(raw).hexdigest(),
    )
