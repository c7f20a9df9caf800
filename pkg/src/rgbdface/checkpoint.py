"""Versioned binary checkpoints with deterministic bytes.

Layout: magic line, an 8-byte little-endian header length, a UTF-8 JSON
header (sorted keys) naming the schema version, checkpoint kind, profile,
identity count, free-form extras, and the ordered tensor directory, then
the raw little-endian tensor blobs concatenated in directory order.  Equal
parameters always serialize to identical bytes, so checkpoint checksums
are a valid reproducibility probe.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"RGBDFACE-CKPT\n"
SCHEMA_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, profile_name: str, identity_count: int,
                    modules: dict[str, nn.Module], extra: dict | None = None) -> Path:
    """Serialize named modules' parameters under a versioned header."""
    path = Path(path)
    directory = []
    blobs = []
    for mod_name in sorted(modules):
        state = modules[mod_name].state_dict()
        for param_name in sorted(state):
            tensor = state[param_name].detach().cpu().contiguous()
            arr = tensor.numpy()
            if arr.dtype.name not in _DTYPES:
                raise CheckpointError(f"unsupported tensor dtype {arr.dtype} "
                                      f"for {mod_name}.{param_name}")
            directory.append({
                "name": f"{mod_name}.{param_name}",
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
            })
            blobs.append(arr.astype(arr.dtype, order="C").tobytes())

    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "profile": profile_name,
        "identity_count": identity_count,
        "extra": extra or {},
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    return path


class Checkpoint:
    def __init__(self, kind: str, profile_name: str, identity_count: int,
                 extra: dict, tensors: dict[str, np.ndarray]):
        self.kind = kind
        self.profile_name = profile_name
        self.identity_count = identity_count
        self.extra = extra
        self.tensors = tensors

    def load_into(self, modules: dict[str, nn.Module]) -> None:
        """Restore parameters into matching modules (strict name match)."""
        grouped: dict[str, dict[str, torch.Tensor]] = {name: {} for name in modules}
        for full_name, arr in self.tensors.items():
            mod_name, _, param_name = full_name.partition(".")
            if mod_name not in grouped:
                raise CheckpointError(f"checkpoint tensor {full_name} has no "
                                      f"matching module (have {sorted(modules)})")
            grouped[mod_name][param_name] = torch.from_numpy(arr.copy())
        for mod_name, module in modules.items():
            module.load_state_dict(grouped[mod_name], strict=True)


def load_checkpoint(path, expect_kind: str | None = None,
                    expect_profile: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("schema_version") != SCHEMA_VERSION:
            raise CheckpointError(f"unsupported checkpoint schema version "
                                  f"{header.get('schema_version')}")
        tensors = {}
        for entry in header["tensors"]:
            dtype = _DTYPES[entry["dtype"]]
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            data = fh.read(count * np.dtype(dtype).itemsize)
            tensors[entry["name"]] = np.frombuffer(data, dtype=dtype).reshape(entry["shape"])

    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(f"expected a {expect_kind!r} checkpoint, "
                              f"got {header['kind']!r}")
    if expect_profile is not None and header["profile"] != expect_profile:
        raise CheckpointError(f"checkpoint profile {header['profile']!r} does not "
                              f"match requested profile {expect_profile!r}")
    return Checkpoint(
        kind=header["kind"],
        profile_name=header["profile"],
        identity_count=header["identity_count"],
        extra=header["extra"],
        tensors=tensors,
    )


def save_depthgen_checkpoint(path, generator, backbone, profile_name: str,
                             identity_count: int) -> Path:
    return save_checkpoint(path, "depthgen", profile_name, identity_count,
                           {"generator": generator, "backbone": backbone})


def load_depthgen_checkpoint(path, expect_profile: str | None = None):
    """Rebuild the stage-1 generator/backbone pair from a checkpoint."""
    from .depthgen import DepthGenerator, IdentityBackbone
    from .profiles import get_profile

    ckpt = load_checkpoint(path, expect_kind="depthgen", expect_profile=expect_profile)
    profile = get_profile(ckpt.profile_name)
    generator = DepthGenerator(base=profile.gen_base)
    backbone = IdentityBackbone(profile, ckpt.identity_count)
    ckpt.load_into({"generator": generator, "backbone": backbone})
    return generator, backbone, profile, ckpt.identity_count


def save_fusion_checkpoint(path, streams, heads, classifiers, profile_name: str,
                           identity_count: int, arc_scale: float,
                           arc_margin: float, lambda_dis: float) -> Path:
    clf_r, clf_d = classifiers
    extra = {"arc_scale": arc_scale, "arc_margin": arc_margin,
             "lambda_dis": lambda_dis, "flat_dim": heads.flat_dim,
             "embed_dim": heads.embed_dim}
    return save_checkpoint(path, "fusion", profile_name, identity_count,
                           {"streams": streams, "heads": heads,
                            "classifier_rgb": clf_r, "classifier_depth": clf_d},
                           extra=extra)


def load_fusion_checkpoint(path, expect_profile: str | None = None):
    """Rebuild the stage-2 two-stream network, heads, and classifiers."""
    from .fusion import ArcMarginClassifier, SeparationHeads, TwoStreamExtractor
    from .profiles import get_profile

    ckpt = load_checkpoint(path, expect_kind="fusion", expect_profile=expect_profile)
    profile = get_profile(ckpt.profile_name)
    extra = ckpt.extra
    if extra.get("flat_dim") != profile.flat_dim:
        raise CheckpointError(f"checkpoint head input dim {extra.get('flat_dim')} does "
                              f"not match profile {profile.name!r} ({profile.flat_dim})")
    streams = TwoStreamExtractor(profile)
    heads = SeparationHeads(extra["flat_dim"], extra["embed_dim"])
    clf_r = ArcMarginClassifier(ckpt.identity_count, 2 * extra["embed_dim"],
                                scale=extra["arc_scale"], margin=extra["arc_margin"])
    clf_d = ArcMarginClassifier(ckpt.identity_count, 2 * extra["embed_dim"],
                                scale=extra["arc_scale"], margin=extra["arc_margin"])
    ckpt.load_into({"streams": streams, "heads": heads,
                    "classifier_rgb": clf_r, "classifier_depth": clf_d})
    return streams, heads, (clf_r, clf_d), profile, ckpt
