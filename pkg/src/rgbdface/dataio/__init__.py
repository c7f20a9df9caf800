"""Sample model, synthetic corpus, manifest I/O, and evaluation protocol."""

from .manifest import MANIFEST_HEADER, MANIFEST_NAME, ManifestError, load_dataset, save_dataset
from .protocol import EvalProtocol, ProtocolError, build_protocol
from .synth import generate_synthetic_dataset
from .types import (
    Dataset,
    DataError,
    RgbdSample,
    Session,
    Subset,
    SUBSET_ORDER,
    VariationSpec,
    check_depth,
    check_rgb,
)

__all__ = [
    "Dataset",
    "DataError",
    "EvalProtocol",
    "MANIFEST_HEADER",
    "MANIFEST_NAME",
    "ManifestError",
    "ProtocolError",
    "RgbdSample",
    "Session",
    "Subset",
    "SUBSET_ORDER",
    "VariationSpec",
    "build_protocol",
    "check_depth",
    "check_rgb",
    "generate_synthetic_dataset",
    "load_dataset",
    "save_dataset",
]
