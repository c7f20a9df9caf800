"""Two-stage RGB-D face recognition pipeline.

Stage 1 trains a facial depth generator from RGB with pixel, multi-level
feature, and identity supervision under dynamic loss weighting.  Stage 2
trains a two-stream fusion network that splits each modality into shared
and specific embeddings under cross-modal consistency/exclusion losses.
Recognition is scored as rank-1 identification over a gallery/probe
protocol with cosine matching.
"""

__version__ = "0.1.0"
