"""Transcript-driven editing of audio-synced latent video, desk scale.

The package trains and runs a small rectified-flow denoiser over a
procedural talking-head world: word-level transcript diffs become latent
timeline edits, windowed audio features drive lip regions through masked
cross-attention, and long timelines are denoised block-by-block with
position shifting and gated reuse of cached block outputs.
"""

__version__ = "0.1.0"
