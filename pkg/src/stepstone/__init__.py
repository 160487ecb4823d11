"""Text-to-3D generation on a synthetic primitive-shape world.

Pipeline: dataset -> joint embedder -> single-view reconstruction ->
stage-1 image-to-shape alignment -> per-text stage-2 alignment (optionally
diversified by a diffusion prior) -> SDS refinement / text-guided
stylization -> evaluation.
"""

__version__ = "0.1.0"
