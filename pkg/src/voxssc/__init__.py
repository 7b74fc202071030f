"""Semantic scene completion from a single RGB-D view.

Voxel encodings (fTSDF + RGB surface volume), 3D convolutional networks
with early/mid-level colour-depth fusion, four training strategies and
IoU evaluation, all runnable end-to-end on synthetic desk-scale scenes.
"""

__version__ = "0.1.0"
