"""Incremental class-agnostic 3D instance mapping with open-vocabulary semantics.

The engine fuses posed RGB-D frames into a sparse TSDF grid whose voxels carry
instance labels, associates per-frame segments to global instances by spatial
voting, and attaches a vision-language embedding to each instance from a small
set of automatically selected views. Text queries are answered by cosine
similarity against the per-instance embeddings.
"""

__version__ = "0.1.0"
