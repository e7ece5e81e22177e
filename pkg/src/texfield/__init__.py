"""Implicit-function completion of partial textured 3D scans.

Two networks share one architecture: a geometry model classifying points as
inside or outside and a texture model regressing surface colour.  Both
encode a voxel grid into multi-scale feature volumes, query them at
continuous points by trilinear interpolation and decode point-wise.
"""

__version__ = "0.1.0"
