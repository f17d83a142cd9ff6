"""Numerical verification of first-order two-scale eigenvalue expansions
for periodic elliptic operators -div(A(x/eps) grad) on smooth convex domains.

Subpackages by role:

* ``coeff``    periodic coefficient families and assumption checks
* ``cell``     torus cell problems (correctors, homogenized tensor)
* ``oracle1d`` exact one-dimensional reference pipeline
* ``meshing``  disk/ellipse/interval meshes with quality bounds
* ``fem``      P1 assembly, source solves, two-scale interpolation
* ``spectral`` eigen clusters, projections, pairing, deflated solves
* ``layers``   boundary-layer solves and the small-eps limit estimate
* ``harness``  sweeps, rate fits, reports
* ``cli``      command-line entry points
"""

__version__ = "0.1.0"
