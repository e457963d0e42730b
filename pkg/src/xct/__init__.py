"""Desk-scale iterative parallel-beam CT reconstruction pipeline.

Sparse Siddon operators, Hilbert-ordered domain decomposition, fused
mixed-precision staged SpMM, hierarchical communication planning over a
simulated multi-GPU topology, and CGLS reconstruction with early stopping.
"""

from . import comm, dataio, engine, geometry, hilbert, matrixstore, pipeline, solver

__version__ = "0.1.0"

__all__ = [
    "comm",
    "dataio",
    "engine",
    "geometry",
    "hilbert",
    "matrixstore",
    "pipeline",
    "solver",
]
