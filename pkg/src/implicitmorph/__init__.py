"""Sparse-view surface reconstruction with deformable neural signed
distance fields: geometry and rendering networks, differentiable sphere
tracing, latent morphable-model fitting, and the evaluation protocol,
all on a from-scratch numpy autodiff tape.
"""

__version__ = "0.1.0"
