"""Scalar field adapters shared by the tracer, mesher and losses.

Every field exposes the same three methods:

    values(x)               batched numpy evaluation, (N, 3) -> (N,)
    gradients(x)            numpy values and spatial gradients
    values_on_tape(x, tape) recorded evaluation whose backward reaches
                            whatever parameters the field captured

so analytic shapes and neural geometry are interchangeable everywhere.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Dual, Tape, Var


class SphereField:
    """Exact signed distance of a sphere; handy as a reference SDF."""

    def __init__(self, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)

    def values(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(x - self.center, axis=-1) - self.radius

    def gradients(self, x: np.ndarray):
        d = x - self.center
        nrm = np.linalg.norm(d, axis=-1)
        return nrm - self.radius, d / nrm[:, None]

    def values_on_tape(self, x, tape: Tape):
        d = ad.sub(x, self.center)
        sq = ad.mul(d, d)
        s = ad.add(ad.add(sq[..., 0:1], sq[..., 1:2]), sq[..., 2:3])
        out = ad.sub(ad.sqrt(s), self.radius)
        return ad.reshape(out, (-1,)) if isinstance(out, Var) else out.reshape(-1)

    # geometry-loss interface: sphere has no deformation component
    def sdf_and_offset(self, x, tape=None):
        sq = ad.mul(ad.sub(x, self.center), ad.sub(x, self.center))
        s = ad.add(ad.add(sq[..., 0:1], sq[..., 1:2]), sq[..., 2:3])
        return ad.sub(ad.sqrt(s), self.radius), None


class NeuralField:
    """Geometry network bound to one latent code and a parameter view.

    `params` may mix plain arrays and tape Vars; values_on_tape then
    backpropagates into the Var entries (and into `z` if it is a Var).
    """

    def __init__(self, model: nets.Model, z, params: dict | None = None):
        self.model = model
        self.params = model.params if params is None else params
        self.z = z

    def _z_np(self):
        return self.z.value if isinstance(self.z, Var) else np.asarray(self.z)

    def values(self, x: np.ndarray) -> np.ndarray:
        detached = {k: (v.value if isinstance(v, Var) else v)
                    for k, v in self.params.items()}
        s = nets.geometry_forward(self.model, detached, x, self._z_np())[0]
        return np.asarray(s).reshape(-1)

    def gradients(self, x: np.ndarray):
        detached = {k: (v.value if isinstance(v, Var) else v)
                    for k, v in self.params.items()}

        def fld(p):
            return nets.geometry_forward(self.model, detached, p, self._z_np())[0]

        val, grad = ad.spatial_gradient(fld, np.asarray(x, dtype=np.float64))
        return np.asarray(val).reshape(-1), grad

    def values_on_tape(self, x, tape: Tape):
        s = nets.geometry_forward(self.model, self.params, x, self.z)[0]
        return ad.reshape(s, (np.asarray(s.value if isinstance(s, Var) else s).shape[0],))

    def sdf_and_offset(self, x, tape=None):
        s, _, dx = nets.geometry_forward(self.model, self.params, x, self.z)
        return s, dx
