"""Sphere tracing and its differentiable companions.

A "field" here is anything with three methods (duck-typed, see
:mod:`implicitmorph.fields` for concrete adapters):

    values(x)        -> (N,) numpy values at (N, 3) points
    gradients(x)     -> ((N,), (N, 3)) values and spatial gradients, numpy
    values_on_tape(x, tape) -> Var of shape (N,) recording the evaluation

The march itself is plain numpy and not differentiable; gradients are
recovered afterwards by the one-step Newton reparameterization of the hit
point, in which the converged ray parameter t0 enters as a constant and
all sensitivity comes through the field value and the ray itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var


class GrazingRayError(RuntimeError):
    """Directional derivative along the ray too small to reparameterize."""


# Shapes live inside this axis-aligned cube; rays are clipped to it
# (inflated a bit) because fields are only trained inside.
WORLD_HALF_SIDE = 1.6
TRACE_HALF_SIDE = WORLD_HALF_SIDE * 1.1


@dataclass
class RayBundle:
    """Batched rays with per-ray trace intervals (unit directions)."""

    origins: np.ndarray   # (N, 3)
    dirs: np.ndarray      # (N, 3)
    t_near: np.ndarray    # (N,)
    t_far: np.ndarray     # (N,)

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        self.dirs = np.atleast_2d(np.asarray(self.dirs, dtype=np.float64))
        self.t_near = np.atleast_1d(np.asarray(self.t_near, dtype=np.float64))
        self.t_far = np.atleast_1d(np.asarray(self.t_far, dtype=np.float64))
        nrm = np.linalg.norm(self.dirs, axis=-1)
        if np.any(np.abs(nrm - 1.0) > 1e-9):
            raise ValueError("ray directions must be unit vectors")

    def __len__(self):
        return len(self.origins)

    @property
    def valid(self) -> np.ndarray:
        return self.t_near < self.t_far

    def points(self, t: np.ndarray) -> np.ndarray:
        return self.origins + t[:, None] * self.dirs


def clip_to_box(origins, dirs, half_side: float) -> "RayBundle":
    """Restrict rays to the axis-aligned cube [-h, h]^3 (slab method).

    Rays missing the cube get t_near = t_far = 0, i.e. invalid.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    with np.errstate(divide="ignore"):
        inv = np.where(dirs != 0.0, 1.0 / dirs, np.inf)
    t1 = (-half_side - origins) * inv
    t2 = (half_side - origins) * inv
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # parallel-axis rays: inside the slab -> unbounded, outside -> empty
    par = dirs == 0.0
    inside = np.abs(origins) <= half_side
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=1), 0.0)
    t_far = hi.min(axis=1)
    bad = t_far <= t_near
    t_near = np.where(bad, 0.0, t_near)
    t_far = np.where(bad, 0.0, t_far)
    return RayBundle(origins, dirs, t_near, t_far)


@dataclass
class TraceResult:
    t: np.ndarray         # (N,) ray parameter (last position for misses)
    hit: np.ndarray       # (N,) bool, |field| < tol reached inside range
    steps: np.ndarray     # (N,) iterations spent
    value: np.ndarray     # (N,) field value at t

    def points(self, rays: RayBundle) -> np.ndarray:
        return rays.points(self.t)


def sphere_trace(field, rays: RayBundle, tol: float = 1e-6,
                 max_steps: int = 100, damping: float = 0.9) -> TraceResult:
    """March t <- t + damping * field(o + t v) from t_near.

    Converges when |field| < tol; a ray misses once t leaves [t_near,
    t_far] or the step budget runs out. The damping guards against
    oscillation on fields that are only approximately unit-Lipschitz.
    """
    n = len(rays)
    t = rays.t_near.copy()
    hit = np.zeros(n, dtype=bool)
    steps = np.zeros(n, dtype=np.int64)
    value = np.full(n, np.inf)
    active = rays.valid.copy()
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        f = field.values(rays.origins[idx] + t[idx, None] * rays.dirs[idx])
        value[idx] = f
        steps[idx] += 1
        conv = np.abs(f) < tol
        hit[idx[conv]] = True
        active[idx[conv]] = False
        move = idx[~conv]
        t[move] += damping * f[~conv]
        out = (t[move] > rays.t_far[move]) | (t[move] < rays.t_near[move] - 1e-12)
        active[move[out]] = False
    return TraceResult(t=t, hit=hit, steps=steps, value=value)


def differentiable_intersection(field, origins, dirs, t0: np.ndarray,
                                tape: Tape, dirs0: np.ndarray | None = None,
                                min_denom: float = 1e-6) -> Var:
    """Hit points as tape nodes: x = o + t0 v - v * f(o + t0 v) / (grad f . v0).

    t0 must come from a converged trace and enters as a constant, as does
    the denominator (evaluated at the current field/ray state); gradients
    flow through the recorded field value and, when `origins`/`dirs` are
    Vars, through the ray itself.
    """
    o_np = np.asarray(origins.value if isinstance(origins, Var) else origins)
    d_np = np.asarray(dirs.value if isinstance(dirs, Var) else dirs)
    t0 = np.asarray(t0, dtype=np.float64)
    if dirs0 is None:
        dirs0 = d_np
    x0 = o_np + t0[:, None] * d_np
    _, grads = field.gradients(x0)
    denom = np.einsum("ij,ij->i", grads, dirs0)
    small = np.abs(denom) <= min_denom
    if np.any(small):
        raise GrazingRayError(
            f"{int(small.sum())} rays have |grad f . v0| <= {min_denom}")
    xt = ad.add(origins, ad.mul(dirs, t0[:, None]))
    f = field.values_on_tape(xt, tape)
    fv = ad.reshape(f, (len(t0), 1)) if isinstance(f, Var) else np.reshape(f, (len(t0), 1))
    return ad.sub(xt, ad.mul(dirs, ad.div(fv, denom[:, None])))


@dataclass
class SoftMaskResult:
    prob: object          # Var (N,) when on tape, ndarray otherwise
    min_value: np.ndarray  # (N,) numpy minima over the sample set
    argmin_t: np.ndarray   # (N,)


def soft_mask(field, rays: RayBundle, alpha: float = 50.0,
              n_samples: int = 64, tape: Tape | None = None) -> SoftMaskResult:
    """sigmoid(-alpha * min_k field(o + t_k v)) over a fixed stratified
    sample set; differentiable through the argmin sample only.

    Rays with an empty trace interval contribute a constant probability
    of exactly 0 (nothing inside the box to hit).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    n = len(rays)
    valid = rays.valid
    min_value = np.full(n, np.inf)
    argmin_t = np.zeros(n)
    idx = np.flatnonzero(valid)
    if len(idx):
        frac = (np.arange(n_samples) + 0.5) / n_samples
        tk = rays.t_near[idx, None] + frac[None, :] * (
            rays.t_far[idx] - rays.t_near[idx])[:, None]
        pts = (rays.origins[idx, None, :] +
               tk[:, :, None] * rays.dirs[idx, None, :]).reshape(-1, 3)
        vals = field.values(pts).reshape(len(idx), n_samples)
        k = np.argmin(vals, axis=1)
        min_value[idx] = vals[np.arange(len(idx)), k]
        argmin_t[idx] = tk[np.arange(len(idx)), k]
    if tape is None:
        prob = np.zeros(n)
        if len(idx):
            prob[idx] = ad.sigmoid(-alpha * min_value[idx])
        return SoftMaskResult(prob=prob, min_value=min_value, argmin_t=argmin_t)
    if len(idx) < n:
        raise ValueError("tape-mode soft_mask expects only valid rays; "
                         "filter the bundle first")
    xstar = rays.points(argmin_t)
    f = field.values_on_tape(xstar, tape)
    prob = ad.sigmoid(ad.mul(f, -alpha))
    return SoftMaskResult(prob=prob, min_value=min_value, argmin_t=argmin_t)
