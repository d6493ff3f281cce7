"""Synthetic star-shaped "blob" family used as training and test data.

Each instance is a radial surface r(u) = 1 + sum a_lm Y_lm(u) + bump(u)
over unit directions u, where the spherical-harmonic coefficients encode
identity and a single localized Gaussian bump encodes expression. The
implicit function G(x) = |x| - r(x/|x|) has an analytic gradient, exact
on-surface samples, and a cheap nearest-surface-distance oracle, which is
everything the training losses and the evaluation protocol need from
ground truth.

The oracle renderer marches G densely along camera rays (no sphere
tracing, no gradients) and shades hits with a fixed directional light
over a striped procedural albedo. It defines the reference images,
masks and exclusion masks that supervise the rendering losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from . import camera as cam_mod
from .camera import CameraPose
from .tracer import WORLD_HALF_SIDE

# real spherical harmonics l = 1..3 as (coefficient, polynomial) pairs;
# gradients are the ambient polynomial gradients, projected later
_C1 = 0.4886025119029199   # sqrt(3 / 4pi)
_C22 = 1.0925484305920792  # sqrt(15 / 4pi)
_C20 = 0.31539156525252005
_C21 = _C22
_C2P = 0.5462742152960396
_C33 = 0.5900435899266435
_C32 = 2.890611442640554
_C31 = 0.4570457994644658
_C30 = 0.3731763325901154
_C3P2 = 1.445305721320277

SH_COUNT = 15  # l=1 (3) + l=2 (5) + l=3 (7)


def sh_basis(u: np.ndarray) -> np.ndarray:
    """Y_lm(u) for l = 1..3, shape (N, 15); u must be unit directions."""
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    return np.stack([
        _C1 * y, _C1 * z, _C1 * x,
        _C22 * x * y, _C22 * y * z, _C20 * (3 * z * z - 1.0),
        _C21 * x * z, _C2P * (x * x - y * y),
        _C33 * y * (3 * x * x - y * y), _C32 * x * y * z,
        _C31 * y * (5 * z * z - 1.0), _C30 * z * (5 * z * z - 3.0),
        _C31 * x * (5 * z * z - 1.0), _C3P2 * z * (x * x - y * y),
        _C33 * x * (x * x - 3 * y * y),
    ], axis=1)


def sh_basis_grad(u: np.ndarray) -> np.ndarray:
    """Ambient polynomial gradients of sh_basis, shape (N, 15, 3)."""
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    g = np.stack([
        np.stack([zero, _C1 * one, zero], 1),
        np.stack([zero, zero, _C1 * one], 1),
        np.stack([_C1 * one, zero, zero], 1),
        _C22 * np.stack([y, x, zero], 1),
        _C22 * np.stack([zero, z, y], 1),
        _C20 * np.stack([zero, zero, 6 * z], 1),
        _C21 * np.stack([z, zero, x], 1),
        _C2P * np.stack([2 * x, -2 * y, zero], 1),
        _C33 * np.stack([6 * x * y, 3 * x * x - 3 * y * y, zero], 1),
        _C32 * np.stack([y * z, x * z, x * y], 1),
        _C31 * np.stack([zero, 5 * z * z - 1.0, 10 * y * z], 1),
        _C30 * np.stack([zero, zero, 15 * z * z - 3.0], 1),
        _C31 * np.stack([5 * z * z - 1.0, zero, 10 * x * z], 1),
        _C3P2 * np.stack([2 * x * z, -2 * y * z, x * x - y * y], 1),
        _C33 * np.stack([3 * x * x - 3 * y * y, -6 * x * y, zero], 1),
    ], axis=1)
    return g


@dataclass
class AlbedoSpec:
    base: tuple            # RGB in (0, 1]
    stripe_dir: tuple      # unit 3-vector
    stripe_freq: float
    stripe_phase: float

    def colors(self, x: np.ndarray) -> np.ndarray:
        s = x @ np.asarray(self.stripe_dir)
        wave = 0.75 + 0.25 * np.sin(self.stripe_freq * np.pi * s
                                    + self.stripe_phase)
        return np.clip(np.asarray(self.base)[None, :] * wave[:, None], 0.0, 1.0)


@dataclass
class InstanceSpec:
    identity_seed: int
    expr_id: int
    sh_coeffs: np.ndarray                  # (15,)
    expr_bump: tuple                       # (direction(3), amplitude, width)
    albedo: AlbedoSpec

    def to_dict(self) -> dict:
        d, a, w = self.expr_bump
        return {
            "identity_seed": self.identity_seed, "expr_id": self.expr_id,
            "sh_coeffs": np.asarray(self.sh_coeffs).tolist(),
            "expr_bump": {"dir": np.asarray(d).tolist(), "amplitude": a, "width": w},
            "albedo": {"base": list(self.albedo.base),
                       "stripe_dir": list(self.albedo.stripe_dir),
                       "stripe_freq": self.albedo.stripe_freq,
                       "stripe_phase": self.albedo.stripe_phase},
        }

    @staticmethod
    def from_dict(d: dict) -> "InstanceSpec":
        b = d["expr_bump"]
        a = d["albedo"]
        return InstanceSpec(
            d["identity_seed"], d["expr_id"], np.asarray(d["sh_coeffs"]),
            (np.asarray(b["dir"]), b["amplitude"], b["width"]),
            AlbedoSpec(tuple(a["base"]), tuple(a["stripe_dir"]),
                       a["stripe_freq"], a["stripe_phase"]))


_FIB_DIRS: np.ndarray | None = None


def _dense_directions(n: int = 4096) -> np.ndarray:
    """Deterministic quasi-uniform unit directions (Fibonacci sphere)."""
    global _FIB_DIRS
    if _FIB_DIRS is None or len(_FIB_DIRS) != n:
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = np.pi * (1 + 5 ** 0.5) * i
        _FIB_DIRS = np.stack([np.sin(phi) * np.cos(theta),
                              np.sin(phi) * np.sin(theta),
                              np.cos(phi)], axis=1)
    return _FIB_DIRS


def make_instance(identity_seed: int, expr_id: int,
                  sh_sigma=(0.10, 0.07, 0.05),
                  bump_amp_range=(0.12, 0.22),
                  bump_width_range=(0.28, 0.45),
                  max_tries: int = 100) -> InstanceSpec:
    """Deterministic instance from (identity_seed, expr_id).

    Identity owns the harmonic coefficients and the albedo; the
    expression bump depends on expr_id only, so two expressions of one
    identity differ in nothing else. Coefficient draws are rejected until
    the radial function stays within [0.5, 1.5].
    """
    rng_e = np.random.default_rng([expr_id, 0xE5])
    if expr_id == 0:
        bump = (np.array([0.0, 0.0, 1.0]), 0.0, 0.3)
    else:
        yaw = rng_e.uniform(-0.9, 0.9)
        pitch = rng_e.uniform(-0.6, 0.6)
        d = np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch),
                      np.cos(yaw) * np.cos(pitch)])
        amp = rng_e.uniform(*bump_amp_range) * rng_e.choice([-1.0, 1.0])
        width = rng_e.uniform(*bump_width_range)
        bump = (d, float(amp), float(width))
    rng_i = np.random.default_rng([identity_seed, 0x1D])
    sig = np.repeat(np.asarray(sh_sigma), [3, 5, 7])
    dirs = _dense_directions()
    basis = sh_basis(dirs)
    bump_vals = _bump_values(dirs, bump)
    for _ in range(max_tries):
        coeffs = rng_i.normal(0.0, 1.0, size=SH_COUNT) * sig
        r = 1.0 + basis @ coeffs + bump_vals
        if r.min() >= 0.5 and r.max() <= 1.5:
            break
    else:
        raise RuntimeError(
            f"no radial function within [0.5, 1.5] after {max_tries} draws "
            f"(identity_seed={identity_seed}, expr_id={expr_id})")
    rng_a = np.random.default_rng([identity_seed, 0xA1])
    base = tuple(rng_a.uniform(0.35, 0.95, size=3))
    sd = rng_a.normal(size=3)
    sd /= np.linalg.norm(sd)
    albedo = AlbedoSpec(base=base, stripe_dir=tuple(sd),
                        stripe_freq=float(rng_a.uniform(2.0, 5.0)),
                        stripe_phase=float(rng_a.uniform(0.0, 2 * np.pi)))
    return InstanceSpec(identity_seed, expr_id, coeffs, bump, albedo)


def _bump_values(u: np.ndarray, bump) -> np.ndarray:
    d, amp, width = bump
    if amp == 0.0:
        return np.zeros(len(u))
    return amp * np.exp(-(1.0 - u @ np.asarray(d)) / (width * width))


def _bump_grad(u: np.ndarray, bump) -> np.ndarray:
    d, amp, width = bump
    if amp == 0.0:
        return np.zeros_like(u)
    vals = amp * np.exp(-(1.0 - u @ np.asarray(d)) / (width * width))
    return vals[:, None] * np.asarray(d)[None, :] / (width * width)


def radial(spec: InstanceSpec, u: np.ndarray) -> np.ndarray:
    return 1.0 + sh_basis(u) @ spec.sh_coeffs + _bump_values(u, spec.expr_bump)


def _radial_grad_ambient(spec: InstanceSpec, u: np.ndarray) -> np.ndarray:
    g = np.einsum("l,nlk->nk", spec.sh_coeffs, sh_basis_grad(u))
    return g + _bump_grad(u, spec.expr_bump)


def implicit_value(spec: InstanceSpec, x: np.ndarray,
                   with_gradient: bool = True):
    """G(x) = |x| - r(x / |x|), negative inside; analytic gradient.

    Not a true distance field, but its zero set is exactly the surface
    and the gradient is exact, which is all the supervision requires.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    nrm = np.linalg.norm(x, axis=1)
    if np.any(nrm < 1e-12):
        raise ValueError("implicit_value undefined at the origin")
    u = x / nrm[:, None]
    g = nrm - radial(spec, u)
    if not with_gradient:
        return g
    ga = _radial_grad_ambient(spec, u)
    tangential = ga - (np.einsum("ij,ij->i", ga, u))[:, None] * u
    grad = u - tangential / nrm[:, None]
    return g, grad


@dataclass
class SurfaceSamples:
    points: np.ndarray     # (N, 3)
    normals: np.ndarray    # (N, 3) unit
    identity_seed: int
    expr_id: int

    def __len__(self):
        return len(self.points)


def sample_surface(spec: InstanceSpec, n: int, seed: int) -> SurfaceSamples:
    """n on-surface points with exact unit normals, uniform in direction."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    rng = np.random.default_rng([seed, spec.identity_seed, spec.expr_id, 0x5A])
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    pts = radial(spec, u)[:, None] * u
    _, grad = implicit_value(spec, pts)
    normals = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    return SurfaceSamples(points=pts, normals=normals,
                          identity_seed=spec.identity_seed, expr_id=spec.expr_id)


class InstanceField:
    """Tracer-compatible adapter over the analytic implicit (oracle side)."""

    def __init__(self, spec: InstanceSpec):
        self.spec = spec

    def values(self, x: np.ndarray) -> np.ndarray:
        return implicit_value(self.spec, x, with_gradient=False)

    def gradients(self, x: np.ndarray):
        return implicit_value(self.spec, x)

    def values_on_tape(self, x, tape):
        raise NotImplementedError("the analytic oracle is never differentiated")


# -- distance oracle -----------------------------------------------------

_DIST_CACHE: dict[tuple, cKDTree] = {}
DIST_ORACLE_SAMPLES = 120_000


def _distance_tree(spec: InstanceSpec) -> cKDTree:
    key = (spec.identity_seed, spec.expr_id)
    tree = _DIST_CACHE.get(key)
    if tree is None:
        samples = sample_surface(spec, DIST_ORACLE_SAMPLES, seed=0xD157)
        tree = cKDTree(samples.points)
        _DIST_CACHE[key] = tree
    return tree


def nearest_surface_distance(spec: InstanceSpec, x: np.ndarray) -> np.ndarray:
    """Distance to a dense cached surface sampling (upper bound within
    one sample spacing of the true distance)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d, _ = _distance_tree(spec).query(x)
    return d


# -- oracle renderer -----------------------------------------------------

LIGHT_DIR = np.array([0.35, 0.45, 0.82])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.2


def shade(spec: InstanceSpec, pts: np.ndarray, normals: np.ndarray) -> np.ndarray:
    lam = np.maximum(normals @ LIGHT_DIR, 0.0)
    return np.clip(spec.albedo.colors(pts) * (AMBIENT + (1 - AMBIENT) * lam[:, None]),
                   0.0, 1.0)


@dataclass
class TrainView:
    rgb: np.ndarray        # (H, W, 3) in [0, 1]
    mask: np.ndarray       # (H, W) bool
    exclusion: np.ndarray  # (H, W) bool, subset of mask
    camera: CameraPose
    identity_seed: int
    expr_id: int
    depth: np.ndarray | None = None   # (H, W) ray parameter, inf on miss


def render_reference(spec: InstanceSpec, camera: CameraPose,
                     resolution: int | None = None,
                     step_frac: float = 1e-3, bisect_steps: int = 30) -> TrainView:
    """Dense ray march + bisection against the analytic implicit.

    Marching step is `step_frac` of the world-box diagonal. Misses get
    mask 0 and black rgb; the exclusion mask marks pixels whose hit
    direction falls inside twice the expression bump's angular width.
    """
    if resolution is not None and (camera.width != resolution or
                                   camera.height != resolution):
        raise ValueError("camera size disagrees with requested resolution")
    w, h = camera.width, camera.height
    origins, dirs = cam_mod.pixel_rays(camera, cam_mod.pixel_grid(w, h))
    half = WORLD_HALF_SIDE
    diag = 2 * half * np.sqrt(3.0)
    step = step_frac * diag
    from .tracer import clip_to_box
    bundle = clip_to_box(origins, dirs, half)
    # the implicit is positive outside radius 1.5; restrict the march to
    # the bounding-sphere chord (pure speedup, same crossings)
    r_bound = 1.55
    b = np.einsum("ij,ij->i", bundle.origins, bundle.dirs)
    c = np.einsum("ij,ij->i", bundle.origins, bundle.origins) - r_bound ** 2
    disc = b * b - c
    sph = disc > 0
    root = np.sqrt(np.maximum(disc, 0.0))
    bundle.t_near = np.where(sph, np.maximum(bundle.t_near, -b - root),
                             bundle.t_far)
    bundle.t_far = np.where(sph, np.minimum(bundle.t_far, -b + root),
                            bundle.t_far)
    n = len(bundle)
    t_lo = np.full(n, np.nan)
    t_hi = np.full(n, np.nan)
    alive = bundle.valid.copy()
    t = bundle.t_near.copy()
    prev_g = np.full(n, np.inf)
    # find the first sign change along each ray
    while alive.any():
        idx = np.flatnonzero(alive)
        g = implicit_value(spec, bundle.origins[idx] + t[idx, None] * bundle.dirs[idx],
                           with_gradient=False)
        crossed = (prev_g[idx] > 0) & (g <= 0)
        t_lo[idx[crossed]] = t[idx[crossed]] - step
        t_hi[idx[crossed]] = t[idx[crossed]]
        alive[idx[crossed]] = False
        prev_g[idx] = g
        t[idx] += step
        done = t[idx] > bundle.t_far[idx]
        alive[idx[done]] = False
    hit = ~np.isnan(t_lo)
    pts = np.zeros((n, 3))
    depth = np.full(n, np.inf)
    if hit.any():
        ii = np.flatnonzero(hit)
        lo, hi = t_lo[ii], t_hi[ii]
        for _ in range(bisect_steps):
            mid = 0.5 * (lo + hi)
            g = implicit_value(spec, bundle.origins[ii] + mid[:, None] * bundle.dirs[ii],
                               with_gradient=False)
            pos = g > 0
            lo = np.where(pos, mid, lo)
            hi = np.where(pos, hi, mid)
        tm = 0.5 * (lo + hi)
        depth[ii] = tm
        pts[ii] = bundle.origins[ii] + tm[:, None] * bundle.dirs[ii]
    rgb = np.zeros((n, 3))
    excl = np.zeros(n, dtype=bool)
    if hit.any():
        ii = np.flatnonzero(hit)
        _, grad = implicit_value(spec, pts[ii])
        normals = grad / np.linalg.norm(grad, axis=1, keepdims=True)
        rgb[ii] = shade(spec, pts[ii], normals)
        d, amp, width = spec.expr_bump
        if amp != 0.0:
            u = pts[ii] / np.linalg.norm(pts[ii], axis=1, keepdims=True)
            ang = np.arccos(np.clip(u @ np.asarray(d), -1.0, 1.0))
            excl[ii] = ang < 2.0 * width
    return TrainView(rgb=rgb.reshape(h, w, 3), mask=hit.reshape(h, w),
                     exclusion=excl.reshape(h, w), camera=camera,
                     identity_seed=spec.identity_seed, expr_id=spec.expr_id,
                     depth=depth.reshape(h, w))


def landmark_directions(count: int = 8) -> np.ndarray:
    """Fixed fiducial directions on the front hemisphere, spread wide for
    well-conditioned pose recovery."""
    yaws = np.array([-0.9, -0.45, 0.0, 0.45, 0.9, -0.6, 0.0, 0.6])[:count]
    pitches = np.array([0.0, 0.4, 0.55, 0.4, 0.0, -0.45, -0.6, -0.45])[:count]
    return np.stack([np.sin(yaws) * np.cos(pitches), np.sin(pitches),
                     np.cos(yaws) * np.cos(pitches)], axis=1)


def surface_landmarks(spec: InstanceSpec, count: int = 8) -> np.ndarray:
    """3D landmark points = radial surface points along the fiducials."""
    dirs = landmark_directions(count)
    return radial(spec, dirs)[:, None] * dirs


# -- dataset generation and directory layout ------------------------------

@dataclass
class Dataset:
    instances: list                      # InstanceSpec, ordered
    samples: dict                        # (identity_seed, expr_id) -> SurfaceSamples
    views: dict                          # (identity_seed, expr_id) -> [TrainView]

    def keys(self):
        return [(s.identity_seed, s.expr_id) for s in self.instances]


def view_cameras(n_views: int, seed: int, width: int, height: int,
                 distance: float = 3.2, fov_deg: float = 40.0) -> list[CameraPose]:
    """Cameras on a partial sphere looking at the origin: yaw within
    +-60 deg, pitch within +-20 deg."""
    rng = np.random.default_rng([seed, 0xCA])
    cams = []
    for _ in range(n_views):
        yaw = rng.uniform(-np.pi / 3, np.pi / 3)
        pitch = rng.uniform(-np.pi / 9, np.pi / 9)
        eye = distance * np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch),
                                   np.cos(yaw) * np.cos(pitch)])
        cams.append(cam_mod.lookat(eye, (0, 0, 0), fov_deg, width, height))
    return cams


def generate_dataset(n_identities: int = 12, n_expressions: int = 4,
                     n_surface: int = 20_000, n_views: int = 8,
                     resolution: int = 64, seed: int = 1) -> Dataset:
    instances, samples, views = [], {}, {}
    for i in range(n_identities):
        for e in range(n_expressions):
            spec = make_instance(identity_seed=seed * 1000 + i, expr_id=e)
            key = (spec.identity_seed, spec.expr_id)
            instances.append(spec)
            samples[key] = sample_surface(spec, n_surface, seed=seed)
            cams = view_cameras(n_views, seed=seed * 100 + i * 10 + e,
                                width=resolution, height=resolution)
            views[key] = [render_reference(spec, c) for c in cams]
    return Dataset(instances=instances, samples=samples, views=views)


def _save_png(path, arr01: np.ndarray) -> None:
    img = np.clip(np.asarray(arr01) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def _load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_dataset(ds: Dataset, root) -> None:
    """Directory layout: instances.json, samples/<id>_<expr>.bin
    (x,y,z,nx,ny,nz float64 records), views/<id>_<expr>_<k>.png with
    _mask.png, _excl.png and _cam.json companions."""
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    (root / "views").mkdir(parents=True, exist_ok=True)
    with open(root / "instances.json", "w") as f:
        json.dump([s.to_dict() for s in ds.instances], f, indent=1)
    for (i, e), s in ds.samples.items():
        rec = np.concatenate([s.points, s.normals], axis=1).astype("<f8")
        rec.tofile(root / "samples" / f"{i}_{e}.bin")
    for (i, e), vlist in ds.views.items():
        for k, v in enumerate(vlist):
            stem = root / "views" / f"{i}_{e}_{k}"
            _save_png(f"{stem}.png", v.rgb)
            _save_png(f"{stem}_mask.png", v.mask.astype(np.float64))
            _save_png(f"{stem}_excl.png", v.exclusion.astype(np.float64))
            v.camera.save(f"{stem}_cam.json")


def load_dataset(root) -> Dataset:
    root = Path(root)
    with open(root / "instances.json") as f:
        instances = [InstanceSpec.from_dict(d) for d in json.load(f)]
    samples, views = {}, {}
    for spec in instances:
        i, e = spec.identity_seed, spec.expr_id
        rec = np.fromfile(root / "samples" / f"{i}_{e}.bin",
                          dtype="<f8").reshape(-1, 6)
        samples[(i, e)] = SurfaceSamples(points=rec[:, :3].copy(),
                                         normals=rec[:, 3:].copy(),
                                         identity_seed=i, expr_id=e)
        vlist = []
        k = 0
        while (root / "views" / f"{i}_{e}_{k}.png").exists():
            stem = root / "views" / f"{i}_{e}_{k}"
            vlist.append(TrainView(
                rgb=_load_png(f"{stem}.png"),
                mask=_load_png(f"{stem}_mask.png") > 0.5,
                exclusion=_load_png(f"{stem}_excl.png") > 0.5,
                camera=CameraPose.load(f"{stem}_cam.json"),
                identity_seed=i, expr_id=e))
            k += 1
        views[(i, e)] = vlist
    return Dataset(instances=instances, samples=samples, views=views)
