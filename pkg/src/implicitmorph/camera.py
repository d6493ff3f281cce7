"""Pinhole camera model and pose estimation.

Conventions: world-to-camera extrinsics (rot, trans) with the camera
looking down +z; pixel (u, v) = (column, row) with the origin at the
top-left pixel center. Rotation increments are parameterized by the
unnormalized-quaternion chart (1, delta/2), which agrees with axis-angle
to first order but stays smooth at delta = 0, and the running rotation is
re-orthonormalized after every optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass
import json

import numpy as np

from . import autodiff as ad
from . import optim
from . import tracer
from .autodiff import Tape, Var


class NonpositiveDepthError(RuntimeError):
    pass


class PoseEstimationError(RuntimeError):
    pass


@dataclass
class CameraPose:
    k: np.ndarray       # 3x3 intrinsics, zero skew
    rot: np.ndarray     # 3x3 world-to-camera rotation
    trans: np.ndarray   # 3 translation
    width: int
    height: int

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64)
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)
        if self.k[0, 0] <= 0 or self.k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.rot @ self.rot.T, np.eye(3), atol=1e-9) or \
                np.linalg.det(self.rot) < 0:
            raise ValueError("rotation block must be orthonormal with det +1")

    @property
    def extrinsic34(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans[:, None]], axis=1)

    @property
    def center(self) -> np.ndarray:
        return -self.rot.T @ self.trans

    def to_dict(self) -> dict:
        return {"k": self.k.tolist(), "rot": self.rot.tolist(),
                "trans": self.trans.tolist(),
                "width": self.width, "height": self.height}

    @staticmethod
    def from_dict(d: dict) -> "CameraPose":
        return CameraPose(np.array(d["k"]), np.array(d["rot"]),
                          np.array(d["trans"]), d["width"], d["height"])

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @staticmethod
    def load(path) -> "CameraPose":
        with open(path) as f:
            return CameraPose.from_dict(json.load(f))


def lookat(eye, target, fov_deg: float, width: int, height: int,
           up=(0.0, 1.0, 0.0)) -> CameraPose:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    k = np.array([[f, 0.0, (width - 1) / 2.0],
                  [0.0, f, (height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    return CameraPose(k, rot, -rot @ eye, width, height)


def project(cam: CameraPose, x: np.ndarray) -> np.ndarray:
    """World points (N, 3) to pixels (N, 2); positive depth required."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xc = x @ cam.rot.T + cam.trans
    if np.any(xc[:, 2] <= 0):
        raise NonpositiveDepthError(
            f"{int((xc[:, 2] <= 0).sum())} points at or behind the camera")
    pix_h = xc @ cam.k.T
    return pix_h[:, :2] / pix_h[:, 2:3]


def project_ops(k, rot, trans, x):
    """Tape-generic projection: any of rot/trans/x may be Vars."""
    xc = ad.add(ad.matmul(x, ad.transpose(rot, (1, 0))), trans)
    zc = xc[..., 2:3]
    zv = np.asarray(zc.value if isinstance(zc, Var) else zc)
    if np.any(zv <= 0):
        raise NonpositiveDepthError("point at or behind the camera")
    pix_h = ad.matmul(xc, np.asarray(k).T if not isinstance(k, Var)
                      else ad.transpose(k, (1, 0)))
    return ad.div(pix_h[..., 0:2], pix_h[..., 2:3])


def pixel_rays(cam: CameraPose, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Back-project pixels (N, 2) to world rays (origins, unit dirs)."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    ones = np.ones((len(pixels), 1))
    d_cam = np.concatenate([pixels, ones], axis=1) @ np.linalg.inv(cam.k).T
    d_world = d_cam @ cam.rot  # == (rot.T @ d_cam.T).T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.center, d_world.shape).copy()
    return origins, d_world


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H*W, 2) pixel coordinates in row-major image order."""
    u, v = np.meshgrid(np.arange(width, dtype=np.float64),
                       np.arange(height, dtype=np.float64))
    return np.stack([u.ravel(), v.ravel()], axis=1)


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (special orthogonal Procrustes)."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def rotation_increment_ops(delta: Var):
    """Rotation matrix Var from the chart q = (1, delta/2).

    First-order equal to the axis-angle exponential and smooth at zero,
    so it is safe to differentiate at the start of every step.
    """
    a = ad.mul(delta[0:1], 0.5)
    b = ad.mul(delta[1:2], 0.5)
    c = ad.mul(delta[2:3], 0.5)
    one = np.ones(1)
    s = ad.add(ad.add(ad.mul(a, a), ad.mul(b, b)), ad.add(ad.mul(c, c), one))
    rows = [
        ad.sub(s, ad.mul(ad.add(ad.mul(b, b), ad.mul(c, c)), 2.0)),
        ad.mul(ad.sub(ad.mul(a, b), c), 2.0),
        ad.mul(ad.add(ad.mul(a, c), b), 2.0),
        ad.mul(ad.add(ad.mul(a, b), c), 2.0),
        ad.sub(s, ad.mul(ad.add(ad.mul(a, a), ad.mul(c, c)), 2.0)),
        ad.mul(ad.sub(ad.mul(b, c), a), 2.0),
        ad.mul(ad.sub(ad.mul(a, c), b), 2.0),
        ad.mul(ad.add(ad.mul(b, c), a), 2.0),
        ad.sub(s, ad.mul(ad.add(ad.mul(a, a), ad.mul(b, b)), 2.0)),
    ]
    flat = ad.concat(rows, axis=0)
    return ad.div(ad.reshape(flat, (3, 3)), ad.reshape(s, ()))


@dataclass
class LandmarkSet:
    ids: list
    positions3d: np.ndarray   # (L, 3) on the mean shape
    pixels2d: np.ndarray      # (L, 2) per-view annotations

    def __post_init__(self):
        self.positions3d = np.asarray(self.positions3d, dtype=np.float64)
        self.pixels2d = np.asarray(self.pixels2d, dtype=np.float64)
        if len(self.ids) != len(self.positions3d) or \
                len(self.ids) != len(self.pixels2d):
            raise ValueError("landmark ids, 3D and 2D sets must correspond 1:1")


@dataclass
class PoseEstimate:
    pose: CameraPose
    stage1_residual: float
    stage2_residual: float | None
    residual_trace: list


def _reprojection_residual(cam: CameraPose, pts3d, pix2d) -> float:
    return float(np.mean(np.abs(project(cam, pts3d) - pix2d)))


def pos_initialization(landmarks: LandmarkSet, k: np.ndarray,
                       width: int, height: int) -> CameraPose | None:
    """Weak-perspective closed-form pose (the classical POS step).

    Fits an affine map from centered 3D landmarks to centered normalized
    image coordinates, orthogonalizes its rows into a rotation and reads
    the depth off the scale. Rough, but lands inside the refinement basin.
    """
    x = landmarks.positions3d
    ones = np.ones((len(x), 1))
    p = np.concatenate([landmarks.pixels2d, ones], axis=1) @ np.linalg.inv(k).T
    p = p[:, :2]
    xc = x - x.mean(axis=0)
    pc = p - p.mean(axis=0)
    m, *_ = np.linalg.lstsq(xc, pc, rcond=None)  # (3, 2)
    m = m.T                                       # rows ~ s * r1, s * r2
    s = 0.5 * (np.linalg.norm(m[0]) + np.linalg.norm(m[1]))
    if s < 1e-9 or not np.isfinite(s):
        return None
    u, _, vt = np.linalg.svd(m / s, full_matrices=True)
    r12 = u @ np.eye(2, 3) @ vt
    r3 = np.cross(r12[0], r12[1])
    rot = orthonormalize(np.stack([r12[0], r12[1], r3]))
    tz = 1.0 / s
    txy = tz * p.mean(axis=0) - (rot @ x.mean(axis=0))[:2]
    trans = np.array([txy[0], txy[1], tz - (rot @ x.mean(axis=0))[2]])
    if trans[2] <= 0.1:
        return None
    return CameraPose(k, rot, trans, width, height)


def _stage_optimize(cam: CameraPose, landmarks: LandmarkSet, lr: float,
                    steps: int, field=None, polish: bool = True,
                    diverge_after: int = 50):
    """Adam over (rotation increment, translation); shared by both stages.

    With `polish`, the learning rate drops by 10x at 50% and again at 75%
    of the budget: constant-rate travel first, then settling onto the L1
    kink. With `field` set, the 3D points are replaced every step by
    differentiable first intersections of the mean-shape field along the
    rays through the current landmark projections, so the ray-surface
    coupling enters the gradient.
    """
    rot, trans = cam.rot.copy(), cam.trans.copy()
    opt = optim.Adam(lr=lr)
    trace: list[float] = []
    best = (np.inf, rot, trans)
    worse_streak = 0
    k_inv = np.linalg.inv(cam.k)
    for it in range(steps):
        if polish and it in (steps // 2, (3 * steps) // 4):
            opt.lr *= 0.1
        tape = Tape()
        dvar = tape.var(np.zeros(3), op="leaf:delta")
        tvar = tape.var(trans, op="leaf:trans")
        rot_expr = ad.matmul(rotation_increment_ops(dvar), rot)
        if field is None:
            pts = landmarks.positions3d
        else:
            cur = CameraPose(cam.k, rot, trans, cam.width, cam.height)
            q = project(cur, landmarks.positions3d)
            origins_np, dirs_np = pixel_rays(cur, q)
            bundle = tracer.clip_to_box(origins_np, dirs_np,
                                        half_side=tracer.TRACE_HALF_SIDE)
            res = tracer.sphere_trace(field, bundle, tol=1e-7)
            if not res.hit.any():
                raise PoseEstimationError("no landmark ray hits the mean shape")
            keep = res.hit
            d_cam = np.concatenate([q[keep], np.ones((keep.sum(), 1))], 1) @ k_inv.T
            dirs = ad.matmul(d_cam, rot_expr)
            dirs = ad.div(dirs, ad.l2norm(dirs, axis=-1, keepdims=True))
            center = ad.neg(ad.matmul(ad.reshape(tvar, (1, 3)), rot_expr))
            origins = ad.broadcast_to(center, (int(keep.sum()), 3))
            pts = tracer.differentiable_intersection(
                field, origins, dirs, res.t[keep], tape, dirs0=dirs_np[keep])
        pix2d = landmarks.pixels2d if field is None else landmarks.pixels2d[keep]
        uv = project_ops(cam.k, rot_expr, tvar, pts)
        loss = ad.mean(ad.absolute(ad.sub(uv, pix2d)))
        val = float(loss.value)
        if val < best[0]:
            best = (val, rot.copy(), trans.copy())
        if trace and val > trace[-1] + 1e-15:
            worse_streak += 1
            if worse_streak >= diverge_after:
                raise PoseEstimationError(
                    f"residual increased for {diverge_after} consecutive steps")
        else:
            worse_streak = 0
        trace.append(val)
        gd, gt = ad.backward(loss, [dvar, tvar])
        step_params = {"delta": np.zeros(3), "trans": trans}
        opt.step(step_params, {"delta": gd, "trans": gt})
        trans = step_params["trans"]
        # compose the increment and snap back to SO(3)
        tape2 = Tape()
        dv = tape2.var(step_params["delta"])
        rot = orthonormalize(np.asarray(rotation_increment_ops(dv)) @ rot)
    final = CameraPose(cam.k, best[1], best[2], cam.width, cam.height)
    return final, trace


def estimate_camera(landmarks: LandmarkSet, init: CameraPose | None,
                    field=None, image_size: tuple[int, int] | None = None,
                    fov_deg: float = 40.0, stage1_steps: int = 1200,
                    stage2_steps: int = 200, stage2_lr: float = 1e-3,
                    distance: float = 3.2) -> PoseEstimate:
    """Coarse-to-fine pose recovery from landmark correspondences.

    Stage 1 minimizes mean L1 reprojection of the mean-shape landmarks;
    without an init it scouts from a weak-perspective solution plus three
    canonical yaws and finishes the best one. Stage 2, when a mean-shape
    field is supplied, refines with on-surface intersection points.
    Intrinsics stay frozen.
    """
    if len(landmarks.ids) < 4:
        raise PoseEstimationError("need at least 4 landmark correspondences")
    candidates: list[CameraPose] = []
    if init is not None:
        candidates.append(init)
    else:
        if image_size is None:
            raise PoseEstimationError("image_size required when init is None")
        w, h = image_size
        f = 0.5 * w / np.tan(np.radians(fov_deg) / 2.0)
        k = np.array([[f, 0.0, (w - 1) / 2.0], [0.0, f, (h - 1) / 2.0],
                      [0.0, 0.0, 1.0]])
        pos = pos_initialization(landmarks, k, w, h)
        if pos is not None:
            candidates.append(pos)
        for yaw in (-45.0, 0.0, 45.0):
            eye = distance * np.array([np.sin(np.radians(yaw)), 0.0,
                                       np.cos(np.radians(yaw))])
            candidates.append(lookat(eye, (0, 0, 0), fov_deg, w, h))
    scouted: list[CameraPose] = []
    if len(candidates) > 1:
        scout_steps = max(stage1_steps // 4, 1)
        results = []
        for cand in candidates:
            try:
                pose, trace = _stage_optimize(cand, landmarks, lr=1e-2,
                                              steps=scout_steps, polish=False)
            except (PoseEstimationError, NonpositiveDepthError):
                continue
            results.append((trace[-1], pose))
        if not results:
            raise PoseEstimationError("all stage-1 starts failed")
        scouted.append(min(results, key=lambda r: r[0])[1])
    else:
        scouted.append(candidates[0])
    best_pose, best_trace, best_val = None, None, np.inf
    for cand in scouted:
        try:
            pose, trace = _stage_optimize(cand, landmarks, lr=1e-2,
                                          steps=stage1_steps)
        except (PoseEstimationError, NonpositiveDepthError):
            continue
        if trace[-1] < best_val:
            best_pose, best_trace, best_val = pose, trace, trace[-1]
    if best_pose is None:
        raise PoseEstimationError("stage-1 refinement failed")
    s1_res = _reprojection_residual(best_pose, landmarks.positions3d,
                                    landmarks.pixels2d)
    trace = list(best_trace)
    s2_res = None
    if field is not None:
        best_pose, t2 = _stage_optimize(best_pose, landmarks, lr=stage2_lr,
                                        steps=stage2_steps, field=field)
        trace += t2
        s2_res = t2[-1] if t2 else s1_res
    return PoseEstimate(pose=best_pose, stage1_residual=s1_res,
                        stage2_residual=s2_res, residual_trace=trace)
