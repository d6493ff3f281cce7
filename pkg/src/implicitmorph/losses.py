"""Training and test-time loss terms.

Geometry supervision drives field values and normals to match on-surface
samples while an eikonal penalty keeps the gradient near unit norm; the
rendering stack compares traced-and-shaded pixels against reference
images plus a soft-mask cross entropy; the view-switch term re-renders
one view under another view's expression code to enforce cross-view
consistency of the shared identity.

All pixel losses are channel means; empty pixel sets contribute exact
zeros (an exclusion mask may legally cover a whole view).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import camera as cam_mod
from . import nets
from . import tracer
from .autodiff import Dual, Tape, Var
from .fields import NeuralField


class EmptyBatchError(ValueError):
    pass


class DegenerateCameraError(RuntimeError):
    """No sampled pixel has a nonempty trace interval."""


@dataclass
class GeoLossWeights:
    w_surface: float = 1.0       # on-surface value + normal agreement
    w_deform: float = 0.01       # deformation magnitude
    w_eikonal: float = 0.1
    w_code: float = 1e-4         # latent code norm
    w_normal: float = 1.0        # normal term inside the surface loss

    def __post_init__(self):
        if min(self.w_surface, self.w_deform, self.w_eikonal, self.w_code,
               self.w_normal) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class RenderLossWeights:
    w_rgb: float = 1.0
    w_mask: float = 100.0
    w_deform: float = 1e-4
    w_eikonal: float = 0.01
    w_code: float = 1e-4
    mu: float = 0.1              # view-switch weight
    mu_decay_iters: int = 10     # switch term is zero after this many steps

    def __post_init__(self):
        vals = (self.w_rgb, self.w_mask, self.w_deform, self.w_eikonal,
                self.w_code, self.mu)
        if min(vals) < 0 or self.mu_decay_iters < 0:
            raise ValueError("loss weights must be nonnegative")

    def mu_at(self, iteration: int) -> float:
        """mu for a 1-based optimizer iteration; zero once decayed."""
        return self.mu if iteration <= self.mu_decay_iters else 0.0


@dataclass
class LossBreakdown:
    total: object                 # Var (or float in degenerate cases)
    terms: dict = field(default_factory=dict)     # name -> float
    weighted: dict = field(default_factory=dict)  # name -> weight used

    @property
    def value(self) -> float:
        return float(self.total.value if isinstance(self.total, Var)
                     else self.total)

    def weighted_sum(self) -> float:
        return float(sum(self.weighted[k] * self.terms[k] for k in self.terms))


def _scalar(x) -> float:
    return float(np.asarray(x.value if isinstance(x, Var) else x))


def _spatial_gradient_batch(field_obj, x, tape: Tape):
    """One dual pass: returns (s, lgeo-or-None, dx, grad) at points x.

    `x` may be a constant array or a Var; the gradient Var stays
    differentiable with respect to everything the field captured.
    """
    xv = np.asarray(x.value if isinstance(x, Var) else x)
    n = xv.shape[0]
    seed = np.broadcast_to(np.eye(3)[:, None, :], (3, n, 3)).copy()
    out = field_obj.sdf_and_offset(Dual(x, seed), tape=tape)
    s_dual, dx_dual = out
    g = ad.transpose(ad.reshape(s_dual.tan, (3, n)), (1, 0))
    dx = None if dx_dual is None else dx_dual.val
    return s_dual.val, dx, g


def _unit_normals(grad, min_norm: float = 1e-8):
    gval = np.asarray(grad.value if isinstance(grad, Var) else grad)
    norms = np.linalg.norm(gval, axis=-1)
    if np.any(norms < min_norm):
        raise nets.VanishingGradientError(
            f"{int((norms < min_norm).sum())} points with gradient norm "
            f"below {min_norm} inside a loss")
    return ad.div(grad, ad.l2norm(grad, axis=-1, keepdims=True))


def geometry_loss(field_obj, z, surface_points: np.ndarray,
                  surface_normals: np.ndarray, box_points: np.ndarray,
                  weights: GeoLossWeights, tape: Tape) -> LossBreakdown:
    """Surface + deformation + eikonal + code-norm stack for one instance.

    `field_obj` needs sdf_and_offset(x, tape); `z` may be a Var (jointly
    optimized codes) or a plain array (code regularizer then constant).
    """
    if len(surface_points) == 0 or len(box_points) == 0:
        raise EmptyBatchError("geometry loss needs nonempty point batches")
    s, dx, grad = _spatial_gradient_batch(field_obj, surface_points, tape)
    n_pred = _unit_normals(grad)
    l_surf = ad.add(ad.mean(ad.absolute(s)),
                    ad.mul(ad.mean(ad.l2norm(ad.sub(n_pred, surface_normals))),
                           weights.w_normal))
    if dx is None:
        l_def = np.float64(0.0)
    else:
        l_def = ad.mean(ad.l2norm(dx))
    _, _, grad_box = _spatial_gradient_batch(field_obj, box_points, tape)
    l_eik = ad.mean(ad.power(ad.sub(ad.l2norm(grad_box), 1.0), 2.0))
    l_code = ad.l2norm(ad.reshape(z, (-1,))) if isinstance(z, Var) \
        else np.linalg.norm(np.asarray(z).ravel())
    total = ad.add(ad.add(ad.mul(l_surf, weights.w_surface),
                          ad.mul(l_def, weights.w_deform)),
                   ad.add(ad.mul(l_eik, weights.w_eikonal),
                          ad.mul(l_code, weights.w_code)))
    return LossBreakdown(
        total=total,
        terms={"surface": _scalar(l_surf), "deform": _scalar(l_def),
               "eikonal": _scalar(l_eik), "code": _scalar(l_code)},
        weighted={"surface": weights.w_surface, "deform": weights.w_deform,
                  "eikonal": weights.w_eikonal, "code": weights.w_code})


# -- pixel sampling --------------------------------------------------------

def sample_pixels(view, n: int, rng: np.random.Generator,
                  exclude_exclusion: bool = False) -> np.ndarray:
    """(n, 2) integer pixel coords: half uniform, half near the mask
    boundary (within 3 px), which stabilizes the mask term."""
    h, w = view.mask.shape
    mask = view.mask
    if exclude_exclusion:
        allowed = ~view.exclusion
    else:
        allowed = np.ones_like(mask)
    n_uni = n // 2
    coords = []
    allowed_idx = np.flatnonzero(allowed.ravel())
    if len(allowed_idx) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pick = rng.choice(allowed_idx, size=n_uni, replace=True)
    coords.append(np.stack([pick % w, pick // w], axis=1))
    # boundary band: mask xor its 3px-eroded/dilated surroundings
    pad = 3
    grown = np.zeros_like(mask)
    for dy in range(-pad, pad + 1):
        for dx in range(-pad, pad + 1):
            shifted = np.roll(np.roll(mask, dy, axis=0), dx, axis=1)
            grown |= shifted != mask
    band = grown & allowed
    band_idx = np.flatnonzero(band.ravel())
    if len(band_idx) == 0:
        band_idx = allowed_idx
    pick = rng.choice(band_idx, size=n - n_uni, replace=True)
    coords.append(np.stack([pick % w, pick // w], axis=1))
    return np.concatenate(coords)


# -- rendering losses ------------------------------------------------------

@dataclass
class ViewBinding:
    """One view plus the code expressions to render it under."""
    view: object                  # synth.TrainView
    z_geo: object                 # Var or ndarray (d_geo,)
    z_c: object                   # Var or ndarray (d_c,)


def _stack_code_rows(codes, counts, dim) -> object:
    """Stack per-view codes into (sum counts, dim) rows on the tape."""
    rows = []
    for z, c in zip(codes, counts):
        if c == 0:
            continue
        if isinstance(z, Var):
            rows.append(ad.broadcast_to(ad.reshape(z, (1, dim)), (c, dim)))
        else:
            rows.append(np.broadcast_to(np.asarray(z).reshape(1, dim),
                                        (c, dim)).copy())
    if not rows:
        return np.zeros((0, dim))
    return ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]


def render_terms(model: nets.Model, params: dict, bindings: list,
                 tape: Tape, rng: np.random.Generator, n_pixels: int = 128,
                 alpha: float = 50.0, trace_tol: float = 1e-5,
                 trace_steps: int = 100, detach_normals: bool = False,
                 exclude_exclusion: bool = False, pixel_sets=None):
    """Shared core of the rendering and view-switch losses.

    Traces sampled pixels per view, then evaluates rgb / soft-mask /
    deformation terms in stacked batches across views. Returns the term
    Vars plus bookkeeping counts.
    """
    d_geo, d_c = model.latent.d_geo, model.latent.d_c
    per_view = []
    any_valid = False
    for vi, b in enumerate(bindings):
        v = b.view
        pix = (sample_pixels(v, n_pixels, rng, exclude_exclusion)
               if pixel_sets is None else pixel_sets[vi])
        origins, dirs = cam_mod.pixel_rays(v.camera, pix + 0.0)
        rays = tracer.clip_to_box(origins, dirs, tracer.TRACE_HALF_SIDE)
        zg_np = np.asarray(b.z_geo.value if isinstance(b.z_geo, Var) else b.z_geo)
        fld = NeuralField(model, zg_np)
        fld.params = {k: (p.value if isinstance(p, Var) else p)
                      for k, p in params.items()}
        valid = rays.valid
        any_valid = any_valid or bool(valid.any())
        res = tracer.sphere_trace(fld, rays, tol=trace_tol, max_steps=trace_steps)
        sm = tracer.soft_mask(fld, rays, alpha=alpha)  # numpy pre-pass
        gt_mask = v.mask[pix[:, 1], pix[:, 0]]
        gt_rgb = v.rgb[pix[:, 1], pix[:, 0]]
        hit = res.hit & gt_mask
        per_view.append(dict(pix=pix, rays=rays, trace=res, soft=sm,
                             valid=valid, hit=hit, gt_mask=gt_mask,
                             gt_rgb=gt_rgb, binding=b))
    if not any_valid:
        raise DegenerateCameraError("no sampled pixel has a trace interval")

    # mask term over all valid rays, stacked across views
    mask_pts, mask_codes, mask_counts, mask_targets = [], [], [], []
    for pv in per_view:
        sel = pv["valid"]
        if not sel.any():
            mask_counts.append(0)
            mask_codes.append(pv["binding"].z_geo)
            continue
        pts = pv["rays"].points(pv["soft"].argmin_t)[sel]
        mask_pts.append(pts)
        mask_codes.append(pv["binding"].z_geo)
        mask_counts.append(int(sel.sum()))
        mask_targets.append(pv["gt_mask"][sel].astype(np.float64))
    if mask_pts:
        pts = np.concatenate(mask_pts)
        zrows = _stack_code_rows(mask_codes, mask_counts, d_geo)
        s = nets.geometry_forward(model, params, pts, zrows)[0]
        prob = ad.sigmoid(ad.mul(ad.reshape(s, (-1,)), -alpha))
        target = np.concatenate(mask_targets)
        p = ad.clip(prob, 1e-7, 1.0 - 1e-7)
        bce = ad.neg(ad.add(ad.mul(ad.log(p), target),
                            ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - target)))
        l_mask = ad.mean(bce)
    else:
        l_mask = np.float64(0.0)

    # rgb + deformation over hit pixels, stacked across views
    ho, hd, ht0, h_rgb, hg_codes, hc_codes, h_counts = [], [], [], [], [], [], []
    for pv in per_view:
        sel = pv["hit"]
        h_counts.append(int(sel.sum()))
        hg_codes.append(pv["binding"].z_geo)
        hc_codes.append(pv["binding"].z_c)
        if not sel.any():
            continue
        ho.append(pv["rays"].origins[sel])
        hd.append(pv["rays"].dirs[sel])
        ht0.append(pv["trace"].t[sel])
        h_rgb.append(pv["gt_rgb"][sel])
    n_hit = int(sum(h_counts))
    if n_hit > 0:
        origins = np.concatenate(ho)
        dirs = np.concatenate(hd)
        t0 = np.concatenate(ht0)
        zg_rows = _stack_code_rows(hg_codes, h_counts, d_geo)
        zc_rows = _stack_code_rows(hc_codes, h_counts, d_c)
        fld = NeuralField(model, zg_rows, params)
        x = tracer.differentiable_intersection(fld, origins, dirs, t0, tape)
        # one dual pass gives sdf, features, offsets and spatial gradient
        seed = np.broadcast_to(np.eye(3)[:, None, :], (3, n_hit, 3)).copy()
        s_d, lgeo_d, dx_d = nets.geometry_forward(model, params,
                                                  Dual(x, seed), zg_rows)
        grad = ad.transpose(ad.reshape(s_d.tan, (3, n_hit)), (1, 0))
        if detach_normals:
            grad = np.asarray(grad)
        normals = _unit_normals(grad)
        rgb = nets.rendering_forward(model, params, x, zc_rows, normals,
                                     dirs, lgeo_d.val)
        l_rgb = ad.mean(ad.absolute(ad.sub(rgb, np.concatenate(h_rgb))))
        l_def = ad.mean(ad.l2norm(dx_d.val))
    else:
        l_rgb = np.float64(0.0)
        l_def = np.float64(0.0)
    return l_rgb, l_mask, l_def, n_hit, per_view


def render_loss(model: nets.Model, params: dict, bindings: list,
                weights: RenderLossWeights, tape: Tape,
                rng: np.random.Generator, n_pixels: int = 128,
                alpha: float = 50.0, n_box: int | None = None,
                detach_normals: bool = False) -> LossBreakdown:
    """Full rendering objective over a batch of views (no switch term)."""
    l_rgb, l_mask, l_def, n_hit, _ = render_terms(
        model, params, bindings, tape, rng, n_pixels=n_pixels, alpha=alpha,
        detach_normals=detach_normals)
    # eikonal on fresh box samples, round-robin codes across views
    nb = n_box if n_box is not None else n_pixels
    box = rng.uniform(-tracer.WORLD_HALF_SIDE, tracer.WORLD_HALF_SIDE,
                      size=(nb, 3))
    share = [nb // len(bindings)] * len(bindings)
    share[0] += nb - sum(share)
    zrows = _stack_code_rows([b.z_geo for b in bindings], share,
                             model.latent.d_geo)
    fld = NeuralField(model, zrows, params)
    _, _, grad_box = _spatial_gradient_batch(fld, box, tape)
    l_eik = ad.mean(ad.power(ad.sub(ad.l2norm(grad_box), 1.0), 2.0))
    reg_parts = []
    for b in bindings:
        zg = ad.reshape(b.z_geo, (-1,)) if isinstance(b.z_geo, Var) else b.z_geo
        zc = ad.reshape(b.z_c, (-1,)) if isinstance(b.z_c, Var) else b.z_c
        reg_parts.append(ad.add(ad.l2norm(zg), ad.l2norm(zc)))
    l_reg = reg_parts[0]
    for p in reg_parts[1:]:
        l_reg = ad.add(l_reg, p)
    l_reg = ad.mul(l_reg, 1.0 / len(reg_parts))
    total = ad.add(
        ad.add(ad.mul(l_rgb, weights.w_rgb), ad.mul(l_mask, weights.w_mask)),
        ad.add(ad.add(ad.mul(l_def, weights.w_deform),
                      ad.mul(l_eik, weights.w_eikonal)),
               ad.mul(l_reg, weights.w_code)))
    return LossBreakdown(
        total=total,
        terms={"rgb": _scalar(l_rgb), "mask": _scalar(l_mask),
               "deform": _scalar(l_def), "eikonal": _scalar(l_eik),
               "code": _scalar(l_reg)},
        weighted={"rgb": weights.w_rgb, "mask": weights.w_mask,
                  "deform": weights.w_deform, "eikonal": weights.w_eikonal,
                  "code": weights.w_code})


def switch_codes(z_geo_m, z_geo_n, d_id: int):
    """Identity part of view m's code with view n's expression part."""
    zid = z_geo_m[0:d_id] if isinstance(z_geo_m, Var) else \
        np.asarray(z_geo_m)[:d_id]
    zexp = z_geo_n[d_id:] if isinstance(z_geo_n, Var) else \
        np.asarray(z_geo_n)[d_id:]
    return ad.concat([zid, zexp], axis=0)


def view_switch_loss(model: nets.Model, params: dict, binding_m: ViewBinding,
                     binding_n: ViewBinding, weights: RenderLossWeights,
                     iteration: int, tape: Tape, rng: np.random.Generator,
                     n_pixels: int = 128, alpha: float = 50.0,
                     detach_normals: bool = False) -> LossBreakdown:
    """Render view m under {id_m, exp_n}: mu * (rgb + mask) on pixels
    outside the exclusion mask. Views must share the instance."""
    vm, vn = binding_m.view, binding_n.view
    if vm.identity_seed != vn.identity_seed:
        raise ValueError("view-switch requires two views of one instance")
    mu = weights.mu_at(iteration)
    if mu == 0.0:
        return LossBreakdown(total=np.float64(0.0),
                             terms={"sw_rgb": 0.0, "sw_mask": 0.0},
                             weighted={"sw_rgb": 0.0, "sw_mask": 0.0})
    sw = ViewBinding(view=vm,
                     z_geo=switch_codes(binding_m.z_geo, binding_n.z_geo,
                                        model.latent.d_id),
                     z_c=binding_m.z_c)
    l_rgb, l_mask, _, _, _ = render_terms(
        model, params, [sw], tape, rng, n_pixels=n_pixels, alpha=alpha,
        detach_normals=detach_normals, exclude_exclusion=True)
    total = ad.mul(ad.add(ad.mul(l_rgb, weights.w_rgb),
                          ad.mul(l_mask, weights.w_mask)), mu)
    return LossBreakdown(
        total=total,
        terms={"sw_rgb": _scalar(l_rgb), "sw_mask": _scalar(l_mask)},
        weighted={"sw_rgb": mu * weights.w_rgb,
                  "sw_mask": mu * weights.w_mask})
