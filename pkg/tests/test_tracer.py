import numpy as np
import pytest

from implicitmorph import autodiff as ad
from implicitmorph import nets, synth, tracer
from implicitmorph.fields import NeuralField, SphereField
from implicitmorph.tracer import RayBundle, clip_to_box


def axial_ray(origin=(0, 0, 3.0), direction=(0, 0, -1.0)):
    return clip_to_box(np.array([origin]), np.array([direction]),
                       half_side=tracer.TRACE_HALF_SIDE)


def test_clip_to_box():
    rays = axial_ray()
    assert rays.valid[0]
    assert rays.t_near[0] == pytest.approx(3.0 - tracer.TRACE_HALF_SIDE)
    assert rays.t_far[0] == pytest.approx(3.0 + tracer.TRACE_HALF_SIDE)
    missing = clip_to_box(np.array([[0, 0, 3.0]]), np.array([[0, 1.0, 0]]),
                          half_side=1.76)
    assert not missing.valid[0]


def test_sphere_trace_axial_hit():
    res = tracer.sphere_trace(SphereField(1.0), axial_ray(), tol=1e-6)
    assert res.hit[0]
    assert res.t[0] == pytest.approx(2.0, abs=1e-6)


def test_sphere_trace_miss():
    rays = clip_to_box(np.array([[0, 0, 3.0]]), np.array([[0, 1.0, 0]]), 1.76)
    res = tracer.sphere_trace(SphereField(1.0), rays)
    assert not res.hit[0]


def _bisection_root(field, rays, i, iters=80):
    lo, hi = rays.t_near[i], rays.t_far[i]
    # walk to the first sign change at fine resolution, then bisect
    ts = np.linspace(lo, hi, 2048)
    vals = field.values(rays.origins[i] + ts[:, None] * rays.dirs[i])
    sign = vals <= 0
    if not sign.any():
        return None
    k = np.argmax(sign)
    lo, hi = ts[k - 1], ts[k]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        v = field.values((rays.origins[i] + mid * rays.dirs[i])[None, :])[0]
        if v > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_trace_matches_bisection_oracle_on_blob():
    spec = synth.make_instance(3, 1)
    field = synth.InstanceField(spec)
    rng = np.random.default_rng(0)
    n = 1000
    yaw = rng.uniform(-np.pi / 3, np.pi / 3, size=n)
    pitch = rng.uniform(-np.pi / 9, np.pi / 9, size=n)
    eyes = 3.2 * np.stack([np.sin(yaw) * np.cos(pitch), np.sin(pitch),
                           np.cos(yaw) * np.cos(pitch)], axis=1)
    targets = rng.uniform(-0.3, 0.3, size=(n, 3))
    dirs = targets - eyes
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rays = clip_to_box(eyes, dirs, tracer.TRACE_HALF_SIDE)
    tol = 1e-6
    res = tracer.sphere_trace(field, rays, tol=tol, max_steps=200)
    hits = np.flatnonzero(res.hit)
    assert len(hits) > 700
    checked = 0
    for i in hits[:1000]:
        t_star = _bisection_root(field, rays, i)
        if t_star is None:
            continue
        assert abs(res.t[i] - t_star) < 10 * tol
        checked += 1
    assert checked > 600


def test_trace_first_crossing_sphere_and_capsule():
    # closed-form roots as oracle
    rays = axial_ray()
    res = tracer.sphere_trace(SphereField(1.0), rays, tol=1e-9, max_steps=200)
    assert abs(res.t[0] - 2.0) < 1e-8

    class Capsule:
        def __init__(self, a, b, r):
            self.a, self.b, self.r = np.asarray(a, float), np.asarray(b, float), r

        def values(self, x):
            ab = self.b - self.a
            tt = np.clip(((x - self.a) @ ab) / (ab @ ab), 0.0, 1.0)
            closest = self.a + tt[:, None] * ab
            return np.linalg.norm(x - closest, axis=1) - self.r

    cap = Capsule((-0.5, 0, 0), (0.5, 0, 0), 0.4)
    o = np.array([[0.2, 0.1, 3.0]])
    d = np.array([[0.0, 0.0, -1.0]])
    rays = clip_to_box(o, d, 1.76)
    res = tracer.sphere_trace(cap, rays, tol=1e-9, max_steps=300)
    # axis point (0.2, 0.1, z): closest segment point is (0.2, 0, z...) ->
    # infinite-cylinder part; root: z^2 = r^2 - 0.1^2
    z_hit = np.sqrt(0.4 ** 2 - 0.1 ** 2)
    assert abs(res.t[0] - (3.0 - z_hit)) < 1e-8


def test_hit_satisfies_tolerance():
    spec = synth.make_instance(5, 2)
    field = synth.InstanceField(spec)
    rng = np.random.default_rng(2)
    eyes = np.array([[0, 0, 3.0]]).repeat(50, axis=0)
    dirs = np.stack([rng.uniform(-0.3, 0.3, 50), rng.uniform(-0.3, 0.3, 50),
                     -np.ones(50)], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rays = clip_to_box(eyes, dirs, 1.76)
    tol = 1e-7
    res = tracer.sphere_trace(field, rays, tol=tol, max_steps=200)
    pts = rays.points(res.t)[res.hit]
    assert np.abs(field.values(pts)).max() < tol


def test_differentiable_intersection_value_exact_t0():
    field = SphereField(1.0)
    tape = ad.Tape()
    x = tracer.differentiable_intersection(
        field, np.array([[0.0, 0.0, 3.0]]), np.array([[0.0, 0.0, -1.0]]),
        np.array([2.0]), tape)
    np.testing.assert_allclose(np.asarray(x), [[0.0, 0.0, 1.0]], atol=1e-12)


def test_differentiable_intersection_newton_corrects_imprecise_t0():
    field = SphereField(1.0)
    tape = ad.Tape()
    x = tracer.differentiable_intersection(
        field, np.array([[0.0, 0.0, 3.0]]), np.array([[0.0, 0.0, -1.0]]),
        np.array([1.9]), tape)
    np.testing.assert_allclose(np.asarray(x), [[0.0, 0.0, 1.0]], atol=1e-12)


def test_differentiable_intersection_grazing_signaled():
    field = SphereField(1.0)
    tape = ad.Tape()
    # ray tangent to the sphere: gradient orthogonal to direction
    with pytest.raises(tracer.GrazingRayError):
        tracer.differentiable_intersection(
            field, np.array([[1.0, 0.0, 3.0]]), np.array([[0.0, 0.0, -1.0]]),
            np.array([3.0]), tape)


def _tiny_neural_field(seed=0):
    model = nets.Model.build(width=16, ref_depth=3, deform_depth=3,
                             render_depth=2, lgeo_dim=4,
                             encoding=nets.EncodingConfig(k_position=2, k_view=1),
                             seed=seed)
    rng = np.random.default_rng(seed + 100)
    i = model.deform.n_layers - 1
    model.params[f"deform.w{i}"] = rng.normal(
        size=model.deform.weight_shape(i)) * 0.02
    z = rng.normal(size=model.latent.d_geo) * 0.1
    return model, z


def test_intersection_gradient_matches_retraced_finite_differences():
    model, z = _tiny_neural_field()
    origins = np.array([[0.0, 0.1, 3.0], [0.3, -0.2, 2.9]])
    dirs = np.array([[0.0, 0.0, -1.0], [-0.1, 0.05, -1.0]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rays = clip_to_box(origins, dirs, 1.76)
    pname = "ref.b0"

    def traced_points(params):
        f = NeuralField(model, z, params)
        res = tracer.sphere_trace(f, rays, tol=1e-10, max_steps=300)
        assert res.hit.all()
        return rays.points(res.t), res.t

    _, t0 = traced_points(model.params)
    tape = ad.Tape()
    pvar = tape.var(model.params[pname])
    params = dict(model.params); params[pname] = pvar
    field = NeuralField(model, z, params)
    x = tracer.differentiable_intersection(field, origins, dirs, t0, tape)
    # gradient of summed coordinates wrt the bias, against re-traced FD
    loss = x.sum()
    g = ad.backward(loss, [pvar])[0]
    eps = 1e-6
    base = dict(model.params)
    fd = np.zeros_like(g)
    for j in range(len(g)):
        hi = dict(base); hi[pname] = base[pname].copy(); hi[pname][j] += eps
        lo = dict(base); lo[pname] = base[pname].copy(); lo[pname][j] -= eps
        phi, _ = traced_points(hi)
        plo, _ = traced_points(lo)
        fd[j] = (phi.sum() - plo.sum()) / (2 * eps)
    rel = np.abs(fd - g) / (np.abs(g) + 1e-12)
    assert rel.max() < 1e-4


def test_soft_mask_half_at_zero_min():
    # grazing ray on the unit sphere: minimum field value exactly 0
    field = SphereField(1.0)
    rays = clip_to_box(np.array([[1.0, 0.0, 3.0]]),
                       np.array([[0.0, 0.0, -1.0]]), 1.76)
    res = tracer.soft_mask(field, rays, alpha=50.0, n_samples=999)
    # stratified midpoints straddle z=0 symmetrically only for odd counts
    assert res.prob[0] == pytest.approx(0.5, abs=1e-3)


def test_soft_mask_far_miss_saturates():
    field = SphereField(1.0)
    rays = clip_to_box(np.array([[1.5, 0.0, 3.0]]),
                       np.array([[0.0, 0.0, -1.0]]), 1.76)
    res = tracer.soft_mask(field, rays, alpha=50.0)
    assert res.min_value[0] == pytest.approx(0.5, abs=1e-3)
    assert res.prob[0] < 1e-10


def test_soft_mask_min_close_to_dense_oracle():
    spec = synth.make_instance(2, 1)
    field = synth.InstanceField(spec)
    rng = np.random.default_rng(4)
    n = 200
    eyes = 3.2 * np.stack([rng.uniform(-0.5, 0.5, n), rng.uniform(-0.3, 0.3, n),
                           np.ones(n)], axis=1)
    # half the rays probe the silhouette (scaled surface points), half the body
    surf = synth.sample_surface(spec, n // 2, seed=11).points
    targets = np.concatenate([
        surf * rng.uniform(0.95, 1.1, size=(n // 2, 1)),
        rng.uniform(-0.4, 0.4, size=(n - n // 2, 3)),
    ])
    dirs = targets - eyes
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rays = clip_to_box(eyes, dirs, 1.76)
    coarse = tracer.soft_mask(field, rays, alpha=50.0, n_samples=64)
    dense = tracer.soft_mask(field, rays, alpha=50.0, n_samples=640)
    delta = np.abs(coarse.min_value - dense.min_value)
    # on the sigmoid-active band (the minima that shape the mask loss at
    # alpha = 50) 64 samples track a 10x oracle tightly; chords through
    # the blob interior can hide narrower dips, so only p95 is bounded
    active = np.abs(dense.min_value) < 0.2
    assert active.sum() > 10
    assert delta[active].max() < 0.01
    assert np.quantile(delta, 0.95) < 0.01


def test_soft_mask_monotone_in_alpha():
    field = SphereField(1.0)
    hit_ray = axial_ray()
    miss_ray = clip_to_box(np.array([[1.2, 0.0, 3.0]]),
                           np.array([[0.0, 0.0, -1.0]]), 1.76)
    probs_hit = [float(tracer.soft_mask(field, hit_ray, alpha=a).prob[0])
                 for a in (5, 20, 80)]
    probs_miss = [float(tracer.soft_mask(field, miss_ray, alpha=a).prob[0])
                  for a in (5, 20, 80)]
    assert probs_hit[0] < probs_hit[1] < probs_hit[2]
    assert probs_miss[0] > probs_miss[1] > probs_miss[2]


def test_soft_mask_gradient_flows_on_tape():
    model, z = _tiny_neural_field(seed=1)
    rays = axial_ray()
    tape = ad.Tape()
    pname = "ref.b0"
    pvar = tape.var(model.params[pname])
    params = dict(model.params); params[pname] = pvar
    field = NeuralField(model, z, params)
    res = tracer.soft_mask(field, rays, alpha=50.0, tape=tape)
    g = ad.backward(res.prob.sum(), [pvar])[0]
    assert np.abs(g).max() > 0
