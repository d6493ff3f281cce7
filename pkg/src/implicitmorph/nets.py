"""MLP building blocks and the three networks of the pipeline.

The geometry field is a composition of two MLPs: a reference net that
carries the shared base shape, and a deformation net that warps query
points per instance before the reference net sees them, i.e.
``f(x, z) = ref(x + deform(x, z))``. A separate rendering net maps
surface points plus shading inputs to RGB.

Forward code is written once against the dispatching ops in
:mod:`implicitmorph.autodiff`, so the same functions run on plain numpy
arrays (fast inference), on tape Vars (training) and on Duals (spatial
gradients). Parameters live in flat ``{name: array}`` dicts; whoever
wants gradients lifts the relevant entries onto a tape first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Dual, Var


class VanishingGradientError(RuntimeError):
    """Spatial gradient too small to normalize into a surface normal."""


@dataclass
class EncodingConfig:
    """Fourier feature settings for positions and view directions.

    `concat` mode emits [raw, sin(2^k pi x), cos(2^k pi x)] per coordinate
    for k = 0..K. `sum` mode collapses each coordinate's sin+cos terms into
    a single scalar; it loses information and exists only as a literal
    variant, off by default.
    """

    k_position: int = 6
    k_view: int = 4
    mode: str = "concat"
    include_raw: bool = True

    def __post_init__(self):
        if self.k_position < 0 or self.k_view < 0:
            raise ValueError("encoding orders must be >= 0")
        if self.mode not in ("concat", "sum"):
            raise ValueError(f"unknown encoding mode '{self.mode}'")

    def dim(self, k: int, in_dim: int = 3) -> int:
        if self.mode == "sum":
            return in_dim
        return in_dim * 2 * (k + 1) + (in_dim if self.include_raw else 0)

    @property
    def position_dim(self) -> int:
        return self.dim(self.k_position)

    @property
    def view_dim(self) -> int:
        return self.dim(self.k_view)


def positional_encode(x, k: int, mode: str = "concat", include_raw: bool = True):
    """Fourier-encode the last axis of `x`. Works on ndarray/Var/Dual."""
    if mode == "sum":
        out = None
        for j in range(k + 1):
            w = (2.0 ** j) * math.pi
            term = ad.add(ad.cos(ad.mul(x, w)), ad.sin(ad.mul(x, w)))
            out = term if out is None else ad.add(out, term)
        return out
    parts = [x] if include_raw else []
    for j in range(k + 1):
        w = (2.0 ** j) * math.pi
        parts.append(ad.sin(ad.mul(x, w)))
        parts.append(ad.cos(ad.mul(x, w)))
    return ad.concat(parts, axis=-1)


@dataclass
class MlpSpec:
    """Architecture of one fully connected net.

    `layer_dims` chains input through hidden widths to the output dim.
    `skip_at` (index into hidden layers) concatenates the raw input onto
    that hidden activation before the next matmul.
    """

    name: str
    layer_dims: list[int]
    activation: str = "softplus"
    beta: float = 100.0
    skip_at: int | None = None
    out_activation: str | None = None

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def weight_shape(self, i: int) -> tuple[int, int]:
        fan_in = self.layer_dims[i]
        if self.skip_at is not None and i == self.skip_at:
            fan_in += self.layer_dims[0]
        return (fan_in, self.layer_dims[i + 1])

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"{self.name}.w{i}", f"{self.name}.b{i}"]
        return names


def _act(spec: MlpSpec, h):
    if spec.activation == "softplus":
        return ad.softplus(h, beta=spec.beta)
    if spec.activation == "relu":
        return ad.relu(h)
    raise ValueError(f"unknown activation '{spec.activation}'")


def mlp_forward(spec: MlpSpec, params: dict, x):
    """Affine + activation chain; `x` and params may be ndarray/Var/Dual."""
    h = x
    for i in range(spec.n_layers):
        if spec.skip_at is not None and i == spec.skip_at:
            h = ad.concat([h, x], axis=-1)
        h = ad.add(ad.matmul(h, params[f"{spec.name}.w{i}"]),
                   params[f"{spec.name}.b{i}"])
        if i < spec.n_layers - 1:
            h = _act(spec, h)
    if spec.out_activation == "sigmoid":
        h = ad.sigmoid(h)
    elif spec.out_activation is not None:
        raise ValueError(f"unknown output activation '{spec.out_activation}'")
    return h


# -- initializers --------------------------------------------------------

def init_standard(spec: MlpSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.weight_shape(i)
        params[f"{spec.name}.w{i}"] = rng.normal(
            0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params[f"{spec.name}.b{i}"] = np.zeros(fan_out)
    return params


def hidden_features(spec: MlpSpec, params: dict, x):
    """Activations entering the last layer (skip handling included)."""
    h = x
    for i in range(spec.n_layers - 1):
        if spec.skip_at is not None and i == spec.skip_at:
            h = ad.concat([h, x], axis=-1)
        h = _act(spec, ad.add(ad.matmul(h, params[f"{spec.name}.w{i}"]),
                              params[f"{spec.name}.b{i}"]))
    if spec.skip_at is not None and spec.skip_at == spec.n_layers - 1:
        h = ad.concat([h, x], axis=-1)
    return h


def init_geometric(spec: MlpSpec, rng: np.random.Generator,
                   radius: float = 0.5, raw_dim: int = 3,
                   calibrate_box: float | None = 1.8,
                   encode=None) -> dict[str, np.ndarray]:
    """Initialize a softplus MLP so its first output approximates the
    signed distance of a sphere with the given radius.

    Weights touching Fourier features start at zero so the random stack
    behaves like a plain MLP on raw coordinates; the last layer starts at
    the classical sqrt(pi / fan_in) mean. At the widths used here that
    alone is too loose, so by default the sdf column of the last layer is
    then re-fit by (deterministic, reweighted) least squares against
    |x| - radius over probe points in a box of half-side `calibrate_box`.
    Pass calibrate_box=None for the purely random variant.
    """
    params = {}
    n = spec.n_layers
    for i in range(n):
        fan_in, fan_out = spec.weight_shape(i)
        wname, bname = f"{spec.name}.w{i}", f"{spec.name}.b{i}"
        if i == n - 1:
            w = rng.normal(math.sqrt(math.pi) / math.sqrt(fan_in), 1e-4,
                           size=(fan_in, fan_out))
            b = np.full(fan_out, -radius)
        else:
            w = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(fan_out),
                           size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if i == 0:
                w[raw_dim:, :] = 0.0  # encoded features silent at init
            if spec.skip_at is not None and i == spec.skip_at:
                w[spec.layer_dims[i] + raw_dim:, :] = 0.0
        params[wname], params[bname] = w, b
    if calibrate_box is not None:
        probes = rng.uniform(-calibrate_box, calibrate_box, size=(8192, raw_dim))
        inp = probes if encode is None else encode(probes)
        feats = np.asarray(hidden_features(spec, params, inp))
        a = np.concatenate([feats, np.ones((len(feats), 1))], axis=1)
        target = np.linalg.norm(probes, axis=1) - radius
        wts = np.ones(len(a))
        for _ in range(4):
            sol, *_ = np.linalg.lstsq(a * wts[:, None], target * wts, rcond=None)
            err = np.abs(a @ sol - target)
            wts = 1.0 + 3.0 * err / (err.max() + 1e-12)
        params[f"{spec.name}.w{n-1}"][:, 0] = sol[:-1]
        params[f"{spec.name}.b{n-1}"][0] = sol[-1]
    return params


def init_zero_last_layer(params: dict[str, np.ndarray], spec: MlpSpec) -> None:
    i = spec.n_layers - 1
    params[f"{spec.name}.w{i}"][:] = 0.0
    params[f"{spec.name}.b{i}"][:] = 0.0


# -- the model bundle ----------------------------------------------------

@dataclass
class LatentDims:
    d_id: int = 8
    d_exp: int = 4
    d_c: int = 8

    @property
    def d_geo(self) -> int:
        return self.d_id + self.d_exp


@dataclass
class Model:
    """Parameter bundle for the full pipeline plus training metadata."""

    encoding: EncodingConfig
    latent: LatentDims
    ref: MlpSpec
    deform: MlpSpec
    render: MlpSpec
    params: dict[str, np.ndarray]
    lgeo_dim: int
    stages: set = field(default_factory=set)
    # per-(instance, expression) codes learned during training
    geo_codes: dict = field(default_factory=dict)
    color_codes: dict = field(default_factory=dict)
    # PCA bases fitted over the trained codes (latent module)
    pca: dict = field(default_factory=dict)

    @staticmethod
    def build(width: int = 64, ref_depth: int = 4, deform_depth: int = 4,
              render_depth: int = 3, lgeo_dim: int = 16,
              latent: LatentDims | None = None,
              encoding: EncodingConfig | None = None,
              init_radius: float = 0.5, seed: int = 0) -> "Model":
        latent = latent or LatentDims()
        enc = encoding or EncodingConfig()
        pos_dim = enc.position_dim
        view_dim = enc.view_dim
        ref = MlpSpec("ref", [pos_dim] + [width] * (ref_depth - 1) + [1 + lgeo_dim],
                      activation="softplus", skip_at=max(1, ref_depth // 2))
        deform = MlpSpec("deform",
                         [pos_dim + latent.d_geo] + [width] * (deform_depth - 1) + [3],
                         activation="softplus")
        render_in = 3 + latent.d_c + 3 + view_dim + lgeo_dim
        render = MlpSpec("render", [render_in] + [width] * (render_depth - 1) + [3],
                         activation="relu", out_activation="sigmoid")
        rng = np.random.default_rng(seed)
        params = init_geometric(
            ref, rng, radius=init_radius,
            encode=lambda p: positional_encode(p, enc.k_position, enc.mode,
                                               enc.include_raw))
        params.update(init_standard(deform, rng))
        init_zero_last_layer(params, deform)
        params.update(init_standard(render, rng))
        return Model(encoding=enc, latent=latent, ref=ref, deform=deform,
                     render=render, params=params, lgeo_dim=lgeo_dim)

    def geometry_param_names(self) -> list[str]:
        return self.ref.param_names() + self.deform.param_names()

    def merged(self, overrides: dict) -> dict:
        """Parameter view with some entries replaced by tape Vars."""
        out = dict(self.params)
        out.update(overrides)
        return out


def encode_position(model: Model, x):
    e = model.encoding
    return positional_encode(x, e.k_position, e.mode, e.include_raw)


def encode_view(model: Model, v):
    e = model.encoding
    return positional_encode(v, e.k_view, e.mode, e.include_raw)


def _np_value(x) -> np.ndarray:
    if isinstance(x, Dual):
        x = x.val
    return x.value if isinstance(x, Var) else np.asarray(x)


def _batch_code(z, n: int):
    """Broadcast a 1-D latent code to (n, d); pass 2-D codes through."""
    zv = _np_value(z)
    if zv.ndim != 1:
        return z
    if isinstance(z, Dual):
        return Dual(_batch_code(z.val, n),
                    None if z.tan is None else _batch_code(z.tan, n))
    if isinstance(z, Var):
        return ad.broadcast_to(z, (n, zv.shape[0]))
    return np.broadcast_to(zv, (n, zv.shape[0]))


def reference_forward(model: Model, params: dict, x):
    """Reference net alone: returns (sdf, lgeo-features)."""
    out = mlp_forward(model.ref, params, encode_position(model, x))
    return out[..., 0:1], out[..., 1:]


def deformation_forward(model: Model, params: dict, x, z_geo):
    z = _batch_code(z_geo, _np_value(x).shape[0])
    return mlp_forward(model.deform, params,
                       ad.concat([encode_position(model, x), z], axis=-1))


def geometry_forward(model: Model, params: dict, x, z_geo):
    """Full geometry field: returns (sdf, lgeo, delta_x)."""
    dx = deformation_forward(model, params, x, z_geo)
    s, lgeo = reference_forward(model, params, ad.add(x, dx))
    return s, lgeo, dx


def geometry_sdf(model: Model, params: dict, x, z_geo):
    return geometry_forward(model, params, x, z_geo)[0]


def geometry_sdf_np(model: Model, x: np.ndarray, z_geo: np.ndarray) -> np.ndarray:
    """Plain numpy scalar field, shape (N,)."""
    s = geometry_forward(model, model.params, x, z_geo)[0]
    return np.asarray(s).reshape(-1)


def geometry_grad_np(model: Model, x: np.ndarray,
                     z_geo: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and spatial gradient without recording, via numpy duals."""
    def fld(p):
        return geometry_forward(model, model.params, p, z_geo)[0]

    val, grad = ad.spatial_gradient(fld, np.asarray(x, dtype=np.float64))
    return np.asarray(val).reshape(-1), grad


def surface_normal(model: Model, params: dict, x, z_geo, tape=None,
                   min_grad: float = 1e-8):
    """Unit normal = normalized spatial gradient of the geometry field.

    On a tape the returned normal is differentiable into `params`.
    Signals VanishingGradientError instead of clamping a near-zero
    gradient, per the field contract.
    """
    def fld(p):
        return geometry_forward(model, params, p, z_geo)[0]

    _, grad = ad.spatial_gradient(fld, x, tape=tape)
    gval = grad.value if isinstance(grad, Var) else np.asarray(grad)
    norms = np.linalg.norm(np.atleast_2d(gval), axis=-1)
    if np.any(norms < min_grad):
        raise VanishingGradientError(
            f"gradient norm below {min_grad} at {int((norms < min_grad).sum())} points")
    nrm = ad.l2norm(grad, axis=-1, keepdims=True) if gval.ndim > 1 else ad.l2norm(grad)
    return ad.div(grad, nrm)


def rendering_forward(model: Model, params: dict, x, z_c, n, v, lgeo):
    """RGB in [0, 1] for surface points with shading inputs."""
    inp = ad.concat([x, z_c, n, encode_view(model, v), lgeo], axis=-1)
    return mlp_forward(model.render, params, inp)


# -- checkpoint format ---------------------------------------------------
# magic, version, json header (shapes + configs), then raw little-endian
# float64 arrays in the header's declaration order.

_MAGIC = b"IMORPHCK"
_VERSION = 2


def save_model(model: Model, path) -> None:
    arrays: dict[str, np.ndarray] = dict(model.params)
    for (i, e), z in sorted(model.geo_codes.items()):
        arrays[f"code.geo.{i}.{e}"] = z
    for (i, e), z in sorted(model.color_codes.items()):
        arrays[f"code.color.{i}.{e}"] = z
    for k, v in sorted(model.pca.items()):
        arrays[f"pca.{k}"] = np.asarray(v, dtype=np.float64)
    header = {
        "encoding": vars(model.encoding),
        "latent": vars(model.latent),
        "lgeo_dim": model.lgeo_dim,
        "stages": sorted(model.stages),
        "specs": {
            s.name: {"layer_dims": s.layer_dims, "activation": s.activation,
                     "beta": s.beta, "skip_at": s.skip_at,
                     "out_activation": s.out_activation}
            for s in (model.ref, model.deform, model.render)
        },
        "arrays": [[k, list(arrays[k].shape)] for k in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(_VERSION.to_bytes(4, "little"))
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for k in arrays:
            f.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        version = int.from_bytes(f.read(4), "little")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen))
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    specs = {}
    for name, s in header["specs"].items():
        specs[name] = MlpSpec(name=name, layer_dims=s["layer_dims"],
                              activation=s["activation"], beta=s["beta"],
                              skip_at=s["skip_at"],
                              out_activation=s["out_activation"])
    model = Model(encoding=EncodingConfig(**header["encoding"]),
                  latent=LatentDims(**header["latent"]),
                  ref=specs["ref"], deform=specs["deform"], render=specs["render"],
                  params={}, lgeo_dim=header["lgeo_dim"],
                  stages=set(header["stages"]))
    for name, arr in arrays.items():
        if name.startswith("code.geo."):
            _, _, i, e = name.split(".")
            model.geo_codes[(int(i), int(e))] = arr
        elif name.startswith("code.color."):
            _, _, i, e = name.split(".")
            model.color_codes[(int(i), int(e))] = arr
        elif name.startswith("pca."):
            model.pca[name[4:]] = arr
        else:
            model.params[name] = arr
    return model
