"""Latent code handling: the identity/expression/color split, PCA over
trained codes, and test-time composition with residual offsets.

Geometry codes are stored concatenated (identity then expression) and the
PCA treats them as one vector; the split is re-imposed by slicing after
composition, which is what the view-switch machinery needs.
"""

from __future__ import annotations

from dataclasses import dataclass
import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Var


@dataclass
class LatentCode:
    z_id: np.ndarray
    z_exp: np.ndarray
    z_c: np.ndarray

    @property
    def z_geo(self) -> np.ndarray:
        return np.concatenate([self.z_id, self.z_exp])

    @staticmethod
    def from_geo(z_geo: np.ndarray, z_c: np.ndarray, d_id: int) -> "LatentCode":
        z_geo = np.asarray(z_geo)
        return LatentCode(z_id=z_geo[:d_id].copy(), z_exp=z_geo[d_id:].copy(),
                          z_c=np.asarray(z_c).copy())


def switch_expression(code_m: LatentCode, code_n: LatentCode) -> LatentCode:
    """Identity and color of m with the expression of n."""
    return LatentCode(z_id=code_m.z_id.copy(), z_exp=code_n.z_exp.copy(),
                      z_c=code_m.z_c.copy())


@dataclass
class PcaBasis:
    mean: np.ndarray                     # (d,)
    components: np.ndarray               # (m, d), orthonormal rows
    singular_values: np.ndarray          # (m,)
    explained_variance_ratio: np.ndarray  # (m,), nonincreasing

    @property
    def m(self) -> int:
        return len(self.components)

    @property
    def d(self) -> int:
        return len(self.mean)

    def project(self, z: np.ndarray) -> np.ndarray:
        """Combination weights of z (residual discarded)."""
        return (np.asarray(z) - self.mean) @ self.components.T

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.mean": self.mean,
                f"{prefix}.components": self.components,
                f"{prefix}.singular_values": self.singular_values,
                f"{prefix}.evr": self.explained_variance_ratio}

    @staticmethod
    def from_arrays(arrays: dict, prefix: str) -> "PcaBasis":
        return PcaBasis(mean=arrays[f"{prefix}.mean"],
                        components=arrays[f"{prefix}.components"].reshape(
                            -1, len(arrays[f"{prefix}.mean"])),
                        singular_values=arrays[f"{prefix}.singular_values"],
                        explained_variance_ratio=arrays[f"{prefix}.evr"])


def fit_pca(codes: np.ndarray, variance_threshold: float = 0.96,
            n_components: int | None = None) -> PcaBasis:
    """Mean-centered SVD basis over trained codes.

    Keeps the smallest component count whose cumulative explained variance
    reaches the threshold (or exactly `n_components` when given). All-equal
    codes yield an m=0 basis with a warning.
    """
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or len(codes) < 2:
        raise ValueError("need at least 2 codes, shaped (n, d)")
    if not 0.0 < variance_threshold <= 1.0:
        raise ValueError("variance_threshold must be in (0, 1]")
    mean = codes.mean(axis=0)
    centered = codes - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    total = float((s * s).sum())
    if total < 1e-24:
        warnings.warn("all latent codes identical; PCA basis is empty")
        d = codes.shape[1]
        return PcaBasis(mean=mean, components=np.zeros((0, d)),
                        singular_values=np.zeros(0),
                        explained_variance_ratio=np.zeros(0))
    evr = (s * s) / total
    rank = int((s > s[0] * 1e-12).sum())
    if n_components is not None:
        m = min(n_components, rank)
    else:
        m = int(np.searchsorted(np.cumsum(evr), variance_threshold - 1e-12) + 1)
        m = min(m, rank)
    return PcaBasis(mean=mean, components=vt[:m], singular_values=s[:m],
                    explained_variance_ratio=evr[:m])


def compose_code(basis: PcaBasis, weights, residual=None):
    """z = mean + weights @ components (+ residual); linear and
    differentiable in both `weights` and `residual` (Var or ndarray)."""
    if basis.m == 0:
        z = basis.mean
    else:
        w2 = ad.reshape(weights, (1, basis.m)) if isinstance(weights, Var) \
            else np.asarray(weights).reshape(1, basis.m)
        z = ad.add(ad.reshape(ad.matmul(w2, basis.components), (basis.d,)),
                   basis.mean)
    if residual is not None:
        z = ad.add(z, residual)
    return z
