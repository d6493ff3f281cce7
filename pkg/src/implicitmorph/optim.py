"""Adam optimizer over flat parameter dicts, plus the per-stage learning
rates used across training and test-time reconstruction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BadGradientError(RuntimeError):
    """Non-finite gradient handed to the optimizer; names the parameter."""


STAGE_LEARNING_RATES = {
    "ref-pretrain": 1e-3,
    "geo-train": 1e-4,
    "render-train": 1e-4,
    "test-recon": 1e-3,
    "render-finetune": 1e-4,
}


def lr_schedule(stage: str) -> float:
    try:
        return STAGE_LEARNING_RATES[stage]
    except KeyError:
        raise ValueError(f"unknown training stage '{stage}'; "
                         f"expected one of {sorted(STAGE_LEARNING_RATES)}") from None


@dataclass
class Adam:
    """Standard bias-corrected Adam. State shapes mirror parameter shapes."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        """Update `params` in place from `grads` (one step for all keys)."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise BadGradientError(f"non-finite gradient for '{name}' "
                                       f"at step {t}")
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of the moment accumulators, for checkpointing."""
        out = {"adam.step": np.array([float(self.step_count)])}
        for k, a in self.m.items():
            out[f"adam.m.{k}"] = a
        for k, a in self.v.items():
            out[f"adam.v.{k}"] = a
        return out

    @staticmethod
    def from_state(arrays: dict[str, np.ndarray], lr: float) -> "Adam":
        opt = Adam(lr=lr)
        opt.step_count = int(arrays["adam.step"][0])
        for k, a in arrays.items():
            if k.startswith("adam.m."):
                opt.m[k[len("adam.m."):]] = a.copy()
            elif k.startswith("adam.v."):
                opt.v[k[len("adam.v."):]] = a.copy()
        return opt
