"""Adam over the per-Gaussian parameter arrays.

Moment buffers are keyed by field name and resized in lockstep with the
cloud when densification prunes or appends rows. The position group decays
exponentially; the rest are constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GaussianCloud
from .rasterize import ParamGrads

FIELDS = ("mu", "rot", "log_scale", "opacity_logit", "mirror_logit", "sh")


@dataclass(frozen=True)
class LearningRates:
    mu: float = 1.6e-4
    rot: float = 1e-3
    log_scale: float = 5e-3
    opacity_logit: float = 5e-2
    mirror_logit: float = 5e-2
    sh: float = 2.5e-3
    # position lr is multiplied by mu_final_mult^(t / mu_decay_steps)
    mu_final_mult: float = 0.01

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("mu", "rot", "log_scale", "opacity_logit", "mirror_logit",
                 "sh", "mu_final_mult")}


class Adam:
    def __init__(self, cloud: GaussianCloud, lrs: LearningRates,
                 mu_decay_steps: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-15):
        self.lrs = lrs
        self.mu_decay_steps = max(int(mu_decay_steps), 1)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {f: np.zeros_like(getattr(cloud, f)) for f in FIELDS}
        self.v = {f: np.zeros_like(getattr(cloud, f)) for f in FIELDS}

    def _lr(self, name: str, iteration: int) -> float:
        base = getattr(self.lrs, name)
        if name == "mu":
            frac = min(iteration / self.mu_decay_steps, 1.0)
            return base * self.lrs.mu_final_mult ** frac
        return base

    def step(self, cloud: GaussianCloud, grads: ParamGrads, iteration: int,
             frozen: frozenset = frozenset()) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in FIELDS:
            if name in frozen:
                continue
            g = getattr(grads, name)
            p = getattr(cloud, name)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self._lr(name, iteration) * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def resize(self, keep: np.ndarray, n_append: int) -> None:
        """Drop rows not in `keep`, then append zero-state rows."""
        for store in (self.m, self.v):
            for name in FIELDS:
                old = store[name][keep]
                pad = np.zeros((n_append,) + old.shape[1:])
                store[name] = np.concatenate([old, pad], axis=0)

    def reset(self, cloud: GaussianCloud) -> None:
        self.t = 0
        self.m = {f: np.zeros_like(getattr(cloud, f)) for f in FIELDS}
        self.v = {f: np.zeros_like(getattr(cloud, f)) for f in FIELDS}
