"""Adam and SGD with per-group learning-rate multipliers and epoch drops.

Training objectives in this package are maximization targets; ``Adam.step``
therefore moves parameters *along* the supplied gradients.  ``sgd_step`` is
the plain descent update used by the stationary-distribution experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "GroupTag",
    "ParamGroupPolicy",
    "AdamState",
    "Adam",
    "sgd_step",
    "max_epoch_displacement",
]


class GroupTag(Enum):
    MEAN_LIKE = "mean"
    VARIANCE_LIKE = "variance"


@dataclass(frozen=True)
class ParamGroupPolicy:
    """Base learning rate, variance-group multiplier, and (epoch, factor) drops.

    Each drop multiplies the learning rate by its factor from that epoch on;
    the effective rate is a pure function of (epoch, group).
    """

    base_lr: float
    variance_multiplier: float = 10.0
    schedule: tuple = ()

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("ParamGroupPolicy: base_lr must be positive")
        if self.variance_multiplier < 1:
            raise ValueError("ParamGroupPolicy: variance multiplier must be >= 1")
        sched = tuple((int(e), float(f)) for e, f in self.schedule)
        for _, f in sched:
            if not 0 < f <= 1:
                raise ValueError("ParamGroupPolicy: schedule factors must be in (0, 1]")
        object.__setattr__(self, "schedule", sched)

    def schedule_factor(self, epoch: int) -> float:
        factor = 1.0
        for drop_epoch, drop_factor in self.schedule:
            if epoch >= drop_epoch:
                factor *= drop_factor
        return factor

    def effective_lr(self, epoch: int, tag: GroupTag) -> float:
        lr = self.base_lr * self.schedule_factor(epoch)
        if tag is GroupTag.VARIANCE_LIKE:
            lr *= self.variance_multiplier
        return lr


@dataclass
class AdamState:
    """First/second moment accumulators and step count for one array."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0


class Adam:
    """Standard bias-corrected Adam over tagged parameter arrays (ascent)."""

    def __init__(self, tagged_params, policy: ParamGroupPolicy,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [t for t, _ in tagged_params]
        self.tags = [tag for _, tag in tagged_params]
        self.policy = policy
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.state = [
            AdamState(np.zeros(p.data.shape), np.zeros(p.data.shape)) for p in self.params
        ]

    def step(self, grads, epoch: int = 0) -> None:
        """One ascent update in place; ``grads`` align with the tagged params."""
        if len(grads) != len(self.params):
            raise ValueError(f"Adam.step: expected {len(self.params)} gradients")
        for p, tag, st, g in zip(self.params, self.tags, self.state, grads):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise ValueError(
                    f"Adam.step: gradient shape {g.shape} does not match {p.data.shape}"
                )
            st.t += 1
            st.m = self.beta1 * st.m + (1.0 - self.beta1) * g
            st.v = self.beta2 * st.v + (1.0 - self.beta2) * np.square(g)
            m_hat = st.m / (1.0 - self.beta1 ** st.t)
            v_hat = st.v / (1.0 - self.beta2 ** st.t)
            lr = self.policy.effective_lr(epoch, tag)
            p.data += lr * m_hat / (np.sqrt(v_hat) + self.eps)


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """Plain descent update theta - lr * g (no momentum)."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"sgd_step: shapes {params.shape} and {grads.shape} differ")
    return params - lr * grads


def max_epoch_displacement(lr: float, dataset_size: int, batch_size: int) -> float:
    """Upper bound on per-epoch Adam movement: steps-per-epoch times lr.

    Adam updates satisfy |delta| <= lr (bias correction aside), so one epoch of
    dataset_size/batch_size steps moves any coordinate at most this far.
    """
    if lr <= 0 or dataset_size <= 0 or batch_size <= 0:
        raise ValueError("max_epoch_displacement: arguments must be positive")
    return (dataset_size / batch_size) * lr
