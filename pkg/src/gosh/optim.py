"""Gradient-based optimization of the relaxed placement matrix.

The second-order path preconditions each coordinate of the gradient by a
moving average of Hutchinson estimates of the Hessian diagonal.  The
first-order path is plain gradient descent with the same stopping rule.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sim import WAITING, ClusterState


@dataclass
class OptimizerConfig:
    lr: float = 0.1
    eps: float = 1e-3
    max_iter: int = 50
    momentum: float = 0.9
    hutchinson_samples: int = 1
    igr: float = 1e-3
    h_min: float = 1e-4
    damping: str = "abs"  # "signed" keeps negative curvature, which turns those steps uphill

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("learning rate and convergence threshold must be positive")
        if self.max_iter < 1 or self.hutchinson_samples < 1:
            raise ValueError("max_iter and hutchinson_samples must be at least 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.h_min <= 0:
            raise ValueError("h_min must be positive")
        if self.damping not in ("signed", "abs"):
            raise ValueError(f"unknown damping mode {self.damping!r}")


class HessianState:
    """Iteration-wise moving average of the Hessian diagonal."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.diag: np.ndarray | None = None

    @property
    def initialized(self):
        return self.diag is not None

    def reset(self):
        self.diag = None

    def update(self, estimate):
        estimate = np.asarray(estimate, dtype=float)
        if self.diag is None or self.diag.shape != estimate.shape:
            self.diag = estimate.copy()
        else:
            self.diag = self.momentum * self.diag + (1.0 - self.momentum) * estimate
        return self.diag

    def damped(self, h_min, mode="abs"):
        """Diagonal with magnitudes floored at ``h_min``; ``mode="signed"`` keeps
        the sign of each entry (zero counts as positive)."""
        mag = np.maximum(np.abs(self.diag), h_min)
        if mode == "abs":
            return mag
        return np.where(self.diag < 0, -mag, mag)


class MinimizeResult(NamedTuple):
    x: np.ndarray
    iterations: int
    trajectory: list  # (iteration, objective, step max-norm)


def rademacher(rng, shape):
    return rng.integers(0, 2, size=shape) * 2.0 - 1.0


def _hutchinson(g: Tensor, x: Tensor, m, rng):
    est = np.zeros(x.shape)
    for _ in range(m):
        z = rademacher(rng, x.shape)
        hz = ad.grad((g * Tensor(z)).sum(), x, create_graph=False).data
        est += z * hz
    return est / m


def hutchinson_diag(objective, x, m=1, rng=None) -> np.ndarray:
    """Estimate diag(H) of ``objective`` at ``x`` as the mean of z * (H z)."""
    rng = rng if rng is not None else np.random.default_rng()
    xt = Tensor(np.asarray(x, dtype=float), requires_grad=True)
    g = ad.grad(objective(xt), xt, create_graph=True)
    est = _hutchinson(g, xt, m, rng)
    if not np.all(np.isfinite(est)):
        raise FloatingPointError("non-finite Hessian-diagonal estimate")
    return est


def exact_hessian_diag(objective, x) -> np.ndarray:
    """Diagonal via one Hessian-vector product per basis vector (test oracle)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = 1.0
        out[i] = ad.hvp(objective, x, e.reshape(x.shape)).ravel()[i]
    return out.reshape(x.shape)


def _objective_and_grad(objective, x, create_graph):
    xt = Tensor(x, requires_grad=True)
    val = objective(xt)
    g = ad.grad(val, xt, create_graph=create_graph)
    return xt, val.item(), g


def second_order_minimize(objective, x0, config: OptimizerConfig, hessian_state=None,
                          rng=None, mask=None) -> MinimizeResult:
    """Minimize ``objective`` with diagonally preconditioned Newton steps.

    ``mask`` (same shape as ``x0``) marks the free coordinates; the rest stay
    fixed.  With ``config.igr`` > 0 the descent direction also includes the
    gradient of ``igr * ||grad||^2``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    hs = hessian_state if hessian_state is not None else HessianState(config.momentum)
    x = np.array(x0, dtype=float)
    mask = np.ones_like(x) if mask is None else np.asarray(mask, dtype=float)
    trajectory = []
    i = 0
    while i < config.max_iter:
        xt, value, g = _objective_and_grad(objective, x, create_graph=True)
        gm = g.data * mask
        if i == 0 and not np.any(gm):
            return MinimizeResult(x, 0, trajectory)
        direction = gm
        if config.igr > 0:
            pen = ad.grad((g * Tensor(gm)).sum(), xt).data
            direction = gm + 2.0 * config.igr * pen * mask
        hs.update(_hutchinson(g, xt, config.hutchinson_samples, rng))
        step = config.lr * direction / hs.damped(config.h_min, config.damping) * mask
        if not np.all(np.isfinite(step)):
            raise FloatingPointError("non-finite optimizer step")
        x = x - step
        i += 1
        size = float(np.max(np.abs(step))) if step.size else 0.0
        trajectory.append((i, value, size))
        if size <= config.eps:
            break
    return MinimizeResult(x, i, trajectory)


def first_order_minimize(objective, x0, config: OptimizerConfig, mask=None) -> MinimizeResult:
    """Plain gradient descent with the same stopping rule as the Newton path."""
    x = np.array(x0, dtype=float)
    mask = np.ones_like(x) if mask is None else np.asarray(mask, dtype=float)
    trajectory = []
    i = 0
    while i < config.max_iter:
        create = config.igr > 0
        xt, value, g = _objective_and_grad(objective, x, create_graph=create)
        gm = g.data * mask
        if i == 0 and not np.any(gm):
            return MinimizeResult(x, 0, trajectory)
        direction = gm
        if config.igr > 0:
            pen = ad.grad((g * Tensor(gm)).sum(), xt).data
            direction = gm + 2.0 * config.igr * pen * mask
        step = config.lr * direction
        if not np.all(np.isfinite(step)):
            raise FloatingPointError("non-finite optimizer step")
        x = x - step
        i += 1
        size = float(np.max(np.abs(step))) if step.size else 0.0
        trajectory.append((i, value, size))
        if size <= config.eps:
            break
    return MinimizeResult(x, i, trajectory)


def arrival_order(state: ClusterState):
    """Active slot indices, oldest task first (task ids grow with arrival)."""
    slots = [m for m in range(state.n_slots) if state.active[m]]
    return sorted(slots, key=lambda m: state.slot_task_ids[m] if state.slot_task_ids else m)


def discretize(phi, state: ClusterState) -> np.ndarray:
    """Convert a real placement matrix into a feasible one-hot decision.

    Tasks are served oldest first; each takes its highest-scoring host that
    still has RAM headroom (ties to the lower host index) or waits.
    """
    phi = np.asarray(phi, dtype=float).reshape(state.n_slots, state.n_hosts)
    out = np.zeros_like(phi)
    free = state.host_ram.astype(float).copy()
    for m in arrival_order(state):
        for n in np.argsort(-phi[m], kind="stable"):
            if state.ram_demand[m] <= free[n]:
                out[m, n] = 1.0
                free[n] -= state.ram_demand[m]
                break
    return out


def decision_hosts(decision) -> np.ndarray:
    """Host index per row of a one-hot decision (WAITING for empty rows)."""
    D = np.asarray(decision)
    return np.where(D.sum(axis=1) > 0, D.argmax(axis=1), WAITING)


def write_trajectory_csv(trajectory, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "step_norm"])
        for row in trajectory:
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])
