"""Schedulers: GOSH, GOSH*, their GOBI-style ablations and a random baseline.

Every scheduler follows the same two-call protocol per interval::

    decision = scheduler.schedule(state)   # before the interval runs
    scheduler.observe(objective)           # realized objective afterwards

Learning schedulers store ``(x_t, O_t)`` pairs from ``observe`` and fine-tune
their surrogate on them at the next ``schedule`` call.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .optim import (HessianState, OptimizerConfig, arrival_order, discretize,
                    first_order_minimize, second_order_minimize)
from .sim import ClusterState, ConfigurationError, IntervalMetrics
from .surrogate import ExplorationState, FcnSurrogate, SurrogateBundle

log = logging.getLogger(__name__)

# kind -> (surrogate model, optimizer order)
BASE_KINDS = {
    "GOSH": ("npn", 2),
    "HGOBI": ("npn", 1),
    "SGOBI": ("fcn", 2),
    "GOBI": ("fcn", 1),
}
KINDS = (*BASE_KINDS, *(k + "*" for k in BASE_KINDS), "RANDOM")


@dataclass(frozen=True)
class ObjectiveSpec:
    alpha: float = 0.5
    beta: float = 0.5
    r_ref: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ConfigurationError("objective weights must lie in [0, 1]")
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise ConfigurationError("objective weights must sum to 1")


def objective_score(metrics: IntervalMetrics, spec: ObjectiveSpec = ObjectiveSpec()) -> float:
    """Weighted sum of normalized energy and normalized response time."""
    art = metrics.art_norm
    if spec.r_ref is not None:
        art = min(metrics.art / spec.r_ref, 1.0) if spec.r_ref > 0 else 0.0
    return spec.alpha * metrics.aec + spec.beta * art


def initialize_decision(t, previous, state: ClusterState, rng, previous_ids=None) -> np.ndarray:
    """Starting point for optimization.

    At ``t == 0`` (or without a previous decision) active rows are uniform in
    [0, 1].  Afterwards the previous decision is reused; rows whose task left
    are zeroed and rows holding a new task are randomized.
    """
    M, N = state.n_slots, state.n_hosts
    out = np.zeros((M, N))
    if t == 0 or previous is None:
        for m in range(M):
            if state.active[m]:
                out[m] = rng.random(N)
        return out
    prev = np.asarray(previous, dtype=float)
    ids = state.slot_task_ids or [None] * M
    prev_ids = previous_ids if previous_ids is not None else ids
    for m in range(M):
        if not state.active[m]:
            continue
        if prev_ids[m] is not None and prev_ids[m] == ids[m]:
            out[m] = prev[m]
        else:
            out[m] = rng.random(N)
    return out


def active_mask(state: ClusterState) -> np.ndarray:
    return np.repeat(state.active.astype(float)[:, None], state.n_hosts, axis=1)


class Scheduler:
    kind = "BASE"

    def __init__(self):
        self.last_iterations = 0
        self.last_time = 0.0

    def schedule(self, state: ClusterState) -> np.ndarray:
        raise NotImplementedError

    def observe(self, objective: float):
        pass


class RandomScheduler(Scheduler):
    """Uniformly random host among those with RAM headroom."""

    kind = "RANDOM"

    def __init__(self, seed=0):
        super().__init__()
        self.rng = np.random.default_rng(seed)

    def schedule(self, state):
        start = time.perf_counter()
        D = np.zeros((state.n_slots, state.n_hosts))
        free = state.host_ram.astype(float).copy()
        for m in arrival_order(state):
            options = np.flatnonzero(free >= state.ram_demand[m])
            if options.size:
                n = options[self.rng.integers(options.size)]
                D[m, n] = 1.0
                free[n] -= state.ram_demand[m]
        self.last_iterations = 0
        self.last_time = time.perf_counter() - start
        return D


@dataclass
class _Pending:
    x: np.ndarray


class GradientScheduler(Scheduler):
    """Surrogate-driven scheduler for the non-starred kinds.

    ``kind`` selects the surrogate (NPN bundle with LCB, or a plain FCN) and
    the optimizer order: GOSH = NPN + second order, HGOBI = NPN + first
    order, SGOBI = FCN + second order, GOBI = FCN + first order.
    """

    def __init__(self, kind, surrogate, config: OptimizerConfig | None = None,
                 exploration: ExplorationState | None = None, seed=0, tune=True,
                 dynamic_k=True, allow_untrained=False, trained=True):
        super().__init__()
        if kind not in BASE_KINDS:
            raise ConfigurationError(f"unknown gradient scheduler kind {kind!r}")
        model, order = BASE_KINDS[kind]
        if model == "npn" and not isinstance(surrogate, SurrogateBundle):
            raise ConfigurationError(f"{kind} needs an NPN surrogate bundle")
        if model == "fcn" and not isinstance(surrogate, FcnSurrogate):
            raise ConfigurationError(f"{kind} needs an FCN surrogate")
        if not trained and not allow_untrained:
            raise ConfigurationError(f"{kind} requires trained checkpoints (or allow_untrained)")
        self.kind = kind
        self.order = order
        self.surrogate = surrogate
        self.config = config or OptimizerConfig()
        self.hessian = HessianState(self.config.momentum)
        self.exploration = exploration or ExplorationState()
        self.dynamic_k = dynamic_k
        self.rng = np.random.default_rng(seed)
        self.do_tune = tune
        self.t = 0
        self.prev_decision = None
        self.prev_ids = None
        self.records: list = []
        self.pending: _Pending | None = None
        self.k_history: list = []

    def minimize(self, state: ClusterState, context: np.ndarray):
        """Optimize the placement for ``state`` with fixed surrogate context."""
        phi0 = initialize_decision(self.t, self.prev_decision, state, self.rng, self.prev_ids)
        if not state.active.any():
            return np.zeros_like(phi0), 0
        fn = self.surrogate.objective(context, self.exploration.k)
        mask = active_mask(state).reshape(1, -1)
        x0 = phi0.reshape(1, -1)
        if self.order == 2:
            res = second_order_minimize(fn, x0, self.config, self.hessian, self.rng, mask)
        else:
            res = first_order_minimize(fn, x0, self.config, mask)
        return discretize(res.x, state), res.iterations

    def _finish(self, state, decision, x_t):
        self.prev_decision = decision
        self.prev_ids = list(state.slot_task_ids)
        self.pending = _Pending(x_t)
        self.t += 1

    def _tune(self, x_t):
        if not self.do_tune:
            return
        before = self.exploration
        updated = self.surrogate.tune(self.exploration, self.records, x_t, self.rng)
        if not self.dynamic_k:
            updated = replace(updated, k=before.k)
        self.exploration = updated
        self.k_history.append(self.exploration.k)

    def schedule(self, state: ClusterState) -> np.ndarray:
        start = time.perf_counter()
        context = self.surrogate.context(state.vector())
        decision, iters = self.minimize(state, context)
        x_t = self.surrogate.build_input(state.vector(), decision)
        self._tune(x_t)
        self._finish(state, decision, x_t)
        self.last_iterations = iters
        self.last_time = time.perf_counter() - start
        return decision

    def observe(self, objective: float):
        if self.pending is not None:
            self.records.append((self.pending.x, float(objective)))
            self.pending = None


class CoSimScheduler(GradientScheduler):
    """Starred variant: inner scheduler + LSTM + co-simulation feature.

    ``cosim(decision, predicted_state_vector) -> objective`` evaluates a
    decision on a copy of the environment; it is supplied by the runner.
    """

    def __init__(self, kind, surrogate, inner: GradientScheduler, lstm, cosim, history=8,
                 **kwargs):
        base = kind.rstrip("*")
        if lstm is None or cosim is None:
            raise ConfigurationError(f"{kind} needs an LSTM checkpoint and a co-simulator")
        if surrogate.extra_dim != 1:
            raise ConfigurationError(f"{kind} surrogate must take the simulated objective input")
        super().__init__(base, surrogate, **kwargs)
        self.kind = kind
        self.inner = inner
        self.lstm = lstm
        self.cosim = cosim
        self.history_len = int(history)
        self.history: list = []
        self.last_simulated = None

    def predict_objective(self, state: ClusterState):
        self.history.append(state.vector())
        self.history = self.history[-self.history_len:]
        predicted = self.lstm.predict(np.array(self.history))
        context = self.inner.surrogate.context(state.vector())
        candidate, _ = self.inner.minimize(state, context)
        self.inner._finish(state, candidate, self.inner.surrogate.build_input(state.vector(), candidate))
        return float(self.cosim(candidate, predicted))

    def schedule(self, state: ClusterState) -> np.ndarray:
        start = time.perf_counter()
        o_bar = self.predict_objective(state)
        self.last_simulated = o_bar
        context = self.surrogate.context(state.vector(), o_bar)
        decision, iters = self.minimize(state, context)
        x_t = self.surrogate.build_input(state.vector(), decision, o_bar)
        self._tune(x_t)
        self._finish(state, decision, x_t)
        self.last_iterations = iters
        self.last_time = time.perf_counter() - start
        return decision
