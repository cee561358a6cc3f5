"""Interval-based fog simulator: hosts, tasks, placement, execution and QoS.

Time advances in fixed scheduling intervals.  Inside an interval each host
runs a small event loop: tasks share the host's IPS proportionally when their
summed demand exceeds capacity, migrated tasks stall for their transfer time,
and completions release capacity to the remaining co-located tasks.
"""
from __future__ import annotations

import copy
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

WAITING = -1
N_FEATURES = 4  # ips, ram, disk, bw


class ConfigurationError(ValueError):
    """Inconsistent configuration or mismatched dimensions."""


class ContractError(ValueError):
    """An argument violates an operation's documented precondition."""


@dataclass
class HostSpec:
    id: int
    ips_capacity: float
    ram_capacity: float
    disk_capacity: float
    bw_capacity: float
    power_profile: list
    latency_class: str = "edge"

    def __post_init__(self):
        caps = (self.ips_capacity, self.ram_capacity, self.disk_capacity, self.bw_capacity)
        if min(caps) <= 0:
            raise ConfigurationError(f"host {self.id}: capacities must be positive")
        prof = np.asarray(self.power_profile, dtype=float)
        if prof.ndim != 2 or prof.shape[1] != 2 or len(prof) < 2:
            raise ConfigurationError(f"host {self.id}: power_profile must be (util, watts) pairs")
        if np.any(np.diff(prof[:, 0]) <= 0):
            raise ConfigurationError(f"host {self.id}: power_profile utilizations must increase")
        if prof[0, 0] != 0.0 or prof[-1, 0] != 1.0:
            raise ConfigurationError(f"host {self.id}: power_profile must cover 0 and 1")
        if np.any(np.diff(prof[:, 1]) < 0):
            raise ConfigurationError(f"host {self.id}: watts must not decrease with utilization")
        if self.latency_class not in ("edge", "cloud"):
            raise ConfigurationError(f"host {self.id}: latency_class must be edge or cloud")
        self.power_profile = [tuple(map(float, p)) for p in prof]
        self._util = prof[:, 0]
        self._watts = prof[:, 1]

    def power(self, utilization):
        """Watts drawn at ``utilization`` (piecewise-linear)."""
        return np.interp(utilization, self._util, self._watts)

    @property
    def idle_watts(self):
        return float(self._watts[0])

    @property
    def peak_watts(self):
        return float(self._watts[-1])

    @property
    def capacity(self):
        return np.array([self.ips_capacity, self.ram_capacity, self.disk_capacity, self.bw_capacity])


@dataclass(eq=False)
class Task:
    id: int
    app_class: str
    total_instructions: float
    demands: np.ndarray  # (T, 4): ips, ram, disk, bw per interval of life
    container_size: float
    created_at: int
    started_at: int | None = None
    finished_at: int | None = None
    executed_instructions: float = 0.0
    host: int = WAITING
    response_time: float | None = None

    def __post_init__(self):
        self.demands = np.atleast_2d(np.asarray(self.demands, dtype=float))
        if self.demands.shape[1] != N_FEATURES or len(self.demands) == 0:
            raise ContractError(f"task {self.id}: demand trace must have rows of (ips, ram, disk, bw)")
        if np.any(self.demands < 0):
            raise ContractError(f"task {self.id}: demands must be non-negative")

    def demand(self, t) -> np.ndarray:
        return self.demands[(t - self.created_at) % len(self.demands)]

    @property
    def remaining(self):
        return self.total_instructions - self.executed_instructions

    @property
    def done(self):
        return self.finished_at is not None


@dataclass
class ClusterState:
    """Snapshot at the start of interval ``t``, all features scaled to [0, 1]."""

    t: int
    host_features: np.ndarray  # (N, 4) utilization of each host by its current tasks
    task_features: np.ndarray  # (M, 4) per-slot demand, zero for empty slots
    active: np.ndarray  # (M,) bool
    placement: np.ndarray  # (M,) host index or WAITING
    ram_demand: np.ndarray  # (M,) MB, used for feasibility checks
    host_ram: np.ndarray  # (N,) MB
    slot_task_ids: list = field(default_factory=list)

    @property
    def n_hosts(self):
        return self.host_features.shape[0]

    @property
    def n_slots(self):
        return self.task_features.shape[0]

    @property
    def dim(self):
        return N_FEATURES * (self.n_hosts + self.n_slots)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.host_features.ravel(), self.task_features.ravel()])

    def placement_matrix(self) -> np.ndarray:
        D = np.zeros((self.n_slots, self.n_hosts))
        for m, h in enumerate(self.placement):
            if self.active[m] and h != WAITING:
                D[m, h] = 1.0
        return D


def state_dim(n_hosts, n_slots):
    return N_FEATURES * (n_hosts + n_slots)


@dataclass
class IntervalMetrics:
    interval: int
    energy_kwh: float
    aec: float
    art: float
    art_norm: float
    response_times: list
    completed_classes: list
    sla_violations: int
    migration_time: float
    wait_time: float
    fairness: float
    n_active: int
    n_completed: int
    n_migrations: int

    CSV_FIELDS = ("interval", "energy_kwh", "aec", "art", "art_norm", "n_completed",
                  "sla_violations", "migration_time", "wait_time", "fairness", "n_active",
                  "n_migrations")

    def row(self):
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


# ---------------------------------------------------------------- metrics


def jain_index(values) -> float:
    """Jain's fairness index; 1.0 for an empty or all-zero allocation."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return 1.0
    denom = x.size * float(np.sum(x * x))
    if denom == 0.0:
        return 1.0
    return float(np.sum(x)) ** 2 / denom


def compute_metrics(hosts, interval_length, *, host_energy_joules, completed=(), task_ips=(),
                    t=0, r_ref=1.0, deadlines=None, migration_time=0.0, wait_time=0.0,
                    n_migrations=0) -> IntervalMetrics:
    """Aggregate one interval's raw measurements into :class:`IntervalMetrics`.

    ``completed`` holds tasks that finished this interval (with
    ``response_time`` set); ``task_ips`` the mean IPS each task in the
    system received, zero for waiting tasks.
    """
    if not hosts:
        raise ConfigurationError("at least one host is required")
    joules = float(np.sum(host_energy_joules))
    peak = sum(h.peak_watts for h in hosts) * interval_length
    aec = min(max(joules / peak, 0.0), 1.0)
    rts = [task.response_time for task in completed]
    art = float(np.mean(rts)) if rts else 0.0
    art_norm = min(art / r_ref, 1.0) if r_ref > 0 else 0.0
    deadlines = deadlines or {}
    violations = sum(
        1 for task in completed
        if task.app_class in deadlines and task.response_time > deadlines[task.app_class]
    )
    return IntervalMetrics(
        interval=t, energy_kwh=joules / 3.6e6, aec=aec, art=art, art_norm=art_norm,
        response_times=rts, completed_classes=[task.app_class for task in completed],
        sla_violations=violations, migration_time=float(migration_time),
        wait_time=float(wait_time), fairness=jain_index(task_ips), n_active=len(task_ips),
        n_completed=len(rts), n_migrations=int(n_migrations),
    )


def nearest_rank_percentile(values, q=95) -> float:
    xs = sorted(values)
    if not xs:
        raise ValueError("percentile of an empty sample")
    rank = max(1, math.ceil(q * len(xs) / 100))
    return float(xs[rank - 1])


def compute_sla_deadlines(samples, min_samples=20, q=95) -> dict:
    """Per-class nearest-rank 95th percentile of reference response times.

    ``samples`` is an iterable of ``(app_class, response_time)`` pairs.
    """
    by_class: dict[str, list] = {}
    for app_class, rt in samples:
        by_class.setdefault(app_class, []).append(rt)
    out = {}
    for app_class in sorted(by_class):
        rts = by_class[app_class]
        if len(rts) < min_samples:
            raise ValueError(
                f"class {app_class!r} has {len(rts)} reference samples, need {min_samples}"
            )
        out[app_class] = nearest_rank_percentile(rts, q)
    return out


# ---------------------------------------------------------------- simulator


def migration_seconds(task: Task, src: HostSpec, dst: HostSpec) -> float:
    seconds = task.container_size / min(src.bw_capacity, dst.bw_capacity)
    if src.latency_class != dst.latency_class:
        seconds *= 2.0
    return seconds


class Simulator:
    """Exclusive-use simulator of ``hosts`` with ``n_slots`` task slots."""

    def __init__(self, hosts, n_slots, interval=300.0, r_ref=1.0, deadlines=None):
        if interval <= 0:
            raise ConfigurationError("interval length must be positive")
        if n_slots < 1 or not hosts:
            raise ConfigurationError("need at least one host and one task slot")
        self.hosts = list(hosts)
        self.n_slots = int(n_slots)
        self.interval = float(interval)
        self.r_ref = float(r_ref)
        self.deadlines = dict(deadlines or {})
        self.t = 0
        self.slots: list[Task | None] = [None] * self.n_slots
        self.backlog: deque[Task] = deque()
        self.completed: list[Task] = []
        caps = np.array([h.capacity for h in self.hosts])
        self._scale = caps.max(axis=0)

    @property
    def n_hosts(self):
        return len(self.hosts)

    @property
    def state_dim(self):
        return state_dim(self.n_hosts, self.n_slots)

    def clone(self):
        return copy.deepcopy(self)

    def admit(self, tasks):
        """Queue new arrivals and move queued tasks into free slots (FIFO)."""
        self.backlog.extend(tasks)
        for m in range(self.n_slots):
            if not self.backlog:
                break
            if self.slots[m] is None:
                self.slots[m] = self.backlog.popleft()

    def active_tasks(self):
        return [(m, task) for m, task in enumerate(self.slots) if task is not None]

    def state(self) -> ClusterState:
        N, M = self.n_hosts, self.n_slots
        caps = np.array([h.capacity for h in self.hosts])
        used = np.zeros((N, N_FEATURES))
        task_feat = np.zeros((M, N_FEATURES))
        active = np.zeros(M, dtype=bool)
        placement = np.full(M, WAITING)
        ram = np.zeros(M)
        ids = [None] * M
        for m, task in self.active_tasks():
            d = task.demand(self.t)
            task_feat[m] = np.clip(d / self._scale, 0.0, 1.0)
            active[m] = True
            placement[m] = task.host
            ram[m] = d[1]
            ids[m] = task.id
            if task.host != WAITING:
                used[task.host] += d
        return ClusterState(
            t=self.t, host_features=np.clip(used / caps, 0.0, 1.0), task_features=task_feat,
            active=active, placement=placement, ram_demand=ram,
            host_ram=caps[:, 1].copy(), slot_task_ids=ids,
        )

    def apply_state_vector(self, vector):
        """Overwrite current task demands with a (predicted) state vector."""
        vector = np.asarray(vector, dtype=float)
        if vector.size != self.state_dim:
            raise ConfigurationError(f"state vector has {vector.size} entries, expected {self.state_dim}")
        task_feat = vector[N_FEATURES * self.n_hosts:].reshape(self.n_slots, N_FEATURES)
        for m, task in self.active_tasks():
            row = np.clip(task_feat[m], 0.0, 1.0) * self._scale
            idx = (self.t - task.created_at) % len(task.demands)
            task.demands = task.demands.copy()
            task.demands[idx] = row

    def _check_decision(self, decision):
        D = np.asarray(decision, dtype=float)
        if D.shape != (self.n_slots, self.n_hosts):
            raise ConfigurationError(
                f"decision shape {D.shape} does not match ({self.n_slots}, {self.n_hosts})"
            )
        for m, task in self.active_tasks():
            row = D[m]
            if not (np.all((row == 0) | (row == 1)) and row.sum() <= 1):
                raise ContractError(f"decision row {m} (task {task.id}) is not one-hot")
        return D

    def step(self, decision) -> IntervalMetrics:
        """Apply ``decision`` (slots x hosts, one-hot rows), run one interval."""
        D = self._check_decision(decision)
        delta = self.interval
        t = self.t
        ram_used = np.zeros(self.n_hosts)
        stall: dict[int, float] = {}
        migration_total, n_migrations = 0.0, 0
        order = sorted(self.active_tasks(), key=lambda mt: (mt[1].created_at, mt[1].id))
        for m, task in order:
            target = int(np.argmax(D[m])) if D[m].sum() > 0 else WAITING
            ram = task.demand(t)[1]
            if target != WAITING and ram_used[target] + ram > self.hosts[target].ram_capacity:
                target = WAITING
            prev = task.host
            if target != WAITING:
                ram_used[target] += ram
                if prev != WAITING and prev != target:
                    sec = min(migration_seconds(task, self.hosts[prev], self.hosts[target]), delta)
                    stall[task.id] = sec
                    migration_total += sec
                    n_migrations += 1
                if task.started_at is None:
                    task.started_at = t
            task.host = target

        host_energy = np.zeros(self.n_hosts)
        finished: list[Task] = []
        active_time: dict[int, float] = {}
        executed: dict[int, float] = {}
        for n, host in enumerate(self.hosts):
            on_host = [task for _, task in order if task.host == n]
            host_energy[n], done = self._run_host(host, on_host, t, stall, active_time, executed)
            finished.extend(done)

        wait = delta * (sum(1 for _, task in order if task.host == WAITING) + len(self.backlog))
        task_ips = [
            executed.get(task.id, 0.0) / active_time[task.id] if active_time.get(task.id, 0) > 0 else 0.0
            for _, task in order
        ]
        for task in finished:
            self.slots[self.slots.index(task)] = None
            task.host = WAITING
        self.completed.extend(finished)
        metrics = compute_metrics(
            self.hosts, delta, host_energy_joules=host_energy, completed=finished,
            task_ips=task_ips, t=t, r_ref=self.r_ref, deadlines=self.deadlines,
            migration_time=migration_total, wait_time=wait, n_migrations=n_migrations,
        )
        self.t += 1
        return metrics

    def _run_host(self, host, tasks, t, stall, active_time, executed):
        delta = self.interval
        start = t * delta
        demand = {task.id: task.demand(t)[0] for task in tasks}
        begin = {task.id: stall.get(task.id, 0.0) for task in tasks}
        running = [task for task in tasks]
        tau, energy, done = 0.0, 0.0, []
        while tau < delta - 1e-12:
            live = [task for task in running if begin[task.id] <= tau + 1e-12 and demand[task.id] > 0]
            total = sum(demand[task.id] for task in live)
            scale = min(1.0, host.ips_capacity / total) if total > 0 else 0.0
            rate = {task.id: demand[task.id] * scale for task in live}
            nxt = delta
            for task in running:
                if begin[task.id] > tau + 1e-12:
                    nxt = min(nxt, begin[task.id])
            for task in live:
                nxt = min(nxt, tau + task.remaining / rate[task.id])
            dt = max(nxt - tau, 0.0)
            util = min(sum(rate.values()) / host.ips_capacity, 1.0)
            energy += float(host.power(util)) * dt
            for task in live:
                work = rate[task.id] * dt
                task.executed_instructions = min(task.executed_instructions + work, task.total_instructions)
                executed[task.id] = executed.get(task.id, 0.0) + work
                active_time[task.id] = active_time.get(task.id, 0.0) + dt
                if task.remaining <= 1e-9 * max(task.total_instructions, 1.0):
                    task.executed_instructions = task.total_instructions
                    task.finished_at = t
                    task.response_time = start + nxt - task.created_at * delta
                    done.append(task)
            running = [task for task in running if not task.done]
            tau = nxt
            if not running:
                if tau < delta:
                    energy += host.idle_watts * (delta - tau)
                break
        return energy, done


# ---------------------------------------------------------------- workloads


APP_CLASSES = {
    # class name: range of nominal lifetime in intervals at full demand
    "yolo": (3.0, 8.0),
    "pocketsphinx": (2.0, 5.0),
    "aeneas": (1.0, 3.0),
}


def synthetic_trace(rng, regime, length=48):
    """Demand trace (length, 4) in absolute units: IPS, MB, MB, MB/s."""
    if regime == "sequential":
        level = rng.uniform(1500.0, 3500.0)
        ips = level * (1.0 + 0.05 * rng.standard_normal(length))
        ram = np.full(length, rng.uniform(300.0, 1500.0)) * (1.0 + 0.02 * rng.standard_normal(length))
        disk = np.full(length, rng.uniform(200.0, 1000.0))
        bw = np.full(length, rng.uniform(5.0, 20.0))
    elif regime == "random":
        level = rng.uniform(1000.0, 4000.0)
        ips = level * rng.uniform(0.25, 1.75, length)
        ram = rng.uniform(100.0, 2500.0, length)
        disk = rng.uniform(100.0, 1500.0, length)
        bw = rng.uniform(1.0, 30.0, length)
    else:
        raise ValueError(f"unknown trace regime {regime!r}")
    return np.clip(np.column_stack([ips, ram, disk, bw]), 0.0, None)


def load_trace_dir(path):
    """Load every ``*.csv`` in ``path`` as an (intervals, 4) demand trace."""
    from pathlib import Path

    files = sorted(Path(path).glob("*.csv"))
    if not files:
        raise IOError(f"no trace CSV files found in {path}")
    traces = []
    for f in files:
        try:
            arr = np.genfromtxt(f, delimiter=",", dtype=float)
        except Exception as exc:  # pragma: no cover - numpy error types vary
            raise IOError(f"{f}: unreadable trace ({exc})") from exc
        arr = np.atleast_2d(arr)
        if arr.size and np.all(np.isnan(arr[0])):
            arr = arr[1:]  # header line
        if arr.ndim != 2 or arr.shape[1] != N_FEATURES or len(arr) == 0 or np.isnan(arr).any():
            raise IOError(f"{f}: expected rows of ips,ram,disk,bw")
        traces.append(arr)
    return traces


class WorkloadGenerator:
    """Seeded Poisson arrivals with demand traces drawn from a pool.

    ``regimes`` is a list of ``(first_interval, source)`` pairs where source
    is ``"sequential"``, ``"random"`` or a CSV trace directory.
    """

    def __init__(self, seed, lam, regimes=((0, "random"),), interval=300.0, pool_size=64,
                 trace_length=48, app_classes=None, first_id=0):
        if lam <= 0:
            raise ConfigurationError("arrival rate must be positive")
        self.rng = np.random.default_rng(seed)
        self.lam = float(lam)
        self.interval = float(interval)
        self.app_classes = dict(app_classes or APP_CLASSES)
        self.regimes = sorted((int(s), src) for s, src in regimes)
        self.pools = {}
        pool_rng = np.random.default_rng([seed, 7])
        for _, src in self.regimes:
            if src in self.pools:
                continue
            if src in ("sequential", "random"):
                self.pools[src] = [synthetic_trace(pool_rng, src, trace_length) for _ in range(pool_size)]
            else:
                self.pools[src] = load_trace_dir(src)
        self.next_id = first_id

    def source_at(self, t):
        src = self.regimes[0][1]
        for start, s in self.regimes:
            if t >= start:
                src = s
        return src

    def tasks_for_interval(self, t):
        pool = self.pools[self.source_at(t)]
        names = sorted(self.app_classes)
        out = []
        for _ in range(self.rng.poisson(self.lam)):
            trace = pool[self.rng.integers(len(pool))]
            app = names[self.rng.integers(len(names))]
            lo, hi = self.app_classes[app]
            life = self.rng.uniform(lo, hi)
            total = float(trace[:, 0].mean()) * self.interval * life
            out.append(Task(
                id=self.next_id, app_class=app, total_instructions=total, demands=trace.copy(),
                container_size=float(self.rng.uniform(100.0, 600.0)), created_at=t,
            ))
            self.next_id += 1
        return out


def generate_workload(rng_seed, lam, trace_source="random", intervals=100, **kwargs):
    """Return a list (one entry per interval) of newly arriving tasks."""
    regimes = trace_source if isinstance(trace_source, (list, tuple)) else [(0, trace_source)]
    gen = WorkloadGenerator(rng_seed, lam, regimes=regimes, **kwargs)
    return [gen.tasks_for_interval(t) for t in range(intervals)]


# ---------------------------------------------------------------- host profiles


def _profile(idle, peak, shape=(0.0, 0.35, 0.6, 0.8, 1.0)):
    # concave-ish curve in the style of published server power tables
    fr = [0.0, 0.45, 0.70, 0.86, 1.0]
    return [(u, idle + f * (peak - idle)) for u, f in zip(shape, fr)]


HOST_TYPES = {
    "small": dict(ips_capacity=4000.0, ram_capacity=4096.0, disk_capacity=8192.0,
                  bw_capacity=100.0, power_profile=_profile(45.0, 130.0)),
    "medium": dict(ips_capacity=8000.0, ram_capacity=16384.0, disk_capacity=16384.0,
                   bw_capacity=100.0, power_profile=_profile(70.0, 200.0)),
    "large": dict(ips_capacity=16000.0, ram_capacity=32768.0, disk_capacity=32768.0,
                  bw_capacity=200.0, power_profile=_profile(110.0, 330.0)),
}


def make_hosts(groups):
    """Build hosts from ``[(type_or_dict, count, latency_class), ...]``."""
    hosts = []
    for spec, count, latency in groups:
        params = dict(HOST_TYPES[spec]) if isinstance(spec, str) else dict(spec)
        for _ in range(int(count)):
            hosts.append(HostSpec(id=len(hosts), latency_class=latency, **params))
    return hosts


def desk_hosts(scale=1):
    """10-host desk profile (4 small, 4 medium, 2 large); ``scale`` multiplies counts."""
    return make_hosts([
        ("small", 4 * scale, "edge"),
        ("medium", 2 * scale, "edge"),
        ("medium", 2 * scale, "cloud"),
        ("large", 2 * scale, "cloud"),
    ])
