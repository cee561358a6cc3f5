"""End-to-end pipeline: datasets, training, experiment runs and comparisons.

All artifacts are plain files.  CSV outputs contain only simulated
quantities so re-running with the same config and seeds reproduces them
byte for byte; wall-clock timings go to JSON/JSONL files.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .nn import (FcnModel, LstmModel, NpnModel, aleatoric_loss, fit, load_model, mse_loss,
                 save_model)
from .optim import OptimizerConfig, decision_hosts
from .schedulers import (BASE_KINDS, KINDS, CoSimScheduler, GradientScheduler, ObjectiveSpec,
                         RandomScheduler, objective_score)
from .sim import (ConfigurationError, HOST_TYPES, HostSpec, IntervalMetrics, Simulator,
                  WorkloadGenerator, compute_sla_deadlines)
from .surrogate import (ExplorationState, FcnSurrogate, SurrogateBundle, epistemic_uncertainty,
                        load_surrogate)

log = logging.getLogger(__name__)

# the plain GOBI baseline has no gradient-norm penalty; every other kind keeps it
KIND_OPTIMIZER = {"GOBI": {"igr": 0.0}}


# ---------------------------------------------------------------- configuration


def load_config(source) -> dict:
    """Load a run config from a path, a bundled profile name or a dict."""
    if isinstance(source, dict):
        cfg = copy.deepcopy(source)
    else:
        path = Path(str(source))
        if not path.exists():
            name = str(source)
            res = resources.files("gosh").joinpath("configs", f"{name}.json")
            if not res.is_file():
                raise ConfigurationError(f"no config file or bundled profile named {source!r}")
            cfg = json.loads(res.read_text())
        else:
            cfg = json.loads(path.read_text())
    return validate_config(cfg)


def validate_config(cfg: dict) -> dict:
    cfg.setdefault("interval", 300.0)
    cfg.setdefault("lambda", 1.2)
    cfg.setdefault("intervals", 100)
    cfg.setdefault("truncate", 0.10)
    cfg.setdefault("seeds", [0, 1, 2, 3, 4])
    cfg.setdefault("workload", {})
    cfg["workload"].setdefault("regimes", [[0, "random"]])
    cfg.setdefault("objective", {"alpha": 0.5, "beta": 0.5})
    cfg.setdefault("scheduler", {})
    cfg.setdefault("training", {})
    if "hosts" not in cfg or not cfg["hosts"]:
        raise ConfigurationError("config needs a non-empty 'hosts' list")
    if "slots" not in cfg:
        raise ConfigurationError("config needs 'slots' (task-slot count)")
    if int(cfg["intervals"]) < 1:
        raise ConfigurationError("intervals must be >= 1")
    if not 0.0 <= float(cfg["truncate"]) < 1.0:
        raise ConfigurationError("truncate must lie in [0, 1)")
    if float(cfg["lambda"]) <= 0:
        raise ConfigurationError("lambda must be positive")
    ObjectiveSpec(cfg["objective"].get("alpha", 0.5), cfg["objective"].get("beta", 0.5))
    build_hosts(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def build_hosts(cfg):
    hosts = []
    for entry in cfg["hosts"]:
        entry = dict(entry)
        count = int(entry.pop("count", 1))
        htype = entry.pop("type", None)
        params = dict(HOST_TYPES[htype]) if htype else {}
        params.update(entry)
        for _ in range(count):
            hosts.append(HostSpec(id=len(hosts), **params))
    return hosts


def objective_spec(cfg) -> ObjectiveSpec:
    o = cfg["objective"]
    return ObjectiveSpec(o.get("alpha", 0.5), o.get("beta", 0.5))


def make_simulator(cfg) -> Simulator:
    return Simulator(build_hosts(cfg), cfg["slots"], interval=cfg["interval"],
                     r_ref=cfg.get("r_ref", 1.0), deadlines=cfg.get("deadlines"))


def make_workload(cfg, seed) -> WorkloadGenerator:
    w = cfg["workload"]
    return WorkloadGenerator(seed, cfg["lambda"], regimes=[tuple(r) for r in w["regimes"]],
                             interval=cfg["interval"], pool_size=w.get("pool_size", 64),
                             trace_length=w.get("trace_length", 48))


def optimizer_config(cfg, kind) -> OptimizerConfig:
    """Optimizer settings for ``kind``: defaults, then config overrides.

    ``scheduler.optimizer`` may hold shared keys plus per-kind sub-dicts,
    e.g. ``{"lr": 0.1, "GOBI": {"lr": 0.05}}``.
    """
    base = kind.rstrip("*")
    opts = cfg["scheduler"].get("optimizer", {})
    params = dict(KIND_OPTIMIZER.get(base, {}))
    params.update({k: v for k, v in opts.items() if not isinstance(v, dict)})
    params.update(opts.get(base, {}))
    return OptimizerConfig(**params)


# ---------------------------------------------------------------- simulation loop


class CoSimulator:
    """Evaluate a decision on a copy of the live simulator."""

    def __init__(self, spec: ObjectiveSpec):
        self.spec = spec
        self.live: Simulator | None = None

    def __call__(self, decision, predicted_state):
        if self.live is None:
            raise ConfigurationError("co-simulator is not attached to a live simulator")
        sim = self.live.clone()
        if predicted_state is not None:
            sim.apply_state_vector(predicted_state)
        return objective_score(sim.step(decision), self.spec)


@dataclass
class RunResult:
    rows: list  # per-interval dicts (CSV-safe fields only)
    tasks: list  # per completed task
    timings: list  # per-interval scheduling seconds
    decisions: list  # per-interval host list
    states: list  # state vectors
    inputs: list  # surrogate-ready (state, decision) pairs


def simulate(cfg, scheduler, seed, intervals=None, cosim: CoSimulator | None = None,
             keep_states=False, on_interval=None) -> RunResult:
    """Drive ``scheduler`` through ``intervals`` intervals of a fresh environment."""
    intervals = int(intervals or cfg["intervals"])
    sim = make_simulator(cfg)
    gen = make_workload(cfg, seed)
    spec = objective_spec(cfg)
    if cosim is not None:
        cosim.live = sim
    res = RunResult([], [], [], [], [], [])
    for t in range(intervals):
        sim.admit(gen.tasks_for_interval(t))
        state = sim.state()
        decision = scheduler.schedule(state)
        if on_interval is not None:
            on_interval(t, sim, state, decision)
        metrics = sim.step(decision)
        obj = objective_score(metrics, spec)
        scheduler.observe(obj)
        row = metrics.row()
        row["objective"] = obj
        row["iterations"] = scheduler.last_iterations
        row["k"] = getattr(getattr(scheduler, "exploration", None), "k", "")
        res.rows.append(row)
        res.timings.append(scheduler.last_time)
        res.decisions.append([int(h) for h in decision_hosts(decision)])
        for task in sim.completed[len(res.tasks):]:
            res.tasks.append({
                "id": task.id, "app_class": task.app_class, "created_at": task.created_at,
                "finished_at": task.finished_at, "response_time": task.response_time,
                "violated": int(task.app_class in sim.deadlines
                                and task.response_time > sim.deadlines[task.app_class]),
            })
        if keep_states:
            res.states.append(state.vector())
            res.inputs.append((state.vector(), decision))
    return res


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    X: np.ndarray  # (T, input_dim)
    y: np.ndarray  # (T,)
    states: np.ndarray  # (T, state_dim), in interval order
    layout: dict
    provenance: dict

    def __len__(self):
        return len(self.y)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        sd, extra = self.layout["state_dim"], self.layout["extra_dim"]
        nd = self.layout["n_slots"] * self.layout["n_hosts"]
        header = (["t"] + [f"s{i}" for i in range(sd)] + ["obar"] * extra
                  + [f"d{i}" for i in range(nd)] + ["y"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, (x, y) in enumerate(zip(self.X, self.y)):
                w.writerow([t] + [repr(float(v)) for v in x] + [repr(float(y))])
        meta = {"layout": self.layout, "provenance": self.provenance}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        X, y = arr[:, 1:-1], arr[:, -1]
        sd = meta["layout"]["state_dim"]
        return cls(X, y, X[:, :sd].copy(), meta["layout"], meta["provenance"])


def dataset_layout(cfg, extra_dim=0):
    sim = make_simulator(cfg)
    return {"state_dim": sim.state_dim, "extra_dim": extra_dim, "n_slots": sim.n_slots,
            "n_hosts": sim.n_hosts}


def gen_dataset(cfg, intervals=2000, seed=0, starred=False, checkpoints=None) -> Dataset:
    """Record ``(x_t, O_t)`` pairs from a random-placement run.

    In starred mode every record also carries the simulated objective that
    the pre-trained GOSH pipeline (LSTM + GOSH + co-simulation) predicts.
    """
    layout = dataset_layout(cfg, 1 if starred else 0)
    scheduler = RandomScheduler(seed)
    cosim = None
    obars = []
    hook = None
    if starred:
        if checkpoints is None:
            raise ConfigurationError("starred dataset generation needs GOSH checkpoints")
        ckpt = Path(checkpoints)
        for name in ("npn.zip", "lstm.npz"):
            if not (ckpt / name).exists():
                raise ConfigurationError(f"missing GOSH checkpoint {ckpt / name}")
        bundle, exploration = load_surrogate((ckpt / "npn.zip").read_bytes())
        predictor = CoSimScheduler(
            "GOSH*", SurrogateBundle(layout["state_dim"], layout["n_slots"], layout["n_hosts"], 1),
            inner=GradientScheduler("GOSH", bundle, optimizer_config(cfg, "GOSH"), exploration,
                                    seed=seed, tune=False),
            lstm=load_model(ckpt / "lstm.npz"), cosim=CoSimulator(objective_spec(cfg)),
            allow_untrained=True,
        )
        cosim = predictor.cosim

        def record_obar(t, sim, state, decision):
            obars.append(predictor.predict_objective(state))

        hook = record_obar

    res = simulate(cfg, scheduler, seed, intervals, cosim=cosim, keep_states=True,
                   on_interval=hook)
    X = []
    for i, (s, d) in enumerate(res.inputs):
        parts = [s] + ([np.array([obars[i]])] if starred else []) + [d.ravel()]
        X.append(np.concatenate(parts))
    y = np.array([row["objective"] for row in res.rows])
    prov = {"config_hash": config_hash(cfg), "seed": seed, "intervals": intervals,
            "scheduler": "RANDOM", "starred": starred}
    return Dataset(np.array(X), y, np.array(res.states), layout, prov)


# ---------------------------------------------------------------- training


def _fold_splits(n, folds, rng, train_fraction=0.8):
    out = []
    n_train = max(1, int(round(train_fraction * n)))
    for _ in range(folds):
        perm = rng.permutation(n)
        out.append((perm[:n_train], perm[n_train:] if n_train < n else perm[:1]))
    return out


def _train_kwargs(tcfg):
    return dict(lr=tcfg.get("lr", 1e-4), weight_decay=tcfg.get("weight_decay", 1e-4),
                epochs=tcfg.get("epochs", 200), batch_size=tcfg.get("batch_size", 32),
                patience=tcfg.get("patience", 10))


def train_npn(X, y, Xv, yv, hidden, seed, tcfg):
    model = NpnModel(X.shape[1], hidden=hidden, seed=seed)
    fit(model, lambda p, idx: aleatoric_loss(*model.forward(X[idx], p), y[idx]), len(y),
        val_loss_fn=lambda: aleatoric_loss(*model.forward(Xv), yv).item(),
        rng=np.random.default_rng(seed), **_train_kwargs(tcfg))
    return model


def train_fcn(X, y, Xv, yv, hidden, seed, tcfg, dropout=0.0):
    model = FcnModel(X.shape[1], hidden=hidden, dropout=dropout, seed=seed)
    rng = np.random.default_rng(seed)

    def loss(p, idx):
        return mse_loss(model.forward(X[idx], p, dropout_active=dropout > 0, rng=rng), y[idx])

    fit(model, loss, len(y), val_loss_fn=lambda: mse_loss(model.forward(Xv), yv).item(),
        rng=np.random.default_rng(seed + 1), **_train_kwargs(tcfg))
    return model


def lstm_windows(states, window):
    X, Y = [], []
    for end in range(1, len(states)):
        start = max(0, end - window)
        seq = states[start:end]
        if len(seq) < window:
            seq = np.vstack([np.repeat(seq[:1], window - len(seq), axis=0), seq])
        X.append(seq)
        Y.append(states[end])
    return np.array(X), np.array(Y)


def train_lstm(states, tcfg, seed=0, hidden=64, window=8, folds=5):
    X, Y = lstm_windows(np.asarray(states), window)
    rng = np.random.default_rng(seed)
    report, best = [], None
    for fold, (tr, va) in enumerate(_fold_splits(len(Y), folds, rng)):
        model = LstmModel(X.shape[2], hidden=hidden, seed=seed + fold)
        kw = _train_kwargs(tcfg)
        kw["lr"] = tcfg.get("lstm_lr", 1e-3)
        fit(model, lambda p, idx: mse_loss(model.forward(X[tr][idx], p), Y[tr][idx]), len(tr),
            val_loss_fn=lambda: mse_loss(model.forward(X[va]), Y[va]).item(),
            rng=np.random.default_rng(seed + fold), **kw)
        val = mse_loss(model.predict(X[va]), Y[va]).item()
        report.append({"fold": fold, "mse": val})
        if best is None or val < best[0]:
            best = (val, model)
    return best[1], report


def train(dataset: Dataset, model_kind="npn", folds=5, seed=0, tcfg=None, hidden=(128, 64)):
    """Five-fold training of a surrogate; returns (surrogate, report).

    ``model_kind`` is ``"npn"`` (f, g, h bundle) or ``"fcn"`` (GOBI-style).
    The report lists per-fold validation MSE and the aleatoric ("KLD")
    loss; the model from the fold with the best validation score is kept.
    """
    tcfg = tcfg or {}
    lay = dataset.layout
    if dataset.X.shape[1] != lay["state_dim"] + lay["extra_dim"] + lay["n_slots"] * lay["n_hosts"]:
        raise ConfigurationError("dataset rows do not match their layout")
    if len(dataset) == 0:
        raise ConfigurationError("empty dataset")
    rng = np.random.default_rng(seed)
    X, y = dataset.X, dataset.y
    report, best = [], None
    sur_kw = dict(replay=tcfg.get("replay", 100), tune_lr=tcfg.get("tune_lr", 1e-4),
                  weight_decay=tcfg.get("weight_decay", 1e-4))
    for fold, (tr, va) in enumerate(_fold_splits(len(y), folds, rng)):
        fs = seed + 10 * fold
        if model_kind == "npn":
            sur = SurrogateBundle(lay["state_dim"], lay["n_slots"], lay["n_hosts"], lay["extra_dim"],
                                  hidden=hidden, seed=fs, **sur_kw)
            sur.f = train_npn(X[tr], y[tr], X[va], y[va], hidden, fs, tcfg)
            sur.g = train_fcn(X[tr], y[tr], X[va], y[va], hidden, fs + 1, tcfg, dropout=0.5)
            xi_rng = np.random.default_rng(fs + 3)
            xi = np.array([epistemic_uncertainty(sur.g, x, sur.xi_samples, xi_rng) for x in X])
            sur.h = train_fcn(X[tr], xi[tr], X[va], xi[va], hidden, fs + 2, tcfg)
            mu, sigma = sur.f.predict(X[va])
            kld = aleatoric_loss(mu, sigma, y[va]).item()
            xi_ma = float(np.mean(xi))
        elif model_kind == "fcn":
            sur = FcnSurrogate(lay["state_dim"], lay["n_slots"], lay["n_hosts"], lay["extra_dim"],
                               hidden=hidden, seed=fs, **sur_kw)
            sur.model = train_fcn(X[tr], y[tr], X[va], y[va], hidden, fs, tcfg)
            mu = sur.model.predict(X[va])
            kld = aleatoric_loss(mu, np.ones_like(mu), y[va]).item()
            xi_ma = None
        else:
            raise ConfigurationError(f"unknown model kind {model_kind!r}")
        mse = float(np.mean((mu - y[va]) ** 2))
        if not (math.isfinite(mse) and math.isfinite(kld)):
            raise FloatingPointError(f"fold {fold}: non-finite validation loss")
        report.append({"fold": fold, "mse": mse, "kld": kld})
        score = kld if model_kind == "npn" else mse
        if best is None or score < best[0]:
            best = (score, sur, xi_ma)
    _, sur, xi_ma = best
    exploration = ExplorationState(xi_ma=xi_ma) if model_kind == "npn" else None
    summary = {"model": model_kind, "folds": report,
               "mean_mse": float(np.mean([r["mse"] for r in report])),
               "mean_kld": float(np.mean([r["kld"] for r in report]))}
    return sur, exploration, summary


TRAIN_GRID = {"lr": (1e-4, 1e-5), "weight_decay": (1e-3, 1e-4)}


def grid_search(dataset: Dataset, model_kind="npn", seed=0, tcfg=None, grid=TRAIN_GRID,
                hidden=(128, 64)):
    """Pick lr and weight decay by single-fold validation loss over ``grid``."""
    results = []
    for lr in grid["lr"]:
        for wd in grid["weight_decay"]:
            trial = dict(tcfg or {}, lr=lr, weight_decay=wd)
            _, _, rep = train(dataset, model_kind, folds=1, seed=seed, tcfg=trial, hidden=hidden)
            score = rep["mean_kld"] if model_kind == "npn" else rep["mean_mse"]
            results.append({"lr": lr, "weight_decay": wd, "score": score})
    best = min(results, key=lambda r: r["score"])
    return {"lr": best["lr"], "weight_decay": best["weight_decay"]}, results


CHECKPOINT_NAMES = {"npn": "npn.zip", "fcn": "fcn.zip"}


def train_all(dataset: Dataset, out_dir, kinds=("npn", "fcn", "lstm"), folds=5, seed=0,
              tcfg=None, hidden=(128, 64), grid=False):
    """Train the requested models on ``dataset`` and write checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    star = "_star" if dataset.layout["extra_dim"] else ""
    reports = {}
    tcfg = dict(tcfg or {})
    if grid:
        for kind in kinds:
            if kind == "lstm":
                continue
            best, trials = grid_search(dataset, kind, seed, tcfg, hidden=hidden)
            reports[f"grid_{kind}"] = {"best": best, "trials": trials}
        # one setting for every model keeps the bundle consistent; use the NPN pick
        pick = reports.get("grid_npn", reports.get("grid_fcn"))
        if pick:
            tcfg.update(pick["best"])
    for kind in kinds:
        if kind == "lstm":
            model, rep = train_lstm(dataset.states, tcfg, seed=seed, folds=folds)
            save_model(model, out / "lstm.npz")
            reports["lstm"] = {"folds": rep}
            continue
        sur, exploration, rep = train(dataset, kind, folds, seed, tcfg, hidden)
        name = CHECKPOINT_NAMES[kind].replace(".zip", f"{star}.zip")
        (out / name).write_bytes(sur.to_bytes(exploration))
        reports[kind + star] = rep
    path = out / f"train_report{star}.json"
    path.write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    return reports


# ---------------------------------------------------------------- schedulers


def make_scheduler(kind, cfg, checkpoints=None, seed=0, allow_untrained=False, cosim=None,
                   k=None, dynamic_k=None):
    """Instantiate a scheduler of ``kind`` from checkpoint files."""
    if kind not in KINDS:
        raise ConfigurationError(f"unknown scheduler {kind!r}; choose from {', '.join(KINDS)}")
    if kind == "RANDOM":
        return RandomScheduler(seed)
    scfg = cfg["scheduler"]
    base = kind.rstrip("*")
    model, _ = BASE_KINDS[base]
    ckpt = Path(checkpoints) if checkpoints else None
    lay = dataset_layout(cfg)

    def load(name, extra):
        path = ckpt / name if ckpt else None
        if path is not None and path.exists():
            sur, exploration = load_surrogate(path.read_bytes())
            if sur.layout() != dict(lay, extra_dim=extra):
                raise ConfigurationError(f"{path} was trained for a different layout")
            return sur, exploration, True
        if not allow_untrained:
            raise ConfigurationError(f"missing checkpoint {path or name} for {kind}")
        cls = SurrogateBundle if model == "npn" else FcnSurrogate
        return cls(lay["state_dim"], lay["n_slots"], lay["n_hosts"], extra, seed=seed), None, False

    def exploration_for(exp):
        exp = exp or ExplorationState()
        upd = {}
        if k is not None:
            upd["k"] = float(k)
        elif "k" in scfg:
            upd["k"] = float(scfg["k"])
        for key in ("psi", "delta"):
            if key in scfg:
                upd[key] = float(scfg[key])
        return replace(exp, **upd)

    dyn = scfg.get("dynamic_k", True) if dynamic_k is None else dynamic_k
    opt = optimizer_config(cfg, base)
    sur, exp, trained = load(CHECKPOINT_NAMES[model], 0)
    inner = GradientScheduler(base, sur, opt, exploration_for(exp), seed=seed,
                              tune=scfg.get("tune", True), dynamic_k=dyn,
                              allow_untrained=allow_untrained, trained=trained)
    if not kind.endswith("*"):
        return inner
    inner.do_tune = False
    star_sur, star_exp, star_trained = load(CHECKPOINT_NAMES[model].replace(".zip", "_star.zip"), 1)
    lstm_path = ckpt / "lstm.npz" if ckpt else None
    if lstm_path is not None and lstm_path.exists():
        lstm = load_model(lstm_path)
    elif allow_untrained:
        lstm = LstmModel(lay["state_dim"], seed=seed)
    else:
        raise ConfigurationError(f"{kind} needs an LSTM checkpoint (lstm.npz)")
    return CoSimScheduler(kind, star_sur, inner, lstm, cosim or CoSimulator(objective_spec(cfg)),
                          config=opt, exploration=exploration_for(star_exp), seed=seed,
                          tune=scfg.get("tune", True), dynamic_k=dyn,
                          allow_untrained=allow_untrained, trained=star_trained)


# ---------------------------------------------------------------- experiments

TASK_FIELDS = ("id", "app_class", "created_at", "finished_at", "response_time", "violated")
ROW_FIELDS = (*IntervalMetrics.CSV_FIELDS, "objective", "iterations", "k")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_csv(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in fields})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(rows, tasks, truncate=0.0, timings=None) -> dict:
    """Aggregate per-interval rows and per-task records after truncation."""
    skip = int(math.floor(truncate * len(rows)))
    kept = rows[skip:]
    first = int(kept[0]["interval"]) if kept else 0
    kept_tasks = [t for t in tasks if int(t["finished_at"]) >= first]
    rts = [float(t["response_time"]) for t in kept_tasks]

    # correctly rounded sums, so any reader of the CSVs can reproduce them exactly
    def mean(key):
        return math.fsum(float(r[key]) for r in kept) / len(kept) if kept else 0.0

    migrations = sum(int(r["n_migrations"]) for r in kept)
    out = {
        "intervals": len(kept),
        "first_interval": first,
        "energy_kwh_total": math.fsum(float(r["energy_kwh"]) for r in kept),
        "energy_kwh_mean": mean("energy_kwh"),
        "aec_mean": mean("aec"),
        "objective_mean": mean("objective"),
        "fairness_mean": mean("fairness"),
        "wait_time_mean": mean("wait_time"),
        "migration_time_mean": (math.fsum(float(r["migration_time"]) for r in kept) / migrations
                                if migrations else 0.0),
        "iterations_mean": mean("iterations"),
        "completed": len(rts),
        "response_time_mean": math.fsum(rts) / len(rts) if rts else 0.0,
        "response_time_p95": float(np.percentile(rts, 95)) if rts else 0.0,
        "sla_violations": int(sum(int(t["violated"]) for t in kept_tasks)),
        "sla_fraction": (float(sum(int(t["violated"]) for t in kept_tasks)) / len(rts)
                         if rts else 0.0),
    }
    if timings is not None:
        tk = timings[skip:]
        out["scheduling_time_mean"] = math.fsum(tk) / len(tk) if tk else 0.0
    return out


def run_experiment(cfg, kind=None, seeds=None, checkpoints=None, out_dir=None,
                   allow_untrained=False, k=None, dynamic_k=None) -> dict:
    """Run ``kind`` for every seed; write CSVs and a JSON summary."""
    kind = kind or cfg["scheduler"].get("kind", "GOSH")
    seeds = list(cfg["seeds"] if seeds is None else seeds)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    per_seed = {}
    series = []
    for seed in seeds:
        cosim = CoSimulator(objective_spec(cfg))
        sched = make_scheduler(kind, cfg, checkpoints, seed, allow_untrained, cosim, k, dynamic_k)
        res = simulate(cfg, sched, seed, cosim=cosim)
        summary = summarize(res.rows, res.tasks, cfg["truncate"], res.timings)
        per_seed[str(seed)] = summary
        series.append([r["objective"] for r in res.rows])
        if out:
            d = out / f"seed_{seed}"
            d.mkdir(exist_ok=True)
            write_csv(d / "metrics.csv", res.rows, ROW_FIELDS)
            write_csv(d / "tasks.csv", res.tasks, TASK_FIELDS)
            with open(d / "decisions.jsonl", "w") as fh:
                for t, (hosts, sec, row) in enumerate(zip(res.decisions, res.timings, res.rows)):
                    fh.write(json.dumps({"interval": t, "hosts": hosts,
                                         "iterations": row["iterations"],
                                         "scheduling_ms": sec * 1e3}) + "\n")
    keys = [k_ for k_ in next(iter(per_seed.values())) if k_ not in ("first_interval",)]
    mean = {k_: math.fsum(s[k_] for s in per_seed.values()) / len(per_seed) for k_ in keys}
    result = {"kind": kind, "config_hash": config_hash(cfg), "seeds": seeds,
              "per_seed": per_seed, "mean": mean,
              "objective_series": np.mean(np.array(series), axis=0).tolist()}
    if out:
        (out / "summary.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


COMPARE_METRICS = ("objective_mean", "energy_kwh_total", "response_time_mean", "sla_fraction",
                   "fairness_mean", "migration_time_mean", "wait_time_mean", "iterations_mean")
COMPAT_KEYS = ("hosts", "slots", "interval", "lambda", "intervals", "truncate", "workload")


def compare(run_dirs, out_dir=None, metrics=COMPARE_METRICS) -> dict:
    """Tabulate summary metrics of several runs relative to the first."""
    if len(run_dirs) < 2:
        raise ConfigurationError("compare needs at least two run directories")
    runs = []
    for d in run_dirs:
        d = Path(d)
        summary = json.loads((d / "summary.json").read_text())
        cfg = json.loads((d / "config.json").read_text())
        runs.append((d, summary, cfg))
    ref_cfg = runs[0][2]
    mismatches = [f"{d}: {key}" for d, _, cfg in runs[1:] for key in COMPAT_KEYS
                  if cfg.get(key) != ref_cfg.get(key)]
    for d, summary, _ in runs:
        for m in metrics:
            if m not in summary["mean"]:
                mismatches.append(f"{d}: missing metric {m}")
    if mismatches:
        raise ConfigurationError("incompatible runs: " + "; ".join(mismatches))
    table = []
    base = runs[0][1]["mean"]
    for d, summary, _ in runs:
        row = {"run": str(d), "kind": summary["kind"]}
        for m in metrics:
            row[m] = summary["mean"][m]
            row[m + "_delta"] = summary["mean"][m] - base[m]
        table.append(row)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fields = ["run", "kind"] + [f for m in metrics for f in (m, m + "_delta")]
        write_csv(out / "comparison.csv", table, fields)
        n = len(runs[0][1]["objective_series"])
        series_rows = [{"interval": t, **{f"{i}:{s['kind']}": s["objective_series"][t]
                                          for i, (_, s, _) in enumerate(runs)}}
                       for t in range(n)]
        write_csv(out / "objective_series.csv", series_rows, list(series_rows[0]))
        # iteration counts are simulated and go to CSV; wall-clock costs to JSON
        it_rows = [{"run": str(d), "kind": s["kind"], "iterations_mean": s["mean"]["iterations_mean"]}
                   for d, s, _ in runs]
        write_csv(out / "iterations.csv", it_rows, ["run", "kind", "iterations_mean"])
        cost = []
        for row, (_, s, _) in zip(it_rows, runs):
            sched = s["mean"].get("scheduling_time_mean", 0.0)
            iters = row["iterations_mean"]
            cost.append(dict(row, scheduling_time_mean=sched,
                             time_per_iteration=sched / iters if iters else 0.0))
        (out / "overhead.json").write_text(json.dumps(cost, indent=2) + "\n")
    return {"table": table}


# ---------------------------------------------------------------- analysis


def recovery_intervals(series, switch, window=5, tolerance=0.10, baseline=None):
    """Intervals after ``switch`` until the trailing ``window`` mean of
    ``series`` is back within ``tolerance`` of the pre-switch mean.

    The pre-switch mean skips the first ``window`` intervals (warm-up).
    Returns the number of post-switch intervals when it never returns.
    """
    series = np.asarray(series, dtype=float)
    if baseline is None:
        head = series[min(window, switch - 1):switch] if switch > 1 else series[:switch]
        baseline = float(np.mean(head))
    post = len(series) - switch
    for i in range(post - window + 1):
        seg = series[switch + i:switch + i + window]
        if abs(float(np.mean(seg)) - baseline) <= tolerance * abs(baseline):
            return i
    return post


def recovery_slope(series, switch, window=50):
    """Negated least-squares slope of ``series`` over the ``window`` intervals
    starting at ``switch``; larger means a faster post-switch decline."""
    seg = np.asarray(series, dtype=float)[switch:switch + window]
    if len(seg) < 2:
        raise ValueError("need at least two post-switch intervals")
    return -float(np.polyfit(np.arange(len(seg)), seg, 1)[0])


def sweep_k(cfg, ks=(0.5, 2.0, 5.0, 10.0), seeds=None, checkpoints=None, out_dir=None,
            allow_untrained=False) -> dict:
    """GOSH with each static ``k`` and with the dynamic rule (k0 = 5)."""
    seeds = list(cfg["seeds"] if seeds is None else seeds)
    regimes = cfg["workload"]["regimes"]
    switch = int(regimes[1][0]) if len(regimes) > 1 else cfg["intervals"] // 2
    if switch > cfg["intervals"] - 2:
        log.warning("workload switch at %d lies outside the %d-interval run; "
                    "recovery metrics are left empty", switch, cfg["intervals"])
        switch = None
    out = {}
    settings = [(f"k={k}", k, False) for k in ks] + [("dynamic", 5.0, True)]
    for label, k, dyn in settings:
        rt_series, obj_series, means = [], [], []
        for seed in seeds:
            cosim = CoSimulator(objective_spec(cfg))
            sched = make_scheduler("GOSH", cfg, checkpoints, seed, allow_untrained, cosim,
                                   k=k, dynamic_k=dyn)
            res = simulate(cfg, sched, seed)
            rts = [float(t["response_time"]) for t in res.tasks]
            means.append(float(np.mean(rts)) if rts else 0.0)
            rt_series.append([r["art"] for r in res.rows])
            obj_series.append([r["objective"] for r in res.rows])
        obj = np.mean(np.array(obj_series), axis=0)
        rt = np.mean(np.array(rt_series), axis=0)
        out[label] = {"k": k, "dynamic": dyn, "response_time_mean": float(np.mean(means)),
                      "response_series": rt.tolist(), "objective_series": obj.tolist(),
                      "objective_runs": {seed: run for seed, run in zip(seeds, obj_series)},
                      "recovery_intervals": None if switch is None else recovery_intervals(obj, switch),
                      "recovery_slope": None if switch is None else recovery_slope(rt, switch)}
    if out_dir:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        labels = list(out)
        rows = [{"interval": t, **{lab: out[lab]["response_series"][t] for lab in labels}}
                for t in range(len(out[labels[0]]["response_series"]))]
        write_csv(d / "sweep_k_series.csv", rows, ["interval"] + labels)
        fields = ["setting", "response_time_mean", "recovery_intervals", "recovery_slope"]
        summ = [{"setting": lab, **{f: out[lab][f] for f in fields[1:]}} for lab in labels]
        write_csv(d / "sweep_k_summary.csv", summ, fields)
    return out


def reference_profile(cfg, seed=0, intervals=500, min_samples=20) -> dict:
    """``r_ref`` and per-class SLA deadlines from one random-placement run.

    ``r_ref`` is the largest response time observed; each deadline is the
    nearest-rank 95th percentile of its class.
    """
    cfg = dict(cfg, deadlines=None)
    res = simulate(cfg, RandomScheduler(seed), seed, intervals)
    if not res.tasks:
        raise ConfigurationError("reference run completed no tasks")
    samples = [(t["app_class"], t["response_time"]) for t in res.tasks]
    return {"r_ref": float(max(rt for _, rt in samples)),
            "deadlines": compute_sla_deadlines(samples, min_samples=min_samples)}
