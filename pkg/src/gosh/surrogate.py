"""Uncertainty-aware QoS surrogates.

A :class:`SurrogateBundle` holds three networks over the same input
``[state, (simulated objective), flattened placement]``:

* ``f`` - Gaussian NPN giving mean and aleatoric spread of the objective,
* ``g`` - MC-dropout teacher whose output spread measures epistemic uncertainty,
* ``h`` - deterministic student that regresses that spread so it can be
  differentiated.

:class:`FcnSurrogate` is the single deterministic network used by the
GOBI-style ablations.
"""
from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (AdamW, FcnModel, NpnModel, aleatoric_loss, loss_and_grads, model_from_bytes,
                 model_to_bytes, mse_loss)

log = logging.getLogger(__name__)

VAR_QUANTILE = 1.65


def value_at_risk(mu, sigma):
    """Upper 95% Gaussian quantile ``mu + 1.65 sigma``."""
    return mu + VAR_QUANTILE * sigma


@dataclass(frozen=True)
class ExplorationState:
    k: float = 5.0
    xi_ma: float | None = None
    psi: float = 0.9
    delta: float = 0.1
    literal: bool = False  # decrease branch on xi < (1 + delta) * xi_ma


def update_exploration(state: ExplorationState, xi) -> ExplorationState:
    """Update the moving average of ``xi`` and then rescale ``k``."""
    xi = float(xi)
    if xi < 0:
        raise ValueError("epistemic uncertainty must be non-negative")
    prev = xi if state.xi_ma is None else state.xi_ma
    ma = state.psi * prev + (1.0 - state.psi) * xi
    k = state.k
    upper = (1.0 + state.delta) * ma
    lower = upper if state.literal else (1.0 - state.delta) * ma
    if xi > upper:
        k = (1.0 + state.delta) * k
    elif xi < lower:
        k = (1.0 - state.delta) * k
    return replace(state, k=k, xi_ma=ma)


def epistemic_uncertainty(g: FcnModel, x, samples=10, rng=None) -> float:
    """Sample standard deviation of ``samples`` dropout-active passes of ``g``."""
    if samples < 2:
        raise ValueError("at least two dropout samples are needed")
    rng = rng if rng is not None else np.random.default_rng()
    x = np.asarray(x, dtype=float).reshape(1, -1)
    batch = np.repeat(x, samples, axis=0)
    out = g.predict(batch, dropout_active=True, rng=rng)
    return float(np.std(out, ddof=1))


def lcb(f: NpnModel, h: FcnModel, x, k):
    """``VaR(f(x)) - k * h(x)`` and its components ``(mu, sigma, xi_hat)``."""
    if f.config["input_dim"] != h.config["input_dim"]:
        raise ValueError("f and h must share one input layout")
    mu, sigma = f.forward(x)
    xi_hat = h.forward(x)
    return value_at_risk(mu, sigma) - k * xi_hat, (mu, sigma, xi_hat)


def _input(context: np.ndarray, phi: Tensor) -> Tensor:
    return ad.concat([Tensor(context.reshape(1, -1)), ad.reshape(phi, (1, -1))], axis=1)


class _Base:
    """Shared layout handling and replay-based fine-tuning."""

    def __init__(self, state_dim, n_slots, n_hosts, extra_dim=0, replay=100, tune_lr=1e-4,
                 weight_decay=1e-4):
        self.state_dim = int(state_dim)
        self.n_slots = int(n_slots)
        self.n_hosts = int(n_hosts)
        self.extra_dim = int(extra_dim)
        self.replay = int(replay)
        self.tune_lr = float(tune_lr)
        self.weight_decay = float(weight_decay)

    @property
    def input_dim(self):
        return self.state_dim + self.extra_dim + self.n_slots * self.n_hosts

    @property
    def context_dim(self):
        return self.state_dim + self.extra_dim

    def layout(self):
        return {"state_dim": self.state_dim, "extra_dim": self.extra_dim,
                "n_slots": self.n_slots, "n_hosts": self.n_hosts}

    def build_input(self, state_vec, decision, extra=None) -> np.ndarray:
        parts = [np.asarray(state_vec, dtype=float).ravel()]
        if self.extra_dim:
            if extra is None:
                raise ValueError("this surrogate needs the simulated-objective feature")
            parts.append(np.atleast_1d(np.asarray(extra, dtype=float)))
        parts.append(np.asarray(decision, dtype=float).ravel())
        x = np.concatenate(parts)
        if x.size != self.input_dim:
            raise ValueError(f"input has {x.size} features, surrogate expects {self.input_dim}")
        return x

    def context(self, state_vec, extra=None) -> np.ndarray:
        ctx = self.build_input(state_vec, np.zeros(self.n_slots * self.n_hosts), extra)
        return ctx[:self.context_dim]

    def _window(self, records):
        recent = records[-self.replay:] if self.replay > 0 else records[-1:]
        X = np.array([r[0] for r in recent])
        y = np.array([r[1] for r in recent])
        return X, y


class SurrogateBundle(_Base):
    kind = "npn"

    def __init__(self, state_dim, n_slots, n_hosts, extra_dim=0, hidden=(128, 64), seed=0,
                 dropout=0.5, xi_samples=10, **kw):
        super().__init__(state_dim, n_slots, n_hosts, extra_dim, **kw)
        d = self.input_dim
        self.f = NpnModel(d, hidden=hidden, seed=seed)
        self.g = FcnModel(d, hidden=hidden, dropout=dropout, seed=seed + 1)
        self.h = FcnModel(d, hidden=hidden, seed=seed + 2)
        self.xi_samples = int(xi_samples)
        self._reset_optimizers()

    def _reset_optimizers(self):
        self.opt_f = AdamW(self.tune_lr, self.weight_decay)
        self.opt_g = AdamW(self.tune_lr, self.weight_decay)
        self.opt_h = AdamW(self.tune_lr, self.weight_decay)

    def objective(self, context, k):
        """Differentiable LCB as a function of the flattened placement."""
        f, h = self.f, self.h
        ft, ht = f.frozen_tensors(), h.tensors()

        def fn(phi):
            x = _input(context, phi)
            mu, sigma = f.forward(x, ft)
            return (value_at_risk(mu, sigma) - k * h.forward(x, ht)).sum()

        return fn

    def predict(self, X):
        """(mu, sigma, xi_hat) arrays for a batch of inputs."""
        mu, sigma = self.f.predict(X)
        return mu, sigma, self.h.predict(X)

    def tune(self, exploration: ExplorationState, records, x_t, rng) -> ExplorationState:
        """One fine-tuning round; returns the updated exploration state."""
        if not records:
            log.debug("no completed interval to tune on yet; skipping fine-tune")
        else:
            X, y = self._window(records)
            f, g = self.f, self.g
            _, grads = loss_and_grads(f, lambda p: aleatoric_loss(*f.forward(X, p), y))
            self.opt_f.step(f.params, grads)
            _, grads = loss_and_grads(
                g, lambda p: mse_loss(g.forward(X, p, dropout_active=True, rng=rng), y))
            self.opt_g.step(g.params, grads)
        xi = epistemic_uncertainty(self.g, x_t, self.xi_samples, rng)
        h = self.h
        _, grads = loss_and_grads(h, lambda p: mse_loss(h.forward(x_t, p), np.array([xi])))
        self.opt_h.step(h.params, grads)
        return update_exploration(exploration, xi)

    # -------------------------------------------------------- persistence

    def to_bytes(self, exploration: ExplorationState | None = None) -> bytes:
        meta = {"kind": self.kind, "layout": self.layout(), "xi_samples": self.xi_samples,
                "replay": self.replay, "tune_lr": self.tune_lr,
                "weight_decay": self.weight_decay,
                "exploration": None if exploration is None else asdict(exploration)}
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w") as zf:
            zf.writestr(zipfile.ZipInfo("meta.json"), json.dumps(meta, sort_keys=True))
            for name in ("f", "g", "h"):
                zf.writestr(zipfile.ZipInfo(f"{name}.npz"), model_to_bytes(getattr(self, name)))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes):
        with zipfile.ZipFile(io.BytesIO(blob)) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta["kind"] != cls.kind:
                raise ValueError(f"archive holds a {meta['kind']!r} surrogate, not {cls.kind!r}")
            obj = cls.__new__(cls)
            _Base.__init__(obj, **meta["layout"], replay=meta["replay"], tune_lr=meta["tune_lr"],
                           weight_decay=meta["weight_decay"])
            obj.xi_samples = meta["xi_samples"]
            for name in ("f", "g", "h"):
                model = model_from_bytes(zf.read(f"{name}.npz"))
                if model.config["input_dim"] != obj.input_dim:
                    raise ValueError(f"model {name} does not match the archived layout")
                setattr(obj, name, model)
        obj._reset_optimizers()
        exp = meta.get("exploration")
        return obj, (ExplorationState(**exp) if exp else None)


class FcnSurrogate(_Base):
    """Deterministic single-network surrogate (GOBI-style)."""

    kind = "fcn"

    def __init__(self, state_dim, n_slots, n_hosts, extra_dim=0, hidden=(128, 64), seed=0, **kw):
        super().__init__(state_dim, n_slots, n_hosts, extra_dim, **kw)
        self.model = FcnModel(self.input_dim, hidden=hidden, seed=seed)
        self._reset_optimizers()

    def _reset_optimizers(self):
        self.opt = AdamW(self.tune_lr, self.weight_decay)

    def objective(self, context, k=0.0):
        model = self.model
        pt = model.tensors()

        def fn(phi):
            return model.forward(_input(context, phi), pt).sum()

        return fn

    def predict(self, X):
        return self.model.predict(X)

    def tune(self, exploration, records, x_t, rng):
        if not records:
            log.debug("no completed interval to tune on yet; skipping fine-tune")
            return exploration
        X, y = self._window(records)
        model = self.model
        _, grads = loss_and_grads(model, lambda p: mse_loss(model.forward(X, p), y))
        self.opt.step(model.params, grads)
        return exploration

    def to_bytes(self, exploration=None) -> bytes:
        meta = {"kind": self.kind, "layout": self.layout(), "replay": self.replay,
                "tune_lr": self.tune_lr, "weight_decay": self.weight_decay}
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w") as zf:
            zf.writestr(zipfile.ZipInfo("meta.json"), json.dumps(meta, sort_keys=True))
            zf.writestr(zipfile.ZipInfo("model.npz"), model_to_bytes(self.model))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes):
        with zipfile.ZipFile(io.BytesIO(blob)) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta["kind"] != cls.kind:
                raise ValueError(f"archive holds a {meta['kind']!r} surrogate, not {cls.kind!r}")
            obj = cls.__new__(cls)
            _Base.__init__(obj, **meta["layout"], replay=meta["replay"], tune_lr=meta["tune_lr"],
                           weight_decay=meta["weight_decay"])
            obj.model = model_from_bytes(zf.read("model.npz"))
            if obj.model.config["input_dim"] != obj.input_dim:
                raise ValueError("model does not match the archived layout")
        obj._reset_optimizers()
        return obj, None


def load_surrogate(blob: bytes):
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        kind = json.loads(zf.read("meta.json"))["kind"]
    return {"npn": SurrogateBundle, "fcn": FcnSurrogate}[kind].from_bytes(blob)
