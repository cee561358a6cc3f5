"""Neural models used as QoS surrogates and as the next-state predictor.

Models keep their parameters as a dict of numpy arrays.  ``forward`` accepts
an optional dict of :class:`~gosh.autodiff.Tensor` parameters so the same code
path serves inference (constant parameters, differentiable input) and
training (differentiable parameters).
"""
from __future__ import annotations

import io
import json
import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

ACTIVATIONS = {
    "softplus": ad.softplus,
    "tanhshrink": ad.tanhshrink,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
}


def _act_derivative(name, x: Tensor) -> Tensor:
    if name == "softplus":
        return ad.sigmoid(x)
    if name == "tanhshrink":
        t = ad.tanh(x)
        return t * t
    if name == "sigmoid":
        s = ad.sigmoid(x)
        return s * (1.0 - s)
    if name == "tanh":
        t = ad.tanh(x)
        return 1.0 - t * t
    raise ValueError(f"unknown activation {name!r}")


class Model:
    """Parameter container with a fixed layout descriptor."""

    kind = "model"

    def __init__(self, **config):
        self.config = config
        self.params: dict[str, np.ndarray] = {}

    @property
    def layout(self):
        return [(name, tuple(arr.shape)) for name, arr in self.params.items()]

    @property
    def n_params(self):
        return sum(arr.size for arr in self.params.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for arr in self.params.values()])

    def unflatten(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        offset = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            self.params[name] = flat[offset:offset + size].reshape(shape).copy()
            offset += size
        return self

    def tensors(self, requires_grad=False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def copy(self):
        other = type(self)(**self.config)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def _check_input(self, x):
        x = ad.as_tensor(x)
        if x.ndim == 1:
            x = ad.reshape(x, (1, -1))
        if x.shape[-1] != self.config["input_dim"]:
            raise ValueError(
                f"{self.kind} expects input dimension {self.config['input_dim']}, got {x.shape[-1]}"
            )
        return x


def _kaiming(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class FcnModel(Model):
    """Fully connected regressor with a sigmoid scalar head.

    ``dropout`` > 0 turns on inverted dropout after every hidden layer when
    ``dropout_active`` is passed to :meth:`forward`.
    """

    kind = "fcn"

    def __init__(self, input_dim, hidden=(128, 64), activations=("softplus", "tanhshrink"),
                 dropout=0.0, seed=0):
        super().__init__(input_dim=int(input_dim), hidden=list(hidden),
                         activations=list(activations), dropout=float(dropout), seed=int(seed))
        if len(hidden) != len(activations):
            raise ValueError("one activation per hidden layer is required")
        rng = np.random.default_rng(seed)
        sizes = [input_dim, *hidden, 1]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"W{i}"] = _kaiming(rng, a, b)
            self.params[f"b{i}"] = np.zeros(b)

    def forward(self, x, params=None, dropout_active=False, rng=None) -> Tensor:
        x = self._check_input(x)
        p = params if params is not None else self.tensors()
        hidden, acts = self.config["hidden"], self.config["activations"]
        rate = self.config["dropout"]
        if dropout_active and rate > 0 and rng is None:
            raise ValueError("dropout_active requires an rng")
        h = x
        for i in range(len(hidden)):
            h = ACTIVATIONS[acts[i]](h @ p[f"W{i}"] + p[f"b{i}"])
            if dropout_active and rate > 0:
                keep = rng.random(h.shape) >= rate
                h = h * Tensor(keep / (1.0 - rate))
        last = len(hidden)
        return ad.sigmoid(h @ p[f"W{last}"] + p[f"b{last}"])

    def predict(self, X, dropout_active=False, rng=None) -> np.ndarray:
        with ad.no_grad():
            return self.forward(X, dropout_active=dropout_active, rng=rng).data[:, 0]


class NpnModel(Model):
    """Gaussian natural-parameter network returning ``(mu, sigma)``.

    Each layer carries mean weights and raw variance weights; variances are
    the squares of the raw values so they are never negative.  Moments go
    through nonlinearities with the delta method.
    """

    kind = "npn"

    def __init__(self, input_dim, hidden=(128, 64), activations=("softplus", "tanhshrink"),
                 seed=0, init_sigma=0.1):
        super().__init__(input_dim=int(input_dim), hidden=list(hidden),
                         activations=list(activations), seed=int(seed),
                         init_sigma=float(init_sigma))
        if len(hidden) != len(activations):
            raise ValueError("one activation per hidden layer is required")
        rng = np.random.default_rng(seed)
        sizes = [input_dim, *hidden, 1]
        n_layers = len(sizes) - 1
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"W{i}_m"] = _kaiming(rng, a, b)
            self.params[f"b{i}_m"] = np.zeros(b)
            self.params[f"W{i}_s"] = np.full((a, b), np.sqrt(1e-2 / a)) * rng.uniform(0.5, 1.5, (a, b))
            self.params[f"b{i}_s"] = np.full(b, 1e-2)
        # output variance such that sigma ~ init_sigma when the mean head sits at 0.5
        self.params[f"b{n_layers - 1}_s"] = np.full(1, init_sigma / 0.25)

    def frozen_tensors(self) -> dict[str, Tensor]:
        """Constant parameters plus their precomputed squares (inference only)."""
        p = self.tensors()
        for name, arr in self.params.items():
            p[name + "^2"] = Tensor(arr * arr)
        return p

    def forward(self, x, params=None):
        x = self._check_input(x)
        p = params if params is not None else self.frozen_tensors()

        def sq(name):
            return p[name + "^2"] if name + "^2" in p else ad.square(p[name])

        acts = [*self.config["activations"], "sigmoid"]
        a_m, a_s = x, None
        for i, act in enumerate(acts):
            W_m, b_m = p[f"W{i}_m"], p[f"b{i}_m"]
            W_s, b_s = sq(f"W{i}_s"), sq(f"b{i}_s")
            o_m = a_m @ W_m + b_m
            o_s = ad.square(a_m) @ W_s + b_s
            if a_s is not None:
                o_s = o_s + a_s @ W_s + a_s @ sq(f"W{i}_m")
            a_m = ACTIVATIONS[act](o_m)
            a_s = ad.square(_act_derivative(act, o_m)) * o_s
        return a_m, ad.sqrt(a_s)

    def predict(self, X):
        with ad.no_grad():
            mu, sigma = self.forward(X)
        return mu.data[:, 0], sigma.data[:, 0]


class LstmModel(Model):
    """Single-layer LSTM with a linear head mapping to the next state."""

    kind = "lstm"

    def __init__(self, input_dim, hidden=64, seed=0):
        super().__init__(input_dim=int(input_dim), hidden=int(hidden), seed=int(seed))
        rng = np.random.default_rng(seed)
        d, h = input_dim, hidden
        scale = 1.0 / np.sqrt(h)
        self.params["Wx"] = rng.uniform(-scale, scale, (d, 4 * h))
        self.params["Wh"] = rng.uniform(-scale, scale, (h, 4 * h))
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0  # forget gate bias
        self.params["b"] = b
        self.params["Wo"] = rng.uniform(-scale, scale, (h, d))
        self.params["bo"] = np.zeros(d)

    def forward(self, history, params=None) -> Tensor:
        """Predict the next state from ``history`` of shape (T, d) or (B, T, d)."""
        arr = history.data if isinstance(history, Tensor) else np.asarray(history, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[1] == 0:
            raise ValueError("history must be a non-empty sequence of state vectors")
        if arr.shape[2] != self.config["input_dim"]:
            raise ValueError(
                f"state dimension drifted: expected {self.config['input_dim']}, got {arr.shape[2]}"
            )
        seq = history if isinstance(history, Tensor) and history.ndim == 3 else Tensor(arr)
        p = params if params is not None else self.tensors()
        B, T, _ = arr.shape
        H = self.config["hidden"]
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        for t in range(T):
            z = seq[:, t, :] @ p["Wx"] + h @ p["Wh"] + p["b"]
            i = ad.sigmoid(z[:, :H])
            f = ad.sigmoid(z[:, H:2 * H])
            g = ad.tanh(z[:, 2 * H:3 * H])
            o = ad.sigmoid(z[:, 3 * H:])
            c = f * c + i * g
            h = o * ad.tanh(c)
        return ad.clamp(h @ p["Wo"] + p["bo"], 0.0, 1.0)

    def predict(self, history) -> np.ndarray:
        with ad.no_grad():
            out = self.forward(history).data
        return out[0] if np.asarray(history).ndim == 2 else out


MODEL_TYPES = {cls.kind: cls for cls in (FcnModel, NpnModel, LstmModel)}


# ---------------------------------------------------------------- losses


def aleatoric_loss(mu, sigma, y, sigma_min=1e-3) -> Tensor:
    """Gaussian negative log-likelihood without the constant term.

    ``mean((mu - y)^2 / (2 sigma^2) + ln(sigma^2) / 2)`` with sigma clamped
    from below at ``sigma_min``.
    """
    mu, sigma = ad.as_tensor(mu), ad.as_tensor(sigma)
    if mu.data.size == 0:
        raise ValueError("aleatoric_loss of an empty batch")
    y = ad.as_tensor(np.reshape(y, mu.shape)) if not isinstance(y, Tensor) else y
    s = ad.clamp(sigma, lo=sigma_min)
    var = ad.square(s)
    terms = ad.square(mu - y) * ad.reciprocal(var) * 0.5 + ad.log(var) * 0.5
    return terms.mean()


def mse_loss(pred, target) -> Tensor:
    pred = ad.as_tensor(pred)
    if pred.data.size == 0:
        raise ValueError("mse_loss of an empty batch")
    target = ad.as_tensor(np.reshape(target, pred.shape)) if not isinstance(target, Tensor) else target
    return ad.square(pred - target).mean()


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, lr=1e-5, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr=None, weight_decay=None):
        lr = self.lr if lr is None else lr
        wd = self.weight_decay if weight_decay is None else weight_decay
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
        b1, b2 = self.betas
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p = p * (1 - lr * wd)
            params[name] = p - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v, "lr": self.lr,
                "weight_decay": self.weight_decay}


def adamw_step(params, grads, opt_state: AdamW, lr, weight_decay):
    return opt_state.step(params, grads, lr=lr, weight_decay=weight_decay)


def loss_and_grads(model: Model, loss_fn):
    """Evaluate ``loss_fn(params)`` and return (loss value, grads by name)."""
    p = model.tensors(requires_grad=True)
    names = list(p)
    loss = loss_fn(p)
    gs = ad.grad(loss, [p[n] for n in names])
    return loss.item(), {n: g.data for n, g in zip(names, gs)}


def fit(model: Model, loss_fn, n_train, *, lr=1e-5, weight_decay=1e-4, epochs=100,
        batch_size=32, val_loss_fn=None, patience=10, rng=None, optimizer=None):
    """Minibatch AdamW training with early stopping on ``val_loss_fn``.

    ``loss_fn(params, idx)`` returns the loss on training rows ``idx``.
    ``val_loss_fn()`` returns the current validation loss.  The best
    parameters seen on validation are restored at the end.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = optimizer or AdamW(lr=lr, weight_decay=weight_decay)
    history = []
    best, best_params, bad = np.inf, None, 0
    for epoch in range(epochs):
        order = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, batch_size):
            idx = order[start:start + batch_size]
            value, grads = loss_and_grads(model, lambda p: loss_fn(p, idx))
            if not np.isfinite(value):
                raise FloatingPointError(f"training diverged at epoch {epoch}: loss={value}")
            opt.step(model.params, grads)
            total += value * len(idx)
        train_loss = total / n_train
        val = val_loss_fn() if val_loss_fn is not None else train_loss
        history.append((train_loss, val))
        if val < best - 1e-12:
            best, bad = val, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            bad += 1
            if bad >= patience:
                log.debug("early stop at epoch %d (best %.5g)", epoch, best)
                break
    if best_params is not None:
        model.params = best_params
    return history


# ---------------------------------------------------------------- checkpoints


def model_to_bytes(model: Model) -> bytes:
    meta = {"version": CHECKPOINT_VERSION, "kind": model.kind, "config": model.config,
            "layout": [[n, list(s)] for n, s in model.layout]}
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta, sort_keys=True)), flat=model.flatten())
    return buf.getvalue()


def model_from_bytes(blob: bytes, expect_layout=None) -> Model:
    with np.load(io.BytesIO(blob)) as data:
        meta = json.loads(str(data["meta"]))
        flat = data["flat"]
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    model = MODEL_TYPES[meta["kind"]](**meta["config"])
    stored = [(n, tuple(s)) for n, s in meta["layout"]]
    if stored != model.layout:
        raise ValueError("checkpoint layout does not match its model configuration")
    if expect_layout is not None and [tuple((n, tuple(s))) for n, s in expect_layout] != stored:
        raise ValueError("checkpoint layout does not match the expected layout")
    return model.unflatten(flat)


def save_model(model: Model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path, expect_layout=None) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), expect_layout)
