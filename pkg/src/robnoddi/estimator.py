"""Patch regressors with hand-written backpropagation and Adam.

Two architectures map a flattened feature patch to the flattened
``(w-2)^3 x 3`` parameter patch, both with a logistic output so every
prediction lies in (0, 1):

* :class:`MLPNetwork` -- ReLU hidden layers.
* :class:`GatedIterativeNetwork` -- an initial ReLU code refined by ``T``
  gated updates with weights shared across iterations, then a dense head.

:class:`NoddiPatchRegressor` wraps either one in a scikit-learn estimator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DataError, DimensionError, VersionError


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def loss_mse(prediction, target) -> float:
    """Mean of squared differences over all elements."""
    p = np.asarray(prediction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"prediction shape {p.shape} differs from target shape {t.shape}")
    return float(np.mean((p - t) ** 2))


def mse_grad(prediction, target) -> np.ndarray:
    return 2.0 * (prediction - target) / prediction.size


class MLPNetwork:
    """Fully connected network, ReLU hidden units, logistic output."""

    arch = "mlp"

    def __init__(self, sizes, rng=None, dtype=np.float64):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        rng = np.random.default_rng(rng)
        self.params = []
        self.names = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            scale = np.sqrt((1.0 if last else 2.0) / a)
            self.params += [(rng.standard_normal((a, b)) * scale).astype(dtype), np.zeros(b, dtype=dtype)]
            self.names += [f"W{i}", f"b{i}"]

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.sizes[-1]

    def forward(self, X):
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise DimensionError(f"expected input of width {self.n_inputs}, got shape {X.shape}")
        acts = [X]
        pre = []
        h = X
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            pre.append(z)
            h = sigmoid(z) if i == n_layers - 1 else np.maximum(z, 0.0)
            acts.append(h)
        return h, (acts, pre)

    def backward(self, cache, dout):
        acts, pre = cache
        n_layers = len(self.params) // 2
        grads = [None] * len(self.params)
        out = acts[-1]
        dz = dout * out * (1.0 - out)
        for i in reversed(range(n_layers)):
            grads[2 * i] = acts[i].T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            if i:
                dh = dz @ self.params[2 * i].T
                dz = dh * (pre[i - 1] > 0)
        return grads

    def descriptor(self) -> dict:
        return {"arch": self.arch, "sizes": list(self.sizes)}


class GatedIterativeNetwork:
    """Unrolled gated refinement of a hidden code, then a dense head.

    ``h_0 = relu(x W_in + b_in)``; for ``t = 1..T``::

        g = sigmoid(x W_g + h U_g + b_g)
        u = tanh(x W_u + h U_u + b_u)
        h = g * h + (1 - g) * u

    and ``y = sigmoid(h_T W_o + b_o)``. With ``T = 0`` this is a one-hidden-
    layer MLP.
    """

    arch = "gated"

    def __init__(self, n_inputs, n_outputs, code_size=256, n_iterations=8, rng=None, dtype=np.float64):
        rng = np.random.default_rng(rng)
        D, H, O = int(n_inputs), int(code_size), int(n_outputs)
        self.n_inputs, self.n_outputs, self.code_size, self.n_iterations = D, O, H, int(n_iterations)

        def dense(a, b, gain):
            return (rng.standard_normal((a, b)) * np.sqrt(gain / a)).astype(dtype)

        self.names = ["W_in", "b_in", "W_g", "U_g", "b_g", "W_u", "U_u", "b_u", "W_o", "b_o"]
        self.params = [
            dense(D, H, 2.0), np.zeros(H, dtype),
            dense(D, H, 1.0), dense(H, H, 1.0), np.zeros(H, dtype),
            dense(D, H, 1.0), dense(H, H, 1.0), np.zeros(H, dtype),
            dense(H, O, 1.0), np.zeros(O, dtype),
        ]

    def forward(self, X):
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise DimensionError(f"expected input of width {self.n_inputs}, got shape {X.shape}")
        W_in, b_in, W_g, U_g, b_g, W_u, U_u, b_u, W_o, b_o = self.params
        z0 = X @ W_in + b_in
        h = np.maximum(z0, 0.0)
        hs, gs, us = [h], [], []
        if self.n_iterations:
            xg = X @ W_g + b_g
            xu = X @ W_u + b_u
            for _ in range(self.n_iterations):
                g = sigmoid(xg + h @ U_g)
                u = np.tanh(xu + h @ U_u)
                h = g * h + (1.0 - g) * u
                gs.append(g)
                us.append(u)
                hs.append(h)
        out = sigmoid(h @ W_o + b_o)
        return out, (X, z0, hs, gs, us, out)

    def backward(self, cache, dout):
        X, z0, hs, gs, us, out = cache
        W_in, b_in, W_g, U_g, b_g, W_u, U_u, b_u, W_o, b_o = self.params
        dz = dout * out * (1.0 - out)
        dW_o = hs[-1].T @ dz
        db_o = dz.sum(axis=0)
        dh = dz @ W_o.T
        dU_g = np.zeros_like(U_g)
        dU_u = np.zeros_like(U_u)
        dag_sum = np.zeros((X.shape[0], self.code_size))
        dau_sum = np.zeros((X.shape[0], self.code_size))
        for t in reversed(range(self.n_iterations)):
            h_prev, g, u = hs[t], gs[t], us[t]
            da_g = dh * (h_prev - u) * g * (1.0 - g)
            da_u = dh * (1.0 - g) * (1.0 - u * u)
            dU_g += h_prev.T @ da_g
            dU_u += h_prev.T @ da_u
            dag_sum += da_g
            dau_sum += da_u
            dh = dh * g + da_g @ U_g.T + da_u @ U_u.T
        dz0 = dh * (z0 > 0)
        return [
            X.T @ dz0, dz0.sum(axis=0),
            X.T @ dag_sum, dU_g, dag_sum.sum(axis=0),
            X.T @ dau_sum, dU_u, dau_sum.sum(axis=0),
            dW_o, db_o,
        ]

    def descriptor(self) -> dict:
        return {
            "arch": self.arch,
            "n_inputs": self.n_inputs,
            "n_outputs": self.n_outputs,
            "code_size": self.code_size,
            "n_iterations": self.n_iterations,
        }


def network_from_descriptor(desc: dict, rng=None):
    if desc["arch"] == "mlp":
        return MLPNetwork(desc["sizes"], rng)
    if desc["arch"] == "gated":
        return GatedIterativeNetwork(
            desc["n_inputs"], desc["n_outputs"], desc["code_size"], desc["n_iterations"], rng
        )
    raise VersionError(f"unknown architecture {desc['arch']!r}")


def loss_and_grads(net, X, Y):
    """MSE loss of ``net`` on a batch and its exact gradients."""
    out, cache = net.forward(X)
    if out.shape != Y.shape:
        raise DimensionError(f"network output {out.shape} does not match target {Y.shape}")
    return loss_mse(out, Y), net.backward(cache, mse_grad(out, Y))


def gradient_check(net, X, Y, n_probes=100, step=1e-5, rng=None):
    """Compare analytic gradients with central differences at random weights.

    Returns
    -------
    ndarray of shape (n_probes, 2)
        Analytic and numerical derivative for each probed weight.
    """
    rng = np.random.default_rng(rng)
    _, grads = loss_and_grads(net, X, Y)
    sizes = np.array([p.size for p in net.params])
    out = np.empty((n_probes, 2))
    for k in range(n_probes):
        i = rng.choice(len(sizes), p=sizes / sizes.sum())
        j = rng.integers(net.params[i].size)
        flat = net.params[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        lp = loss_mse(net.forward(X)[0], Y)
        flat[j] = orig - step
        lm = loss_mse(net.forward(X)[0], Y)
        flat[j] = orig
        out[k] = grads[i].reshape(-1)[j], (lp - lm) / (2.0 * step)
    return out


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(weights, grads, state: AdamState, config: AdamConfig = AdamConfig(), learning_rate=None):
    """Bias-corrected Adam update, applied in place. Returns (weights, state)."""
    if len(weights) != len(grads) or len(weights) != len(state.m):
        raise DimensionError("weights, gradients and optimizer state disagree in length")
    lr = config.learning_rate if learning_rate is None else learning_rate
    b1, b2 = config.beta1, config.beta2
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for w, g, m, v in zip(weights, grads, state.m, state.v):
        if w.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} differs from weight shape {w.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return weights, state


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    lr_schedule: str = "step"
    lr_decay: float = 0.5
    lr_step: int = 10
    batch_size: int = 128
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule not in ("fixed", "step"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "fixed":
            return self.learning_rate
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_step)


class NoddiPatchRegressor(RegressorMixin, BaseEstimator):
    """Regress NODDI parameter patches from feature patches.

    Parameters
    ----------
    architecture : {"mlp", "gated"}, default="mlp"
    hidden_layer_sizes : tuple of int, default=(512, 512, 512)
        MLP hidden widths.
    code_size : int, default=256
        Hidden code width of the gated model.
    n_iterations : int, default=8
        Unrolled refinement steps of the gated model.
    learning_rate : float, default=5e-4
    lr_schedule : {"step", "fixed"}, default="step"
        ``"step"`` multiplies the rate by ``lr_decay`` every ``lr_step`` epochs.
    lr_decay : float, default=0.5
    lr_step : int, default=10
    batch_size : int, default=128
    epochs : int, default=30
    beta1, beta2, epsilon : float
        Adam constants.
    standardize : {False, "center", True}, default=False
        ``True`` centers and scales every feature channel with statistics of
        the first chunk of data seen; ``"center"`` only subtracts the channel
        means. Scaling is off by default: unit-scaling the small, noisy
        high-order SH coefficients makes the network fit their noise.
    random_state : int, default=0

    Attributes
    ----------
    net_ : MLPNetwork or GatedIterativeNetwork
    loss_curve_ : list of float
        Mean training loss of each epoch.
    n_iter_ : int
        Epochs run so far.
    """

    def __init__(
        self,
        architecture="mlp",
        hidden_layer_sizes=(512, 512, 512),
        code_size=256,
        n_iterations=8,
        learning_rate=5e-4,
        lr_schedule="step",
        lr_decay=0.5,
        lr_step=10,
        batch_size=128,
        epochs=30,
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        standardize=False,
        random_state=0,
        verbose=False,
    ):
        self.architecture = architecture
        self.hidden_layer_sizes = hidden_layer_sizes
        self.code_size = code_size
        self.n_iterations = n_iterations
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.lr_decay = lr_decay
        self.lr_step = lr_step
        self.batch_size = batch_size
        self.epochs = epochs
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.standardize = standardize
        self.random_state = random_state
        self.verbose = verbose

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            self.learning_rate, self.lr_schedule, self.lr_decay, self.lr_step, self.batch_size,
            self.epochs, self.beta1, self.beta2, self.epsilon, self.random_state,
        )

    def _validate_xy(self, X, y=None):
        # no dtype conversion here: large float32 inputs are converted batch by batch
        X = np.asarray(X)
        if X.ndim < 2:
            raise DimensionError("X must have a sample axis and at least one feature axis")
        if y is not None:
            y = np.asarray(y, dtype=np.float64)
            if len(y) != len(X):
                raise DimensionError(f"X has {len(X)} samples, y has {len(y)}")
        return X, y

    def _initialize(self, X, y):
        self.input_shape_ = X.shape[1:]
        self.target_shape_ = y.shape[1:]
        self.n_features_in_ = int(np.prod(self.input_shape_))
        n_out = int(np.prod(self.target_shape_))
        rng = np.random.default_rng(self.random_state)
        if self.architecture == "mlp":
            sizes = (self.n_features_in_,) + tuple(self.hidden_layer_sizes) + (n_out,)
            self.net_ = MLPNetwork(sizes, rng)
        elif self.architecture == "gated":
            self.net_ = GatedIterativeNetwork(self.n_features_in_, n_out, self.code_size, self.n_iterations, rng)
        else:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        n_ch = self.input_shape_[-1]
        if self.standardize not in (False, True, "center"):
            raise ValueError(f"standardize must be True, False or 'center', got {self.standardize!r}")
        if self.standardize:
            flat = np.asarray(X, dtype=np.float64).reshape(-1, n_ch)
            self.feature_mean_ = flat.mean(axis=0)
            std = flat.std(axis=0)
            scale = std if self.standardize is True else np.ones(n_ch)
            self.feature_scale_ = np.where(scale > 1e-12, scale, 1.0)
        else:
            self.feature_mean_ = np.zeros(n_ch)
            self.feature_scale_ = np.ones(n_ch)
        self.adam_ = AdamState.zeros_like(self.net_.params)
        self.loss_curve_ = []
        self.n_iter_ = 0
        self._shuffle_rng = np.random.default_rng([int(self.random_state), 1])

    def _prepare(self, X) -> np.ndarray:
        if X.shape[1:] != self.input_shape_:
            raise DimensionError(
                f"feature patch shape {X.shape[1:]} does not match the trained shape {self.input_shape_}"
            )
        Z = (np.asarray(X, dtype=np.float64) - self.feature_mean_) / self.feature_scale_
        if not np.all(np.isfinite(Z)):
            raise ValueError("X contains non-finite values")
        return Z.reshape(len(X), -1)

    def train_epoch(self, chunks):
        """Run one epoch of mini-batch Adam over an iterable of ``(X, y)`` chunks.

        Each chunk is cut into consecutive batches of ``batch_size``; the
        caller decides the example order. The model is initialized from the
        first chunk if it has not been trained yet.
        """
        cfg = self._train_config()
        adam = AdamConfig(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
        total, count, lr = 0.0, 0, None
        for X, y in chunks:
            X, y = self._validate_xy(X, y)
            if not hasattr(self, "net_"):
                self._initialize(X, y)
            if lr is None:
                lr = cfg.lr_at(self.n_iter_)
            if y.shape[1:] != self.target_shape_:
                raise DimensionError(f"target shape {y.shape[1:]} differs from {self.target_shape_}")
            for start in range(0, len(X), cfg.batch_size):
                sl = slice(start, start + cfg.batch_size)
                Z = self._prepare(X[sl])
                loss, grads = loss_and_grads(self.net_, Z, y[sl].reshape(len(Z), -1))
                adam_step(self.net_.params, grads, self.adam_, adam, learning_rate=lr)
                total += loss * len(Z)
                count += len(Z)
        if count == 0:
            raise ValueError("no training examples in this epoch")
        self.loss_curve_.append(total / count)
        self.n_iter_ += 1
        if self.verbose:
            print(f"epoch {self.n_iter_:3d}  lr {lr:.2e}  loss {self.loss_curve_[-1]:.6f}")
        return self

    def partial_fit(self, X, y, shuffle=True):
        """Run one epoch of mini-batch Adam over ``(X, y)``."""
        X, y = self._validate_xy(X, y)
        if not hasattr(self, "net_"):
            self._initialize(X, y)
        order = self._shuffle_rng.permutation(len(X)) if shuffle else np.arange(len(X))
        step = self.batch_size * 64
        return self.train_epoch((X[order[i:i + step]], y[order[i:i + step]]) for i in range(0, len(X), step))

    def fit(self, X, y):
        X, y = self._validate_xy(X, y)
        for attr in ("net_", "adam_"):
            self.__dict__.pop(attr, None)
        self._initialize(X, y)
        for _ in range(self.epochs):
            self.partial_fit(X, y)
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X, _ = self._validate_xy(X)
        out = np.empty((len(X), int(np.prod(self.target_shape_))))
        for start in range(0, len(X), 4096):
            out[start:start + 4096] = self.net_.forward(self._prepare(X[start:start + 4096]))[0]
        return out.reshape((len(X),) + self.target_shape_)

    def score(self, X, y, sample_weight=None):
        """Negative MSE (higher is better)."""
        return -loss_mse(self.predict(X), y)


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = "RNCKPT1"


def save_checkpoint(path, model: NoddiPatchRegressor, extra: dict | None = None) -> None:
    """Write a text header followed by the raw float64 payload.

    Header lines are ``key = value``; the ``layout`` line lists every array
    as ``name:shape`` in payload order. Arrays are C-ordered little-endian
    float64, concatenated without padding. The header ends at ``END``.
    """
    check_is_fitted(model, "net_")
    arrays = [("feature_mean", model.feature_mean_), ("feature_scale", model.feature_scale_)]
    arrays += list(zip(model.net_.names, model.net_.params))
    layout = ",".join(f"{n}:{'x'.join(str(s) for s in a.shape)}" for n, a in arrays)
    header = {
        "format": CKPT_MAGIC,
        "dtype": "f64le",
        "order": "C",
        "architecture": json.dumps(model.net_.descriptor(), sort_keys=True),
        "estimator_params": json.dumps(model.get_params(), sort_keys=True, default=list),
        "input_shape": "x".join(str(s) for s in model.input_shape_),
        "target_shape": "x".join(str(s) for s in model.target_shape_),
        "n_iter": str(model.n_iter_),
        "loss_curve": json.dumps([float(v) for v in model.loss_curve_]),
        "extra": json.dumps(extra or {}, sort_keys=True),
        "layout": layout,
    }
    with open(path, "wb") as f:
        for k, v in header.items():
            f.write(f"{k} = {v}\n".encode("utf-8"))
        f.write(b"END\n")
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`. Returns ``(model, extra)``."""
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"\nEND\n")
    if end < 0:
        raise DataError(f"{path}: checkpoint header is not terminated")
    header = {}
    for line in blob[:end].decode("utf-8").splitlines():
        k, _, v = line.partition(" = ")
        header[k] = v
    if header.get("format") != CKPT_MAGIC or header.get("dtype") != "f64le":
        raise VersionError(f"{path}: unsupported checkpoint format")
    payload = blob[end + 5:]
    params = json.loads(header["estimator_params"])
    if "hidden_layer_sizes" in params:
        params["hidden_layer_sizes"] = tuple(params["hidden_layer_sizes"])
    model = NoddiPatchRegressor(**params)
    desc = json.loads(header["architecture"])
    model.net_ = network_from_descriptor(desc)
    arrays = {}
    offset = 0
    for item in header["layout"].split(","):
        name, shape_s = item.split(":")
        shape = tuple(int(s) for s in shape_s.split("x")) if shape_s else ()
        n = int(np.prod(shape)) * 8
        if offset + n > len(payload):
            raise DataError(f"{path}: checkpoint payload is truncated")
        arrays[name] = np.frombuffer(payload[offset:offset + n], dtype="<f8").reshape(shape).astype(np.float64)
        offset += n
    if offset != len(payload):
        raise DataError(f"{path}: checkpoint payload has trailing bytes")
    model.net_.params = [arrays[n] for n in model.net_.names]
    model.feature_mean_ = arrays["feature_mean"]
    model.feature_scale_ = arrays["feature_scale"]
    model.input_shape_ = tuple(int(s) for s in header["input_shape"].split("x"))
    model.target_shape_ = tuple(int(s) for s in header["target_shape"].split("x"))
    model.n_features_in_ = int(np.prod(model.input_shape_))
    model.n_iter_ = int(header["n_iter"])
    model.loss_curve_ = json.loads(header["loss_curve"])
    model.adam_ = AdamState.zeros_like(model.net_.params)
    model._shuffle_rng = np.random.default_rng([int(model.random_state), 1])
    return model, json.loads(header["extra"])
