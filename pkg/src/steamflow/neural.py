"""Small feed-forward networks, tapped delay lines and Levenberg-Marquardt training.

Networks have tanh hidden layers and a linear output layer.  Each network
carries fixed affine input/output scaling so callers work in physical
units while the weights see roughly unit-range signals.
"""

from __future__ import annotations

import copy
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

__all__ = [
    "Mlp",
    "TappedDelayLine",
    "TrainConfig",
    "TrainingError",
    "mlp_forward",
    "mlp_gradient",
    "train",
    "levenberg_marquardt",
    "MlpRegressor",
    "format_mlp",
    "parse_mlp",
    "parse_sections",
]


class TrainingError(RuntimeError):
    """Training could not proceed (bad data or divergence)."""


class Mlp:
    """Multilayer perceptron with tanh hidden units and a linear output.

    ``weights[i]`` has shape ``(layer_sizes[i+1], layer_sizes[i])``.  Inputs
    are mapped through ``(x - input_offset) / input_scale`` before the first
    layer and outputs through ``y * output_scale + output_offset`` after the
    last.
    """

    def __init__(self, layer_sizes, weights=None, biases=None, input_offset=None,
                 input_scale=None, output_offset=None, output_scale=None):
        self.layer_sizes = [int(n) for n in layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"invalid layer_sizes {layer_sizes!r}")
        pairs = list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        if weights is None:
            weights = [np.zeros((o, i)) for i, o in pairs]
        if biases is None:
            biases = [np.zeros(o) for _, o in pairs]
        self.weights = [np.array(w, dtype=float, ndmin=2) for w in weights]
        self.biases = [np.array(b, dtype=float, ndmin=1) for b in biases]
        if len(self.weights) != len(pairs) or len(self.biases) != len(pairs):
            raise ValueError("number of weight/bias arrays does not match layer_sizes")
        for (i, o), w, b in zip(pairs, self.weights, self.biases):
            if w.shape != (o, i) or b.shape != (o,):
                raise ValueError(f"expected weight {(o, i)} and bias {(o,)}, got {w.shape} and {b.shape}")
        n_in, n_out = self.layer_sizes[0], self.layer_sizes[-1]
        self.input_offset = _vec(input_offset, n_in, 0.0)
        self.input_scale = _vec(input_scale, n_in, 1.0)
        self.output_offset = _vec(output_offset, n_out, 0.0)
        self.output_scale = _vec(output_scale, n_out, 1.0)
        if np.any(self.input_scale == 0) or np.any(self.output_scale == 0):
            raise ValueError("scaling factors must be nonzero")
        if not all(np.all(np.isfinite(a)) for a in self.weights + self.biases):
            raise ValueError("network parameters must be finite")

    @classmethod
    def initialize(cls, layer_sizes, seed=0, **scaling):
        """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` from a seeded generator."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / math.sqrt(n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            biases.append(rng.uniform(-bound, bound, size=n_out))
        return cls(layer_sizes, weights, biases, **scaling)

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_outputs(self):
        return self.layer_sizes[-1]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_flat(self):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = theta[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = theta[pos:pos + b.size]
            pos += b.size
        return self

    def copy(self):
        return copy.deepcopy(self)

    def set_scaling(self, x_min, x_max, y_min, y_max):
        """Map ``[x_min, x_max]`` and ``[y_min, y_max]`` onto ``[-1, 1]``; degenerate ranges get unit scale."""
        self.input_offset, self.input_scale = _affine(x_min, x_max, self.n_inputs)
        self.output_offset, self.output_scale = _affine(y_min, y_max, self.n_outputs)
        return self

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise ValueError(f"expected input of width {self.n_inputs}, got shape {x.shape}")
        return X, single

    def _activations(self, X):
        acts = [(X - self.input_offset) / self.input_scale]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w.T + b
            acts.append(z if i == last else np.tanh(z))
        return acts

    def forward(self, x):
        X, single = self._check_input(x)
        y = self._activations(X)[-1] * self.output_scale + self.output_offset
        return y[0] if single else y

    __call__ = forward

    def _backprop(self, acts, delta):
        """Per-sample parameter gradients given the output-layer delta ``(N, n_out)``."""
        grads = []
        for i in range(len(self.weights) - 1, -1, -1):
            a_prev = acts[i]
            grads.append((delta[:, :, None] * a_prev[:, None, :], delta))
            if i:
                delta = (delta @ self.weights[i]) * (1.0 - a_prev ** 2)
        grads.reverse()
        n = delta.shape[0]
        return np.concatenate([np.concatenate([gw.reshape(n, -1), gb], axis=1) for gw, gb in grads], axis=1)

    def param_jacobian(self, x, output=0):
        """``d y[output] / d theta`` for each sample, shape ``(N, n_params)``."""
        X, single = self._check_input(x)
        acts = self._activations(X)
        delta = np.zeros((X.shape[0], self.n_outputs))
        delta[:, output] = self.output_scale[output]
        J = self._backprop(acts, delta)
        return J[0] if single else J

    def input_jacobian(self, x):
        """``d y / d x`` in physical units, shape ``(N, n_out, n_in)``."""
        X, single = self._check_input(x)
        acts = self._activations(X)
        jac = np.broadcast_to(self.weights[-1], (X.shape[0],) + self.weights[-1].shape)
        for i in range(len(self.weights) - 2, -1, -1):
            jac = (jac * (1.0 - acts[i + 1] ** 2)[:, None, :]) @ self.weights[i]
        jac = jac * self.output_scale[None, :, None] / self.input_scale[None, None, :]
        return jac[0] if single else jac

    def value_and_input_grad(self, x):
        """First output and its gradient w.r.t. a single input vector, in one pass.

        Same numbers as ``forward`` / ``input_jacobian`` without the batch
        bookkeeping; used in tight receding-horizon loops.
        """
        a = (x - self.input_offset) / self.input_scale
        acts = [a]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.tanh(w @ a + b)
            acts.append(a)
        w_out = self.weights[-1][0]
        y = w_out @ a + self.biases[-1][0]
        g = w_out
        for i in range(len(self.weights) - 2, -1, -1):
            g = (g * (1.0 - acts[i + 1] ** 2)) @ self.weights[i]
        s = self.output_scale[0]
        return y * s + self.output_offset[0], g * (s / self.input_scale)

    def __repr__(self):
        return f"Mlp(layer_sizes={self.layer_sizes})"


def _vec(v, n, default):
    if v is None:
        return np.full(n, default, dtype=float)
    out = np.array(v, dtype=float).reshape(-1)
    if out.size == 1 and n > 1:
        out = np.full(n, out[0])
    if out.shape != (n,):
        raise ValueError(f"scaling vector must have length {n}")
    return out


def _affine(lo, hi, n):
    lo = _vec(lo, n, -1.0)
    hi = _vec(hi, n, 1.0)
    half = (hi - lo) / 2.0
    half[half <= 0] = 1.0
    return (hi + lo) / 2.0, half


def mlp_forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def mlp_gradient(net: Mlp, x, target):
    """Reverse-mode gradient of ``0.5 * ||net(x) - target||^2``.

    Returns ``(weight_grads, bias_grads)`` with the same shapes as the
    network's parameter arrays.  A 2-D ``x`` sums the loss over rows.
    """
    X, _ = net._check_input(x)
    T = np.asarray(target, dtype=float).reshape(X.shape[0], net.n_outputs)
    acts = net._activations(X)
    err = acts[-1] * net.output_scale + net.output_offset - T
    flat = net._backprop(acts, err * net.output_scale).sum(axis=0)
    gw, gb = [], []
    pos = 0
    for w, b in zip(net.weights, net.biases):
        gw.append(flat[pos:pos + w.size].reshape(w.shape))
        pos += w.size
        gb.append(flat[pos:pos + b.size])
        pos += b.size
    return gw, gb


class TappedDelayLine:
    """Fixed-depth history; ``read()[0]`` is the most recent value."""

    def __init__(self, depth: int = 4, fill: float = 0.0):
        if int(depth) < 1:
            raise ValueError("depth must be >= 1")
        self.depth = int(depth)
        self.buffer = deque([float(fill)] * self.depth, maxlen=self.depth)

    def push(self, value):
        self.buffer.appendleft(float(value))

    def read(self):
        return np.fromiter(self.buffer, dtype=float, count=self.depth)

    def fill(self, value):
        self.buffer = deque([float(value)] * self.depth, maxlen=self.depth)

    def __len__(self):
        return self.depth


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 65
    seed: int = 0
    algorithm: str = "levenberg_marquardt"
    lm_lambda_init: float = 1e-3
    lr: float = 0.01
    momentum: float = 0.9

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lm_lambda_init > 0:
            raise ValueError("lm_lambda_init must be > 0")
        if self.algorithm not in ("levenberg_marquardt", "gradient_momentum"):
            raise ValueError(f"unknown training algorithm {self.algorithm!r}")


def levenberg_marquardt(residual, jacobian, theta0, epochs=65, lambda_init=1e-3,
                        lambda_dec=0.1, lambda_inc=10.0, lambda_max=1e10, goal=0.0):
    """Minimize ``mean(residual(theta)**2)`` with damped Gauss-Newton steps.

    ``jacobian(theta)`` returns ``(r, J)`` at ``theta``; ``residual(theta)``
    returns ``r`` alone for trial points.  Returns ``(theta, history)``
    where ``history`` holds the loss after every epoch; losses are
    non-increasing because only improving steps are accepted.
    """
    theta = np.array(theta0, dtype=float)
    lam = float(lambda_init)
    r, J = jacobian(theta)
    loss = float(np.mean(r ** 2))
    history = []
    for _ in range(int(epochs)):
        if loss <= goal or lam > lambda_max:
            break
        g = J.T @ r
        H = J.T @ J
        diag = np.arange(theta.size)
        while lam <= lambda_max:
            H_damped = H.copy()
            H_damped[diag, diag] += lam
            try:
                step = np.linalg.solve(H_damped, -g)
            except np.linalg.LinAlgError:
                lam *= lambda_inc
                continue
            trial = theta + step
            r_trial = residual(trial)
            loss_trial = float(np.mean(r_trial ** 2)) if np.all(np.isfinite(r_trial)) else math.inf
            if loss_trial < loss:
                theta = trial
                lam = max(lam * lambda_dec, 1e-20)
                r, J = jacobian(theta)
                loss = float(np.mean(r ** 2))
                break
            lam *= lambda_inc
        history.append(loss)
    return theta, history


def _gradient_momentum(residual, jacobian, theta0, epochs, lr, momentum):
    theta = np.array(theta0, dtype=float)
    velocity = np.zeros_like(theta)
    r, J = jacobian(theta)
    best = (float(np.mean(r ** 2)), theta.copy())
    history = []
    for _ in range(int(epochs)):
        grad = 2.0 * (J.T @ r) / r.size
        velocity = momentum * velocity - lr * grad
        theta = theta + velocity
        r, J = jacobian(theta)
        loss = float(np.mean(r ** 2))
        if not math.isfinite(loss):
            break
        if loss < best[0]:
            best = (loss, theta.copy())
        history.append(best[0])
    return best[1], history


def minimize_mse(residual, jacobian, theta0, cfg: TrainConfig):
    """Dispatch to the training algorithm named in ``cfg``."""
    if cfg.algorithm == "levenberg_marquardt":
        return levenberg_marquardt(residual, jacobian, theta0, cfg.epochs, cfg.lm_lambda_init)
    return _gradient_momentum(residual, jacobian, theta0, cfg.epochs, cfg.lr, cfg.momentum)


def _check_dataset(net, inputs, targets):
    X = np.asarray(inputs, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if X.size == 0 or Y.size == 0:
        raise TrainingError("empty dataset")
    if X.ndim == 1:
        X = X.reshape(-1, net.n_inputs)
    if Y.size % X.shape[0]:
        raise TrainingError(f"{X.shape[0]} input rows but {Y.size} target values")
    Y = Y.reshape(X.shape[0], -1)
    if X.shape[1] != net.n_inputs or Y.shape[1] != net.n_outputs:
        raise TrainingError(f"dataset shapes {X.shape}/{Y.shape} do not match network {net.layer_sizes}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise TrainingError("dataset contains non-finite values")
    return X, Y


def train(net: Mlp, inputs, targets, cfg: TrainConfig = TrainConfig()):
    """Fit ``net`` to ``(inputs, targets)`` by least squares.

    The network passed in is not modified; a trained copy is returned
    together with the per-epoch MSE history.
    """
    X, Y = _check_dataset(net, inputs, targets)
    work = net.copy()

    def residual(theta):
        work.set_flat(theta)
        return (work.forward(X) - Y).ravel()

    def jacobian(theta):
        work.set_flat(theta)
        r = (work.forward(X) - Y)
        J = np.stack([work.param_jacobian(X, o) for o in range(work.n_outputs)], axis=1)
        return r.ravel(), J.reshape(-1, work.n_params)

    theta, history = minimize_mse(residual, jacobian, work.get_flat(), cfg)
    work.set_flat(theta)
    return work, history


class MlpRegressor(BaseEstimator, RegressorMixin):
    """Estimator wrapper: min/max scaling from the data, seeded init, LM fit."""

    def __init__(self, hidden_layer_sizes=(6,), epochs=65, seed=0,
                 algorithm="levenberg_marquardt", lm_lambda_init=1e-3):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.epochs = epochs
        self.seed = seed
        self.algorithm = algorithm
        self.lm_lambda_init = lm_lambda_init

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        Y = y.reshape(len(y), -1)
        sizes = [X.shape[1], *self.hidden_layer_sizes, Y.shape[1]]
        net = Mlp.initialize(sizes, seed=self.seed)
        net.set_scaling(X.min(axis=0), X.max(axis=0), Y.min(axis=0), Y.max(axis=0))
        cfg = TrainConfig(epochs=self.epochs, seed=self.seed, algorithm=self.algorithm,
                          lm_lambda_init=self.lm_lambda_init)
        self.net_, self.loss_history_ = train(net, X, Y, cfg)
        self.n_features_in_ = X.shape[1]
        self._single_output = y.ndim == 1
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X)
        out = self.net_.forward(X)
        return out[:, 0] if self._single_output else out


# -- plain-text persistence -------------------------------------------------

def _fmt(values):
    return " ".join(f"{v:.17g}" for v in np.asarray(values, dtype=float).ravel())


def format_mlp(net: Mlp, name: str = "mlp") -> str:
    """Serialize ``net`` as ``[name.section]`` blocks of whitespace-separated numbers."""
    lines = [f"[{name}.layer_sizes]", " ".join(str(n) for n in net.layer_sizes)]
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"[{name}.weights.{i}]")
        lines.extend(_fmt(row) for row in w)
        lines.append(f"[{name}.biases.{i}]")
        lines.append(_fmt(b))
    for key in ("input_offset", "input_scale", "output_offset", "output_scale"):
        lines.append(f"[{name}.{key}]")
        lines.append(_fmt(getattr(net, key)))
    return "\n".join(lines) + "\n"


def parse_sections(text: str) -> dict:
    """Split ``[section]`` text into ``{section: [non-empty lines]}``; ``#`` starts a comment."""
    sections, current = {}, None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise ValueError(f"duplicate section [{current}]")
            sections[current] = []
        elif current is None:
            raise ValueError(f"content outside a section: {raw!r}")
        else:
            sections[current].append(line)
    return sections


def parse_mlp(sections: dict, name: str = "mlp") -> Mlp:
    def nums(key):
        rows = sections.get(f"{name}.{key}")
        if rows is None:
            raise ValueError(f"missing section [{name}.{key}]")
        return [[float(v) for v in row.split()] for row in rows]

    sizes = [int(v) for v in sections[f"{name}.layer_sizes"][0].split()]
    n_layers = len(sizes) - 1
    weights = [np.array(nums(f"weights.{i}")) for i in range(n_layers)]
    biases = [np.array(nums(f"biases.{i}")[0]) for i in range(n_layers)]
    scaling = {k: nums(k)[0] for k in ("input_offset", "input_scale", "output_offset", "output_scale")}
    return Mlp(sizes, weights, biases, **scaling)
