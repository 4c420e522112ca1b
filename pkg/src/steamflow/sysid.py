"""Open-loop excitation, data collection and neural plant identification.

Signals follow the causal sampling convention ``y[k] = C x[k]`` and
``x[k+1] = Ad x[k] + Bd u[k]``: the output at sample ``k`` depends on
inputs up to ``k - 1`` only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .neural import Mlp, TrainConfig, TrainingError, minimize_mse, train
from .plant import DiscretePlant, make_plant

DEFAULT_DELAYS = 4


class IdentificationError(TrainingError):
    """Identification failed or the data cannot support it."""


@dataclass(frozen=True)
class ExcitationConfig:
    """Random piecewise-constant input: amplitude and hold time drawn uniformly per segment."""

    u_min: float = 1.0
    u_max: float = 2.0
    interval_min: float = 15.0
    interval_max: float = 30.0
    total_segments: int = 40
    sample_time: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.u_min <= self.u_max:
            raise ValueError("u_min must not exceed u_max")
        if not 0 < self.interval_min <= self.interval_max:
            raise ValueError("need 0 < interval_min <= interval_max")
        if self.sample_time <= 0 or self.total_segments < 1:
            raise ValueError("sample_time and total_segments must be positive")


def generate_excitation(cfg: ExcitationConfig = ExcitationConfig()) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    amplitudes = rng.uniform(cfg.u_min, cfg.u_max, size=cfg.total_segments)
    durations = rng.uniform(cfg.interval_min, cfg.interval_max, size=cfg.total_segments)
    lengths = np.maximum(1, np.rint(durations / cfg.sample_time).astype(int))
    return np.repeat(amplitudes, lengths)


@dataclass
class Dataset:
    u: np.ndarray
    y: np.ndarray
    sample_time: float = 0.1

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.u.shape != self.y.shape:
            raise ValueError("u and y must have equal length")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self):
        return self.u.size

    @property
    def t(self):
        return np.arange(len(self)) * self.sample_time

    def split(self, validation_fraction=0.2):
        """Contiguous train/validation blocks (no shuffling)."""
        n_train = int(round(len(self) * (1.0 - validation_fraction)))
        return (Dataset(self.u[:n_train], self.y[:n_train], self.sample_time),
                Dataset(self.u[n_train:], self.y[n_train:], self.sample_time))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "u", "y"])
            for t, u, y in zip(self.t, self.u, self.y):
                writer.writerow([f"{t:.17g}", f"{u:.17g}", f"{y:.17g}"])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["t", "u", "y"]:
                raise ValueError(f"{path}: expected header t,u,y, got {header}")
            rows = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
        if rows.size == 0:
            return cls(np.zeros(0), np.zeros(0))
        dt = float(rows[1, 0] - rows[0, 0]) if len(rows) > 1 else 0.1
        return cls(rows[:, 1], rows[:, 2], dt)


def collect_dataset(cfg: ExcitationConfig = ExcitationConfig(), plant: DiscretePlant | None = None) -> Dataset:
    """Drive a zero-state plant with the excitation from ``cfg``."""
    plant = make_plant(sample_time=cfg.sample_time) if plant is None else plant
    u = generate_excitation(cfg)
    y = np.empty_like(u)
    for k, v in enumerate(u):
        y[k] = plant.output()
        plant.step(v)
    return Dataset(u, y, cfg.sample_time)


def lagged(signal, k, depth, lag0):
    """``[s[k-lag0], s[k-lag0-1], ...]`` of length ``depth``; zero before the record starts."""
    idx = k - lag0 - np.arange(depth)
    out = np.where(idx >= 0, signal[np.clip(idx, 0, None)], 0.0)
    return out


def narx_regressors(u, y, input_delays=DEFAULT_DELAYS, output_delays=DEFAULT_DELAYS):
    """Rows ``[y(k-1..k-ny), u(k-1..k-nu)]`` with targets ``y(k)`` for every ``k`` with full history."""
    u = np.asarray(u, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    start = max(input_delays, output_delays)
    ks = np.arange(start, y.size)
    yl = np.stack([y[ks - i] for i in range(1, output_delays + 1)], axis=1)
    ul = np.stack([u[ks - i] for i in range(1, input_delays + 1)], axis=1)
    return np.hstack([yl, ul]), y[ks]


def _signal_ranges(u, y):
    return (float(u.min()), float(u.max())), (float(y.min()), float(y.max()))


def _history_net(hidden_size, ny, nu, u_range, y_range, seed, out_range=None):
    net = Mlp.initialize([ny + nu, hidden_size, 1], seed=seed)
    x_min = [y_range[0]] * ny + [u_range[0]] * nu
    x_max = [y_range[1]] * ny + [u_range[1]] * nu
    out = out_range or (-1.0, 1.0)
    return net.set_scaling(x_min, x_max, out[0], out[1])


def rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


class NarxModel(BaseEstimator):
    """One-step-ahead neural ARX predictor ``y(k) = N(y(k-1..k-ny), u(k-1..k-nu))``.

    Trained series-parallel (measured past outputs in the regressor) on
    the leading block of the data; the trailing ``validation_fraction`` is
    held out for :attr:`validation_rmse_`.
    """

    def __init__(self, input_delays=DEFAULT_DELAYS, output_delays=DEFAULT_DELAYS, hidden_size=6,
                 epochs=65, seed=0, algorithm="levenberg_marquardt", lm_lambda_init=1e-3,
                 validation_fraction=0.2):
        self.input_delays = input_delays
        self.output_delays = output_delays
        self.hidden_size = hidden_size
        self.epochs = epochs
        self.seed = seed
        self.algorithm = algorithm
        self.lm_lambda_init = lm_lambda_init
        self.validation_fraction = validation_fraction

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, seed=self.seed, algorithm=self.algorithm,
                           lm_lambda_init=self.lm_lambda_init)

    def fit(self, X, y, sample_time=0.1):
        data = Dataset(X, y, sample_time)
        if len(data) <= max(self.input_delays, self.output_delays) + 10:
            raise IdentificationError(f"need more than {max(self.input_delays, self.output_delays) + 10} samples, got {len(data)}")
        fit_part, val_part = data.split(self.validation_fraction) if self.validation_fraction else (data, None)
        u_range, y_range = _signal_ranges(fit_part.u, fit_part.y)
        Xr, T = narx_regressors(fit_part.u, fit_part.y, self.input_delays, self.output_delays)
        net = _history_net(self.hidden_size, self.output_delays, self.input_delays, u_range, y_range,
                           self.seed, out_range=y_range)
        self.net_, self.loss_history_ = train(net, Xr, T, self._train_config())
        self.u_range_, self.y_range_ = u_range, y_range
        self.sample_time_ = sample_time
        self.train_rmse_ = rmse(self.net_.forward(Xr)[:, 0], T)
        self.validation_rmse_ = None
        if val_part is not None and len(val_part) > max(self.input_delays, self.output_delays):
            self.validation_rmse_ = self.one_step_rmse(val_part.u, val_part.y)
        return self

    def predict(self, X, y):
        """One-step predictions for samples ``k >= max_delay`` given measured ``y``."""
        check_is_fitted(self, "net_")
        Xr, _ = narx_regressors(X, y, self.input_delays, self.output_delays)
        return self.net_.forward(Xr)[:, 0]

    def one_step_rmse(self, u, y):
        _, T = narx_regressors(u, y, self.input_delays, self.output_delays)
        return rmse(self.predict(u, y), T)

    def predict_next(self, y_hist, u_hist):
        """``y(k+1)`` from ``y_hist = [y(k), y(k-1), ...]`` and ``u_hist = [u(k), u(k-1), ...]``."""
        check_is_fitted(self, "net_")
        x = np.concatenate([np.asarray(y_hist, float)[:self.output_delays],
                            np.asarray(u_hist, float)[:self.input_delays]])
        return float(self.net_.forward(x)[0])

    def simulate(self, u, y_init):
        """Free-run (parallel) rollout: model outputs feed back into the regressor.

        ``y_init`` supplies the first ``max_delay`` outputs; the returned
        array has the same length as ``u``.
        """
        check_is_fitted(self, "net_")
        u = np.asarray(u, dtype=float).ravel()
        start = max(self.input_delays, self.output_delays)
        y = np.zeros_like(u)
        y[:start] = np.asarray(y_init, dtype=float).ravel()[:start]
        for k in range(start, u.size):
            x = np.concatenate([y[k - self.output_delays:k][::-1], u[k - self.input_delays:k][::-1]])
            y[k] = self.net_.forward(x)[0]
        return y


class NarmaL2Model(BaseEstimator):
    """Control-affine predictor ``y(k+d) = f(h(k)) + g(h(k)) * u(k)``.

    The history ``h(k)`` holds ``y(k..k-ny+1)`` and ``u(k-1..k-nu)``.  The
    input is assumed held at ``u(k)`` over the ``d = horizon`` steps; with
    ``horizon=1`` this is the ordinary one-step form.  ``f`` and ``g`` work
    in normalized units (both signals mapped to ``[-1, 1]`` over the
    training range); :meth:`predict_next` converts back.
    """

    def __init__(self, input_delays=DEFAULT_DELAYS, output_delays=DEFAULT_DELAYS, hidden_size=6,
                 epochs=65, seed=0, horizon=1, algorithm="levenberg_marquardt", lm_lambda_init=1e-3,
                 validation_fraction=0.2, g_floor=1e-3):
        self.input_delays = input_delays
        self.output_delays = output_delays
        self.hidden_size = hidden_size
        self.epochs = epochs
        self.seed = seed
        self.horizon = horizon
        self.algorithm = algorithm
        self.lm_lambda_init = lm_lambda_init
        self.validation_fraction = validation_fraction
        self.g_floor = g_floor

    def _regressors(self, u, y):
        u = np.asarray(u, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        d = int(self.horizon)
        start = max(self.output_delays - 1, self.input_delays)
        ks = np.arange(start, y.size - d)
        if d > 1 and ks.size:
            # keep only samples where the input really is held over the horizon
            held = np.all([u[ks + j] == u[ks] for j in range(1, d)], axis=0)
            ks = ks[held]
        H = np.hstack([np.stack([y[ks - i] for i in range(self.output_delays)], axis=1),
                       np.stack([u[ks - i] for i in range(1, self.input_delays + 1)], axis=1)])
        return H, u[ks], y[ks + d]

    def _norm_u(self, u):
        return (np.asarray(u, dtype=float) - self.u_center_) / self.u_half_

    def fit(self, X, y, sample_time=0.1):
        data = Dataset(X, y, sample_time)
        if len(data) <= max(self.input_delays, self.output_delays) + 10 + self.horizon:
            raise IdentificationError("not enough samples for NARMA-L2 identification")
        fit_part, val_part = data.split(self.validation_fraction) if self.validation_fraction else (data, None)
        u_range, y_range = _signal_ranges(fit_part.u, fit_part.y)
        if u_range[0] == u_range[1]:
            raise IdentificationError("degenerate g: constant input leaves g unidentifiable")
        self.u_center_, self.u_half_ = _center_half(u_range)
        self.y_center_, self.y_half_ = _center_half(y_range)

        H, uk, target = self._regressors(fit_part.u, fit_part.y)
        if H.shape[0] < 10:
            raise IdentificationError("too few held-input samples for the requested horizon")
        un = self._norm_u(uk)
        tn = (target - self.y_center_) / self.y_half_
        f_net = _history_net(self.hidden_size, self.output_delays, self.input_delays, u_range, y_range, self.seed)
        g_net = _history_net(self.hidden_size, self.output_delays, self.input_delays, u_range, y_range, self.seed + 1)
        nf = f_net.n_params

        def split(theta):
            f_net.set_flat(theta[:nf])
            g_net.set_flat(theta[nf:])

        def residual(theta):
            split(theta)
            return f_net.forward(H)[:, 0] + g_net.forward(H)[:, 0] * un - tn

        def jacobian(theta):
            split(theta)
            r = f_net.forward(H)[:, 0] + g_net.forward(H)[:, 0] * un - tn
            J = np.hstack([f_net.param_jacobian(H), g_net.param_jacobian(H) * un[:, None]])
            return r, J

        cfg = TrainConfig(epochs=self.epochs, seed=self.seed, algorithm=self.algorithm,
                          lm_lambda_init=self.lm_lambda_init)
        theta, self.loss_history_ = minimize_mse(residual, jacobian,
                                                 np.concatenate([f_net.get_flat(), g_net.get_flat()]), cfg)
        split(theta)
        self.f_net_, self.g_net_ = f_net, g_net
        self.u_range_, self.y_range_ = u_range, y_range
        self.sample_time_ = sample_time

        g_vals = g_net.forward(H)[:, 0]
        if not np.all(np.isfinite(g_vals)) or np.max(np.abs(g_vals)) < self.g_floor:
            raise IdentificationError("identified g is degenerate (|g| below floor everywhere)")
        self.train_rmse_ = rmse(self.predict(fit_part.u, fit_part.y), target)
        self.validation_rmse_ = None
        if val_part is not None and len(val_part) > self.horizon + max(self.input_delays, self.output_delays) + 1:
            _, _, vt = self._regressors(val_part.u, val_part.y)
            if vt.size:
                self.validation_rmse_ = rmse(self.predict(val_part.u, val_part.y), vt)
        return self

    def f_g(self, y_hist, u_hist):
        """Normalized ``(f, g)`` for ``y_hist = [y(k)..]`` and ``u_hist = [u(k-1)..]``."""
        check_is_fitted(self, "f_net_")
        h = np.concatenate([np.asarray(y_hist, float)[:self.output_delays],
                            np.asarray(u_hist, float)[:self.input_delays]])
        return float(self.f_net_.forward(h)[0]), float(self.g_net_.forward(h)[0])

    def g_values(self, X, y):
        H, _, _ = self._regressors(X, y)
        return self.g_net_.forward(H)[:, 0]

    def predict(self, X, y):
        """Predicted ``y(k+d)`` for every valid history in the record (physical units)."""
        check_is_fitted(self, "f_net_")
        H, uk, _ = self._regressors(X, y)
        yn = self.f_net_.forward(H)[:, 0] + self.g_net_.forward(H)[:, 0] * self._norm_u(uk)
        return self.y_center_ + self.y_half_ * yn

    def targets(self, X, y):
        return self._regressors(X, y)[2]

    def predict_next(self, y_hist, u_hist, u_now):
        f, g = self.f_g(y_hist, u_hist)
        return self.y_center_ + self.y_half_ * (f + g * float(self._norm_u(u_now)))


def _center_half(rng):
    lo, hi = rng
    half = (hi - lo) / 2.0
    return (hi + lo) / 2.0, (half if half > 0 else 1.0)


def identify_narx(data: Dataset, cfg: TrainConfig = TrainConfig(), hidden_size=6,
                  delays=(DEFAULT_DELAYS, DEFAULT_DELAYS)) -> NarxModel:
    model = NarxModel(input_delays=delays[0], output_delays=delays[1], hidden_size=hidden_size,
                      epochs=cfg.epochs, seed=cfg.seed, algorithm=cfg.algorithm,
                      lm_lambda_init=cfg.lm_lambda_init)
    return model.fit(data.u, data.y, data.sample_time)


def identify_narma_l2(data: Dataset, cfg: TrainConfig = TrainConfig(), hidden_size=6, horizon=1,
                      delays=(DEFAULT_DELAYS, DEFAULT_DELAYS)) -> NarmaL2Model:
    model = NarmaL2Model(input_delays=delays[0], output_delays=delays[1], hidden_size=hidden_size,
                         epochs=cfg.epochs, seed=cfg.seed, horizon=horizon, algorithm=cfg.algorithm,
                         lm_lambda_init=cfg.lm_lambda_init)
    return model.fit(data.u, data.y, data.sample_time)


def output_range(y) -> float:
    y = np.asarray(y, dtype=float)
    span = float(y.max() - y.min())
    return span if span > 0 else math.nan
