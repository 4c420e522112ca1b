"""Neural closed-loop control laws: NARMA-L2, model reference and predictive."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from .neural import Mlp, TappedDelayLine, TrainConfig, TrainingError, minimize_mse
from .plant import TransferFunction, discretize, tf_to_state_space
from .sysid import NarmaL2Model, NarxModel

DEFAULT_U_LIMITS = (-250.0, 250.0)


class ControllerFault(RuntimeError):
    """A controller produced or received a non-finite value."""


def _clamp(u, limits):
    if limits is None:
        return u
    return min(max(u, limits[0]), limits[1])


def _check_finite(value, what):
    if not math.isfinite(value):
        raise ControllerFault(f"{what} is not finite ({value!r})")
    return value


class ReferenceModel:
    """Second-order target dynamics ``wn^2 / (s^2 + 2 zeta wn s + wn^2)`` under ZOH."""

    def __init__(self, zeta=0.8, omega_n=1.0, sample_time=0.1):
        if not 0 < zeta < 1:
            raise ValueError("zeta must lie in (0, 1)")
        if not omega_n > 0:
            raise ValueError("omega_n must be > 0")
        self.zeta = float(zeta)
        self.omega_n = float(omega_n)
        self.sample_time = float(sample_time)
        wn2 = self.omega_n ** 2
        tf = TransferFunction((wn2,), (1.0, 2.0 * self.zeta * self.omega_n, wn2))
        self._plant = discretize(tf_to_state_space(tf), self.sample_time)

    @property
    def state(self):
        return self._plant.state

    def reset(self):
        self._plant.reset()
        return self

    def output(self):
        return self._plant.output()

    def step(self, r):
        """Advance one sample with input ``r``; returns the new output."""
        return self._plant.step(r)

    def response(self, r):
        """Output sequence ``y_m(k+1)`` for an input sequence ``r(k)``, starting from rest."""
        sim = self._plant.copy().reset()
        return np.array([sim.step(v) for v in np.asarray(r, dtype=float)])

    def get_params(self):
        return {"zeta": self.zeta, "omega_n": self.omega_n, "sample_time": self.sample_time}


def reference_model_step(rm: ReferenceModel, r: float) -> float:
    return rm.step(r)


class NarmaL2Controller(BaseEstimator):
    """Inverts the identified control-affine model for the input that hits the reference.

    Each call pushes the new measurement, evaluates ``f`` and ``g`` on the
    history and solves ``f + g u = y_ref`` in normalized units, with
    ``|g|`` floored to keep the division bounded.
    """

    def __init__(self, model: NarmaL2Model, g_floor=1e-3, u_limits=DEFAULT_U_LIMITS):
        self.model = model
        self.g_floor = g_floor
        self.u_limits = u_limits
        self.reset()

    def reset(self):
        self.y_history = TappedDelayLine(self.model.output_delays)
        self.u_history = TappedDelayLine(self.model.input_delays)
        self.last_raw_u = 0.0
        self.floor_engaged = False
        return self

    def _solve(self, y_ref, y_hist, u_hist):
        m = self.model
        f, g = m.f_g(y_hist, u_hist)
        _check_finite(f, "NARMA-L2 f output")
        _check_finite(g, "NARMA-L2 g output")
        g_eff = math.copysign(max(abs(g), self.g_floor), g if g != 0 else 1.0)
        target = (y_ref - m.y_center_) / m.y_half_
        return m.u_center_ + m.u_half_ * (target - f) / g_eff, abs(g) < self.g_floor

    def solve(self, y_ref, y_hist, u_hist):
        """Unclamped input for the given histories (no state change)."""
        return self._solve(y_ref, y_hist, u_hist)[0]

    def control(self, y_ref_next, y_meas):
        self.y_history.push(_check_finite(float(y_meas), "measurement"))
        raw, self.floor_engaged = self._solve(float(y_ref_next), self.y_history.read(), self.u_history.read())
        self.last_raw_u = _check_finite(raw, "NARMA-L2 control")
        u = _clamp(raw, self.u_limits)
        self.u_history.push(u)
        return u

    @property
    def preview(self):
        """Steps ahead at which the reference is requested."""
        return int(self.model.horizon)


def narma_l2_control(ctl: NarmaL2Controller, y_ref_next, y_meas):
    return ctl.control(y_ref_next, y_meas)


class MrcController(BaseEstimator):
    """Neural controller ``u(k) = N(r(k..k-1), y(k..k-1), u(k-1..k-2))``.

    Only ``controller_net`` and live signals are used online; the plant
    surrogate it was trained against is kept for reference and never read
    by :meth:`control`.
    """

    taps = 2

    def __init__(self, controller_net: Mlp, ref_model: ReferenceModel = None,
                 u_limits=DEFAULT_U_LIMITS, plant_surrogate: NarxModel = None):
        self.controller_net = controller_net
        self.ref_model = ref_model
        self.u_limits = u_limits
        self.plant_surrogate = plant_surrogate
        self.training_history_ = []
        self.reset()

    def reset(self):
        self.r_history = TappedDelayLine(self.taps)
        self.y_history = TappedDelayLine(self.taps)
        self.u_history = TappedDelayLine(self.taps)
        return self

    def control(self, r, y_meas):
        self.r_history.push(_check_finite(float(r), "reference"))
        self.y_history.push(_check_finite(float(y_meas), "measurement"))
        x = np.concatenate([self.r_history.read(), self.y_history.read(), self.u_history.read()])
        u = _check_finite(float(self.controller_net.forward(x)[0]), "model-reference control")
        u = _clamp(u, self.u_limits)
        self.u_history.push(u)
        return u

    @property
    def preview(self):
        return 0


@dataclass(frozen=True)
class MrcTrainingSignals:
    """Random step references used to train the model-reference controller.

    Each window also scales the surrogate's input by its own gain from
    ``1 +/- gain_spread``.  A controller that must work for all of them
    cannot lean on the surrogate's exact static gain, which keeps the
    plant's steady state close to the reference despite small model errors.
    """

    r_min: float = -4.5
    r_max: float = 4.5
    hold_min: float = 5.0
    hold_max: float = 15.0
    n_windows: int = 10
    window_time: float = 40.0
    gain_spread: float = 0.05

    def window_gains(self):
        """Per-window multiplier on the surrogate input, evenly spread over ``1 +/- gain_spread``."""
        if self.n_windows == 1 or self.gain_spread == 0:
            return np.ones(self.n_windows)
        return np.linspace(1.0 - self.gain_spread, 1.0 + self.gain_spread, self.n_windows)


def _mrc_references(sig: MrcTrainingSignals, sample_time, seed):
    rng = np.random.default_rng(seed)
    steps = int(round(sig.window_time / sample_time))
    refs = np.zeros((sig.n_windows, steps))
    for w in range(sig.n_windows):
        k = 0
        while k < steps:
            hold = int(round(rng.uniform(sig.hold_min, sig.hold_max) / sample_time))
            refs[w, k:k + hold] = rng.uniform(sig.r_min, sig.r_max)
            k += hold
    # one window stays at zero so the equilibrium at the origin is trained explicitly
    refs[0] = 0.0
    refs[0, steps // 4:] = rng.uniform(sig.r_min, sig.r_max)
    return refs


class _ClosedLoopRollout:
    """Controller + surrogate closed loop over a batch of reference windows, with parameter sensitivities."""

    def __init__(self, net: Mlp, surrogate: NarxModel, refs, ref_outputs, y_half, u_half, move_penalty,
                 gains):
        self.net = net
        self.gains = np.asarray(gains, dtype=float)
        self.s_net = surrogate.net_
        self.ny = surrogate.output_delays
        self.nu = surrogate.input_delays
        self.refs = refs
        self.ref_outputs = ref_outputs
        self.y_half = y_half
        self.u_half = u_half
        self.move_weight = math.sqrt(move_penalty)

    def run(self, theta, with_jacobian=True):
        net = self.net.set_flat(theta)
        W, L = self.refs.shape
        P = net.n_params
        depth = max(self.nu, 3)
        y = np.zeros((W, self.ny))          # y(k), y(k-1), ...
        u = np.zeros((W, depth))            # u(k-1), u(k-2), ...
        r_prev = np.zeros(W)
        out = np.empty((W, L))
        moves = np.empty((W, L))
        if with_jacobian:
            dy = np.zeros((W, self.ny, P))
            du = np.zeros((W, depth, P))
            jac = np.empty((W, L, P))
            jac_moves = np.empty((W, L, P))
        for k in range(L):
            r = self.refs[:, k]
            xc = np.column_stack([r, r_prev, y[:, 0], y[:, 1], u[:, 0], u[:, 1]])
            uk = net.forward(xc)[:, 0]
            g = self.gains[:, None]
            xp = np.column_stack([y, g * np.column_stack([uk, u[:, :self.nu - 1]])])
            yk1 = self.s_net.forward(xp)[:, 0]
            if with_jacobian:
                jc = net.input_jacobian(xc)[:, 0, :]
                duk = (net.param_jacobian(xc) + jc[:, 2, None] * dy[:, 0] + jc[:, 3, None] * dy[:, 1]
                       + jc[:, 4, None] * du[:, 0] + jc[:, 5, None] * du[:, 1])
                js = self.s_net.input_jacobian(xp)[:, 0, :].copy()
                js[:, self.ny:] *= g
                dyk1 = np.einsum("wi,wip->wp", js[:, :self.ny], dy)
                dyk1 += js[:, self.ny, None] * duk
                dyk1 += np.einsum("wi,wip->wp", js[:, self.ny + 1:], du[:, :self.nu - 1])
                dy = np.concatenate([dyk1[:, None, :], dy[:, :-1]], axis=1)
                du = np.concatenate([duk[:, None, :], du[:, :-1]], axis=1)
                jac[:, k] = dyk1
                jac_moves[:, k] = du[:, 0] - du[:, 1]
            moves[:, k] = uk - u[:, 0]
            y = np.column_stack([yk1, y[:, :-1]])
            u = np.column_stack([uk, u[:, :-1]])
            r_prev = r
            out[:, k] = yk1
        scale = self.move_weight / self.u_half
        resid = np.concatenate([((out - self.ref_outputs) / self.y_half).ravel(), scale * moves.ravel()])
        if not with_jacobian:
            return resid
        return resid, np.vstack([jac.reshape(W * L, P) / self.y_half, scale * jac_moves.reshape(W * L, P)])


def train_mrc(surrogate: NarxModel, rm: ReferenceModel = None, cfg: TrainConfig = TrainConfig(),
              signals: MrcTrainingSignals = MrcTrainingSignals(), hidden_size=6,
              u_limits=DEFAULT_U_LIMITS, move_penalty=0.01) -> MrcController:
    """Train the controller network so the surrogate loop follows the reference model.

    Tracking errors are differentiated through the recurrent
    controller/surrogate loop by forward sensitivity propagation (dynamic
    backpropagation) and minimized with :func:`minimize_mse`.  Input moves,
    as a fraction of the input half-range, are penalized with weight
    ``move_penalty``; without it the controller learns high-frequency input
    patterns the surrogate was never identified on.
    """
    if surrogate.output_delays < MrcController.taps:
        raise ValueError(f"surrogate needs at least {MrcController.taps} output delays")
    rm = rm or ReferenceModel(sample_time=surrogate.sample_time_)
    refs = _mrc_references(signals, rm.sample_time, cfg.seed)
    ref_outputs = np.stack([rm.response(r) for r in refs])

    y_lo, y_hi = surrogate.y_range_
    u_lo, u_hi = surrogate.u_range_
    net = Mlp.initialize([6, hidden_size, 1], seed=cfg.seed)
    r_lo, r_hi = min(signals.r_min, y_lo), max(signals.r_max, y_hi)
    net.set_scaling([r_lo] * 2 + [y_lo] * 2 + [u_lo] * 2, [r_hi] * 2 + [y_hi] * 2 + [u_hi] * 2, u_lo, u_hi)
    # small initial outputs keep early rollouts inside the identified range
    net.weights[-1] *= 0.1

    y_half = max((y_hi - y_lo) / 2.0, 1e-12)
    u_half = max((u_hi - u_lo) / 2.0, 1e-12)
    loop = _ClosedLoopRollout(net.copy(), surrogate, refs, ref_outputs, y_half, u_half, move_penalty,
                              signals.window_gains())

    def residual(theta):
        return loop.run(theta, with_jacobian=False)

    def jacobian(theta):
        return loop.run(theta, with_jacobian=True)

    theta0 = net.get_flat()
    r0 = residual(theta0)
    if not np.all(np.isfinite(r0)):
        raise TrainingError("model-reference training failed at epoch 0: non-finite rollout")
    theta, history = minimize_mse(residual, jacobian, theta0, cfg)
    if not np.all(np.isfinite(theta)):
        raise TrainingError(f"model-reference training diverged at epoch {len(history)}")
    net.set_flat(theta)
    ctl = MrcController(net, rm, u_limits, plant_surrogate=surrogate)
    ctl.training_history_ = history
    ctl.initial_loss_ = float(np.mean(r0 ** 2))
    return ctl


@dataclass
class NmpcStep:
    u: float
    cost: float
    warm_cost: float
    converged: bool
    sequence: np.ndarray = field(default=None)


class NmpcController(BaseEstimator):
    """Receding-horizon control over a NARX model.

    Minimizes ``sum_{j=N1..N2} (r(k+j) - yhat(k+j))^2 + rho * sum_{j=1..Nu} du(k+j-1)^2``
    over ``Nu`` free moves (later moves hold the last one).  Tracking errors
    are in flow units; moves are measured as a fraction of the actuator
    half-span, so ``rho`` does not depend on the voltage scale.  Only the first move is
    applied; the optimizer is warm-started from the shifted previous
    solution and restarted from a few fixed points.
    """

    def __init__(self, model: NarxModel, N1=1, N2=7, Nu=2, rho=0.05, u_limits=DEFAULT_U_LIMITS,
                 maxiter=50, restarts=True):
        if not (1 <= N1 <= N2 and 1 <= Nu <= N2):
            raise ValueError("need 1 <= N1 <= N2 and 1 <= Nu <= N2")
        if rho < 0:
            raise ValueError("rho must be >= 0")
        self.model = model
        self.N1 = N1
        self.N2 = N2
        self.Nu = Nu
        self.rho = rho
        self.u_limits = u_limits
        self.maxiter = maxiter
        self.restarts = restarts
        self.reset()

    def reset(self):
        self.y_history = TappedDelayLine(self.model.output_delays)
        self.u_history = TappedDelayLine(max(self.model.input_delays, 1))
        self._previous = None
        self.last_step = None
        return self

    @property
    def preview(self):
        return self.N2

    def _scales(self):
        """Move scale (actuator half-span) and output scale (flow units, i.e. 1)."""
        if self.u_limits is not None and np.all(np.isfinite(self.u_limits)):
            lo, hi = self.u_limits
        else:
            lo, hi = self.model.u_range_
        return max((hi - lo) / 2.0, 1e-12), 1.0

    def cost_and_grad(self, v, y_ref, y_hist, u_hist):
        """Cost and gradient for the ``Nu`` moves ``v`` (physical units)."""
        m = self.model
        net = m.net_
        ny, nu = m.output_delays, m.input_delays
        u_half, y_half = self._scales()
        v = np.asarray(v, dtype=float)
        x = np.concatenate([np.asarray(y_hist, dtype=float)[:ny], np.asarray(u_hist, dtype=float)[:nu]])
        # rows: sensitivity of each regressor entry to the Nu free moves
        dx = np.zeros((ny + nu, self.Nu))
        eye = np.eye(self.Nu)
        cost, grad = 0.0, np.zeros(self.Nu)
        u_prev = x[ny] if nu else 0.0
        for j in range(self.Nu):
            delta = (v[j] - (u_prev if j == 0 else v[j - 1])) / u_half
            cost += self.rho * delta ** 2
            grad[j] += 2 * self.rho * delta / u_half
            if j > 0:
                grad[j - 1] -= 2 * self.rho * delta / u_half
        for j in range(self.N2):
            move = min(j, self.Nu - 1)
            if nu:
                x[ny + 1:] = x[ny:-1].copy()
                x[ny] = v[move]
                dx[ny + 1:] = dx[ny:-1].copy()
                dx[ny] = eye[move]
            y_next, jx = net.value_and_input_grad(x)
            dy_next = jx @ dx
            x[1:ny] = x[:ny - 1].copy()
            x[0] = y_next
            dx[1:ny] = dx[:ny - 1].copy()
            dx[0] = dy_next
            if j + 1 >= self.N1:
                err = (y_ref[j] - y_next) / y_half
                cost += err ** 2
                grad -= 2 * err * dy_next / y_half
        return float(cost), grad

    def optimize(self, y_ref, y_hist, u_hist):
        """Best move sequence for the given histories (no state change)."""
        y_ref = np.asarray(y_ref, dtype=float)
        if y_ref.size < self.N2:
            y_ref = np.concatenate([y_ref, np.full(self.N2 - y_ref.size, y_ref[-1])])
        lo, hi = self.u_limits if self.u_limits is not None else (-np.inf, np.inf)
        u_prev = float(np.asarray(u_hist)[0]) if len(u_hist) else 0.0
        if self._previous is not None:
            warm = np.append(self._previous[1:], self._previous[-1])
        else:
            warm = np.full(self.Nu, u_prev)
        warm = np.clip(warm, lo, hi)
        starts = [warm]
        if self.restarts and np.isfinite(lo) and np.isfinite(hi):
            span = 0.1 * (hi - lo)
            starts += [np.full(self.Nu, 0.5 * (lo + hi)), np.clip(warm + span, lo, hi), np.clip(warm - span, lo, hi)]

        u_half, _ = self._scales()
        fun = lambda z: self._normalized(z, u_half, y_ref, y_hist, u_hist)
        bounds = [(lo / u_half, hi / u_half)] * self.Nu
        warm_cost = self.cost_and_grad(warm, y_ref, y_hist, u_hist)[0]
        best = (warm_cost, warm, False)
        for start in starts:
            res = minimize(fun, start / u_half, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": self.maxiter})
            cand = np.clip(res.x * u_half, lo, hi)
            c = self.cost_and_grad(cand, y_ref, y_hist, u_hist)[0]
            if math.isfinite(c) and c <= best[0]:
                best = (c, cand, bool(res.success) or best[2])
            elif res.success and not best[2] and math.isfinite(c) and c <= best[0] + 1e-12:
                best = (best[0], best[1], True)
        cost, seq, converged = best
        return NmpcStep(float(seq[0]), float(cost), float(warm_cost), converged, seq)

    def _normalized(self, z, u_half, y_ref, y_hist, u_hist):
        c, g = self.cost_and_grad(z * u_half, y_ref, y_hist, u_hist)
        return c, g * u_half

    def control(self, y_ref_traj, y_meas):
        """First optimal move given references ``r(k+1..k+N2)`` and the new measurement."""
        self.y_history.push(_check_finite(float(y_meas), "measurement"))
        step = self.optimize(y_ref_traj, self.y_history.read(), self.u_history.read())
        _check_finite(step.u, "predictive control")
        self._previous = step.sequence
        self.last_step = step
        self.u_history.push(step.u)
        return step.u


def nmpc_control(ctl: NmpcController, y_ref_traj, y_meas):
    return ctl.control(y_ref_traj, y_meas)
