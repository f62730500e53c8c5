"""Toy denoiser network, velocity fields, and score-matching training.

The network is a tanh MLP over [x, time features]. The first-layer weight
is stored as two blocks (one for x, one for the time features) so the
input concatenation never has to live on the tape. States are plain (d,)
vectors on the tape; batched losses build one subgraph per element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset2D
from .optim import AdamState, adam_step
from .schedule import Schedule
from .seeding import stream_rng
from .tape import Tape, Var

TIME_FEATURES = 3

PARAMETERIZATIONS = ("epsilon", "velocity")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def time_features(t: float) -> np.ndarray:
    return np.array([t, math.sin(2.0 * math.pi * t), math.cos(2.0 * math.pi * t)])


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass
class Denoiser:
    """Tanh MLP, either noise-predicting ("epsilon") or direct-velocity."""

    data_dim: int
    hidden: tuple[int, ...]
    parameterization: str
    weights: list[np.ndarray]  # [W1x, W1t, b1, W2, b2, ..., Wout, bout]

    def __post_init__(self):
        # immutable weights let the tape share them without defensive copies
        self.weights = [_frozen(w) for w in self.weights]

    @classmethod
    def create(cls, rng: np.random.Generator, data_dim: int = 2,
               hidden: tuple[int, ...] = (64, 64),
               parameterization: str = "epsilon") -> "Denoiser":
        if parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {parameterization!r}")
        hidden = tuple(int(h) for h in hidden)
        if not hidden:
            raise ValueError("need at least one hidden layer")
        fan_in = data_dim + TIME_FEATURES
        ws: list[np.ndarray] = [
            rng.standard_normal((hidden[0], data_dim)) / math.sqrt(fan_in),
            rng.standard_normal((hidden[0], TIME_FEATURES)) / math.sqrt(fan_in),
            np.zeros(hidden[0]),
        ]
        widths = list(hidden) + [data_dim]
        for prev, cur in zip(hidden, widths[1:]):
            ws.append(rng.standard_normal((cur, prev)) / math.sqrt(prev))
            ws.append(np.zeros(cur))
        return cls(data_dim, hidden, parameterization, ws)

    # ------------------------------------------------------------ parameters

    def param_arrays(self) -> list[np.ndarray]:
        return list(self.weights)

    def flatten(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def with_flat(self, vec: np.ndarray) -> "Denoiser":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.flatten().size:
            raise ValueError(f"parameter vector has {vec.size} entries, "
                             f"expected {self.flatten().size}")
        out, pos = [], 0
        for w in self.weights:
            out.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
        return Denoiser(self.data_dim, self.hidden, self.parameterization, out)

    def layer_sizes(self) -> list[int]:
        return [self.data_dim + TIME_FEATURES, *self.hidden, self.data_dim]

    # ----------------------------------------------------------- tape builds

    def build(self, tape: Tape, x: Var, t: float,
              theta: list[Var] | None = None) -> Var:
        """Network output for a single state x of shape (d,)."""
        if theta is None:
            theta = [tape.constant(w) for w in self.weights]
        w1x, w1t, b1 = theta[0], theta[1], theta[2]
        tf = tape.constant(time_features(t))
        time_bias = tape.add(tape.matmul(w1t, tf), b1)
        h = tape.tanh(tape.add(tape.matmul(w1x, x), time_bias))
        rest = theta[3:]
        for i in range(0, len(rest), 2):
            pre = tape.add(tape.matmul(rest[i], h), rest[i + 1])
            h = tape.tanh(pre) if i + 2 < len(rest) else pre
        return h


class VelocityField:
    """A velocity u(x, t) expressible in tape primitives.

    `theta=None` treats parameters as constants (no parameter gradients);
    passing watched Vars makes the build parameter-differentiable.
    """

    dim: int

    def params(self) -> list[np.ndarray]:
        raise NotImplementedError

    def with_params(self, arrays: list[np.ndarray]) -> "VelocityField":
        raise NotImplementedError

    def build(self, tape: Tape, x: Var, t: float,
              theta: list[Var] | None = None) -> Var:
        raise NotImplementedError

    def value(self, x: np.ndarray, t: float) -> np.ndarray:
        tape = Tape(recording=False)
        return self.build(tape, tape.constant(x), t).value


class DenoiserField(VelocityField):
    """PF-ODE velocity induced by a denoiser and a schedule.

    For the noise-predicting network: u = f(t) x + g^2(t)/(2 sigma_t) eps(x, t).
    For a velocity-parameterized network the output is used directly.
    """

    def __init__(self, denoiser: Denoiser, schedule: Schedule):
        self.denoiser = denoiser
        self.schedule = schedule
        self.dim = denoiser.data_dim

    def params(self) -> list[np.ndarray]:
        return self.denoiser.param_arrays()

    def with_params(self, arrays):
        d = self.denoiser
        return DenoiserField(Denoiser(d.data_dim, d.hidden, d.parameterization,
                                      [np.asarray(a, dtype=np.float64) for a in arrays]),
                             self.schedule)

    def build(self, tape, x, t, theta=None):
        net = self.denoiser.build(tape, x, t, theta)
        if self.denoiser.parameterization == "velocity":
            return net
        f, _ = self.schedule.drift_coeffs(t)
        c = self.schedule.score_scale(t)
        return tape.add(tape.scale(x, f), tape.scale(net, c))


class ZeroField(VelocityField):
    """u == 0: sampling is the identity map."""

    def __init__(self, dim: int = 2):
        self.dim = dim

    def params(self):
        return []

    def with_params(self, arrays):
        return self

    def build(self, tape, x, t, theta=None):
        return tape.constant(np.zeros(self.dim))


class ScalarGainField(VelocityField):
    """u = a * x with a single scalar parameter; every gradient engine has a
    closed form on this field, so it anchors the verification suite."""

    def __init__(self, gain: float = 1.0, dim: int = 1):
        self.gain = float(gain)
        self.dim = dim

    def params(self):
        return [np.asarray(self.gain)]

    def with_params(self, arrays):
        return ScalarGainField(float(np.asarray(arrays[0])), self.dim)

    def build(self, tape, x, t, theta=None):
        a = theta[0] if theta is not None else tape.constant(self.gain)
        return tape.mul(a, x)


def velocity(denoiser: Denoiser, schedule: Schedule, x: np.ndarray, t: float) -> np.ndarray:
    """PF-ODE velocity at (x, t). Rejects t=0 for noise-predicting networks."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("velocity: state contains non-finite entries")
    return DenoiserField(denoiser, schedule).value(x, t)


# ------------------------------------------------------------------ training

def kernel_rates(schedule: Schedule, t: float) -> tuple[float, float]:
    """(d alpha/dt, d sigma/dt); the conditional-velocity regression target
    for direct-velocity networks is alpha' x_0 + sigma' eps."""
    if schedule.kind == "straight-line":
        return -1.0, 1.0
    alpha, sigma = schedule.alpha_sigma(t)
    if sigma <= 0.0:
        raise ValueError(f"kernel rates undefined at t={t} (sigma=0)")
    f, _ = schedule.drift_coeffs(t)
    da = f * alpha
    return da, -alpha * da / sigma


def dsm_loss_var(tape: Tape, denoiser: Denoiser, schedule: Schedule,
                 x0: np.ndarray, ts: np.ndarray, eps: np.ndarray,
                 theta: list[Var] | None = None) -> Var:
    """Batch score-matching loss as a tape scalar for fixed draws (ts, eps)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    terms = None
    for b in range(x0.shape[0]):
        t = float(ts[b])
        alpha, sigma = schedule.alpha_sigma(t)
        xt = alpha * x0[b] + sigma * eps[b]
        if denoiser.parameterization == "epsilon":
            target = eps[b]
        else:
            da, ds = kernel_rates(schedule, t)
            target = da * x0[b] + ds * eps[b]
        pred = denoiser.build(tape, tape.constant(xt), t, theta)
        term = tape.sqnorm(tape.sub(pred, tape.constant(target)))
        terms = term if terms is None else tape.add(terms, term)
    return tape.scale(terms, 1.0 / x0.shape[0])


def dsm_loss(denoiser: Denoiser, schedule: Schedule, x0: np.ndarray,
             rng: np.random.Generator, t_min: float = 1e-3) -> float:
    """Noise-prediction loss on one batch with fresh (t, eps) draws."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("dsm_loss: batch is empty")
    ts = rng.uniform(t_min, 1.0, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    tape = Tape(recording=False)
    return float(dsm_loss_var(tape, denoiser, schedule, x0, ts, eps).value)


@dataclass
class TrainConfig:
    dataset: Dataset2D
    schedule: Schedule
    hidden: tuple[int, ...] = (64, 64)
    parameterization: str = "epsilon"
    steps: int = 5000
    batch: int = 64
    lr: float = 2e-3
    t_min: float = 1e-3
    data_size: int = 4096
    seed: int = 0


def train_denoiser(cfg: TrainConfig) -> tuple[Denoiser, list[float]]:
    """Train by denoising score matching; deterministic given cfg.seed."""
    rng_init = stream_rng(cfg.seed, "init")
    rng_train = stream_rng(cfg.seed, "training")
    points, _ = cfg.dataset.sample(cfg.data_size)

    denoiser = Denoiser.create(rng_init, data_dim=points.shape[1],
                               hidden=cfg.hidden,
                               parameterization=cfg.parameterization)
    flat = denoiser.flatten()
    adam = AdamState(flat.size, lr=cfg.lr)
    losses: list[float] = []

    for step in range(cfg.steps):
        idx = rng_train.integers(0, cfg.data_size, size=cfg.batch)
        ts = rng_train.uniform(cfg.t_min, 1.0, size=cfg.batch)
        eps = rng_train.standard_normal((cfg.batch, points.shape[1]))

        tape = Tape()
        theta = [tape.variable(w) for w in denoiser.weights]
        loss = dsm_loss_var(tape, denoiser, schedule=cfg.schedule,
                            x0=points[idx], ts=ts, eps=eps, theta=theta)
        value = float(loss.value)
        if not math.isfinite(value):
            raise DivergenceError(f"training diverged at step {step}: loss={value}")
        losses.append(value)

        grads = tape.backward(loss)
        gflat = np.concatenate([grads[v].ravel() for v in theta])
        flat = adam_step(adam, flat, gflat)
        denoiser = denoiser.with_flat(flat)
    return denoiser, losses
