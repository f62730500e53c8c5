"""Gradient engines for objectives of the sampling endpoint.

Five routes to d J(x_0) / d(target):

  bptt        full reverse-mode through every denoising step (exact);
  sdo         one-step gradients: latents record only the step-m network
              call, parameters record one sampled step (or the full
              per-step sum in reference mode);
  ift-oracle  materializes the stacked trajectory-update Jacobian and
              solves the implicit-function linear system (exact: the
              dependency structure is strictly triangular);
  fd-oracle   central differences through the true map or through the
              stop-gradient surrogate the one-step estimators define;
  truncated   reverse-mode through only the last k denoising steps.

All engines evaluate the same forward values (recording only changes what
the backward pass can see), so disagreements between them are meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import VelocityField
from .sampler import ddim_step_var, sample_sequential
from .schedule import Schedule
from .tape import Tape, Var

IFT_DIM_GUARD = 4096


@dataclass(frozen=True)
class GradTarget:
    """What to differentiate: the latent at step m, or the parameters."""

    kind: str  # "latent" | "params"
    m: int | None = None  # latent step; None means the initial noise (m = N)

    def __post_init__(self):
        if self.kind not in ("latent", "params"):
            raise ValueError(f"unknown gradient target {self.kind!r}")


@dataclass
class GradientReport:
    gradient: np.ndarray
    l2_norm: float
    tape_node_count: int
    wall_time_seconds: float
    estimator: str
    seed: int | None = None

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.gradient)))


@dataclass
class BoundReport:
    lambda_hat: float
    rho_hat: float
    l_f_hat: float
    measured_error_latent: float
    measured_error_params: float
    bound_latent: float | None
    bound_params: float | None
    bound_valid: bool


def _report(grad: np.ndarray, tape: Tape, t0: float, estimator: str,
            seed: int | None) -> GradientReport:
    grad = np.asarray(grad, dtype=np.float64)
    return GradientReport(
        gradient=grad,
        l2_norm=float(np.linalg.norm(grad)),
        tape_node_count=tape.node_count(),
        wall_time_seconds=time.perf_counter() - t0,
        estimator=estimator,
        seed=seed,
    )


def _flatten_param_grads(grads: dict, theta: list[Var]) -> np.ndarray:
    if not theta:
        return np.zeros(0)
    return np.concatenate([np.asarray(grads[v]).ravel() for v in theta])


def _prefix_state(field: VelocityField, schedule: Schedule, x_n: np.ndarray,
                  m: int) -> np.ndarray:
    """Roll values from the initial noise down to step m (no recording)."""
    tape = Tape(recording=False)
    x = tape.constant(x_n)
    for n in range(schedule.n_steps, m, -1):
        x = ddim_step_var(tape, field, schedule, x, n)
    return x.value


def _resolve_m(schedule: Schedule, m: int | None) -> int:
    m = schedule.n_steps if m is None else int(m)
    if not 1 <= m <= schedule.n_steps:
        raise ValueError(f"latent step m={m} outside 1..{schedule.n_steps}")
    return m


# ---------------------------------------------------------------------- bptt

def grad_bptt(field: VelocityField, schedule: Schedule, x_n: np.ndarray,
              objective, target: GradTarget, seed: int | None = None) -> GradientReport:
    """Exact gradient of the true sampling map by full recording."""
    t0 = time.perf_counter()
    tape = Tape()
    if target.kind == "latent":
        m = _resolve_m(schedule, target.m)
        x = tape.variable(_prefix_state(field, schedule, x_n, m))
        theta = None
        steps = range(m, 0, -1)
    else:
        x = tape.constant(x_n)
        theta = [tape.variable(p) for p in field.params()]
        steps = range(schedule.n_steps, 0, -1)
    for n in steps:
        x = ddim_step_var(tape, field, schedule, x, n, theta=theta)
    grads = tape.backward(objective.build(tape, x))
    if target.kind == "latent":
        flat = grads[tape.watched[0]]
    else:
        flat = _flatten_param_grads(grads, theta)
    return _report(flat, tape, t0, "bptt", seed)


# ----------------------------------------------------------------- one-step

def grad_sdo_latent(field: VelocityField, schedule: Schedule, x_n: np.ndarray,
                    objective, m: int | None = None,
                    seed: int | None = None) -> GradientReport:
    """One-step latent gradient: only the step-m network call is recorded;
    the state-update arithmetic below it stays live."""
    t0 = time.perf_counter()
    m = _resolve_m(schedule, m)
    tape = Tape()
    x = tape.variable(_prefix_state(field, schedule, x_n, m))
    for n in range(m, 0, -1):
        x = ddim_step_var(tape, field, schedule, x, n, record_velocity=(n == m))
    grads = tape.backward(objective.build(tape, x))
    return _report(grads[tape.watched[0]], tape, t0, "sdo", seed)


def grad_sdo_params(field: VelocityField, schedule: Schedule, x_n: np.ndarray,
                    objective, selection: str = "random-uniform",
                    iprime: int | None = None,
                    rng: np.random.Generator | None = None,
                    seed: int | None = None) -> GradientReport:
    """One-step parameter gradient.

    fixed:          record the network call at step i' only;
    random-uniform: same, with i' drawn from the caller's seeded stream;
    full-sum:       reference mode recording every step's network call with
                    a stopped state input, i.e. the per-step parameter sum
                    without any cross-step Jacobian products.
    """
    t0 = time.perf_counter()
    n_steps = schedule.n_steps
    if selection == "random-uniform":
        if rng is None:
            raise ValueError("random-uniform selection needs an rng")
        iprime = int(rng.integers(1, n_steps + 1))
    elif selection == "fixed":
        if iprime is None or not 1 <= int(iprime) <= n_steps:
            raise ValueError(f"fixed selection needs i' in 1..{n_steps}, got {iprime}")
        iprime = int(iprime)
    elif selection == "full-sum":
        iprime = None
    else:
        raise ValueError(f"unknown timestep selection {selection!r}")

    tape = Tape()
    x = tape.constant(x_n)
    theta = [tape.variable(p) for p in field.params()]
    for n in range(n_steps, 0, -1):
        if selection == "full-sum":
            x = ddim_step_var(tape, field, schedule, x, n, theta=theta,
                              sg_input=True)
        else:
            x = ddim_step_var(tape, field, schedule, x, n, theta=theta,
                              record_velocity=(n == iprime))
    grads = tape.backward(objective.build(tape, x))
    label = "sdo-full" if selection == "full-sum" else "sdo"
    return _report(_flatten_param_grads(grads, theta), tape, t0, label, seed)


# ---------------------------------------------------------------- truncated

def grad_truncated(field: VelocityField, schedule: Schedule, x_n: np.ndarray,
                   objective, k: int, target: GradTarget = GradTarget("params"),
                   seed: int | None = None) -> GradientReport:
    """Reverse-mode through the last k denoising steps only; states above
    the window are constants. k = N coincides with bptt; k = 1 is the
    final-step-only baseline."""
    t0 = time.perf_counter()
    n_steps = schedule.n_steps
    if not 1 <= k <= n_steps:
        raise ValueError(f"window k={k} outside 1..{n_steps}")
    tape = Tape()
    if target.kind == "latent":
        x = tape.variable(x_n)
        theta = None
    else:
        x = tape.constant(x_n)
        theta = [tape.variable(p) for p in field.params()]
    for n in range(n_steps, k, -1):
        x = ddim_step_var(tape, field, schedule, x, n, theta=theta,
                          record_velocity=False)
    if k < n_steps:
        x = tape.stop_gradient(x)
    for n in range(k, 0, -1):
        x = ddim_step_var(tape, field, schedule, x, n, theta=theta)
    grads = tape.backward(objective.build(tape, x))
    if target.kind == "latent":
        flat = grads[tape.watched[0]]
    else:
        flat = _flatten_param_grads(grads, theta)
    label = "last-step" if k == 1 else f"truncated-{k}"
    return _report(flat, tape, t0, label, seed)


# -------------------------------------------------------- finite differences

def _surrogate_true_latent(field, schedule, x_n, objective, m):
    def j_of(xi):
        tape = Tape(recording=False)
        x = tape.constant(xi)
        for n in range(m, 0, -1):
            x = ddim_step_var(tape, field, schedule, x, n)
        return float(objective.build(tape, x).value)
    return j_of


def grad_fd_oracle(field: VelocityField, schedule: Schedule, x_n: np.ndarray,
                   objective, target: GradTarget, surrogate: str = "true-map",
                   m: int | None = None, iprime: int | None = None,
                   h: float = 1e-5) -> np.ndarray:
    """Central differences through the requested forward map.

    true-map                 the actual sampling map (checks bptt);
    sdo-surrogate-at-m       latents: every network call except step m is
                             frozen at its base value (checks sdo latent);
    sdo-surrogate-at-iprime  parameters: only the step-i' network call
                             responds to the probe (checks sdo params).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x_n = np.asarray(x_n, dtype=np.float64)
    n_steps = schedule.n_steps

    if surrogate == "true-map":
        if target.kind == "latent":
            m = _resolve_m(schedule, target.m if m is None else m)
            base = _prefix_state(field, schedule, x_n, m)
            j_of = _surrogate_true_latent(field, schedule, x_n, objective, m)
            return _central(j_of, base, h)

        flat0 = np.concatenate([p.ravel() for p in field.params()])

        def j_of_theta(flat):
            f2 = field.with_params(_unflatten_like(flat, field.params()))
            traj = sample_sequential(f2, schedule, x_n)
            return objective.value(traj.x0)
        return _central(j_of_theta, flat0, h)

    if surrogate == "sdo-surrogate-at-m":
        m = _resolve_m(schedule, m)
        base_m = _prefix_state(field, schedule, x_n, m)
        base_traj_tail = _prefix_state(field, schedule, x_n, 0)
        base_m1 = _prefix_state(field, schedule, x_n, m - 1) if m > 1 else base_traj_tail

        def j_of(xi):
            u = field.value(xi, m / n_steps)
            x_m1 = xi - u / n_steps
            x0 = base_traj_tail + (x_m1 - base_m1)
            return objective.value(x0)
        return _central(j_of, base_m, h)

    if surrogate == "sdo-surrogate-at-iprime":
        if iprime is None or not 1 <= int(iprime) <= n_steps:
            raise ValueError(f"need i' in 1..{n_steps}, got {iprime}")
        iprime = int(iprime)
        base_i = _prefix_state(field, schedule, x_n, iprime)
        base_x0 = _prefix_state(field, schedule, x_n, 0)
        base_u = field.value(base_i, iprime / n_steps)
        flat0 = np.concatenate([p.ravel() for p in field.params()])

        def j_of_theta(flat):
            f2 = field.with_params(_unflatten_like(flat, field.params()))
            u = f2.value(base_i, iprime / n_steps)
            x0 = base_x0 - (u - base_u) / n_steps
            return objective.value(x0)
        return _central(j_of_theta, flat0, h)

    raise ValueError(f"unknown surrogate {surrogate!r}")


def _central(f, x0: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x0)
    for j in range(x0.size):
        e = np.zeros_like(x0)
        e.ravel()[j] = h
        g.ravel()[j] = (f(x0 + e) - f(x0 - e)) / (2.0 * h)
    return g


def _unflatten_like(flat: np.ndarray, arrays: list[np.ndarray]) -> list[np.ndarray]:
    out, pos = [], 0
    for a in arrays:
        out.append(flat[pos:pos + a.size].reshape(a.shape))
        pos += a.size
    return out


# -------------------------------------------------------------- ift oracle

def _step_jacobians(field: VelocityField, schedule: Schedule,
                    states: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """(dU/dx, dU/dtheta) of the velocity at every trajectory step i=1..N."""
    n_steps = schedule.n_steps
    dim = states.shape[1]
    u_x, u_theta = [], []
    for i in range(1, n_steps + 1):
        tape = Tape()
        x = tape.variable(states[i])
        theta = [tape.variable(p) for p in field.params()]
        u = field.build(tape, x, i / n_steps, theta)
        jx = np.zeros((dim, dim))
        jt_rows = []
        for j in range(dim):
            basis = np.zeros(dim)
            basis[j] = 1.0
            comp = tape.sum(tape.mul(u, tape.constant(basis)))
            grads = tape.backward(comp)
            jx[j] = grads[x]
            jt_rows.append(np.concatenate([grads[v].ravel() for v in theta])
                           if theta else np.zeros(0))
        u_x.append(jx)
        u_theta.append(np.stack(jt_rows) if theta else np.zeros((dim, 0)))
    return u_x, u_theta


def _stacked_system(field: VelocityField, schedule: Schedule, x_n: np.ndarray):
    """Jacobians of the whole-trajectory update F with state y=(x_0..x_{N-1})
    and the initial noise treated as an external parameter (its trivial
    identity row would otherwise make I - dF/dy singular)."""
    n_steps = schedule.n_steps
    dim = x_n.shape[0]
    total = n_steps * dim
    if (n_steps + 1) * dim > IFT_DIM_GUARD:
        raise ValueError(f"stacked dimension {(n_steps + 1) * dim} exceeds "
                         f"the {IFT_DIM_GUARD} guard")
    traj = sample_sequential(field, schedule, x_n)
    u_x, u_theta = _step_jacobians(field, schedule, traj.states)

    a = np.zeros((total, total))
    for n in range(n_steps):
        for j in range(n + 1, n_steps):
            a[n * dim:(n + 1) * dim, j * dim:(j + 1) * dim] = -u_x[j - 1] / n_steps

    b_latent = np.tile(np.eye(dim) - u_x[n_steps - 1] / n_steps, (n_steps, 1))

    p_dim = u_theta[0].shape[1]
    b_theta = np.zeros((total, p_dim))
    acc = np.zeros((dim, p_dim))
    for n in range(n_steps - 1, -1, -1):
        acc = acc + u_theta[n] / n_steps  # adds step n+1's contribution
        b_theta[n * dim:(n + 1) * dim] = -acc
    return traj, a, b_latent, b_theta


def _objective_row(objective, traj, dim: int, n_steps: int) -> np.ndarray:
    tape = Tape()
    x0 = tape.variable(traj.x0)
    g = tape.backward(objective.build(tape, x0))[x0]
    row = np.zeros(n_steps * dim)
    row[:dim] = g
    return row


def grad_ift_oracle(field: VelocityField, schedule: Schedule, x_n: np.ndarray,
                    objective, target: GradTarget,
                    seed: int | None = None) -> GradientReport:
    """Implicit-function gradient through the trajectory fixed point: solve
    (I - dF/dy)^T v = (dJ/dy)^T, then contract with dF/d(target). Exact
    here because dF/dy is strictly triangular (nilpotent)."""
    t0 = time.perf_counter()
    if target.kind == "latent" and target.m not in (None, schedule.n_steps):
        raise ValueError("ift oracle differentiates the initial noise; "
                         "intermediate-latent targets are not stacked states")
    traj, a, b_latent, b_theta = _stacked_system(field, schedule, x_n)
    dim = x_n.shape[0]
    row = _objective_row(objective, traj, dim, schedule.n_steps)
    eye = np.eye(a.shape[0])
    try:
        v = np.linalg.solve((eye - a).T, row)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"ift oracle: singular stacked system ({exc}); "
                           "this should not happen for the triangular "
                           "trajectory update") from exc
    b = b_latent if target.kind == "latent" else b_theta
    tape = Tape()  # oracle does not measure tape economy
    return _report(v @ b, tape, t0, "ift-oracle", seed)


def evaluate_bounds(field: VelocityField, schedule: Schedule, x_n: np.ndarray,
                    objective) -> BoundReport:
    """Estimate the contraction constant, objective-gradient bound, and
    parameter Lipschitz constant of the stacked update, then compare the
    one-step gradient errors against the resulting bounds. Bounds are only
    meaningful when the contraction constant is below one; otherwise the
    raw quantities are still reported with bound_valid=False."""
    traj, a, _, b_theta = _stacked_system(field, schedule, x_n)
    dim = x_n.shape[0]
    lam = float(np.linalg.svd(a, compute_uv=False)[0]) if a.size else 0.0
    rho = float(np.linalg.norm(_objective_row(objective, traj, dim, schedule.n_steps)))
    l_f = float(np.linalg.svd(b_theta, compute_uv=False)[0]) if b_theta.size else 0.0

    err_latent = float(np.linalg.norm(
        grad_bptt(field, schedule, x_n, objective, GradTarget("latent")).gradient
        - grad_sdo_latent(field, schedule, x_n, objective).gradient))
    if field.params():
        err_params = float(np.linalg.norm(
            grad_bptt(field, schedule, x_n, objective, GradTarget("params")).gradient
            - grad_sdo_params(field, schedule, x_n, objective,
                              selection="full-sum").gradient))
    else:
        err_params = 0.0

    valid = lam < 1.0
    return BoundReport(
        lambda_hat=lam,
        rho_hat=rho,
        l_f_hat=l_f,
        measured_error_latent=err_latent,
        measured_error_params=err_params,
        bound_latent=lam * lam * rho / (1.0 - lam) if valid else None,
        bound_params=lam * rho * l_f / (1.0 - lam) if valid else None,
        bound_valid=valid,
    )


# ------------------------------------------------------------------- sweep

@dataclass(frozen=True)
class EstimatorSpec:
    """Config-level estimator identity for drivers and the sweep."""

    kind: str  # bptt | sdo | sdo-full | ift-oracle | fd-oracle | last-step | truncated-k
    k: int | None = None

    @classmethod
    def parse(cls, text: str) -> "EstimatorSpec":
        text = text.strip()
        if text == "truncated-k":  # window drawn uniformly per evaluation
            return cls("truncated")
        if text.startswith("truncated-"):
            return cls("truncated", int(text.split("-", 1)[1]))
        if text in ("bptt", "sdo", "sdo-full", "ift-oracle", "fd-oracle", "last-step"):
            return cls(text)
        raise ValueError(f"unknown estimator {text!r}")

    def label(self) -> str:
        if self.kind != "truncated":
            return self.kind
        return "truncated-k" if self.k is None else f"truncated-{self.k}"


def parameter_gradient(spec: EstimatorSpec, field: VelocityField,
                       schedule: Schedule, x_n: np.ndarray, objective,
                       rng: np.random.Generator | None = None,
                       seed: int | None = None) -> GradientReport:
    """Dispatch one parameter-gradient evaluation for an estimator spec."""
    if spec.kind == "bptt":
        return grad_bptt(field, schedule, x_n, objective, GradTarget("params"), seed)
    if spec.kind == "sdo":
        return grad_sdo_params(field, schedule, x_n, objective,
                               selection="random-uniform", rng=rng, seed=seed)
    if spec.kind == "sdo-full":
        return grad_sdo_params(field, schedule, x_n, objective,
                               selection="full-sum", seed=seed)
    if spec.kind == "ift-oracle":
        return grad_ift_oracle(field, schedule, x_n, objective,
                               GradTarget("params"), seed)
    if spec.kind == "last-step":
        return grad_truncated(field, schedule, x_n, objective, 1,
                              GradTarget("params"), seed)
    if spec.kind == "truncated":
        k = spec.k if spec.k is not None else (int(rng.integers(1, schedule.n_steps + 1))
                                               if rng is not None else schedule.n_steps)
        return grad_truncated(field, schedule, x_n, objective, k,
                              GradTarget("params"), seed)
    raise ValueError(f"estimator {spec.kind!r} cannot be dispatched here; "
                     "call grad_fd_oracle directly for finite differences")


def grad_norm_sweep(make_field, objective, n_list: list[int],
                    estimators: list[EstimatorSpec], seed: int,
                    noise_rng: np.random.Generator, select_rng: np.random.Generator,
                    draws: int = 1, reps: int = 1,
                    workers: int | None = None) -> list[dict]:
    """Parameter-gradient norms, tape sizes, and wall times over N values.

    `make_field(N) -> (field, schedule)` rebuilds the model on an N-step
    schedule. `draws` fixed noises are drawn once and shared across every
    (N, estimator) cell so norm variation across N reflects the estimator,
    not the draw; one row is emitted per evaluation. Wall time per row is
    the median over `reps` repeated calls of the same gradient. Non-finite
    gradients are recorded, not dropped.

    Cells run serially by default to keep timing honest; with `workers`
    they run concurrently on separate tapes and wall times are reported as
    NaN. Random choices are drawn up front, so the rows are identical
    either way.
    """
    if not n_list:
        raise ValueError("n_list is empty")
    dim = make_field(int(n_list[0]))[0].dim
    noises = noise_rng.standard_normal((draws, dim))

    cells = []
    for n in n_list:
        field, schedule = make_field(int(n))
        for spec in estimators:
            for x_n in noises:
                iprime = None
                pinned = spec
                if spec.kind == "sdo":  # pre-drawn so cells are independent
                    iprime = int(select_rng.integers(1, schedule.n_steps + 1))
                elif spec.kind == "truncated" and spec.k is None:
                    pinned = EstimatorSpec(
                        "truncated", int(select_rng.integers(1, schedule.n_steps + 1)))
                cells.append((int(n), spec, pinned, field, schedule, x_n, iprime))

    def evaluate(cell):
        n, spec, pinned, field, schedule, x_n, iprime = cell
        if spec.kind == "sdo":
            def run():
                return grad_sdo_params(field, schedule, x_n, objective,
                                       selection="fixed", iprime=iprime,
                                       seed=seed)
        else:
            def run():
                return parameter_gradient(pinned, field, schedule, x_n,
                                          objective, seed=seed)
        reports = [run() for _ in range(max(1, reps))]
        times = sorted(r.wall_time_seconds for r in reports)
        rep = reports[-1]
        return {
            "N": n,
            "estimator": spec.label(),
            "grad_l2": rep.l2_norm,
            "tape_nodes": rep.tape_node_count,
            "wall_time_s": float("nan") if workers else times[len(times) // 2],
            "finite": rep.finite,
            "seed": seed,
        }

    if workers:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(evaluate, cells))
    return [evaluate(cell) for cell in cells]


def sweep_norm_ratios(rows: list[dict]) -> dict[str, float]:
    """Stability summary: per estimator, the max/min across N of the
    worst-case (max over draws) gradient norm."""
    worst: dict[tuple[str, int], float] = {}
    for row in rows:
        key = (row["estimator"], row["N"])
        worst[key] = max(worst.get(key, 0.0), row["grad_l2"])
    ratios = {}
    for est in {e for e, _ in worst}:
        vals = [v for (e, _), v in worst.items() if e == est]
        ratios[est] = max(vals) / min(vals) if min(vals) > 0 else float("inf")
    return ratios
