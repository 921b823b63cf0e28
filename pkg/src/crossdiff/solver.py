"""Time stepping for u_t = Lap(P(u)) + f(u, Du).

Three schemes share one face-flux spatial discretization:

* explicit  -- forward Euler on the full right-hand side, with the step
  clipped to the parabolic stability bound of the current state;
* imex      -- backward Euler on the divergence-form operator with face
  coefficients A frozen at the current state, reaction explicit;
* newton    -- backward Euler on the fully nonlinear Lap(P(u)), solved
  by a damped-free Newton iteration, reaction explicit.

run() drives adaptive steps (halve on failure, grow 1.2x on success up
to dt_max), lands exactly on requested snapshot times and t_end, and
records norms along the way.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import InputError, NewtonConvergenceError, NumericalStateError
from .grid import Field, cell_gradient, face_coefficients, laplacian_of_P, stable_dt
from .model import eval_A, eval_P, eval_reaction

__all__ = ["SolverConfig", "Trajectory", "step", "run"]

_SCHEMES = ("explicit", "imex", "newton")


@dataclass(frozen=True)
class SolverConfig:
    """Scheme and step-control parameters for run()."""

    scheme: str = "imex"
    dt0: float = 1e-3
    t_end: float = 1.0
    dt_min: float | None = None       # default dt0 / 1024
    dt_max: float | None = None       # default dt0
    cfl_safety: float = 0.9
    newton_abs_tol: float = 1e-11
    newton_rel_tol: float = 1e-11
    max_newton: int = 12
    linear_tol: float = 1e-10
    record_every: int = 1
    snapshot_times: tuple = ()
    store_states: bool = False
    blowup_threshold: float = 1e12
    max_steps: int = 10_000_000

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise InputError(f"scheme must be one of {_SCHEMES}")
        if not (self.dt0 > 0 and self.t_end > 0):
            raise InputError("dt0 and t_end must be positive")
        if self.dt_min is None:
            object.__setattr__(self, "dt_min", self.dt0 / 1024.0)
        if self.dt_max is None:
            object.__setattr__(self, "dt_max", self.dt0)
        if not (0 < self.dt_min <= self.dt0 <= self.dt_max):
            raise InputError("need 0 < dt_min <= dt0 <= dt_max")
        if not (0 < self.cfl_safety <= 1):
            raise InputError("cfl_safety must lie in (0, 1]")
        if self.record_every < 1 or self.max_newton < 1:
            raise InputError("record_every and max_newton must be >= 1")
        object.__setattr__(self, "snapshot_times",
                           tuple(sorted({float(t) for t in self.snapshot_times})))


@dataclass
class Trajectory:
    """Output of run(): recorded norms, optional states, step history."""

    times: np.ndarray
    records: list
    final: Field
    terminated_reason: str
    states: list | None = None
    snapshots: dict = dc_field(default_factory=dict)
    dt_history: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))
    newton_history: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=int))
    first_negative_t: float | None = None

    @property
    def reached_end(self):
        return self.terminated_reason == "reached"


class _FaceAssembly:
    """Precomputed COO index structure for the divergence-form operator.

    Each interior face contributes a paired (+w, -w) four-entry block
    coupling its two cells; with no-flux boundaries every column of the
    assembled operator therefore sums to zero exactly, which is what
    makes backward-Euler steps conservative.  Dirichlet boundary faces
    contribute -2w on the diagonal block (odd-reflection ghosts).
    """

    def __init__(self, grid, m):
        self.grid = grid
        self.m = m
        Nx, Ny = grid.Nx, grid.Ny
        N = Nx * Ny
        self.size = m * N
        a = np.arange(m)[:, None, None]
        b = np.arange(m)[None, :, None]
        rows, cols = [], []

        def add(rc, cc):
            rows.append(np.broadcast_to(a * N + rc, (m, m, rc.size)).ravel())
            cols.append(np.broadcast_to(b * N + cc, (m, m, cc.size)).ravel())

        fi, j = np.meshgrid(np.arange(1, Nx), np.arange(Ny), indexing="ij")
        xL = ((fi - 1) * Ny + j).ravel()
        xR = (fi * Ny + j).ravel()
        for rc, cc in ((xL, xR), (xL, xL), (xR, xR), (xR, xL)):
            add(rc, cc)
        i, fj = np.meshgrid(np.arange(Nx), np.arange(1, Ny), indexing="ij")
        yB = (i * Ny + fj - 1).ravel()
        yT = (i * Ny + fj).ravel()
        for rc, cc in ((yB, yT), (yB, yB), (yT, yT), (yT, yB)):
            add(rc, cc)
        if grid.bc == "dirichlet":
            jj = np.arange(Ny)
            ii = np.arange(Nx)
            for cells in (jj, (Nx - 1) * Ny + jj, ii * Ny, ii * Ny + Ny - 1):
                add(cells, cells)
        self.rows = np.concatenate(rows)
        self.cols = np.concatenate(cols)

    def _face_block(self, w):
        """(F..., m, m) face data -> (m, m, F) raveled to match add()."""
        return np.moveaxis(w.reshape(-1, self.m, self.m), 0, -1).ravel()

    def assemble(self, Ax, Ay):
        """Operator matrix from face coefficient arrays (see
        grid.face_coefficients for shapes)."""
        g = self.grid
        wx = self._face_block(Ax[1:-1] / g.hx ** 2)
        wy = self._face_block(np.ascontiguousarray(Ay[:, 1:-1]) / g.hy ** 2)
        data = [wx, -wx, -wx, wx, wy, -wy, -wy, wy]
        if g.bc == "dirichlet":
            for w, h2 in ((Ax[0], g.hx ** 2), (Ax[-1], g.hx ** 2),
                          (Ay[:, 0], g.hy ** 2), (Ay[:, -1], g.hy ** 2)):
                data.append(-2.0 * self._face_block(np.ascontiguousarray(w)) / h2)
        data = np.concatenate(data)
        return sp.coo_matrix((data, (self.rows, self.cols)),
                             shape=(self.size, self.size)).tocsr()


class _Workspace:
    """Per-(grid, m) cache of assembly structure and constant matrices."""

    def __init__(self, grid, m):
        self.assembly = _FaceAssembly(grid, m)
        N = grid.Nx * grid.Ny
        self.N = N
        self.m = m
        self.eye = sp.identity(m * N, format="csr")
        ones_x = np.ones((grid.Nx + 1, grid.Ny, 1, 1))
        ones_y = np.ones((grid.Nx, grid.Ny + 1, 1, 1))
        scalar = _FaceAssembly(grid, 1)
        self.L_scalar = scalar.assemble(ones_x, ones_y)
        self.L_components = sp.kron(sp.identity(m, format="csr"),
                                    self.L_scalar, format="csr")
        n = np.arange(N)
        c = np.arange(m)[:, None, None]
        cp = np.arange(m)[None, :, None]
        self.jac_rows = np.broadcast_to(c * N + n, (m, m, N)).ravel()
        self.jac_cols = np.broadcast_to(cp * N + n, (m, m, N)).ravel()

    def pointwise_jacobian(self, spec, pts):
        """Block matrix of A(u) acting cellwise on component-major vectors."""
        A = eval_A(spec, pts).reshape(self.N, self.m, self.m)
        data = np.moveaxis(A, 0, -1).ravel()
        size = self.m * self.N
        return sp.coo_matrix((data, (self.jac_rows, self.jac_cols)),
                             shape=(size, size)).tocsr()


def _flat(values):
    return values.reshape(-1)


def _reaction_term(spec, field):
    if spec.reaction is None:
        return np.zeros(field.values.shape)
    g = np.moveaxis(cell_gradient(field), (0, 1), (-2, -1))
    f = eval_reaction(spec, field.points(), g)
    return np.moveaxis(f, -1, 0)


def _reaction_dt_cap(spec, field, cfl):
    """Step bound keeping the explicit reaction stable: the pointwise
    rate |f(u)|/|u| underestimates the reaction Jacobian of the
    homogeneous competitive terms by at most a factor 2, so capping
    rate*dt at cfl/2 keeps lambda_eff*dt below cfl <= 1."""
    f = _reaction_term(spec, field)
    num = np.sqrt((f * f).sum(axis=0))
    den = np.sqrt((field.values * field.values).sum(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where(den > 0, num / den, 0.0)
    rho = float(rate.max())
    return 0.5 * cfl / rho if rho > 0 else np.inf


def _step_explicit(spec, field, dt, config, ws):
    rhs = laplacian_of_P(spec, field) + _reaction_term(spec, field)
    return Field(field.grid, field.values + dt * rhs), 0


def _step_imex(spec, field, dt, config, ws):
    Ax, Ay = face_coefficients(spec, field)
    L = ws.assembly.assemble(Ax, Ay)
    M = ws.eye - dt * L
    rhs = _flat(field.values + dt * _reaction_term(spec, field))
    x = spsolve(M, rhs)
    if not np.all(np.isfinite(x)):
        return Field(field.grid, x.reshape(field.values.shape)), 0
    res = np.linalg.norm(M @ x - rhs)
    if res > config.linear_tol * (1.0 + np.linalg.norm(rhs)):
        raise NumericalStateError(
            f"linear solve residual {res:.3e} exceeds tolerance")
    return Field(field.grid, x.reshape(field.values.shape)), 0


def _step_newton(spec, field, dt, config, ws):
    g = field.grid
    shape = field.values.shape
    uflat = _flat(field.values)
    rhs = uflat + dt * _flat(_reaction_term(spec, field))
    tol = config.newton_abs_tol + config.newton_rel_tol * np.linalg.norm(uflat)
    v = uflat.copy()
    solves = 0
    for _ in range(config.max_newton):
        vf = Field(g, v.reshape(shape))
        Pv = _flat(np.moveaxis(eval_P(spec, vf.points()), -1, 0))
        R = v - dt * (ws.L_components @ Pv) - rhs
        rn = np.linalg.norm(R)
        if not np.isfinite(rn):
            raise NewtonConvergenceError("non-finite Newton residual")
        if rn <= tol:
            return Field(g, v.reshape(shape)), solves
        D = ws.pointwise_jacobian(spec, vf.points())
        J = ws.eye - dt * (ws.L_components @ D)
        dv = spsolve(J, R)
        if not np.all(np.isfinite(dv)):
            raise NewtonConvergenceError("singular Newton system")
        v = v - dv
        solves += 1
    raise NewtonConvergenceError(
        f"no convergence in {config.max_newton} iterations (residual {rn:.3e})")


_STEPPERS = {"explicit": _step_explicit, "imex": _step_imex, "newton": _step_newton}


def step(spec, field, dt, scheme="imex", config=None, workspace=None):
    """Advance one step of size dt; returns (new_field, newton_solves).

    The explicit scheme applies forward Euler as given (stability is the
    caller's concern); imex and newton treat diffusion implicitly and
    the reaction explicitly.
    """
    if dt <= 0:
        raise InputError("dt must be positive")
    if scheme not in _STEPPERS:
        raise InputError(f"scheme must be one of {_SCHEMES}")
    if config is None:
        config = SolverConfig(scheme=scheme, dt0=dt, t_end=dt)
    if workspace is None:
        workspace = _Workspace(field.grid, field.m)
    return _STEPPERS[scheme](spec, field, dt, config, workspace)


def _default_recorder(spec):
    from .diagnostics import norms

    return lambda f, t: norms(f, spec, t=t)


def run(spec, field0, config, recorder=None):
    """Integrate from field0 to config.t_end; returns a Trajectory.

    Steps that fail (Newton breakdown, non-finite values) are retried
    with half the step until dt_min; persistent failure or a sup-norm
    beyond config.blowup_threshold terminates the run early with reason
    'nonfinite' or 'blowup', and a stability cap falling below dt_min
    terminates with 'stiff'.  Records are taken at t=0, every
    record_every accepted steps, and at the final time; snapshots are
    stored exactly at the requested times.
    """
    if recorder is None:
        recorder = _default_recorder(spec)
    ws = _Workspace(field0.grid, field0.m)
    stepper = _STEPPERS[config.scheme]

    u = field0.copy()
    t = 0.0
    dt = min(config.dt0, config.dt_max)
    targets = [ts for ts in config.snapshot_times if 0.0 < ts < config.t_end]
    targets.append(config.t_end)

    times = [0.0]
    records = [recorder(u, 0.0)]
    states = [u.copy()] if config.store_states else None
    snapshots = {}
    for ts in config.snapshot_times:
        if ts <= 0.0:
            snapshots[ts] = u.copy()
    dt_hist = []
    newton_hist = []
    first_negative = None
    if (u.values < 0).any():
        first_negative = 0.0
    reason = "reached"
    accepted = 0
    tptr = 0

    while t < config.t_end - 1e-14 * config.t_end:
        if accepted >= config.max_steps:
            reason = "maxsteps"
            break
        while tptr < len(targets) and targets[tptr] <= t * (1 + 1e-14):
            tptr += 1
        dt_base = dt
        dt_try = dt
        if config.scheme == "explicit":
            dt_try = min(dt_try, stable_dt(spec, u, config.cfl_safety))
        if spec.reaction is not None:
            dt_try = min(dt_try, _reaction_dt_cap(spec, u, config.cfl_safety))
        if dt_try < config.dt_min * (1 - 1e-12):
            # the state demands a step below the configured floor
            reason = "stiff"
            break
        landed = None
        if tptr < len(targets):
            gap = targets[tptr] - t
            if dt_try >= gap * (1.0 - 1e-12):
                dt_try = gap
                landed = targets[tptr]

        try:
            new, nsolve = stepper(spec, u, dt_try, config, ws)
            ok = bool(np.all(np.isfinite(new.values)))
        except NewtonConvergenceError:
            ok = False
            new = None
        if not ok:
            if dt_try <= config.dt_min * (1 + 1e-12):
                reason = "nonfinite"
                break
            dt = max(0.5 * dt_try, config.dt_min)
            continue

        t_new = landed if landed is not None else t + dt_try
        u = new
        t = t_new
        accepted += 1
        dt_hist.append(dt_try)
        newton_hist.append(nsolve)
        if first_negative is None and (u.values < 0).any():
            first_negative = t

        sup = float(np.abs(u.values).max())
        if sup > config.blowup_threshold:
            reason = "blowup"
            break

        if landed is not None and landed in config.snapshot_times:
            snapshots[landed] = u.copy()
        at_end = t >= config.t_end * (1 - 1e-14)
        if accepted % config.record_every == 0 or at_end:
            times.append(t)
            records.append(recorder(u, t))
            if states is not None:
                states.append(u.copy())
        if landed is not None:
            tptr += 1
        # a step clipped to land on a target must not shrink the pace
        dt = min(max(dt_try, min(dt_base, config.dt_max)) * 1.2, config.dt_max)

    if times[-1] != t:
        times.append(t)
        records.append(recorder(u, t))
        if states is not None:
            states.append(u.copy())

    return Trajectory(
        times=np.array(times), records=records, final=u,
        terminated_reason=reason, states=states, snapshots=snapshots,
        dt_history=np.array(dt_hist),
        newton_history=np.array(newton_hist, dtype=int),
        first_negative_t=first_negative)
