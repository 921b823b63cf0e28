"""Cell-centered finite volumes on a rectangle.

States live at cell centers of a uniform Nx x Ny grid over
[0, Lx] x [0, Ly].  Diffusion operators are assembled from face fluxes:
the discrete divergence of a face-coefficient times a two-point normal
difference.  Boundary conditions enter through ghost cells (mirror for
no-flux, odd reflection for zero-Dirichlet), so the same flux kernel
serves both the quasilinear operator Div(A(u) Du) and the fully
nonlinear form Lap(P(u)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalStateError
from .model import eval_A, eval_P

__all__ = [
    "Grid2D",
    "Field",
    "build_grid",
    "cell_gradient",
    "laplacian_of_P",
    "div_A_grad",
    "face_coefficients",
    "stable_dt",
    "save_snapshot",
    "load_snapshot",
]

_BCS = ("neumann", "dirichlet")


@dataclass(frozen=True)
class Grid2D:
    """Uniform cell-centered grid on [0, Lx] x [0, Ly]."""

    Lx: float
    Ly: float
    Nx: int
    Ny: int
    bc: str = "neumann"

    def __post_init__(self):
        if not (self.Lx > 0 and self.Ly > 0):
            raise InputError("domain side lengths must be positive")
        if self.Nx < 2 or self.Ny < 2:
            raise InputError("need at least 2 cells per direction")
        if self.bc not in _BCS:
            raise InputError(f"bc must be one of {_BCS}")

    @property
    def hx(self):
        return self.Lx / self.Nx

    @property
    def hy(self):
        return self.Ly / self.Ny

    @property
    def cell_area(self):
        return self.hx * self.hy

    @property
    def shape(self):
        return (self.Nx, self.Ny)

    @property
    def xs(self):
        return (np.arange(self.Nx) + 0.5) * self.hx

    @property
    def ys(self):
        return (np.arange(self.Ny) + 0.5) * self.hy

    def meshgrid(self):
        return np.meshgrid(self.xs, self.ys, indexing="ij")

    def flat_index(self, c, i, j):
        """Unknown index of component c at cell (i, j): values.ravel()
        order, c * Nx * Ny + i * Ny + j."""
        return (c * self.Nx + i) * self.Ny + j


def build_grid(Lx, Ly, Nx, Ny, bc="neumann"):
    """Construct a Grid2D; bc is 'neumann' (no-flux) or 'dirichlet'."""
    return Grid2D(float(Lx), float(Ly), int(Nx), int(Ny), str(bc))


@dataclass
class Field:
    """m-component cell-centered state with values of shape (m, Nx, Ny)."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[1:] != self.grid.shape:
            raise InputError(
                f"values must have shape (m, {self.grid.Nx}, {self.grid.Ny})")
        self.values = v

    @property
    def m(self):
        return self.values.shape[0]

    @classmethod
    def from_function(cls, grid, m, fn):
        X, Y = grid.meshgrid()
        vals = np.stack([np.broadcast_to(np.asarray(fn(c, X, Y), dtype=float),
                                         grid.shape).copy()
                         for c in range(m)])
        return cls(grid, vals)

    @classmethod
    def constant(cls, grid, const):
        const = np.atleast_1d(np.asarray(const, dtype=float))
        vals = np.broadcast_to(const[:, None, None],
                               (const.size,) + grid.shape).copy()
        return cls(grid, vals)

    def points(self):
        """Values rearranged to (Nx, Ny, m) for batched model evaluation."""
        return np.moveaxis(self.values, 0, -1)

    def copy(self):
        return Field(self.grid, self.values.copy())


def _pad(values, bc):
    """Add one ghost layer per side to (m, Nx, Ny) values.

    neumann: mirror (ghost = adjacent interior), so two-point normal
    differences vanish at the boundary.  dirichlet: odd reflection
    (ghost = -interior), so the face value (ghost+interior)/2 is an
    exact zero.  Corner ghosts are never read by the flux kernel and
    are left at 0.
    """
    m, Nx, Ny = values.shape
    out = np.zeros((m, Nx + 2, Ny + 2))
    out[:, 1:-1, 1:-1] = values
    s = 1.0 if bc == "neumann" else -1.0
    out[:, 0, 1:-1] = s * values[:, 0, :]
    out[:, -1, 1:-1] = s * values[:, -1, :]
    out[:, 1:-1, 0] = s * values[:, :, 0]
    out[:, 1:-1, -1] = s * values[:, :, -1]
    return out


def cell_gradient(field):
    """Central-difference gradient at cell centers, shape (m, 2, Nx, Ny).

    Ghost layers follow the grid's boundary condition, so for no-flux
    the normal component is exactly 0 on boundary cells.  Interior
    accuracy is O(h^2); boundary-cell accuracy is O(h) for smooth
    fields compatible with the boundary condition.
    """
    g = field.grid
    p = _pad(field.values, g.bc)
    gx = (p[:, 2:, 1:-1] - p[:, :-2, 1:-1]) / (2.0 * g.hx)
    gy = (p[:, 1:-1, 2:] - p[:, 1:-1, :-2]) / (2.0 * g.hy)
    return np.stack([gx, gy], axis=1)


def _flux_divergence(w, grid, coef_x=None, coef_y=None):
    """Divergence of face fluxes for padded values w of shape (m, Nx+2, Ny+2).

    Fluxes are two-point differences across each face, optionally
    multiplied by per-face coefficient matrices coef_x of shape
    (Nx+1, Ny, m, m) and coef_y of shape (Nx, Ny+1, m, m).  Without
    coefficients this is the 5-point Laplacian of the padded data.
    """
    dx = (w[:, 1:, 1:-1] - w[:, :-1, 1:-1]) / grid.hx   # (m, Nx+1, Ny)
    dy = (w[:, 1:-1, 1:] - w[:, 1:-1, :-1]) / grid.hy   # (m, Nx, Ny+1)
    if coef_x is not None:
        dx = np.einsum("xyij,jxy->ixy", coef_x, dx)
        dy = np.einsum("xyij,jxy->ixy", coef_y, dy)
    return (dx[:, 1:, :] - dx[:, :-1, :]) / grid.hx + \
           (dy[:, :, 1:] - dy[:, :, :-1]) / grid.hy


def _require_finite(field):
    if not np.all(np.isfinite(field.values)):
        raise NumericalStateError("state contains non-finite values")


def laplacian_of_P(spec, field):
    """Discrete Lap(P(u)): apply P pointwise, then the 5-point flux
    divergence with the ghost rule applied to P(u) itself.  Since
    P(0) = 0, zero-Dirichlet data for u gives zero-Dirichlet data for
    P(u), and mirror ghosts commute with pointwise maps.  Returns
    (m, Nx, Ny)."""
    _require_finite(field)
    g = field.grid
    w = np.moveaxis(eval_P(spec, field.points()), -1, 0)
    return _flux_divergence(_pad(w, g.bc), g)


def face_coefficients(spec, field):
    """A evaluated at arithmetic face averages of the padded state.

    Returns (coef_x, coef_y) with shapes (Nx+1, Ny, m, m) and
    (Nx, Ny+1, m, m).  With odd Dirichlet ghosts the boundary face
    average is exactly 0, so boundary faces carry A(0)."""
    g = field.grid
    p = _pad(field.values, g.bc)
    ux = 0.5 * (p[:, 1:, 1:-1] + p[:, :-1, 1:-1])
    uy = 0.5 * (p[:, 1:-1, 1:] + p[:, 1:-1, :-1])
    Ax = eval_A(spec, np.moveaxis(ux, 0, -1))
    Ay = eval_A(spec, np.moveaxis(uy, 0, -1))
    return Ax, Ay


def div_A_grad(spec, field):
    """Discrete Div(A(u) Du) with face-averaged coefficients.

    Identical to laplacian_of_P when P is the identity map.  Returns
    (m, Nx, Ny)."""
    _require_finite(field)
    g = field.grid
    p = _pad(field.values, g.bc)
    coef_x, coef_y = face_coefficients(spec, field)
    return _flux_divergence(p, g, coef_x, coef_y)


def stable_dt(spec, field, cfl=0.9):
    """Explicit-step bound cfl * min(hx, hy)^2 / (8 * max ||A(u)||).

    The operator norm is maximized over cell values of the current
    state; 8 = 2 * 4 covers the two space directions of the 5-point
    stencil with a matrix diffusion coefficient."""
    g = field.grid
    A = eval_A(spec, field.points())
    s = float(np.linalg.svd(A, compute_uv=False)[..., 0].max())
    if s <= 0:
        raise InputError("state has vanishing diffusion; no stable step exists")
    h = min(g.hx, g.hy)
    return float(cfl) * h * h / (8.0 * s)


def save_snapshot(path, field, fmt="csv"):
    """Write a field with the plain-text header `m Nx Ny Lx Ly`.

    csv: header line then one row per cell in component-major raveled
    order, 17 significant digits.  bin: header line (ASCII, newline
    terminated) followed by raw little-endian float64 values in the
    same order."""
    g = field.grid
    header = f"{field.m} {g.Nx} {g.Ny} {g.Lx:.17g} {g.Ly:.17g}\n"
    flat = field.values.ravel()
    if fmt == "csv":
        with open(path, "w") as fh:
            fh.write(header)
            for v in flat:
                fh.write(f"{v:.17g}\n")
    elif fmt == "bin":
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(flat.astype("<f8").tobytes())
    else:
        raise InputError(f"unknown snapshot format {fmt!r}")


def load_snapshot(path, bc="neumann", fmt=None):
    """Read a snapshot written by save_snapshot; fmt inferred from the
    payload when not given."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii")
        payload = fh.read()
    parts = header.split()
    if len(parts) != 5:
        raise InputError("snapshot header must be `m Nx Ny Lx Ly`")
    m, Nx, Ny = (int(p) for p in parts[:3])
    Lx, Ly = (float(p) for p in parts[3:])
    count = m * Nx * Ny
    if fmt is None:
        fmt = "bin" if len(payload) == 8 * count else "csv"
    if fmt == "bin":
        if len(payload) != 8 * count:
            raise InputError("snapshot payload has the wrong byte count")
        flat = np.frombuffer(payload, dtype="<f8").astype(float)
    else:
        flat = np.array([float(x) for x in payload.decode("ascii").split()])
        if flat.size != count:
            raise InputError("snapshot payload has the wrong value count")
    grid = Grid2D(Lx, Ly, Nx, Ny, bc)
    return Field(grid, flat.reshape(m, Nx, Ny))
