"""Reference solvers producing ground-truth pairs.

Darcy: ``-div(a grad u) = f`` on the unit square with zero Dirichlet data,
5-point flux form with harmonic-mean face coefficients, conjugate gradients.
Burgers: ``u_t + (u^2/2)_x = nu u_xx`` on the periodic interval ``[0, 2 pi)``,
Lie splitting of an explicit Fourier-space advection step and exact diffusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .random_fields import FieldSample, grid_sample


class EllipticityError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


class ResolutionError(ValueError):
    pass


@dataclass
class DarcyProblem:
    """Coefficient on an ``s x s`` closed grid over the unit square.

    ``forcing`` is a scalar or an ``s x s`` array; only interior entries are used.
    """

    coefficient: np.ndarray
    forcing: float | np.ndarray = 1.0

    def __post_init__(self):
        self.coefficient = np.asarray(self.coefficient, dtype=float)
        if self.coefficient.ndim != 2 or self.coefficient.shape[0] != self.coefficient.shape[1]:
            raise ValueError(f"coefficient must be square, got {self.coefficient.shape}")
        if not np.all(self.coefficient > 0):
            raise EllipticityError("coefficient must be strictly positive")

    @property
    def resolution(self) -> int:
        return self.coefficient.shape[0]


def _harmonic(p, q):
    return 2.0 * p * q / (p + q)


def darcy_matrix(a: np.ndarray) -> sp.csr_matrix:
    """Stiffness matrix on the ``(s-2)**2`` interior nodes, scaled by ``1/h^2``."""
    s = a.shape[0]
    n = s - 2
    h = 1.0 / (s - 1)
    # face coefficients between node (i, j) and its neighbour along each axis
    ax = _harmonic(a[:-1, :], a[1:, :])  # (s-1, s)
    ay = _harmonic(a[:, :-1], a[:, 1:])  # (s, s-1)
    west = ax[:-1, 1:-1]   # between i-1 and i, for interior i
    east = ax[1:, 1:-1]
    south = ay[1:-1, :-1]
    north = ay[1:-1, 1:]
    diag = (west + east + south + north).reshape(-1)
    idx = np.arange(n * n).reshape(n, n)
    rows = [idx.reshape(-1)]
    cols = [idx.reshape(-1)]
    vals = [diag]
    # couplings along the first axis (i, j) - (i+1, j)
    rows += [idx[:-1, :].reshape(-1), idx[1:, :].reshape(-1)]
    cols += [idx[1:, :].reshape(-1), idx[:-1, :].reshape(-1)]
    c = -east[:-1, :].reshape(-1)
    vals += [c, c]
    # couplings along the second axis (i, j) - (i, j+1)
    rows += [idx[:, :-1].reshape(-1), idx[:, 1:].reshape(-1)]
    cols += [idx[:, 1:].reshape(-1), idx[:, :-1].reshape(-1)]
    c = -north[:, :-1].reshape(-1)
    vals += [c, c]
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n * n, n * n))
    return A / (h * h)


def conjugate_gradient(A, b: np.ndarray, rtol: float = 1e-8, maxiter: int | None = None,
                       callback=None) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned CG for SPD ``A``; stops at ``|r| <= rtol |b|``."""
    n = b.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0
    dinv = 1.0 / A.diagonal()
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        step = rz / (p @ Ap)
        x += step * p
        r -= step * Ap
        if callback is not None:
            callback(x)
        if np.linalg.norm(r) <= rtol * bnorm:
            return x, it
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not reach relative residual {rtol} in {maxiter} iterations")


def solve_darcy(p: DarcyProblem, rtol: float = 1e-8) -> FieldSample:
    """Solution on the full closed grid (boundary entries are zero)."""
    a = p.coefficient
    s = a.shape[0]
    if s < 3:
        raise ResolutionError("need at least one interior node")
    f = np.broadcast_to(np.asarray(p.forcing, dtype=float), a.shape)
    rhs = np.ascontiguousarray(f[1:-1, 1:-1]).reshape(-1)
    A = darcy_matrix(a)
    x, _ = conjugate_gradient(A, rhs, rtol=rtol, maxiter=10 * s * s)
    u = np.zeros_like(a)
    u[1:-1, 1:-1] = x.reshape(s - 2, s - 2)
    return grid_sample(u, 2, periodic=False)


@dataclass
class BurgersProblem:
    initial: np.ndarray
    viscosity: float = 0.1
    final_time: float = 1.0

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=float)
        s = self.initial.shape[0]
        if self.initial.ndim != 1 or s < 2 or s & (s - 1):
            raise ResolutionError(f"Burgers grid size must be a power of two, got {s}")

    @property
    def resolution(self) -> int:
        return self.initial.shape[0]


def solve_burgers(p: BurgersProblem, num_steps: int | None = None,
                  nonlinear: bool = True) -> FieldSample:
    """Advance to ``final_time``; ``num_steps`` defaults to ``4 * s``.

    ``nonlinear=False`` keeps only the exact diffusion factor.
    """
    s = p.resolution
    num_steps = 4 * s if num_steps is None else int(num_steps)
    if num_steps < s:
        raise ValueError(f"num_steps must be at least the grid size {s}")
    dt = p.final_time / num_steps
    k = np.fft.rfftfreq(s, d=1.0 / s)  # integer wavenumbers on a 2 pi period
    keep = k <= s / 3.0
    advect = -dt * 0.5j * k * keep
    decay = np.exp(-p.viscosity * k * k * dt)
    uh = np.fft.rfft(p.initial)
    for _ in range(num_steps):
        if nonlinear:
            u = np.fft.irfft(uh, n=s)
            uh = uh + advect * np.fft.rfft(u * u)
        uh = uh * decay
    return grid_sample(np.fft.irfft(uh, n=s), 1, periodic=True)


def subsample(f: FieldSample, target_s: int) -> FieldSample:
    """Strided restriction of a grid sample to ``target_s`` points per axis."""
    if f.grid_shape is None:
        raise ResolutionError("can only subsample grid samples")
    s = f.resolution
    if f.periodic:
        if s % target_s:
            raise ResolutionError(f"periodic size {s} is not divisible by {target_s}")
        stride = s // target_s
    else:
        if target_s < 2 or (s - 1) % (target_s - 1):
            raise ResolutionError(f"(s-1)={s - 1} is not divisible by {target_s - 1}")
        stride = (s - 1) // (target_s - 1)
    grid = f.grid_values()[tuple(slice(None, None, stride) for _ in f.grid_shape)]
    return grid_sample(grid, f.dim, f.periodic)
