"""Gaussian random fields ``N(0, c (-Laplacian + tau I)^-alpha)`` by spectral synthesis.

Each axis uses an orthonormal (unit L2 norm) eigenbasis of the 1-d Laplacian:
cosines on ``(0, 1)`` for Neumann boundaries, real Fourier modes on
``(0, 2 pi)`` for periodic ones. Multi-dimensional bases are tensor products,
so eigenvalues add across axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class FieldSample:
    """Function values on a point set.

    ``grid_shape`` is set for tensor grids (row-major, first axis slowest).
    """

    coords: np.ndarray
    values: np.ndarray
    resolution: int
    domain: tuple[tuple[float, float], ...]
    periodic: bool = False
    grid_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.coords.ndim != 2 or self.coords.shape[0] != self.values.shape[0]:
            raise ValueError(f"coords {self.coords.shape} and values {self.values.shape} disagree")
        if self.grid_shape is not None and math.prod(self.grid_shape) != self.values.shape[0]:
            raise ValueError(f"grid shape {self.grid_shape} does not hold {self.values.shape[0]} points")

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def grid_values(self) -> np.ndarray:
        if self.grid_shape is None:
            raise ValueError("sample is not on a tensor grid")
        return self.values.reshape(self.grid_shape)

    def with_values(self, values) -> "FieldSample":
        return FieldSample(self.coords, np.asarray(values, dtype=float).reshape(-1),
                           self.resolution, self.domain, self.periodic, self.grid_shape)


UNIT_INTERVAL = ((0.0, 1.0),)
PERIODIC_LINE = ((0.0, 2 * math.pi),)


def grid_points(s: int, dim: int, periodic: bool) -> np.ndarray:
    """1-d node positions: closed ``[0, 1]`` grid, or ``2 pi j / s`` when periodic."""
    if periodic:
        return 2 * math.pi * np.arange(s) / s
    return np.linspace(0.0, 1.0, s)


def grid_sample(values: np.ndarray, dim: int, periodic: bool) -> FieldSample:
    """Wrap an ``s**dim`` grid array as a :class:`FieldSample`."""
    values = np.asarray(values, dtype=float)
    s = values.shape[0]
    axis = grid_points(s, dim, periodic)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    coords = np.stack([m.reshape(-1) for m in mesh], axis=1)
    domain = (PERIODIC_LINE if periodic else UNIT_INTERVAL) * dim
    return FieldSample(coords, values.reshape(-1), s, domain, periodic, (s,) * dim)


@dataclass
class GrfSpec:
    dim: int = 2
    tau: float = 9.0
    alpha: float = 2.0
    scale: float = 1.0
    boundary: str = "neumann"
    resolution: int = 241
    seed: int | None = None

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.dim}")
        if self.boundary not in ("neumann", "periodic"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.tau <= 0 or self.alpha <= 0 or self.scale <= 0:
            raise ValueError("tau, alpha and scale must be positive")
        if self.resolution < 4:
            raise ValueError("resolution must be at least 4")

    @classmethod
    def darcy(cls, resolution: int = 241, seed=None) -> "GrfSpec":
        return cls(2, 9.0, 2.0, 1.0, "neumann", resolution, seed)

    @classmethod
    def burgers(cls, resolution: int = 8192, seed=None) -> "GrfSpec":
        return cls(1, 25.0, 2.0, 625.0, "periodic", resolution, seed)

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"


def axis_basis(s: int, periodic: bool) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal eigenbasis of ``-d^2/dx^2`` sampled on the grid.

    Returns ``(B, eig)`` with ``B[i, k]`` the k-th basis function at node i.
    Neumann: ``1, sqrt(2) cos(k pi x)``, ``k < s``, eigenvalue ``(k pi)^2``.
    Periodic: ``1/sqrt(2 pi)``, then ``cos(kx)/sqrt(pi)``, ``sin(kx)/sqrt(pi)``
    for ``k < s/2`` and the cosine Nyquist mode, eigenvalue ``k^2``.
    """
    x = grid_points(s, 1, periodic)
    if not periodic:
        k = np.arange(s)
        B = np.sqrt(2.0) * np.cos(np.pi * np.outer(x, k))
        B[:, 0] = 1.0
        return B, (np.pi * k) ** 2
    cols, eig = [np.full(s, 1.0 / math.sqrt(2 * math.pi))], [0.0]
    for k in range(1, s // 2 + 1):
        cols.append(np.cos(k * x) / math.sqrt(math.pi))
        eig.append(float(k * k))
        if 2 * k < s:
            cols.append(np.sin(k * x) / math.sqrt(math.pi))
            eig.append(float(k * k))
    return np.stack(cols, axis=1), np.asarray(eig)


def mode_std(spec: GrfSpec, eig: np.ndarray) -> np.ndarray:
    """Standard deviation ``sqrt(c) (lambda + tau)^(-alpha/2)`` of each mode coefficient."""
    return math.sqrt(spec.scale) * (eig + spec.tau) ** (-spec.alpha / 2)


def _periodic_line(xi: np.ndarray, sd: np.ndarray, s: int) -> np.ndarray:
    # real Fourier synthesis through irfft, same ordering as axis_basis
    coef = xi * sd
    X = np.zeros(s // 2 + 1, dtype=complex)
    X[0] = s * coef[0] / math.sqrt(2 * math.pi)
    pos = 1
    for k in range(1, s // 2 + 1):
        if 2 * k < s:
            X[k] = s * (coef[pos] - 1j * coef[pos + 1]) / (2 * math.sqrt(math.pi))
            pos += 2
        else:
            X[k] = s * coef[pos] / math.sqrt(math.pi)
            pos += 1
    return np.fft.irfft(X, n=s)


def sample_grf(spec: GrfSpec, rng: np.random.Generator | None = None) -> FieldSample:
    """Draw one field on the ``resolution**dim`` grid.

    ``rng`` overrides ``spec.seed`` so several draws can share one stream.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    s = spec.resolution
    if spec.dim == 1 and spec.periodic:
        eig = axis_basis_eigenvalues(s, True)
        xi = rng.standard_normal(eig.shape[0])
        return grid_sample(_periodic_line(xi, mode_std(spec, eig), s), 1, True)
    B, eig1 = axis_basis(s, spec.periodic)
    if spec.dim == 1:
        values = B @ (rng.standard_normal(eig1.shape[0]) * mode_std(spec, eig1))
    else:
        eig = eig1[:, None] + eig1[None, :]
        Z = rng.standard_normal(eig.shape) * mode_std(spec, eig)
        values = B @ Z @ B.T
    return grid_sample(values, spec.dim, spec.periodic)


def axis_basis_eigenvalues(s: int, periodic: bool) -> np.ndarray:
    if not periodic:
        return (np.pi * np.arange(s)) ** 2
    k = np.arange(1, s // 2 + 1, dtype=float)
    pairs = np.repeat(k ** 2, 2)
    if s % 2 == 0:
        pairs = pairs[:-1]
    return np.concatenate([[0.0], pairs])


def threshold_pushforward(f: FieldSample, hi: float = 12.0, lo: float = 3.0) -> FieldSample:
    """Map positive values to ``hi`` and everything else (zero included) to ``lo``."""
    return f.with_values(np.where(f.values > 0, hi, lo))
