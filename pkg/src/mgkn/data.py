"""Synthetic training pairs for the two benchmark problems."""

from __future__ import annotations

import numpy as np

from .pde_solvers import BurgersProblem, DarcyProblem, solve_burgers, solve_darcy
from .random_fields import FieldSample, GrfSpec, sample_grf, threshold_pushforward


def pair_seed(base: int, i: int) -> int:
    return int(np.random.SeedSequence([base, i]).generate_state(1, np.uint64)[0] >> 1)


def darcy_pair(resolution: int, seed: int, forcing: float = 1.0) -> tuple[FieldSample, FieldSample]:
    a = threshold_pushforward(sample_grf(GrfSpec.darcy(resolution, seed)))
    return a, solve_darcy(DarcyProblem(a.grid_values(), forcing))


def burgers_pair(resolution: int, seed: int, viscosity: float = 0.1,
                 num_steps: int | None = None) -> tuple[FieldSample, FieldSample]:
    u0 = sample_grf(GrfSpec.burgers(resolution, seed))
    return u0, solve_burgers(BurgersProblem(u0.values, viscosity), num_steps)


def generate_pairs(kind: str, n: int, resolution: int, seed: int, progress=None, **solver):
    """``n`` pairs with independent per-sample seeds derived from ``seed``."""
    make = {"darcy": darcy_pair, "burgers": burgers_pair}[kind]
    out = []
    for i in range(n):
        out.append(make(resolution, pair_seed(seed, i), **solver))
        if progress is not None:
            progress(i, n)
    return out
