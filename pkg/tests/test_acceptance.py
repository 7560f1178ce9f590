"""Acceptance criteria, one test each; every test records a PASS/FAIL verdict line.

Run with ``pytest tests/test_acceptance.py`` (verdicts appear in the terminal
summary) or ``python tests/test_acceptance.py``.
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from mgkn import cli
from mgkn import tensor_core as tc
from mgkn.data import generate_pairs
from mgkn.graph_builder import LevelSchedule, build_hierarchy
from mgkn.operator_model import GraphKernels, LevelState, MgknParams, ModelConfig, forward, vcycle_step
from mgkn.pde_solvers import BurgersProblem, DarcyProblem, solve_burgers, solve_darcy
from mgkn.random_fields import FieldSample, GrfSpec, sample_grf
from mgkn.training import (
    PairSet, TrainConfig, eval_complexity, eval_mesh_invariance, loglog_slope,
    make_model, train,
)

sys.path.insert(0, str(Path(__file__).parent))
from acceptance_log import record  # noqa: E402
from oracles import (  # noqa: E402
    group_fd_error, multiresolution_sum, neumann_coefficients, periodic_coefficients,
)

# desk configuration shared by the learning criteria
DESK = dict(n_train=100, n_test=20, train_s=31, test_s=61, source_s=241, data_seed=7,
            d_v=32, T=5, kernel_width=16, radius_scale=0.5, epochs=50, lr=1e-3)


# ---------------------------------------------------------------- 1

def test_criterion_01_factorization_oracle():
    start = time.perf_counter()
    worst = 0.0
    schedules = {1: LevelSchedule([12], [0.45], []),
                 2: LevelSchedule([12, 5], [0.45, 0.6], [0.5]),
                 3: LevelSchedule([12, 5, 3], [0.45, 0.6, 0.9], [0.5, 0.7])}
    for L, sched in schedules.items():
        rng = np.random.default_rng(L)
        a = FieldSample(rng.random((30, 2)), rng.choice([3.0, 12.0], 30), 0, ((0, 1), (0, 1)))
        graph = build_hierarchy(a, sched, seed=L)
        params = MgknParams(ModelConfig(d_v=3, T=1, levels=L, kernel_width=8), seed=L)
        for W in params.W:
            W.data[...] = 0.0
        v1 = rng.standard_normal((12, 3))
        state = LevelState.initial(tc.Tensor(v1), graph)
        out = vcycle_step(state, graph, params, GraphKernels.evaluate(params, graph),
                          activation=tc.identity).hat[0].data
        ref = multiresolution_sum(params, graph, v1)
        worst = max(worst, np.linalg.norm(out - ref) / np.linalg.norm(ref))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 1.0
    assert record(1, "factorization oracle", ok,
                  f"max relative error {worst:.2e} (< 1e-9) over L=1,2,3 in {elapsed:.2f}s (< 1s)")


# ---------------------------------------------------------------- 2

def test_criterion_02_gradient_checks():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    a = FieldSample(rng.random((16, 2)), rng.choice([3.0, 12.0], 16), 0, ((0, 1), (0, 1)))
    graph = build_hierarchy(a, LevelSchedule([10, 4], [0.5, 0.8], [0.6]), seed=1)
    params = MgknParams(ModelConfig(d_v=4, T=1, levels=2, kernel_width=8), seed=0)
    target = rng.standard_normal((10, 1))

    def loss_fn():
        d = tc.sub(forward(a, graph, params), tc.Tensor(target))
        return tc.sum_all(tc.mul(d, d))

    errs = {name: group_fd_error(params, group, loss_fn, h=1e-4)
            for name, group in params.groups().items()}
    elapsed = time.perf_counter() - start
    worst = max(errs.values())
    ok = worst < 1e-3 and elapsed < 30
    assert record(2, "gradient checks", ok,
                  f"worst group {max(errs, key=errs.get)} {worst:.1e} (< 1e-3), "
                  f"{len(errs)} groups in {elapsed:.1f}s (< 30s)")


# ---------------------------------------------------------------- 3

def test_criterion_03_linear_complexity():
    start = time.perf_counter()
    m1s = [100, 400, 1600, 6400]
    mg = eval_complexity([LevelSchedule.multipole(L) for L in (2, 3, 4, 5)], repeats=10, seed=0,
                         time_edge_budget=0)
    gkn = eval_complexity([LevelSchedule([m], [0.25], []) for m in m1s], repeats=10, seed=0,
                          time_edge_budget=0)
    s_mg = loglog_slope(m1s, [r.kernel_evals for r in mg])
    s_gkn = loglog_slope(m1s, [r.kernel_evals for r in gkn])
    elapsed = time.perf_counter() - start
    ok = 0.85 <= s_mg <= 1.15 and 1.7 <= s_gkn <= 2.3 and elapsed < 120
    assert record(3, "linear complexity", ok,
                  f"multi-level slope {s_mg:.3f} (in [0.85, 1.15]), single-level slope "
                  f"{s_gkn:.3f} (in [1.7, 2.3]), {elapsed:.0f}s (< 120s)")


# ---------------------------------------------------------------- 4

def _manufactured_error(s):
    x = np.linspace(0.0, 1.0, s)
    X, Y = np.meshgrid(x, x, indexing="ij")
    exact = np.sin(np.pi * X) * np.sin(np.pi * Y)
    u = solve_darcy(DarcyProblem(np.ones((s, s)), 2 * np.pi ** 2 * exact)).grid_values()
    return float(np.abs(u - exact).max())


def test_criterion_04_darcy_order():
    start = time.perf_counter()
    # doubling the grid resolution halves the spacing: s -> 2(s - 1) + 1 nodes
    e = {s: _manufactured_error(s) for s in (17, 33, 65)}
    ratios = [e[17] / e[33], e[33] / e[65]]
    elapsed = time.perf_counter() - start
    ok = all(3.0 <= r <= 5.0 for r in ratios) and elapsed < 60
    assert record(4, "Darcy solver order", ok,
                  f"error ratios {ratios[0]:.3f}, {ratios[1]:.3f} (in [3, 5]) in {elapsed:.1f}s")


# ---------------------------------------------------------------- 5

def test_criterion_05_burgers_solver():
    start = time.perf_counter()
    x = 2 * np.pi * np.arange(256) / 256
    heat = solve_burgers(BurgersProblem(np.sin(x), 0.1), nonlinear=False).values
    heat_err = np.abs(heat - math.exp(-0.1) * np.sin(x)).max()
    u0 = sample_grf(GrfSpec.burgers(1024, seed=11)).values + 0.5
    coarse = solve_burgers(BurgersProblem(u0), num_steps=4 * 1024).values
    fine = solve_burgers(BurgersProblem(u0), num_steps=8 * 1024).values
    mean_err = abs(coarse.mean() - u0.mean())
    refine = np.linalg.norm(coarse - fine) / np.linalg.norm(fine)
    elapsed = time.perf_counter() - start
    ok = heat_err < 1e-10 and mean_err < 1e-10 and refine < 1e-3 and elapsed < 60
    assert record(5, "Burgers solver", ok,
                  f"heat-only {heat_err:.1e}, mean drift {mean_err:.1e} (< 1e-10), "
                  f"step refinement {refine:.1e} (< 1e-3) in {elapsed:.1f}s")


# ---------------------------------------------------------------- 6

def test_criterion_06_grf_spectrum():
    start = time.perf_counter()
    n = 2000
    worst = 0.0
    spec = GrfSpec.darcy(32)
    rng = np.random.default_rng(6)
    modes = [(0, 0), (1, 0), (0, 1), (1, 1), (2, 3), (4, 0)]
    coefs = np.array([neumann_coefficients(sample_grf(spec, rng).grid_values(), modes)
                      for _ in range(n)])
    expected = np.array([(np.pi ** 2 * (a * a + b * b) + 9.0) ** -2.0 for a, b in modes])
    z = np.abs(coefs.var(axis=0, ddof=1) - expected) / (expected * math.sqrt(2 / (n - 1)))
    worst = max(worst, z.max())
    spec = GrfSpec.burgers(32)
    ks = [0, 1, 2, 3, 6]
    draws = np.stack([sample_grf(spec, rng).values for _ in range(n)])
    coefs = np.array([periodic_coefficients(d, ks) for d in draws])
    expected = np.array([625.0 * (k * k + 25.0) ** -2 for k in ks])
    z = np.abs(coefs.var(axis=0, ddof=1) - expected) / (expected * math.sqrt(2 / (n - 1)))
    worst = max(worst, z.max())
    elapsed = time.perf_counter() - start
    ok = worst < 3.0 and elapsed < 60
    assert record(6, "GRF spectrum", ok,
                  f"largest deviation {worst:.2f} standard errors (< 3) over {n} draws "
                  f"in {elapsed:.1f}s")


# ---------------------------------------------------------------- 7-9

@pytest.fixture(scope="module")
def desk_data():
    pairs = generate_pairs("darcy", DESK["n_train"] + DESK["n_test"], DESK["source_s"],
                           DESK["data_seed"])
    full = PairSet([p[0] for p in pairs], [p[1] for p in pairs])
    train_src = full.take(range(DESK["n_train"]))
    test_src = full.take(range(DESK["n_train"], DESK["n_train"] + DESK["n_test"]))
    s = DESK["train_s"]
    return train_src.at_resolution(s), test_src.at_resolution(s), test_src


def _desk_run(desk_data, levels):
    tr, te, _ = desk_data
    sched = LevelSchedule.multipole(3, radius_scale=DESK["radius_scale"]).truncated(levels)
    cfg = ModelConfig(d_v=DESK["d_v"], T=DESK["T"], levels=levels, kernel_width=DESK["kernel_width"])
    tcfg = TrainConfig(epochs=DESK["epochs"], lr=DESK["lr"], n_train=DESK["n_train"],
                       n_test=DESK["n_test"], seed=0)
    start = time.perf_counter()
    model, rep = train(make_model(cfg, sched, tr, seed=0), tr, tcfg, te)
    return model, rep, time.perf_counter() - start


@pytest.fixture(scope="module")
def desk_three_levels(desk_data):
    return _desk_run(desk_data, 3)


@pytest.fixture(scope="module")
def desk_one_level(desk_data):
    return _desk_run(desk_data, 1)


def test_criterion_07_desk_learning(desk_three_levels):
    model, rep, elapsed = desk_three_levels
    ok = rep.mean_error <= 0.15 and elapsed <= 1800
    assert record(7, "desk-scale learning", ok,
                  f"m={model.schedule.m} test error {rep.mean_error:.4f} (<= 0.15), train "
                  f"{rep.mean_train_error:.4f}, {elapsed / 60:.1f} min (<= 30)")


def test_criterion_08_level_ablation(desk_three_levels, desk_one_level):
    _, rep3, t3 = desk_three_levels
    _, rep1, t1 = desk_one_level
    ok = rep3.mean_error <= 1.1 * rep1.mean_error and t1 + t3 <= 3600
    assert record(8, "level ablation direction", ok,
                  f"L=3 {rep3.mean_error:.4f} vs 1.1 x L=1 {1.1 * rep1.mean_error:.4f}, "
                  f"{(t1 + t3) / 60:.1f} min combined (<= 60)")


def test_criterion_09_mesh_invariance(desk_data, desk_three_levels):
    model, _, _ = desk_three_levels
    _, _, test_src = desk_data
    start = time.perf_counter()
    grid = eval_mesh_invariance(model, test_src, DESK["train_s"], [DESK["train_s"], DESK["test_s"]])
    elapsed = time.perf_counter() - start
    same = grid[(DESK["train_s"], DESK["train_s"])].mean_error
    cross = grid[(DESK["train_s"], DESK["test_s"])].mean_error
    ok = cross <= 1.5 * same and elapsed <= 600
    assert record(9, "mesh invariance", ok,
                  f"s=61 error {cross:.4f} vs 1.5 x s=31 error {1.5 * same:.4f}, "
                  f"{elapsed:.0f}s extra (<= 600s)")


# ---------------------------------------------------------------- 10

def test_criterion_10_determinism(tmp_path):
    doc = {"dataset": "data.mgkn", "output_dir": "run", "record_timings": False,
           "data": {"kind": "darcy", "resolution": 33, "n_samples": 6, "seed": 7},
           "schedule": {"levels": 2, "radius_scale": 1.0},
           "model": {"d_v": 8, "T": 2, "kernel_width": 8},
           "train": {"epochs": 2, "n_train": 4, "n_test": 2},
           "eval": {"train_resolution": 17, "test_resolutions": [17, 33], "ablate_levels": [1, 2],
                    "bench_m1": [100, 400], "bench_repeats": 2}}
    verbs = ["generate", "train", "eval", "mesh-invariance", "ablate-levels", "bench"]
    doc.update(dataset=str(tmp_path / "data.mgkn"), output_dir=str(tmp_path / "run"))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    snapshots = []
    for _ in range(2):
        codes = [cli.run([v, "--config", str(cfg)], out=lambda *_: None) for v in verbs]
        artifacts = sorted(p for p in tmp_path.rglob("*") if p.suffix in (".csv", ".mgkn"))
        snapshots.append((codes, {p.name: p.read_bytes() for p in artifacts}))
        for p in artifacts:
            p.unlink()
    (codes_a, fa), (codes_b, fb) = snapshots
    same = [n for n in fa if fb.get(n) == fa[n]]
    ok = codes_a == codes_b == [0] * len(verbs) and set(fa) == set(fb) and len(same) == len(fa)
    assert record(10, "determinism", ok,
                  f"{len(same)}/{len(fa)} artifacts bit-identical across reruns of "
                  f"{len(verbs)} verbs, exit codes {codes_a}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
