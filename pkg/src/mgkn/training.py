"""Loss, optimiser, training loop and the evaluation protocols."""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import tensor_core as tc
from .graph_builder import LevelSchedule, MultiLevelGraph, build_hierarchy
from .operator_model import KernelCounter, MgknParams, ModelConfig, forward
from .pde_solvers import subsample
from .random_fields import FieldSample

log = logging.getLogger(__name__)


class DegenerateTargetError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


def relative_l2(pred, truth) -> float:
    """``|pred - truth|_2 / |truth|_2`` over matching evaluation points."""
    p = pred.values if isinstance(pred, FieldSample) else np.asarray(pred, dtype=float)
    t = truth.values if isinstance(truth, FieldSample) else np.asarray(truth, dtype=float)
    if isinstance(pred, FieldSample) and isinstance(truth, FieldSample):
        if pred.coords.shape != truth.coords.shape or not np.allclose(pred.coords, truth.coords):
            raise ValueError("prediction and truth live on different points")
    p, t = p.reshape(-1), t.reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    norm = np.linalg.norm(t)
    if norm == 0.0:
        raise DegenerateTargetError("target has zero norm")
    return float(np.linalg.norm(p - t) / norm)


class PointwiseNormalizer:
    """Per-location mean and standard deviation fitted on grid samples.

    Statistics are interpolated (multilinear, periodic where the data is) so
    they can be applied on any point set in the domain.
    """

    def __init__(self, mean: np.ndarray, std: np.ndarray, periodic: bool, eps: float = 1e-8):
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)
        self.periodic = periodic
        self.eps = eps

    @classmethod
    def fit(cls, samples: list[FieldSample], floor: float = 0.05) -> "PointwiseNormalizer":
        """``floor`` bounds the std below by that fraction of its spatial mean.

        Small training sets of a two-valued coefficient often agree at some
        point, and a vanishing std there would blow up the encoded input.
        """
        stack = np.stack([s.grid_values() for s in samples])
        std = stack.std(axis=0)
        return cls(stack.mean(axis=0), np.maximum(std, floor * std.mean()), samples[0].periodic)

    def _interp(self, grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
        s = grid.shape[0]
        if self.periodic:
            # only 1-d periodic data occurs; wrap explicitly
            x = 2 * math.pi * np.arange(s + 1) / s
            vals = np.concatenate([grid, grid[:1]])
            return np.interp(np.mod(coords[:, 0], 2 * math.pi), x, vals)
        axis = np.linspace(0.0, 1.0, s)
        interp = RegularGridInterpolator((axis,) * grid.ndim, grid)
        return interp(np.clip(coords, 0.0, 1.0))

    def at(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self._interp(self.mean, coords), self._interp(self.std, coords) + self.eps

    def encode(self, f: FieldSample) -> np.ndarray:
        mean, std = self.at(f.coords)
        return (f.values - mean) / std

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "periodic": self.periodic, "eps": self.eps}


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    decay_every: int | None = None   # epochs between halvings; default a quarter of the run
    decay_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_train: int = 100
    n_test: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be at least 1")

    def lr_at(self, epoch: int) -> float:
        every = self.decay_every or max(1, self.epochs // 4)
        return self.lr * self.decay_factor ** (epoch // every)

    def to_dict(self) -> dict:
        return dict(epochs=self.epochs, lr=self.lr, decay_every=self.decay_every,
                    decay_factor=self.decay_factor, beta1=self.beta1, beta2=self.beta2,
                    adam_eps=self.adam_eps, n_train=self.n_train, n_test=self.n_test, seed=self.seed)


class Adam:
    """Adaptive-moment updates over a fixed list of tensors."""

    def __init__(self, params: list[tc.Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=float) for a in state["m"]]
        self.v = [np.array(a, dtype=float) for a in state["v"]]


@dataclass
class PairSet:
    """Matched input/output samples on a common point set."""

    inputs: list[FieldSample]
    outputs: list[FieldSample]

    def __post_init__(self):
        if len(self.inputs) != len(self.outputs):
            raise ValueError("inputs and outputs differ in length")

    def __len__(self) -> int:
        return len(self.inputs)

    def at_resolution(self, s: int) -> "PairSet":
        return PairSet([subsample(a, s) for a in self.inputs], [subsample(u, s) for u in self.outputs])

    def take(self, idx) -> "PairSet":
        return PairSet([self.inputs[i] for i in idx], [self.outputs[i] for i in idx])


@dataclass
class OperatorModel:
    """Parameters together with everything needed to apply them to new inputs."""

    params: MgknParams
    schedule: LevelSchedule
    a_norm: PointwiseNormalizer
    u_norm: PointwiseNormalizer
    mode: str = "general"

    def graph_for(self, a: FieldSample, seed) -> tuple[MultiLevelGraph, np.ndarray]:
        a_enc = self.a_norm.encode(a)
        return build_hierarchy(a, self.schedule, seed, self.mode, values=a_enc), a_enc

    def predict(self, a: FieldSample, seed, counter: KernelCounter | None = None
                ) -> tuple[np.ndarray, MultiLevelGraph]:
        """Decoded prediction at the level-1 nodes of a freshly sampled graph."""
        graph, a_enc = self.graph_for(a, seed)
        out = forward(a, graph, self.params, values=a_enc, counter=counter).data[:, 0]
        mean, std = self.u_norm.at(graph.level_coords(0))
        return mean + std * out, graph


@dataclass
class EvalReport:
    errors: list[float] = field(default_factory=list)
    train_errors: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    epoch_times: list[float] = field(default_factory=list)
    eval_time_per_sample: float = float("nan")
    kernel_evals: int = 0
    label: str = ""
    levels: int = 0
    m1: int = 0
    resolution: int = 0

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors)) if self.errors else float("nan")

    @property
    def mean_train_error(self) -> float:
        return float(np.mean(self.train_errors)) if self.train_errors else float("nan")

    @property
    def time_per_epoch(self) -> float:
        return float(np.mean(self.epoch_times)) if self.epoch_times else float("nan")


def sample_seed(base: int, *keys: int) -> int:
    """Independent 63-bit seed for a (run, epoch, sample, ...) key."""
    return int(np.random.SeedSequence([base, *keys]).generate_state(1, np.uint64)[0] >> 1)


def content_key(f: FieldSample) -> int:
    """Stable 32-bit key of a sample's values and point count."""
    return zlib.crc32(np.ascontiguousarray(f.values, dtype="<f8").tobytes()) ^ f.coords.shape[0]


def loss_tensor(model: OperatorModel, a: FieldSample, u: FieldSample, seed
                ) -> tc.Tensor:
    """Squared relative L2 loss in physical units at the level-1 nodes."""
    graph, a_enc = model.graph_for(a, seed)
    out = forward(a, graph, model.params, values=a_enc)
    nodes = graph.nodes[0]
    mean, std = model.u_norm.at(a.coords[nodes])
    target = u.values[nodes]
    denom = float(target @ target)
    if denom == 0.0:
        raise DegenerateTargetError("training target has zero norm at the sampled nodes")
    diff = tc.sub(tc.mul(out, tc.Tensor(std[:, None])), tc.Tensor((target - mean)[:, None]))
    return tc.scale(tc.sum_all(tc.mul(diff, diff)), 1.0 / denom)


def make_model(cfg: ModelConfig, schedule: LevelSchedule, train: PairSet, seed: int = 0,
               mode: str = "general") -> OperatorModel:
    if cfg.levels != schedule.levels:
        raise ValueError(f"model has {cfg.levels} levels but schedule has {schedule.levels}")
    return OperatorModel(MgknParams(cfg, seed), schedule, PointwiseNormalizer.fit(train.inputs),
                         PointwiseNormalizer.fit(train.outputs), mode)


def evaluate(model: OperatorModel, data: PairSet, seed: int = 12345) -> EvalReport:
    """Relative L2 error per sample on a fixed, seeded graph per sample.

    Graph seeds depend on the sample's values, not its position, so the
    errors do not depend on dataset order.
    """
    rep = EvalReport()
    counter = KernelCounter()
    start = time.perf_counter()
    for a, u in zip(data.inputs, data.outputs):
        pred, graph = model.predict(a, sample_seed(seed, content_key(a)), counter)
        rep.errors.append(relative_l2(pred, u.values[graph.nodes[0]]))
    rep.eval_time_per_sample = (time.perf_counter() - start) / max(len(data), 1)
    rep.kernel_evals = counter.evaluations
    return rep


def train(model: OperatorModel, data: PairSet, cfg: TrainConfig, test: PairSet | None = None,
          optimizer: Adam | None = None, start_epoch: int = 0, callback=None,
          stop_epoch: int | None = None) -> tuple[OperatorModel, EvalReport]:
    """One sample per Adam step, seeded shuffling and a fresh graph per step.

    Epoch ``e`` depends only on the parameters, optimiser state and
    ``(cfg.seed, e)``, so a run stopped at ``stop_epoch`` and resumed with
    ``start_epoch`` retraces the uninterrupted trajectory.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    params = model.params.parameters()
    opt = optimizer or Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rep = EvalReport()
    last = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start_epoch, last):
        opt.lr = cfg.lr_at(epoch)
        order = np.random.default_rng(sample_seed(cfg.seed, 1, epoch)).permutation(len(data))
        t0 = time.perf_counter()
        total = 0.0
        for i in order:
            with tc.recording():
                loss = loss_tensor(model, data.inputs[i], data.outputs[i],
                                   sample_seed(cfg.seed, 2, epoch, int(i)))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise DivergenceError(f"loss is {value} at epoch {epoch}, sample {int(i)}")
                tc.backward(loss)
            opt.step()
            total += value
        rep.epoch_times.append(time.perf_counter() - t0)
        rep.epoch_losses.append(total / len(data))
        log.info("epoch %d  loss %.5f  lr %.2e  %.1fs", epoch, rep.epoch_losses[-1], opt.lr,
                 rep.epoch_times[-1])
        if callback is not None:
            callback(epoch, rep, opt)
    if test is not None:
        tr = evaluate(model, data)
        te = evaluate(model, test)
        rep.train_errors = tr.errors
        rep.errors = te.errors
        rep.eval_time_per_sample = te.eval_time_per_sample
        rep.kernel_evals = te.kernel_evals
    return model, rep


def eval_mesh_invariance(model: OperatorModel, source: PairSet, train_s: int, test_s: list[int],
                         seed: int = 12345) -> dict[tuple[int, int], EvalReport]:
    """Test error of one trained model on graphs sampled from each test resolution.

    ``source`` holds the test pairs at a resolution every entry of ``test_s``
    can be subsampled from.
    """
    out = {}
    for s in test_s:
        rep = evaluate(model, source.at_resolution(s), seed)
        rep.label, rep.resolution = f"{train_s}->{s}", s
        rep.levels, rep.m1 = model.schedule.levels, model.schedule.m[0]
        out[(train_s, s)] = rep
    return out


def uniform_cloud(n: int, seed) -> FieldSample:
    """``n`` uniform points in the unit square carrying a two-valued coefficient."""
    rng = np.random.default_rng(seed)
    return FieldSample(rng.random((n, 2)), rng.choice([3.0, 12.0], n), 0, ((0.0, 1.0), (0.0, 1.0)))


def eval_complexity(schedules: list[LevelSchedule], repeats: int = 10, seed: int = 0,
                    model_cfg: ModelConfig | None = None, time_edge_budget: int = 400_000
                    ) -> list[EvalReport]:
    """Kernel-evaluation counts (one per edge) and forward wall-clock per schedule.

    Counts are averaged over ``repeats`` point clouds of ``m_1`` uniform points.
    Timing uses a small untrained model and is skipped (nan) once a graph
    exceeds ``time_edge_budget`` edges.
    """
    reports = []
    for sched in schedules:
        cfg = model_cfg or ModelConfig(d_v=16, T=1, levels=sched.levels, kernel_width=16)
        cfg = ModelConfig(cfg.d_v, cfg.T, sched.levels, cfg.dim, cfg.kernel_width, cfg.min_kernel_width)
        params = MgknParams(cfg, seed)
        rep = EvalReport(label="-".join(map(str, sched.m)), levels=sched.levels, m1=sched.m[0])
        counts, times = [], []
        for r in range(repeats):
            cloud = uniform_cloud(sched.m[0], sample_seed(seed, sched.m[0], r))
            gseed = sample_seed(seed, sched.m[0], r, 1)
            graph = build_hierarchy(cloud, sched, gseed, attributes=False)
            counts.append(graph.num_edges)
            if graph.num_edges <= time_edge_budget:
                graph = build_hierarchy(cloud, sched, gseed)
                counter = KernelCounter()
                t0 = time.perf_counter()
                forward(cloud, graph, params, counter=counter)
                times.append(time.perf_counter() - t0)
                if counter.evaluations != graph.num_edges:
                    raise RuntimeError("kernel counter disagrees with the edge count")
        rep.kernel_evals = int(round(np.mean(counts)))
        rep.eval_time_per_sample = float(np.mean(times)) if times else float("nan")
        reports.append(rep)
    return reports


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])
