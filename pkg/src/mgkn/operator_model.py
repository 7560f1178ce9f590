"""Multipole graph kernel network: kernel MLPs, lift/projection and the V-cycle."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .graph_builder import EdgeSet, MultiLevelGraph
from .random_fields import FieldSample
from .tensor_core import Tensor


class ConfigurationError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_v: int = 64
    T: int = 5
    levels: int = 4
    dim: int = 2
    kernel_width: int = 256   # hidden width at level 1, halved per coarser level
    min_kernel_width: int = 4

    def width(self, level: int) -> int:
        """Hidden width of the kernels anchored at 0-based ``level``."""
        return max(self.min_kernel_width, self.kernel_width // 2 ** level)

    def to_dict(self) -> dict:
        return dict(d_v=self.d_v, T=self.T, levels=self.levels, dim=self.dim,
                    kernel_width=self.kernel_width, min_kernel_width=self.min_kernel_width)


class KernelNet:
    """Three-layer MLP from edge attributes ``R^{2(d+1)}`` to ``d_v x d_v`` matrices."""

    def __init__(self, in_dim: int, width: int, d_v: int, rng: np.random.Generator | None = None,
                 name: str = "kernel"):
        self.in_dim, self.width, self.d_v, self.name = in_dim, width, d_v, name
        sizes = [in_dim, width, width, d_v * d_v]
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            if rng is None:
                w, b = np.zeros((fan_in, fan_out)), np.zeros(fan_out)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                w = rng.uniform(-bound, bound, (fan_in, fan_out))
                b = rng.uniform(-bound, bound, fan_out)
            if i == len(sizes) - 2 and rng is not None:
                # keep the initial kernel action O(1/d_v) so the T-fold iteration starts stable
                w /= d_v
                b /= d_v
            self.layers.append((Tensor(w, True, f"{name}.w{i}"), Tensor(b, True, f"{name}.b{i}")))

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def features(self, attr) -> Tensor:
        """Last hidden layer ``h(e)``; the kernel is affine in it."""
        h = tc.as_tensor(attr)
        if h.data.ndim != 2 or h.shape[1] != self.in_dim:
            raise tc.DimensionError(f"{self.name} expects {self.in_dim} attributes, got {h.shape}")
        for w, b in self.layers[:-1]:
            h = tc.relu(tc.linear(h, w, b))
        return h

    def mixing(self) -> tuple[Tensor, Tensor]:
        """Output layer rearranged so ``K(e) v = (h(e) (x) v) @ A + v @ B``.

        ``A[a * d_v + j, i] = w3[a, i * d_v + j]`` and ``B[j, i] = b3[i * d_v + j]``.
        """
        w, b = self.layers[-1]
        dv = self.d_v
        A = tc.reshape(tc.permute(tc.reshape(w, (self.width, dv, dv)), (0, 2, 1)),
                       (self.width * dv, dv))
        B = tc.permute(tc.reshape(b, (dv, dv)), (1, 0))
        return A, B

    def matrices(self, attr) -> Tensor:
        """Materialised ``d_v x d_v`` kernel per edge."""
        w, b = self.layers[-1]
        h = tc.linear(self.features(attr), w, b)
        return tc.reshape(h, (h.shape[0], self.d_v, self.d_v))

    __call__ = matrices


class MgknParams:
    """All learnable tensors of one multipole graph kernel network."""

    def __init__(self, cfg: ModelConfig, seed: int | None = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, dv, L = cfg.dim, cfg.d_v, cfg.levels
        in_dim = 2 * (d + 1)

        def lin(fan_in, fan_out, name):
            bound = 1.0 / math.sqrt(fan_in)
            return (Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True, name + ".w"),
                    Tensor(rng.uniform(-bound, bound, fan_out), True, name + ".b"))

        self.P = lin(d + 1, dv, "P")
        self.Q = lin(dv, 1, "Q")
        self.W = [Tensor(np.eye(dv) / math.sqrt(dv), True, f"W{l}") for l in range(L)]
        self.intra = [KernelNet(in_dim, cfg.width(l), dv, rng, f"k{l}{l}") for l in range(L)]
        self.down = [KernelNet(in_dim, cfg.width(l), dv, rng, f"k{l + 1}{l}") for l in range(L - 1)]
        self.up = [KernelNet(in_dim, cfg.width(l), dv, rng, f"k{l}{l + 1}") for l in range(L - 1)]

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for t in (*self.P, *self.Q, *self.W):
            out[t.name] = t
        for net in (*self.intra, *self.down, *self.up):
            for t in net.parameters():
                out[t.name] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def groups(self) -> dict[str, list[Tensor]]:
        """Parameter groups: lift, projection, local maps, intra and transition kernels."""
        return {
            "lift": list(self.P),
            "projection": list(self.Q),
            "local": list(self.W),
            "intra_kernels": [t for k in self.intra for t in k.parameters()],
            "down_kernels": [t for k in self.down for t in k.parameters()],
            "up_kernels": [t for k in self.up for t in k.parameters()],
        }

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self.named_tensors().items())

    def load_state(self, state) -> None:
        tensors = self.named_tensors()
        if set(state) != set(tensors):
            missing = set(tensors) ^ set(state)
            raise ConfigurationError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, t in tensors.items():
            arr = np.asarray(state[k], dtype=float)
            if arr.shape != t.shape:
                raise ConfigurationError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def count(self) -> int:
        return sum(t.size for t in self.parameters())


class KernelCounter:
    """Tally of kernel-network evaluations (one per edge)."""

    def __init__(self):
        self.evaluations = 0

    def reset(self):
        self.evaluations = 0


@dataclass
class EdgeKernel:
    """Kernel network evaluated on one edge set: features plus rearranged output layer."""

    features: Tensor
    mix: Tensor
    bias: Tensor

    @classmethod
    def evaluate(cls, net: KernelNet, edges: EdgeSet, counter: KernelCounter | None = None):
        if counter is not None:
            counter.evaluations += edges.size
        return cls(net.features(edges.attr), *net.mixing())


def kernel_message(v: Tensor, edges: EdgeSet, kernel: "KernelNet | EdgeKernel") -> Tensor:
    """Mean over incoming edges of ``kappa(e(x, y)) v(y)``; isolated nodes get zeros.

    The per-edge ``d_v x d_v`` matrices are never formed: the output layer is
    linear, so the neighbourhood mean is taken over ``h(e) (x) v(y)`` and the
    output weights are applied once per receiving node.
    """
    if isinstance(kernel, KernelNet):
        kernel = EdgeKernel.evaluate(kernel, edges)
    if kernel.features.shape[0] != edges.size:
        raise tc.DimensionError(f"{kernel.features.shape[0]} edge features for {edges.size} edges")
    src, dst = edges.index
    outer = tc.segment_outer_mean(kernel.features, v, src, dst, edges.num_dst)
    plain = tc.segment_mean(tc.take_rows(v, src), dst, edges.num_dst)
    return tc.add(tc.matmul(outer, kernel.mix), tc.matmul(plain, kernel.bias))


@dataclass
class LevelState:
    """Downward (``check``) and upward (``hat``) representations per level."""

    check: list[Tensor | None]
    hat: list[Tensor]

    @classmethod
    def initial(cls, lifted: Tensor, graph: MultiLevelGraph) -> "LevelState":
        d_v = lifted.shape[1]
        hat = [lifted] + [Tensor(np.zeros((len(n), d_v))) for n in graph.nodes[1:]]
        return cls([None] * graph.levels, hat)


@dataclass
class GraphKernels:
    """Kernel evaluations for every edge set of one graph, computed once per forward."""

    intra: list[EdgeKernel]
    down: list[EdgeKernel]
    up: list[EdgeKernel]

    @classmethod
    def evaluate(cls, params: MgknParams, graph: MultiLevelGraph,
                 counter: KernelCounter | None = None) -> "GraphKernels":
        ev = EdgeKernel.evaluate
        return cls([ev(k, e, counter) for k, e in zip(params.intra, graph.intra)],
                   [ev(k, e, counter) for k, e in zip(params.down, graph.down)],
                   [ev(k, e, counter) for k, e in zip(params.up, graph.up)])


def vcycle_step(state: LevelState, graph: MultiLevelGraph, params: MgknParams,
                kernels: GraphKernels, activation=tc.relu, use_local: bool = True) -> LevelState:
    """One downward and upward sweep.

    Downward: ``check_{l+1} = act(hat_{l+1} + K_{l+1,l} check_l)`` starting from
    ``check_1 = hat_1``. Upward from the coarsest level:
    ``hat_l = act(W_l check_l + K_{l,l} check_l + K_{l,l+1} hat_{l+1})``.
    """
    L = graph.levels
    check: list[Tensor] = [state.hat[0]]
    for l in range(L - 1):
        msg = kernel_message(check[l], graph.down[l], kernels.down[l])
        check.append(activation(tc.add(state.hat[l + 1], msg)))
    hat: list[Tensor | None] = [None] * L
    for l in reversed(range(L)):
        z = kernel_message(check[l], graph.intra[l], kernels.intra[l])
        if use_local:
            z = tc.add(z, tc.matmul(check[l], params.W[l]))
        if l < L - 1:
            z = tc.add(z, kernel_message(hat[l + 1], graph.up[l], kernels.up[l]))
        hat[l] = activation(z)
    return LevelState(check, hat)


def node_features(a: FieldSample, graph: MultiLevelGraph, values: np.ndarray | None = None) -> np.ndarray:
    """Per level-1 node input ``(x, a(x))``."""
    vals = a.values if values is None else values
    nodes = graph.nodes[0]
    return np.concatenate([a.coords[nodes], vals[nodes, None]], axis=1)


def forward(a: FieldSample, graph: MultiLevelGraph | None, params: MgknParams,
            values: np.ndarray | None = None, counter: KernelCounter | None = None,
            T: int | None = None) -> Tensor:
    """Predict ``u`` at the level-1 nodes of ``graph``; returns an ``(m_1, 1)`` tensor.

    ``values`` replaces ``a.values`` as the lifted input (used for normalised data).
    """
    if graph is None or not graph.nodes:
        raise ConfigurationError("forward needs a graph built over the input sample")
    if graph.levels != params.cfg.levels:
        raise ConfigurationError(f"graph has {graph.levels} levels, model expects {params.cfg.levels}")
    T = params.cfg.T if T is None else T
    lifted = tc.linear(node_features(a, graph, values), *params.P)
    kernels = GraphKernels.evaluate(params, graph, counter)
    state = LevelState.initial(lifted, graph)
    for _ in range(T):
        state = vcycle_step(state, graph, params, kernels)
    return tc.linear(state.hat[0], *params.Q)
