"""On-disk formats: datasets, checkpoints and experiment configs.

Both binary containers share one layout: a magic line, a human-readable JSON
header, an end marker line, then a little-endian float64 payload. Headers are
written with sorted keys and no timestamps so identical inputs give identical
bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph_builder import LevelSchedule, ScheduleError
from .operator_model import MgknParams, ModelConfig
from .random_fields import FieldSample, grid_sample
from .training import Adam, OperatorModel, PairSet, PointwiseNormalizer, TrainConfig

DATASET_MAGIC = "MGKN-DATASET"
CHECKPOINT_MAGIC = "MGKN-CHECKPOINT"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1
END_MARK = "END-HEADER"
LE_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Malformed or truncated file."""


class CompatibilityError(FormatError):
    """File written by a newer (or otherwise unsupported) format version."""


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the key."""


def _write_container(path: Path, magic: str, version: int, header: dict, payload: bytes) -> None:
    text = json.dumps(header, sort_keys=True, indent=1)
    blob = f"{magic} {version}\n{text}\n{END_MARK}\n".encode() + payload
    Path(path).write_bytes(blob)


def _read_container(path: Path, magic: str, supported: int) -> tuple[dict, memoryview]:
    raw = Path(path).read_bytes()
    first, _, rest = raw.partition(b"\n")
    parts = first.decode(errors="replace").split()
    if len(parts) != 2 or parts[0] != magic:
        raise FormatError(f"{path}: not a {magic} file")
    version = int(parts[1])
    if version > supported:
        raise CompatibilityError(
            f"{path}: format version {version} is newer than this reader supports ({supported})")
    marker = f"\n{END_MARK}\n".encode()
    cut = rest.find(marker)
    if cut < 0:
        raise FormatError(f"{path}: header end marker missing")
    header = json.loads(rest[:cut].decode())
    header["_version"] = version
    return header, memoryview(rest)[cut + len(marker):]


def payload_checksum(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------- datasets

@dataclass
class DatasetFile:
    """Grid pairs ``(a, u)`` at one resolution plus generation metadata."""

    kind: str
    resolution: int
    inputs: np.ndarray     # (N, points) values in grid order
    outputs: np.ndarray
    seed: int
    solver: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return 2 if self.kind == "darcy" else 1

    @property
    def periodic(self) -> bool:
        return self.kind == "burgers"

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def payload(self) -> bytes:
        rec = np.stack([self.inputs, self.outputs], axis=1)
        return np.ascontiguousarray(rec, dtype=LE_F64).tobytes()

    def pairs(self) -> PairSet:
        shape = (self.resolution,) * self.dim

        def wrap(v):
            return grid_sample(v.reshape(shape), self.dim, self.periodic)

        return PairSet([wrap(a) for a in self.inputs], [wrap(u) for u in self.outputs])

    @classmethod
    def from_pairs(cls, kind: str, resolution: int, pairs: list[tuple[FieldSample, FieldSample]],
                   seed: int, solver: dict, config: dict | None = None) -> "DatasetFile":
        a = np.stack([p[0].values for p in pairs])
        u = np.stack([p[1].values for p in pairs])
        return cls(kind, resolution, a, u, seed, dict(solver), dict(config or {}))


def save_dataset(path, ds: DatasetFile) -> str:
    """Write ``ds``; returns the payload checksum."""
    payload = ds.payload()
    points = ds.inputs.shape[1]
    if points != ds.resolution ** ds.dim:
        raise FormatError(f"records hold {points} points, resolution {ds.resolution} needs "
                          f"{ds.resolution ** ds.dim}")
    checksum = payload_checksum(payload)
    header = {"kind": ds.kind, "resolution": ds.resolution, "dim": ds.dim, "records": len(ds),
              "points_per_field": points, "seed": ds.seed, "solver": ds.solver,
              "config": ds.config, "byte_order": "little", "dtype": "float64",
              "layout": "per record: a values then u values, grid row-major",
              "sha256": checksum}
    _write_container(path, DATASET_MAGIC, DATASET_VERSION, header, payload)
    return checksum


def load_dataset(path) -> DatasetFile:
    header, payload = _read_container(path, DATASET_MAGIC, DATASET_VERSION)
    n, points = header["records"], header["points_per_field"]
    if points != header["resolution"] ** header["dim"]:
        raise FormatError(f"{path}: header resolution disagrees with record length")
    if len(payload) != n * 2 * points * 8:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {n * 2 * points * 8}")
    if payload_checksum(payload) != header["sha256"]:
        raise FormatError(f"{path}: payload checksum mismatch")
    rec = np.frombuffer(payload, dtype=LE_F64).reshape(n, 2, points).astype(float)
    return DatasetFile(header["kind"], header["resolution"], rec[:, 0].copy(), rec[:, 1].copy(),
                       header["seed"], header["solver"], header["config"])


# ------------------------------------------------------------- checkpoints

def _pack(arrays: "OrderedDict[str, np.ndarray]") -> tuple[list[dict], bytes]:
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=LE_F64)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    return table, b"".join(chunks)


def _unpack(table: list[dict], payload: memoryview) -> "OrderedDict[str, np.ndarray]":
    flat = np.frombuffer(payload, dtype=LE_F64)
    out = OrderedDict()
    for entry in table:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] + size > flat.size:
            raise FormatError("checkpoint payload is truncated")
        out[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).astype(float)
    return out


@dataclass
class Checkpoint:
    model: OperatorModel
    optimizer: Adam | None
    epoch: int                      # number of completed epochs
    config: dict
    epoch_losses: list[float] = field(default_factory=list)


def save_checkpoint(path, ck: Checkpoint) -> str:
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for k, v in ck.model.params.state().items():
        arrays["param/" + k] = v
    for tag, norm in (("a_norm", ck.model.a_norm), ("u_norm", ck.model.u_norm)):
        arrays[tag + "/mean"] = norm.mean
        arrays[tag + "/std"] = norm.std
    opt = ck.optimizer
    if opt is not None:
        for p, m, v in zip(opt.params, opt.m, opt.v):
            arrays["adam_m/" + p.name] = m
            arrays["adam_v/" + p.name] = v
    table, payload = _pack(arrays)
    header = {
        "config": ck.config,
        "model": ck.model.params.cfg.to_dict(),
        "schedule": ck.model.schedule.to_dict(),
        "mode": ck.model.mode,
        "periodic": ck.model.a_norm.periodic,
        "normalizer_eps": ck.model.a_norm.eps,
        "epoch": ck.epoch,
        "epoch_losses": [float(x).hex() for x in ck.epoch_losses],
        "adam": None if opt is None else {"t": opt.t, "lr": opt.lr, "beta1": opt.beta1,
                                           "beta2": opt.beta2, "eps": opt.eps},
        "tensors": table,
        "byte_order": "little", "dtype": "float64",
        "sha256": payload_checksum(payload),
    }
    _write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, payload)
    return header["sha256"]


def load_checkpoint(path) -> Checkpoint:
    header, payload = _read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    if header["_version"] != CHECKPOINT_VERSION:
        raise CompatibilityError(f"{path}: checkpoint version {header['_version']} "
                                 f"cannot be resumed by version {CHECKPOINT_VERSION}")
    if payload_checksum(payload) != header["sha256"]:
        raise FormatError(f"{path}: payload checksum mismatch")
    arrays = _unpack(header["tensors"], payload)
    params = MgknParams(ModelConfig(**header["model"]), seed=None)
    params.load_state(OrderedDict((k[6:], v) for k, v in arrays.items() if k.startswith("param/")))
    sched = LevelSchedule(**header["schedule"])
    norms = [PointwiseNormalizer(arrays[t + "/mean"], arrays[t + "/std"], header["periodic"],
                                 header["normalizer_eps"]) for t in ("a_norm", "u_norm")]
    model = OperatorModel(params, sched, norms[0], norms[1], header["mode"])
    opt = None
    if header["adam"] is not None:
        a = header["adam"]
        opt = Adam(params.parameters(), a["lr"], a["beta1"], a["beta2"], a["eps"])
        opt.t = a["t"]
        opt.m = [arrays["adam_m/" + p.name].copy() for p in opt.params]
        opt.v = [arrays["adam_v/" + p.name].copy() for p in opt.params]
    losses = [float.fromhex(x) for x in header["epoch_losses"]]
    return Checkpoint(model, opt, header["epoch"], header["config"], losses)


# ------------------------------------------------------- experiment config

@dataclass
class DataSection:
    kind: str = "darcy"
    resolution: int = 241
    n_samples: int = 120
    seed: int = 7
    forcing: float = 1.0
    viscosity: float = 0.1
    num_steps: int | None = None
    workers: int = 1


@dataclass
class ScheduleSection:
    levels: int = 3
    coarsest: int = 25
    radius_scale: float = 0.5
    m: list | None = None            # explicit schedule overrides the generated one
    r_intra: list | None = None
    r_trans: list | None = None
    mode: str = "general"

    def build(self, levels: int | None = None) -> LevelSchedule:
        if self.m is not None:
            sched = LevelSchedule(self.m, self.r_intra or [], self.r_trans or [])
            if len(sched.m) != self.levels:
                raise ConfigError(f"schedule.levels={self.levels} but schedule.m has {len(sched.m)} entries")
        else:
            sched = LevelSchedule.multipole(self.levels, self.coarsest, self.radius_scale)
        return sched if levels is None else sched.truncated(levels)


@dataclass
class ModelSection:
    d_v: int = 32
    T: int = 5
    kernel_width: int = 16
    min_kernel_width: int = 4
    seed: int = 0


@dataclass
class TrainSection:
    epochs: int = 50
    lr: float = 1e-3
    decay_every: int | None = None
    decay_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_train: int = 100
    n_test: int = 20
    seed: int = 0
    stop_after: int | None = None    # halt after this many epochs (for resumable runs)


@dataclass
class EvalSection:
    train_resolution: int = 31
    test_resolutions: list = field(default_factory=lambda: [31, 61])
    seed: int = 12345
    ablate_levels: list = field(default_factory=lambda: [1, 2, 3])
    bench_m1: list = field(default_factory=lambda: [100, 400, 1600, 6400])
    bench_repeats: int = 10
    bench_gkn_radius: float = 0.25
    bench_time_edge_budget: int = 400_000


@dataclass
class ExperimentConfig:
    dataset: str = "data/darcy.mgkn"
    output_dir: str = "runs/default"
    record_timings: bool = True
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    SECTIONS = ("data", "schedule", "model", "train", "eval")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a key-value mapping")
        top = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in doc.items():
            if key not in top:
                raise ConfigError(f"unknown config key '{key}'")
            if key in cls.SECTIONS:
                kwargs[key] = _section(top[key].default_factory().__class__, value, key)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.data.kind not in ("darcy", "burgers"):
            raise ConfigError(f"data.kind must be 'darcy' or 'burgers', got {self.data.kind!r}")
        s = self.data.resolution
        if self.data.kind == "burgers" and (s < 2 or s & (s - 1)):
            raise ConfigError(f"data.resolution={s}: burgers needs a power of two")
        if self.data.kind == "darcy" and s < 3:
            raise ConfigError(f"data.resolution={s}: darcy needs at least 3 points per axis")
        if self.data.n_samples < 1:
            raise ConfigError("data.n_samples must be at least 1")
        if self.schedule.mode not in ("general", "orthogonal"):
            raise ConfigError("schedule.mode must be 'general' or 'orthogonal'")
        try:
            self.schedule.build()
            self.train_config()
        except ScheduleError as exc:
            raise ConfigError(f"schedule: {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"train: {exc}") from exc

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.epochs, t.lr, t.decay_every, t.decay_factor, t.beta1, t.beta2,
                           t.adam_eps, t.n_train, t.n_test, t.seed)

    def model_config(self, levels: int | None = None) -> ModelConfig:
        m = self.model
        return ModelConfig(m.d_v, m.T, levels or self.schedule.levels, 2 if self.data.kind == "darcy" else 1,
                           m.kernel_width, m.min_kernel_width)

    def override(self, dotted: str, value) -> None:
        """Set ``section.key`` (or a top-level key) from a command-line flag."""
        section, _, key = dotted.rpartition(".")
        target = getattr(self, section) if section else self
        if section and section not in self.SECTIONS or not hasattr(target, key):
            raise ConfigError(f"unknown config key '{dotted}'")
        setattr(target, key, value)


def _section(kind, value, name: str):
    if not isinstance(value, dict):
        raise ConfigError(f"config key '{name}' must be a mapping")
    names = {f.name for f in dataclasses.fields(kind)}
    for key in value:
        if key not in names:
            raise ConfigError(f"unknown config key '{name}.{key}'")
    return kind(**value)


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(doc)


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
