"""On-disk formats: datasets, checkpoints and JSON run reports.

Dataset file (all integers and floats little-endian)::

    b"AFEM"  u32 version  u32 nx  u32 ny  u32 n_train  u32 n_test
    u32 len  <len bytes of UTF-8 JSON: generation config>
    n_train + n_test records:  u64 seed, f64[(nx+1)(ny+1)] kappa, f64[(nx+1)(ny+1)] u_obs
    f64 norm_mean  f64 norm_std

Checkpoint file::

    b"ACKP"  u32 version  u32 len  <JSON: model config, epoch, loss history, ...>
    u64 rng_seed  u64 adam_step  u64 n_params
    f64[n_params] params  f64[n_params] first moments  f64[n_params] second moments

Parameters are flattened in the order of ``ModelConfig.layer_shapes``.  Files
are written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError
from .mesh import FeFunction, build_unit_square_mesh
from .nn import AdamState, ModelConfig, ModelParams
from .pipeline import Dataset, GenConfig, Sample, TrainState

DATASET_MAGIC = b"AFEM"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"ACKP"
CHECKPOINT_VERSION = 1


class CheckpointVersionError(DatasetFormatError):
    pass


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def atomic_write(path, data: bytes | str):
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(
                f"truncated file: need {n} bytes for {what}, {len(self.buf) - self.pos} left", self.pos
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, n: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").astype(np.float64)

    def json(self, what: str):
        start = self.pos
        (n,) = self.unpack("<I", f"{what} length")
        raw = self.take(n, what)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"malformed {what}: {exc}", start) from exc

    def end(self):
        if self.pos != len(self.buf):
            raise DatasetFormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def dataset_to_bytes(ds: Dataset) -> bytes:
    cfg = ds.config
    meta = _json_bytes(cfg.to_dict())
    parts = [
        DATASET_MAGIC,
        struct.pack("<5I", DATASET_VERSION, cfg.nx, cfg.ny, len(ds.train), len(ds.test)),
        struct.pack("<I", len(meta)),
        meta,
    ]
    for s in ds.train + ds.test:
        parts.append(struct.pack("<Q", s.seed))
        parts.append(s.kappa_exact.dofs.astype("<f8").tobytes())
        parts.append(s.u_obs.dofs.astype("<f8").tobytes())
    parts.append(struct.pack("<2d", ds.norm_mean, ds.norm_std))
    return b"".join(parts)


def dataset_from_bytes(buf: bytes) -> Dataset:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}", 4)
    nx, ny, n_train, n_test = r.unpack("<4I", "header")
    meta_at = r.pos
    meta = r.json("generation config")
    try:
        cfg = GenConfig.from_dict(meta)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"invalid generation config: {exc}", meta_at) from exc
    if (cfg.nx, cfg.ny, cfg.n_train, cfg.n_test) != (nx, ny, n_train, n_test):
        raise DatasetFormatError("header counts disagree with embedded config", meta_at)
    mesh = build_unit_square_mesh(nx, ny)
    n = mesh.n_vertices
    samples = []
    for i in range(n_train + n_test):
        at = r.pos
        (seed,) = r.unpack("<Q", f"record {i} seed")
        kappa = r.floats(n, f"record {i} kappa")
        u_obs = r.floats(n, f"record {i} u_obs")
        if not (np.all(np.isfinite(kappa)) and np.all(np.isfinite(u_obs))):
            raise DatasetFormatError(f"non-finite values in record {i}", at)
        samples.append(Sample(FeFunction(mesh, kappa), FeFunction(mesh, u_obs), seed))
    mean, std = r.unpack("<2d", "normalization stats")
    r.end()
    return Dataset(cfg, samples[:n_train], samples[n_train:], mean, std)


def write_dataset(ds: Dataset, path):
    atomic_write(path, dataset_to_bytes(ds))


def read_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def checkpoint_to_bytes(state: TrainState, extra: dict | None = None) -> bytes:
    params = state.params
    names = list(params.tensors)
    meta = {
        "model": params.config.to_dict(),
        "epoch": state.epoch,
        "history": list(state.history),
        "layout": [[k, list(params.tensors[k].shape)] for k in names],
    }
    if extra:
        meta["extra"] = extra
    meta_b = _json_bytes(meta)
    flat = lambda d: np.concatenate([d[k].ravel() for k in names]).astype("<f8").tobytes()
    return b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(meta_b)),
        meta_b,
        struct.pack("<3Q", params.seed, state.adam.step, params.count),
        flat(params.tensors),
        flat(state.adam.m),
        flat(state.adam.v),
    ])


def checkpoint_from_bytes(buf: bytes) -> tuple[TrainState, dict]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}", 4)
    meta_at = r.pos
    meta = r.json("checkpoint metadata")
    try:
        config = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"invalid model config: {exc}", meta_at) from exc
    seed, step, count = r.unpack("<3Q", "counters")
    layout = config.layer_shapes()
    if count != sum(math.prod(s) for _, s in layout):
        raise DatasetFormatError(f"parameter count {count} does not match model config", r.pos - 8)
    arrays = [r.floats(count, what) for what in ("params", "first moments", "second moments")]
    r.end()

    def unflat(flat):
        out, pos = {}, 0
        for name, shape in layout:
            size = math.prod(shape)
            out[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        return out

    params = ModelParams(config, unflat(arrays[0]), seed)
    adam = AdamState(unflat(arrays[1]), unflat(arrays[2]), step)
    state = TrainState(params, adam, int(meta["epoch"]), [float(x) for x in meta["history"]])
    return state, meta.get("extra", {})


def write_checkpoint(state: TrainState, path, extra: dict | None = None):
    atomic_write(path, checkpoint_to_bytes(state, extra))


def read_checkpoint(path) -> tuple[TrainState, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError("report contains a non-finite float")
    if isinstance(obj, dict):
        for v in obj.values():
            _finite(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            _finite(v)


def write_report(report: dict, path):
    _finite(report)
    atomic_write(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
