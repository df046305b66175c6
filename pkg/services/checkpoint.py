"""
Binary checkpoint formats

All numbers are little-endian; tensors are row-major float64.

EI checkpoint::

    <4sHIII  magic b"RVEI", version, |A|, |S|, D
    A rows, then S rows

SR checkpoint::

    <4sH     magic b"RVSR", version
    <12I     D, N, M_b, |L|, |A|, |S|, I_a, I_l, I_t, heads, D_ff, flags
    <I + ... length-prefixed JSON (run config and category names)
    <I       tensor count, then per tensor:
             <H name length, name, <B ndim, <I per dim, data

Relative cache::

    <4sHIIIII magic b"RVRC", version, entries, N, I_a, I_l, I_t
    per entry: <H key length, key, then J, K, T as uint16

Nothing time-dependent is written, so equal runs give equal bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import orjson
import structlog

from numcore.tensor import Tensor
from services.ei import CategoryEmbeddingTable
from services.recommender import ModelParams, SequentialRecommender
from services.relenc import RelativeIndexMatrices
from utils.config import RunConfig, build_run_config
from utils.errors import CheckpointError, ConfigError

logger = structlog.get_logger(__name__)

VERSION = 1
EI_MAGIC = b"RVEI"
SR_MAGIC = b"RVSR"
CACHE_MAGIC = b"RVRC"

_EI_HEADER = struct.Struct("<4sHIII")
_SR_PREFIX = struct.Struct("<4sH")
_SR_DIMS = struct.Struct("<12I")
_CACHE_HEADER = struct.Struct("<4sHIIIII")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U8 = struct.Struct("<B")

_FLAG_BITS = {"use_J": 1, "use_K": 2, "use_T": 4, "use_abs": 8}
_LITERAL_TIME = 16
_DENSE_KERNEL = 32


def _write(path: str | Path, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    logger.info("checkpoint_written", path=str(path), bytes=len(payload))
    return path


class _Reader:
    """Bounds-checked cursor over checkpoint bytes"""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

    def array(self, shape: tuple[int, ...], dtype: str = "<f8") -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64 if dtype == "<f8" else np.int64)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CheckpointError(f"{self.source}: {len(self.data) - self.pos} trailing bytes")


def _read(path: str | Path) -> _Reader:
    try:
        return _Reader(Path(path).read_bytes(), str(path))
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e


def _f64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


# ---------------------------------------------------------------------------
# EI tables
# ---------------------------------------------------------------------------

def save_ei(path: str | Path, table: CategoryEmbeddingTable) -> Path:
    n_a, n_s, d = table.A.shape[0], table.S.shape[0], table.dim
    payload = _EI_HEADER.pack(EI_MAGIC, VERSION, n_a, n_s, d) + _f64(table.A.data) + _f64(table.S.data)
    return _write(path, payload)


def load_ei(path: str | Path) -> CategoryEmbeddingTable:
    """Read a frozen category table"""
    reader = _read(path)
    magic, version, n_a, n_s, d = reader.unpack(_EI_HEADER)
    if magic != EI_MAGIC:
        raise CheckpointError(f"{path}: not an EI checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    A = reader.array((n_a, d))
    S = reader.array((n_s, d))
    reader.done()
    return CategoryEmbeddingTable(A=Tensor(A, name="ei.A"), S=Tensor(S, name="ei.S"))


# ---------------------------------------------------------------------------
# SR model
# ---------------------------------------------------------------------------

@dataclass
class SRCheckpoint:
    config: RunConfig
    params: ModelParams
    table: CategoryEmbeddingTable
    num_pois: int
    app_names: list[str]
    poi_names: list[str]

    def model(self) -> SequentialRecommender:
        return SequentialRecommender(self.config, self.table, self.num_pois, self.params)

    def header(self) -> dict[str, object]:
        cfg = self.config
        return {
            "D": cfg.dim, "N": cfg.seq_len, "M_b": cfg.num_blocks, "num_pois": self.num_pois,
            "num_app_categories": len(self.app_names), "num_poi_categories": len(self.poi_names),
            "I_a": cfg.clip_app, "I_l": cfg.clip_poi, "I_t": cfg.clip_time, "heads": cfg.heads,
            "D_ff": cfg.ffn_dim, "use_J": cfg.use_J, "use_K": cfg.use_K, "use_T": cfg.use_T,
            "use_abs": cfg.use_abs, "time_mode": cfg.time_mode, "relative_kernel": cfg.relative_kernel,
        }

    def norms(self) -> dict[str, float]:
        out = {name: float(np.linalg.norm(t.data)) for name, t in self.params.named().items()}
        out["ei.A"] = float(np.linalg.norm(self.table.A.data))
        out["ei.S"] = float(np.linalg.norm(self.table.S.data))
        return out


def _flags(config: RunConfig) -> int:
    flags = sum(bit for name, bit in _FLAG_BITS.items() if getattr(config, name))
    if config.time_mode == "literal":
        flags |= _LITERAL_TIME
    if config.relative_kernel == "dense":
        flags |= _DENSE_KERNEL
    return flags


def _tensor_block(name: str, data: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    parts = [_U16.pack(len(encoded)), encoded, _U8.pack(data.ndim)]
    parts.extend(_U32.pack(int(n)) for n in data.shape)
    parts.append(_f64(data))
    return b"".join(parts)


def serialize_sr(model: SequentialRecommender, app_names: list[str], poi_names: list[str]) -> bytes:
    cfg = model.config
    named = {**model.params.named(), "ei.A": model.table.A, "ei.S": model.table.S}
    meta = orjson.dumps(
        {"config": cfg.snapshot(), "app_names": app_names, "poi_names": poi_names},
        option=orjson.OPT_SORT_KEYS,
    )
    parts = [
        _SR_PREFIX.pack(SR_MAGIC, VERSION),
        _SR_DIMS.pack(
            cfg.dim, cfg.seq_len, cfg.num_blocks, model.num_pois, model.table.A.shape[0],
            model.table.S.shape[0], cfg.clip_app, cfg.clip_poi, cfg.clip_time, cfg.heads, cfg.ffn_dim,
            _flags(cfg),
        ),
        _U32.pack(len(meta)),
        meta,
        _U32.pack(len(named)),
    ]
    parts.extend(_tensor_block(name, t.data) for name, t in named.items())
    return b"".join(parts)


def save_sr(path: str | Path, model: SequentialRecommender, app_names: list[str],
            poi_names: list[str]) -> Path:
    return _write(path, serialize_sr(model, app_names, poi_names))


def _iter_tensors(reader: _Reader, count: int) -> Iterator[tuple[str, np.ndarray]]:
    for _ in range(count):
        (name_len,) = reader.unpack(_U16)
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack(_U8)
        shape = tuple(reader.unpack(_U32)[0] for _ in range(ndim))
        yield name, reader.array(shape)


def load_sr(path: str | Path) -> SRCheckpoint:
    """Read an SR checkpoint, validating the header against the config and every tensor shape"""
    reader = _read(path)
    magic, version = reader.unpack(_SR_PREFIX)
    if magic != SR_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    dims = reader.unpack(_SR_DIMS)
    (meta_len,) = reader.unpack(_U32)
    try:
        meta = orjson.loads(reader.take(meta_len))
        config = build_run_config(meta["config"])
        app_names, poi_names = list(meta["app_names"]), list(meta["poi_names"])
    except (orjson.JSONDecodeError, KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"{path}: bad metadata block: {e}") from e

    d, n, m_b, num_pois, n_a, n_s, i_a, i_l, i_t, heads, d_ff, flags = dims
    expected_dims = (config.dim, config.seq_len, config.num_blocks, config.clip_app, config.clip_poi,
                     config.clip_time, config.heads, config.ffn_dim, _flags(config))
    if (d, n, m_b, i_a, i_l, i_t, heads, d_ff, flags) != expected_dims:
        raise CheckpointError(f"{path}: header does not match the stored run configuration")
    if (n_a, n_s) != (len(app_names), len(poi_names)):
        raise CheckpointError(f"{path}: category vocabularies do not match the header")

    (count,) = reader.unpack(_U32)
    arrays = dict(_iter_tensors(reader, count))
    reader.done()

    expected = ModelParams.expected_shapes(config, num_pois)
    expected["ei.A"] = (n_a, d)
    expected["ei.S"] = (n_s, d)
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {shape}")

    table = CategoryEmbeddingTable(A=Tensor(arrays.pop("ei.A"), name="ei.A"),
                                   S=Tensor(arrays.pop("ei.S"), name="ei.S"))
    return SRCheckpoint(
        config=config,
        params=ModelParams.from_arrays(arrays, config),
        table=table,
        num_pois=num_pois,
        app_names=app_names,
        poi_names=poi_names,
    )


# ---------------------------------------------------------------------------
# Relative index cache
# ---------------------------------------------------------------------------

def save_relative_cache(path: str | Path, matrices: dict[object, RelativeIndexMatrices]) -> Path:
    entries = list(matrices.items())
    if entries:
        first = entries[0][1]
        n, clips = first.J.shape[0], (first.clip_app, first.clip_poi, first.clip_time)
    else:
        n, clips = 0, (0, 0, 0)
    parts = [_CACHE_HEADER.pack(CACHE_MAGIC, VERSION, len(entries), n, *clips)]
    for key, rel in entries:
        if rel.J.shape[0] != n or (rel.clip_app, rel.clip_poi, rel.clip_time) != clips:
            raise CheckpointError(f"cache entry {key!r} does not match the first entry's shape and clips")
        label = str(key).encode("utf-8")
        parts.append(_U16.pack(len(label)) + label)
        for m in (rel.J, rel.K, rel.T):
            if m.size and (m.min() < 0 or m.max() > np.iinfo(np.uint16).max):
                raise CheckpointError(f"cache entry {key!r} holds values outside uint16")
            parts.append(np.ascontiguousarray(m, dtype="<u2").tobytes())
    return _write(path, b"".join(parts))


def load_relative_cache(path: str | Path) -> dict[str, RelativeIndexMatrices]:
    reader = _read(path)
    magic, version, count, n, i_a, i_l, i_t = reader.unpack(_CACHE_HEADER)
    if magic != CACHE_MAGIC:
        raise CheckpointError(f"{path}: not a relative-encoding cache (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, RelativeIndexMatrices] = {}
    for _ in range(count):
        (label_len,) = reader.unpack(_U16)
        key = reader.take(label_len).decode("utf-8")
        J, K, T = (reader.array((n, n), "<u2") for _ in range(3))
        if J.max(initial=0) > i_a or K.max(initial=0) > i_l or T.max(initial=0) > i_t:
            raise CheckpointError(f"{path}: entry {key!r} exceeds its clip constants")
        out[key] = RelativeIndexMatrices(J=J, K=K, T=T, clip_app=i_a, clip_poi=i_l, clip_time=i_t)
    reader.done()
    return out
