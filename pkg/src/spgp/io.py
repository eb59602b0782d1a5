"""File formats: embedding tensors, target tables, splits and model snapshots.

Tensor file (little-endian)::

    b"SPGP" | u32 version=1 | u32 ndim=3 | u64 N | u64 P | u64 M | f64[N*P*M]

Model snapshot (little-endian)::

    b"SPGM" | u32 version | u32 header_len | JSON header | f64 blocks | u32 crc32

The CRC covers every byte before it.
"""

import csv
import io as _io
import json
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import gp
from .exceptions import ChecksumError, DataError, FormatError, TruncationError, VersionError
from .pooling import MaskHead

TENSOR_MAGIC = b"SPGP"
TENSOR_VERSION = 1
MODEL_MAGIC = b"SPGM"
MODEL_VERSION = 1
_TENSOR_HEADER = struct.Struct("<4sII3Q")
SPLIT_KINDS = ("one-mut-shuffle", "uniform-shuffle", "holdout", "explicit")


@dataclass(eq=False)
class EmbeddingTensor:
    """``(N, P, M)`` per-position embeddings, row-major float64."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype="<f8")
        if values.ndim != 3 or min(values.shape) < 1:
            raise DataError(f"tensor must be 3-d with every dimension >= 1, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("tensor contains non-finite values")
        self.values = values

    @property
    def shape(self):
        return self.values.shape

    n_sequences = property(lambda self: self.values.shape[0])
    n_positions = property(lambda self: self.values.shape[1])
    n_dims = property(lambda self: self.values.shape[2])

    def subset(self, indices):
        return EmbeddingTensor(self.values[np.asarray(indices, dtype=np.int64)])


@dataclass(eq=False)
class TargetTable:
    ids: list
    values: np.ndarray
    mutation_count: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.mutation_count = np.asarray(self.mutation_count, dtype=np.int64).ravel()
        n = len(self.ids)
        if self.values.size != n or self.mutation_count.size != n:
            raise DataError("ids, values and mutation_count differ in length")
        if len(set(self.ids)) != n:
            seen = set()
            dup = next(i for i in self.ids if i in seen or seen.add(i))
            raise DataError(f"duplicate id {dup!r}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("target values must be finite")
        if np.any(self.mutation_count < 0):
            raise DataError("mutation_count must be non-negative")

    def __len__(self):
        return len(self.ids)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return TargetTable([self.ids[i] for i in indices], self.values[indices],
                           self.mutation_count[indices])


@dataclass
class SplitSpec:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    kind: str = "explicit"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise DataError(f"unknown split kind {self.kind!r}")
        self.train, self.validation, self.test = (
            np.asarray(a, dtype=np.int64).ravel() for a in (self.train, self.validation, self.test)
        )
        if self.train.size == 0:
            raise DataError("training index set is empty")
        sets = [set(a.tolist()) for a in (self.train, self.validation, self.test)]
        if sum(map(len, sets)) != sum(a.size for a in (self.train, self.validation, self.test)):
            raise DataError("split index sets contain repeated indices")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("split index sets overlap")

    def check_range(self, n):
        for name in ("train", "validation", "test"):
            a = getattr(self, name)
            if a.size and (a.min() < 0 or a.max() >= n):
                raise DataError(f"{name} indices out of range for {n} samples")

    def to_dict(self):
        return {
            "kind": self.kind,
            "seed": int(self.seed),
            "train": self.train.tolist(),
            "validation": self.validation.tolist(),
            "test": self.test.tolist(),
        }


# -- tensors -----------------------------------------------------------------


def tensor_to_bytes(tensor):
    if not isinstance(tensor, EmbeddingTensor):
        tensor = EmbeddingTensor(tensor)
    header = _TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, 3, *tensor.shape)
    return header + tensor.values.tobytes(order="C")


def tensor_from_bytes(data):
    if len(data) < _TENSOR_HEADER.size:
        raise TruncationError("file shorter than the tensor header")
    magic, version, ndim, n, p, m = _TENSOR_HEADER.unpack_from(data)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise VersionError(f"unsupported tensor version {version}")
    if ndim != 3:
        raise FormatError(f"expected ndim 3, got {ndim}")
    payload = len(data) - _TENSOR_HEADER.size
    expected = n * p * m * 8
    if payload != expected:
        raise TruncationError(f"declared {n}x{p}x{m} needs {expected} payload bytes, found {payload}")
    values = np.frombuffer(data, dtype="<f8", offset=_TENSOR_HEADER.size).reshape(n, p, m)
    return EmbeddingTensor(values.copy())


def read_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def write_tensor(tensor, path):
    data = tensor_to_bytes(tensor)
    with open(path, "wb") as fh:
        fh.write(data)


# -- targets -----------------------------------------------------------------


def read_targets(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "tm", "n_mut"]:
            raise FormatError(f"target CSV header must be id,tm,n_mut, got {header}")
        ids, values, counts = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"line {lineno}: expected 3 fields, got {len(row)}")
            ids.append(row[0])
            try:
                values.append(float(row[1]))
                counts.append(int(row[2]))
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    return TargetTable(ids, np.array(values, dtype=np.float64), np.array(counts, dtype=np.int64))


def write_targets(table, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "tm", "n_mut"])
        for i, v, c in zip(table.ids, table.values, table.mutation_count):
            writer.writerow([i, repr(float(v)), int(c)])


# -- splits ------------------------------------------------------------------


def read_split(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    missing = {"kind", "seed", "train", "validation", "test"} - set(obj)
    if missing:
        raise FormatError(f"split file missing keys {sorted(missing)}")
    return SplitSpec(obj["train"], obj["validation"], obj["test"], obj["kind"], int(obj["seed"]))


def write_split(split, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(split.to_dict(), fh, indent=1)
        fh.write("\n")


# -- model snapshots ---------------------------------------------------------


def _f64_block(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def model_to_bytes(model):
    head = model.head
    n, m = model.train_features.shape
    n_mask = head.n_params()
    header = {
        "variant": head.variant,
        "prior_scale": repr(float(head.prior_scale)),
        "kernel": model.kernel,
        "dims": {"n_train": n, "n_positions": int(model.n_positions), "n_dims": m,
                 "n_mask": n_mask, "n_trace": len(model.trace)},
        "hypers": {
            "log_sigma_f2": repr(model.hypers.log_sigma_f2),
            "log_sigma_l": repr(model.hypers.log_sigma_l),
            "log_sigma_eps2": repr(model.hypers.log_sigma_eps2),
        },
        "y_mean": repr(float(model.y_mean)),
        "y_scale": repr(float(model.y_scale)),
        "jitter_used": repr(float(model.jitter_used)),
        "objective": repr(float(model.objective)),
        "restricted": bool(model.restricted),
        "config": model.config,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    trace = np.array(model.trace, dtype=np.float64).reshape(-1, 3)
    buf = _io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    if n_mask:
        buf.write(_f64_block(head.raw_params))
    buf.write(_f64_block(model.train_features))
    buf.write(_f64_block(model.train_targets))
    buf.write(_f64_block(model.cholesky))
    buf.write(_f64_block(trace))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def model_from_bytes(data):
    from .trainer import TrainedModel

    if len(data) < 16:
        raise TruncationError("snapshot too short")
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != MODEL_VERSION:
        raise VersionError(f"snapshot version {version}, this reader supports {MODEL_VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("snapshot checksum mismatch")
    offset = 12 + header_len
    try:
        header = json.loads(data[12:offset].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"unreadable snapshot header: {exc}") from None
    dims = header["dims"]
    n, m, n_mask, n_trace = dims["n_train"], dims["n_dims"], dims["n_mask"], dims["n_trace"]
    sizes = [n_mask, n * m, n, n * n, 3 * n_trace]
    if offset + 8 * sum(sizes) != len(body):
        raise TruncationError("snapshot payload length disagrees with its header")
    blocks = []
    for size in sizes:
        blocks.append(np.frombuffer(data, dtype="<f8", count=size, offset=offset).copy())
        offset += 8 * size
    raw, feats, targets, chol, trace = blocks
    hp = header["hypers"]
    head = MaskHead(header["variant"], raw if n_mask else None, float(header["prior_scale"]))
    return TrainedModel(
        hypers=gp.GpHyperparams(float(hp["log_sigma_f2"]), float(hp["log_sigma_l"]),
                                float(hp["log_sigma_eps2"])),
        head=head,
        kernel=header["kernel"],
        cholesky=chol.reshape(n, n),
        train_features=feats.reshape(n, m),
        train_targets=targets,
        y_mean=float(header["y_mean"]),
        y_scale=float(header["y_scale"]),
        n_positions=dims["n_positions"],
        jitter_used=float(header["jitter_used"]),
        objective=float(header["objective"]),
        trace=[(int(i), f, g) for i, f, g in trace.reshape(-1, 3)],
        restricted=bool(header["restricted"]),
        config=header["config"],
    )


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# -- small CSV emitters ------------------------------------------------------


def write_trace(model, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "objective", "grad_norm"])
        for it, f, g in model.trace:
            writer.writerow([int(it), repr(float(f)), repr(float(g))])


def write_predictions(path, ids, dist, y_true=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "y_true", "mean", "variance"] if y_true is not None
                        else ["id", "mean", "variance"])
        for i, ident in enumerate(ids):
            row = [ident]
            if y_true is not None:
                row.append(repr(float(y_true[i])))
            row += [repr(float(dist.mean[i])), repr(float(dist.variance[i]))]
            writer.writerow(row)


def json_default(obj):
    """``json.dump`` hook for numpy scalars and arrays."""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        f = float(obj)
        return f if math.isfinite(f) else None
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
