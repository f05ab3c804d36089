"""Graph-convolution network that maps a hierarchy to decision-tree prototypes.

``theta_d = A_hat relu(A_hat relu(A_hat H W0) W1) W2`` with no bias terms.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from metadt import tensor as T
from metadt.errors import ConfigError, DataError, NumericError, ShapeError
from metadt.hierarchy import AdjacencyOperator
from metadt.iddtree import DEFAULT_GAMMA, TreeParams
from metadt.tensor import Tensor

PHASES = frozenset({"outer_train", "inner_adapt", "eval"})

CHECKPOINT_MAGIC = b"MDTC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Dims:
    d_s: int = 16
    d_in: int = 32
    d_hid: int = 64
    d_f: int = 32

    def __post_init__(self):
        for name in ("d_s", "d_in", "d_hid", "d_f"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


PRESETS = {
    "desk": Dims(16, 32, 64, 32),
    "large": Dims(300, 1024, 2048, 640),
}


@dataclass(frozen=True)
class DropoutConfig:
    rate: float = 0.5
    enabled_phases: frozenset[str] = frozenset({"outer_train"})

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")
        unknown = set(self.enabled_phases) - PHASES
        if unknown:
            raise ConfigError(f"unknown dropout phases {sorted(unknown)}")

    def active(self, phase: str) -> bool:
        return self.rate > 0 and phase in self.enabled_phases


NO_DROPOUT = DropoutConfig(rate=0.0, enabled_phases=frozenset())


@dataclass(frozen=True)
class DTINetParams:
    w0: Tensor
    w1: Tensor
    w2: Tensor

    def __post_init__(self):
        for name in ("w0", "w1", "w2"):
            object.__setattr__(self, name, T.as_tensor(getattr(self, name)))
        if self.w0.shape[1] != self.w1.shape[0] or self.w1.shape[1] != self.w2.shape[0]:
            raise ShapeError(f"inconsistent weight shapes {self.w0.shape}, {self.w1.shape}, {self.w2.shape}")

    def __iter__(self):
        return iter((self.w0, self.w1, self.w2))

    @property
    def dims(self) -> Dims:
        return Dims(self.w0.shape[0], self.w0.shape[1], self.w1.shape[1], self.w2.shape[1])

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.w0.data, self.w1.data, self.w2.data

    def detached(self) -> DTINetParams:
        return DTINetParams(*(Tensor(w.data) for w in self))

    def equal(self, other: DTINetParams) -> bool:
        return all(np.array_equal(a.data, b.data) for a, b in zip(self, other))


def init_params(dims: Dims, rng: np.random.Generator) -> DTINetParams:
    """Glorot-uniform weights, bound ``sqrt(6 / (fan_in + fan_out))``."""
    shapes = [(dims.d_s, dims.d_in), (dims.d_in, dims.d_hid), (dims.d_hid, dims.d_f)]
    ws = []
    for fan_in, fan_out in shapes:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    return DTINetParams(*ws)


def _dropout(h: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    keep = rng.random(h.shape) >= rate
    return T.mul(h, Tensor(keep / (1.0 - rate)))


def infer_tree_params(
    params: DTINetParams,
    h,
    a_hat: AdjacencyOperator | np.ndarray,
    dropout: DropoutConfig = NO_DROPOUT,
    phase: str = "eval",
    rng: np.random.Generator | None = None,
    gamma: float = DEFAULT_GAMMA,
) -> TreeParams:
    """Run the three graph-convolution layers; row i of the result belongs to node i."""
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}")
    a = a_hat.a_hat if isinstance(a_hat, AdjacencyOperator) else np.asarray(a_hat, dtype=np.float64)
    h = T.as_tensor(h)
    F = h.shape[0]
    if a.shape != (F, F):
        raise ShapeError(f"adjacency {a.shape} does not match {F} nodes")
    if h.shape[1] != params.w0.shape[0]:
        raise ShapeError(f"semantic dimension {h.shape[1]} != W0 rows {params.w0.shape[0]}")
    use_dropout = dropout.active(phase)
    if use_dropout and rng is None:
        raise ConfigError("dropout is active but no random generator was given")
    a = Tensor(a)

    x = h
    for layer, w in enumerate(params):
        try:
            x = T.matmul(a, T.matmul(x, w))
            if layer < 2:
                x = T.relu(x)
                if use_dropout:
                    x = _dropout(x, dropout.rate, rng)
        except NumericError as exc:
            raise NumericError(f"layer {layer}: {exc}") from None
    return TreeParams(x, gamma)


def config_digest(model_config: dict) -> bytes:
    canonical = json.dumps(model_config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).digest()


def encode_checkpoint(params: DTINetParams, digest: bytes) -> bytes:
    if len(digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for w in params.arrays():
        rows, cols = w.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
    parts.append(digest)
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[DTINetParams, bytes]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    offset = 8
    ws = []
    try:
        for _ in range(3):
            rows, cols = struct.unpack_from("<II", blob, offset)
            offset += 8
            n = rows * cols * 8
            if offset + n > len(blob):
                raise DataError("truncated checkpoint payload")
            ws.append(np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=offset)
                      .reshape(rows, cols).astype(np.float64))
            offset += n
    except struct.error:
        raise DataError("truncated checkpoint header") from None
    digest = blob[offset:offset + 32]
    if len(digest) != 32 or offset + 32 != len(blob):
        raise DataError("checkpoint digest missing or trailing bytes present")
    return DTINetParams(*ws), digest


def save_checkpoint(path: str | Path, params: DTINetParams, digest: bytes) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    path = Path(path)
    blob = encode_checkpoint(params, digest)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> tuple[DTINetParams, bytes]:
    return decode_checkpoint(Path(path).read_bytes())
