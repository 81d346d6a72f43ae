"""Named parameter collections and the binary checkpoint format.

A checkpoint is a UTF-8 text header of ``key = <json value>`` lines, closed
by a line ``end_header``, followed immediately by the parameter payload as
little-endian float64 in manifest order.  Each manifest line reads::

    param = ["encoder.0.ffn.w1", [32, 64], 8192]

giving name, shape and byte offset into the payload.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .errors import ConfigError, DataError
from .tensor import DTYPE, Parameter

MAGIC = "ewpf-checkpoint/1"
_END = b"end_header\n"


class ModelParameters:
    """Ordered mapping of unique names to :class:`Parameter` tensors."""

    def __init__(self):
        self._params: OrderedDict[str, Parameter] = OrderedDict()

    def add(self, name: str, data) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(data, name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def values(self) -> list[Parameter]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def count(self) -> int:
        """Total number of scalar entries."""
        return int(np.sum([p.size for p in self._params.values()], dtype=np.int64))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            p = self._params[k]
            if p.shape != arr.shape:
                raise DataError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data[...] = arr


def save_checkpoint(path, meta: dict[str, Any], params: ModelParameters) -> Path:
    """Write ``meta`` (JSON-serialisable scalars/lists) and parameters to ``path``."""
    path = Path(path)
    lines = [f"format = {json.dumps(MAGIC)}"]
    for key in meta:
        if key in ("format", "param"):
            raise ConfigError(f"reserved checkpoint key {key!r}")
        lines.append(f"{key} = {json.dumps(meta[key])}")
    offset = 0
    blobs = []
    for name, p in params.items():
        lines.append(f"param = {json.dumps([name, list(p.shape), offset])}")
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = ("\n".join(lines) + "\n").encode("utf-8") + _END
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path) -> tuple[dict[str, Any], ModelParameters]:
    raw = Path(path).read_bytes()
    cut = raw.find(_END)
    if cut < 0:
        raise DataError(f"{path}: no checkpoint header terminator")
    payload = memoryview(raw)[cut + len(_END):]
    meta: dict[str, Any] = {}
    manifest = []
    for lineno, line in enumerate(raw[:cut].decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise DataError(f"{path}:{lineno}: malformed header line {line!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: bad value ({exc})") from None
        if key == "param":
            manifest.append(parsed)
        else:
            meta[key] = parsed
    if meta.pop("format", None) != MAGIC:
        raise DataError(f"{path}: not an {MAGIC} file")

    params = ModelParameters()
    for name, shape, offset in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(payload):
            raise DataError(f"{path}: payload truncated at parameter {name!r}")
        arr = np.frombuffer(payload[offset:end], dtype="<f8").astype(DTYPE).reshape(shape)
        params.add(name, arr)
    return meta, params
