"""Flat parameter vectors with a named shape manifest, and their file codec.

A checkpoint is a UTF-8 text header followed by a little-endian float64
payload::

    CBTCKPT 1
    <name> <d0>,<d1>,...
    ...
    END
    <raw bytes>

Entries appear in manifest order; each tensor is stored C-contiguous.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError, ShapeError

_MAGIC = "CBTCKPT 1"


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Parameters of one model flattened into a single float64 vector."""

    data: np.ndarray
    manifest: tuple

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64).reshape(-1)
        manifest = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.manifest)
        expected = sum(int(np.prod(s)) for _, s in manifest)
        if expected != data.size:
            raise ShapeError(
                f"manifest describes {expected} values but data holds {data.size}"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "manifest", manifest)

    def __len__(self):
        return self.data.size

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.manifest == other.manifest and np.array_equal(self.data, other.data)

    @classmethod
    def from_arrays(cls, arrays):
        """Flatten an ordered ``{name: array}`` mapping."""
        manifest = tuple((n, np.shape(a)) for n, a in arrays.items())
        if arrays:
            data = np.concatenate([np.ravel(np.asarray(a, dtype=np.float64)) for a in arrays.values()])
        else:
            data = np.zeros(0)
        return cls(data, manifest)

    def unflatten(self):
        """Return ``{name: view}``; views share memory with :attr:`data`."""
        out = {}
        offset = 0
        for name, shape in self.manifest:
            size = int(np.prod(shape))
            out[name] = self.data[offset:offset + size].reshape(shape)
            offset += size
        return out

    def with_data(self, data):
        return ParamVector(np.array(data, dtype=np.float64), self.manifest)

    def zeros_like(self):
        return ParamVector(np.zeros_like(self.data), self.manifest)

    def check_compatible(self, other):
        if self.manifest != other.manifest:
            raise ShapeError("parameter manifests differ")


def glorot_init(manifest, rng, *, zero=(), ones=()):
    """Symmetric-uniform init with half-width sqrt(6 / (fan_in + fan_out)).

    Rank-1 tensors are biases and start at zero unless named in ``ones``;
    names in ``zero`` are forced to zero. The first axis is fan-in, the
    remaining axes together are fan-out; for conv kernels (out, in, k, k)
    the receptive field multiplies both.
    """
    arrays = {}
    for name, shape in manifest:
        if name in ones:
            arrays[name] = np.ones(shape)
        elif len(shape) <= 1 or name in zero:
            arrays[name] = np.zeros(shape)
        else:
            if len(shape) == 4:
                field = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * field, shape[0] * field
            else:
                fan_in, fan_out = shape[0], int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return ParamVector.from_arrays(arrays)


def save_checkpoint(path, params):
    lines = [_MAGIC]
    for name, shape in params.manifest:
        if not name or any(c.isspace() for c in name):
            raise FormatError(f"parameter name {name!r} cannot be written")
        lines.append(f"{name} {','.join(str(d) for d in shape)}")
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.data.astype("<f8").tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(_MAGIC.encode() + b"\n") or end < 0:
        raise FormatError(f"{path}: not a checkpoint (bad magic or missing END)")
    header = raw[:end].decode("utf-8").split("\n")[1:]
    manifest = []
    for line in header:
        try:
            name, dims = line.split(" ")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        except ValueError as exc:
            raise FormatError(f"{path}: malformed manifest line {line!r}") from exc
        manifest.append((name, shape))
    payload = raw[end + len(b"\nEND\n"):]
    expected = sum(int(np.prod(s)) for _, s in manifest)
    if len(payload) != 8 * expected:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, manifest needs {8 * expected}"
        )
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ParamVector(data, tuple(manifest))
