"""``CWF1`` weight files.

Layout (all little-endian)::

    b"CWF1" | version u32 | entry count u32 | entries...
    entry  = name length u16 | UTF-8 name | rank u8 | dims u32 * rank | float32 payload

The architecture fingerprint and an optional JSON metadata document travel
as empty (rank 1, size 0) entries whose names carry the value, so the file
stays readable by any parser of the plain entry layout.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from ..errors import FormatError

MAGIC = b"CWF1"
VERSION = 1
_FP_PREFIX = "__fingerprint__="
_META_PREFIX = "__meta__="


@dataclass
class NetworkWeights:
    params: "OrderedDict[str, np.ndarray]"
    fingerprint: str
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = OrderedDict((k, np.asarray(v, dtype=np.float32)) for k, v in self.params.items())
        for name in self.params:
            if name.startswith("__"):
                raise ValueError(f"parameter names may not start with '__': {name!r}")

    def __getitem__(self, name):
        return self.params[name]

    def __len__(self):
        return len(self.params)


def _entry(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"entry name too long ({len(raw)} bytes)")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_weights(weights: NetworkWeights, path) -> None:
    entries = [_entry(_FP_PREFIX + weights.fingerprint, np.zeros(0, np.float32))]
    if weights.meta:
        doc = json.dumps(weights.meta, sort_keys=True, separators=(",", ":"))
        entries.append(_entry(_META_PREFIX + doc, np.zeros(0, np.float32)))
    entries += [_entry(name, arr) for name, arr in weights.params.items()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(entries)))
        for e in entries:
            fh.write(e)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated weight file")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path, fingerprint: Optional[str] = None) -> NetworkWeights:
    """Read a ``CWF1`` file; if ``fingerprint`` is given it must match."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such weight file: {path}")
    rd = _Reader(path.read_bytes(), path)
    if rd.take(4) != MAGIC:
        raise FormatError(f"{path}: not a CWF1 weight file")
    version, count = rd.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")

    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    found_fp, meta = None, {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        (rank,) = rd.unpack("<B")
        dims = rd.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(rd.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        if name.startswith(_FP_PREFIX):
            found_fp = name[len(_FP_PREFIX):]
        elif name.startswith(_META_PREFIX):
            meta = json.loads(name[len(_META_PREFIX):])
        else:
            if name in params:
                raise FormatError(f"{path}: duplicate entry {name!r}")
            params[name] = arr
    if rd.pos != len(rd.raw):
        raise FormatError(f"{path}: {len(rd.raw) - rd.pos} trailing bytes")
    if found_fp is None:
        raise FormatError(f"{path}: missing architecture fingerprint")
    if fingerprint is not None and found_fp != fingerprint:
        raise FormatError(f"{path}: fingerprint {found_fp!r} does not match {fingerprint!r}")
    return NetworkWeights(params, found_fp, meta)
