"""Named-tensor checkpoint format (.mnxw).

Layout, all integers little-endian:

    magic   4 bytes  "MNXW"
    version u32      1
    count   u32      number of entries
    per entry:
      name_len u16, name UTF-8 bytes
      dtype    u8   (0 = float32, 1 = uint8)
      ndim     u8
      dims     u32 x ndim
      payload  raw little-endian values

An empty store is therefore exactly 12 bytes. dtype 1 exists for one
purpose: embedding the model config as a "__meta__/config_json" entry so
inference can rebuild the architecture from the weight file alone. Entries
whose names end in ``running_mean``/``running_var`` are batch-norm state
buffers; they round-trip like parameters but are excluded from learnable
parameter counts.

save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MNXW"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1
META_CONFIG = "__meta__/config_json"
BUFFER_SUFFIXES = ("running_mean", "running_var")


class WeightFormatError(ValueError):
    pass


class WeightStore:
    """Ordered, uniquely named tensor collection."""

    def __init__(self):
        self._names = []
        self._arrays = {}

    def add(self, name: str, array):
        if name in self._arrays:
            raise WeightFormatError(f"duplicate tensor name: {name!r}")
        arr = np.asarray(array)
        if arr.dtype not in (np.float32, np.uint8):
            arr = arr.astype(np.float32)
        self._names.append(name)
        self._arrays[name] = arr
        return self

    def __contains__(self, name):
        return name in self._arrays

    def __getitem__(self, name) -> np.ndarray:
        return self._arrays[name]

    def __len__(self):
        return len(self._names)

    def names(self):
        return list(self._names)

    def items(self):
        for n in self._names:
            yield n, self._arrays[n]

    def num_learnable(self) -> int:
        """Learnable scalar count: float32 entries that are not buffers."""
        total = 0
        for n, a in self.items():
            if a.dtype == np.uint8 or n.endswith(BUFFER_SUFFIXES):
                continue
            total += a.size
        return total


def save_weights(store: WeightStore, path):
    data = bytearray()
    data += MAGIC
    data += struct.pack("<I", VERSION)
    data += struct.pack("<I", len(store))
    for name, arr in store.items():
        nb = name.encode("utf-8")
        data += struct.pack("<H", len(nb))
        data += nb
        dtype = DTYPE_U8 if arr.dtype == np.uint8 else DTYPE_F32
        data += struct.pack("<BB", dtype, arr.ndim)
        for d in arr.shape:
            data += struct.pack("<I", d)
        if dtype == DTYPE_F32:
            data += arr.astype("<f4", copy=False).tobytes()
        else:
            data += arr.tobytes()
    with open(path, "wb") as f:
        f.write(bytes(data))


def load_weights(path) -> WeightStore:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise WeightFormatError(f"truncated file while reading {what}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise WeightFormatError("bad magic; not a weight file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    store = WeightStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        dtype, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if dtype not in (DTYPE_F32, DTYPE_U8):
            raise WeightFormatError(f"unknown dtype code {dtype} for {name!r}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims")) if ndim else ()
        n_elems = int(np.prod(dims)) if ndim else 1
        itemsize = 4 if dtype == DTYPE_F32 else 1
        payload = take(n_elems * itemsize, f"payload of {name!r}")
        if dtype == DTYPE_F32:
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        else:
            arr = np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()
        if name in store:
            raise WeightFormatError(f"duplicate tensor name: {name!r}")
        store.add(name, arr)
    if off != len(blob):
        raise WeightFormatError(f"{len(blob) - off} trailing bytes after last entry")
    return store


# ---------------------------------------------------------------------------
# model <-> store


def store_from_model(model, config_json: str | None = None) -> WeightStore:
    """Snapshot parameters and buffers; optionally embed the config JSON."""
    store = WeightStore()
    if config_json is not None:
        store.add(META_CONFIG, np.frombuffer(config_json.encode("utf-8"), np.uint8).copy())
    for name, p in model.named_params():
        store.add(name, p.data)
    for name, b in model.named_buffers():
        store.add(name, b)
    return store


def load_into_model(model, store: WeightStore):
    """Copy store entries into a built model; names must match exactly."""
    params = dict(model.named_params())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    present = {n for n in store.names() if n != META_CONFIG}
    missing = sorted(expected - present)
    extra = sorted(present - expected)
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing: {', '.join(missing[:5])}"
                         + (" ..." if len(missing) > 5 else ""))
        if extra:
            parts.append(f"unexpected: {', '.join(extra[:5])}"
                         + (" ..." if len(extra) > 5 else ""))
        raise WeightFormatError("weight names do not match model; " + "; ".join(parts))
    for name, p in params.items():
        arr = store[name]
        if arr.shape != p.data.shape:
            raise WeightFormatError(
                f"shape mismatch for {name!r}: file {arr.shape}, model {p.data.shape}")
        p.data[...] = arr
    for name, b in buffers.items():
        arr = store[name]
        if arr.shape != b.shape:
            raise WeightFormatError(
                f"shape mismatch for {name!r}: file {arr.shape}, model {b.shape}")
        b[...] = arr


def embedded_config_json(store: WeightStore) -> str | None:
    if META_CONFIG in store:
        return bytes(store[META_CONFIG]).decode("utf-8")
    return None
