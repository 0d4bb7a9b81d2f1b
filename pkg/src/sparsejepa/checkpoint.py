"""Binary checkpoint container.

Layout (all integers little-endian):

    magic "SJCK" | u32 version | 32-byte config hash | u64 step
    u32 n_sections
    per section (sorted by name):
        u16 name length | name utf-8 | u32 n_arrays
        per array (sorted by name):
            u16 name length | name utf-8 | u8 ndim | ndim x u64 dims
            raw little-endian f64 payload

Sorted ordering makes save(load(x)) byte-identical to x.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SJCK"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed container or config-hash mismatch."""


Sections = dict[str, dict[str, np.ndarray]]


def save_checkpoint(path: str, config_hash: bytes, step: int, sections: Sections) -> None:
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(config_hash)
        fh.write(struct.pack("<Q", step))
        fh.write(struct.pack("<I", len(sections)))
        for sec_name in sorted(sections):
            arrays = sections[sec_name]
            name_b = sec_name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", len(arrays)))
            for arr_name in sorted(arrays):
                arr = np.ascontiguousarray(arrays[arr_name], dtype="<f8")
                nb = arr_name.encode()
                fh.write(struct.pack("<H", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(arr.tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated container at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str, expect_hash: bytes | None = None,
                    force: bool = False) -> tuple[bytes, int, Sections]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_hash = r.take(32)
    (step,) = r.unpack("<Q")
    if expect_hash is not None and config_hash != expect_hash and not force:
        raise CheckpointError(
            "checkpoint config hash does not match the current config "
            "(pass force to load anyway)")
    (n_sections,) = r.unpack("<I")
    sections: Sections = {}
    for _ in range(n_sections):
        (nlen,) = r.unpack("<H")
        sec_name = r.take(nlen).decode()
        (n_arrays,) = r.unpack("<I")
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_arrays):
            (alen,) = r.unpack("<H")
            arr_name = r.take(alen).decode()
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}Q")
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(shape)
            arrays[arr_name] = data.copy()
        sections[sec_name] = arrays
    if r.pos != len(r.raw):
        raise CheckpointError(f"{len(r.raw) - r.pos} trailing bytes after last section")
    return config_hash, step, sections
