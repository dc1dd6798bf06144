"""Flat binary checkpoint format.

Layout (all integers little-endian):
    magic   4 bytes  b"GLCK"
    version u32      currently 1
    n_meta  u32      then per item: key_len u16, key utf-8, val_len u16, val utf-8
    n_entries u32    then per entry:
        name_len u16, name utf-8
        n_widths u16, widths u32[]      (layer widths for networks, empty otherwise)
        n_arrays u16, per array: rank u8, dims u32[]
    data    for every entry, every array: float64 little-endian, C order

A human-readable sidecar manifest (<path>.manifest.txt) lists the stored
networks, their widths and parameter counts plus the metadata key-values.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"GLCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointEntry:
    name: str
    arrays: list[np.ndarray]
    widths: tuple[int, ...] = ()

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays)


@dataclass
class Checkpoint:
    entries: list[CheckpointEntry]
    meta: dict[str, str] = field(default_factory=dict)

    def entry(self, name: str) -> CheckpointEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise CheckpointError(f"checkpoint has no entry named {name!r}")

    def has_entry(self, name: str) -> bool:
        return any(e.name == name for e in self.entries)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError("string too long for checkpoint header")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    head = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(ckpt.meta))]
    for key in ckpt.meta:
        head.append(_pack_str(key))
        head.append(_pack_str(str(ckpt.meta[key])))
    head.append(struct.pack("<I", len(ckpt.entries)))
    for e in ckpt.entries:
        head.append(_pack_str(e.name))
        head.append(struct.pack("<H", len(e.widths)))
        head.append(struct.pack(f"<{len(e.widths)}I", *e.widths) if e.widths else b"")
        head.append(struct.pack("<H", len(e.arrays)))
        for a in e.arrays:
            head.append(struct.pack("<B", a.ndim))
            head.append(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
    body = [np.ascontiguousarray(a, dtype="<f8").tobytes() for e in ckpt.entries for a in e.arrays]
    path.write_bytes(b"".join(head + body))
    _write_manifest(path, ckpt)


def _write_manifest(path: Path, ckpt: Checkpoint) -> None:
    lines = [f"checkpoint {path.name}", f"format_version {VERSION}"]
    for key in ckpt.meta:
        lines.append(f"meta {key}={ckpt.meta[key]}")
    for e in ckpt.entries:
        widths = "x".join(str(w) for w in e.widths) if e.widths else "-"
        lines.append(f"entry {e.name} widths={widths} arrays={len(e.arrays)} params={e.n_params()}")
    manifest_path = path.with_name(path.name + ".manifest.txt")
    manifest_path.write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint: {path}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    def take_str() -> str:
        (n,) = struct.unpack("<H", take(2))
        return take(n).decode("utf-8")

    if take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_meta,) = struct.unpack("<I", take(4))
    meta = {}
    for _ in range(n_meta):
        key = take_str()
        meta[key] = take_str()
    (n_entries,) = struct.unpack("<I", take(4))
    specs = []
    for _ in range(n_entries):
        name = take_str()
        (n_widths,) = struct.unpack("<H", take(2))
        widths = struct.unpack(f"<{n_widths}I", take(4 * n_widths)) if n_widths else ()
        (n_arrays,) = struct.unpack("<H", take(2))
        shapes = []
        for _ in range(n_arrays):
            (rank,) = struct.unpack("<B", take(1))
            shapes.append(struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ())
        specs.append((name, widths, shapes))
    entries = []
    for name, widths, shapes in specs:
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(take(8 * count), dtype="<f8").astype(float).reshape(shape)
            arrays.append(arr)
        entries.append(CheckpointEntry(name=name, arrays=arrays, widths=tuple(int(w) for w in widths)))
    if off != len(raw):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return Checkpoint(entries=entries, meta=meta)
