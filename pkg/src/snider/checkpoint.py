"""Binary checkpoints.

Layout, little-endian throughout::

    b"SNDR"            magic
    u32                format version (1)
    u8  + bytes        variant tag ("tiny" / "snider")
    u32                input size
    u64                iteration counter
    u32                number of records
    records:
        u16 + bytes    name (UTF-8)
        u8             dtype code: 0 = float32, 1 = int64
        u8             rank
        u32 * rank     dims
        payload        prod(dims) values

Each parameter ``p`` contributes ``p``, ``p/adam_m``, ``p/adam_v`` (float32)
and ``p/step`` (int64 scalar); each batch-norm layer ``b`` contributes
``b/running_mean`` and ``b/running_var``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .networks import SniderModel, Variant, build_snider

MAGIC = b"SNDR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


class VariantMismatchError(CheckpointError):
    pass


def _records(model: SniderModel) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, p in model.named_parameters():
        out.append((name, p.data.astype("<f4")))
        out.append((f"{name}/adam_m", p.adam_m.astype("<f4")))
        out.append((f"{name}/adam_v", p.adam_v.astype("<f4")))
        out.append((f"{name}/step", np.asarray(p.step_count, dtype="<i8")))
    for name, st in model.named_bn_states():
        out.append((f"{name}/running_mean", st.running_mean.astype("<f4")))
        out.append((f"{name}/running_var", st.running_var.astype("<f4")))
    return out


def save_checkpoint(model: SniderModel, iteration: int) -> bytes:
    """Serialise parameters, Adam state, batch-norm statistics and the iteration counter."""
    tag = model.variant.value.encode("ascii")
    recs = _records(model)
    parts = [MAGIC, struct.pack("<IB", VERSION, len(tag)), tag, struct.pack("<IQI", model.input_size, iteration, len(recs))]
    for name, arr in recs:
        nb = name.encode("utf-8")
        code = 0 if arr.dtype == np.dtype("<f4") else 1
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                                  f"only {len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(buf: bytes) -> tuple[str, int, int, dict[str, np.ndarray]]:
    """Decode without building a model: (variant tag, input size, iteration, records)."""
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    (tag_len,) = r.unpack("<B", "variant tag length")
    tag = r.take(tag_len, "variant tag").decode("ascii", errors="replace")
    size, iteration, n_rec = r.unpack("<IQI", "header")
    records: dict[str, np.ndarray] = {}
    for _ in range(n_rec):
        start = r.pos
        (name_len,) = r.unpack("<H", "record name length")
        name = r.take(name_len, "record name").decode("utf-8")
        code, rank = r.unpack("<BB", "record dtype/rank")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} in record {name!r} at offset {start}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        dt = _DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(count * dt.itemsize, f"payload of {name!r}")
        records[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last record at offset {r.pos}")
    return tag, size, iteration, records


def load_checkpoint(buf: bytes, expect_variant: "Variant | str | None" = None) -> tuple[SniderModel, int]:
    """Rebuild a model (with optimizer state) from :func:`save_checkpoint` output."""
    tag, size, iteration, records = parse_checkpoint(buf)
    try:
        variant = Variant.parse(tag)
    except ValueError as exc:
        raise CheckpointError(f"unknown variant tag {tag!r} at offset 9") from exc
    if expect_variant is not None and Variant.parse(expect_variant) is not variant:
        raise VariantMismatchError(f"checkpoint holds variant {variant.value!r}, expected {Variant.parse(expect_variant).value!r}")

    model = build_snider(variant, size, seed=0)
    expected = {name for name, _ in _records(model)}
    missing, extra = expected - records.keys(), records.keys() - expected
    if missing or extra:
        raise CheckpointError(f"record set mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    for name, p in model.named_parameters():
        for key in (name, f"{name}/adam_m", f"{name}/adam_v"):
            if records[key].shape != p.shape:
                raise CheckpointError(f"record {key!r} has shape {records[key].shape}, model expects {p.shape}")
    for name, st in model.named_bn_states():
        if records[f"{name}/running_mean"].shape != st.running_mean.shape:
            raise CheckpointError(f"record {name!r} running stats have the wrong shape")

    dt = model.parameters()[0].data.dtype
    for name, p in model.named_parameters():
        p.data[...] = records[name].astype(dt)
        p.adam_m[...] = records[f"{name}/adam_m"].astype(dt)
        p.adam_v[...] = records[f"{name}/adam_v"].astype(dt)
        p.step_count = int(records[f"{name}/step"])
    for name, st in model.named_bn_states():
        st.running_mean[...] = records[f"{name}/running_mean"].astype(dt)
        st.running_var[...] = records[f"{name}/running_var"].astype(dt)
    return model, iteration


def write_checkpoint(path, model: SniderModel, iteration: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(save_checkpoint(model, iteration))
    tmp.replace(path)
    return path


def read_checkpoint(path, expect_variant=None) -> tuple[SniderModel, int]:
    return load_checkpoint(Path(path).read_bytes(), expect_variant)
