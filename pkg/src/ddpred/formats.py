"""Binary file formats.

DDCP (datasets), little-endian::

    b"DDCP" | u32 version=1 | u32 M, N, L, F, E_dim | u32 sample_count | u64 base_seed
    per sample: f32 e[E_dim], then F frames of f32[2*M*N*L]

DDCK (checkpoints), little-endian::

    b"DDCK" | u32 version=1 | u32 header_length | JSON header | f32 blocks

The checkpoint header lists its blocks as ``[name, shape]`` pairs in the
order they follow the header.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict

import numpy as np

from .channel import Dataset, GridConfig, flatten_frames, sample_from_arrays

DDCP_MAGIC = b"DDCP"
DDCK_MAGIC = b"DDCK"
VERSION = 1
_DDCP_HEADER = struct.Struct("<4sIIIIIIIQ")


class FormatError(ValueError):
    """A file is truncated, has a bad magic or version, or disagrees with itself."""


class DDCPWriter:
    """Streaming DDCP writer; the sample count is fixed up on close."""

    def __init__(self, path, grid: GridConfig, base_seed: int):
        self.grid = grid
        self.base_seed = base_seed
        self.count = 0
        self._fh = open(path, "wb")
        self._write_header()

    def _write_header(self):
        g = self.grid
        self._fh.write(_DDCP_HEADER.pack(DDCP_MAGIC, VERSION, g.M, g.N, g.L, g.F, g.E_dim,
                                         self.count, self.base_seed))

    def write(self, sample):
        e = np.asarray(sample.conditioning, dtype="<f4")
        feats = flatten_frames(sample.channel.frames).astype("<f4")
        self._fh.write(e.tobytes())
        self._fh.write(feats.tobytes())
        self.count += 1

    def close(self):
        self._fh.seek(0)
        self._write_header()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_ddcp(path, dataset: Dataset):
    with DDCPWriter(path, dataset.grid, dataset.base_seed) as w:
        for s in dataset.samples:
            w.write(s)


def read_ddcp_header(path):
    with open(path, "rb") as fh:
        raw = fh.read(_DDCP_HEADER.size)
    if len(raw) < _DDCP_HEADER.size:
        raise FormatError(f"{path}: truncated DDCP header")
    magic, version, M, N, L, F, E, count, seed = _DDCP_HEADER.unpack(raw)
    if magic != DDCP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported DDCP version {version}")
    try:
        grid = GridConfig(M=M, N=N, L=L, F=F, E_dim=E)
    except ValueError as exc:
        raise FormatError(f"{path}: invalid grid in header: {exc}") from None
    return grid, count, seed


def read_ddcp(path) -> Dataset:
    grid, count, seed = read_ddcp_header(path)
    rec = grid.E_dim + grid.F * grid.feature_len
    data = np.fromfile(path, dtype="<f4", offset=_DDCP_HEADER.size)
    if data.size != count * rec:
        raise FormatError(f"{path}: expected {count * rec} values for {count} samples, found {data.size}")
    data = data.reshape(count, rec).astype(np.float64)
    e = data[:, :grid.E_dim]
    feats = data[:, grid.E_dim:].reshape(count, grid.F, grid.feature_len)
    try:
        samples = [sample_from_arrays(grid, e[i], feats[i]) for i in range(count)]
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt conditioning vector: {exc}") from None
    return Dataset(grid=grid, samples=samples, base_seed=seed, _features=feats)


def verify_ddcp(path, dataset: Dataset):
    """Reload ``path`` and check it reproduces ``dataset`` at float32 precision."""
    grid, count, seed = read_ddcp_header(path)
    if grid != dataset.grid or count != len(dataset) or seed != dataset.base_seed:
        raise FormatError(f"{path}: header does not match the generated dataset")
    loaded = read_ddcp(path)
    want = dataset.features().astype("<f4").astype(np.float64)
    if not np.array_equal(loaded.features(), want):
        raise FormatError(f"{path}: stored frames differ from the generated dataset")


def iter_ddcp(path):
    """Yield ``(e, frames)`` float32 views per sample without loading the whole file."""
    grid, count, _ = read_ddcp_header(path)
    rec = grid.E_dim + grid.F * grid.feature_len
    expected = _DDCP_HEADER.size + 4 * count * rec
    actual = os.path.getsize(path)
    if actual != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {count} samples, found {actual}")
    if count == 0:
        return
    data = np.memmap(path, dtype="<f4", mode="r", offset=_DDCP_HEADER.size, shape=(count, rec))
    for i in range(count):
        row = data[i]
        yield row[:grid.E_dim], row[grid.E_dim:].reshape(grid.F, grid.feature_len)


def verify_ddcp_samples(path, grid: GridConfig, base_seed: int, samples):
    """Check ``path`` against an iterable of freshly generated samples, one at a time."""
    g, count, seed = read_ddcp_header(path)
    if g != grid or seed != base_seed:
        raise FormatError(f"{path}: header does not match the requested grid and seed")
    n = 0
    for (e, frames), s in zip(iter_ddcp(path), samples):
        if not (np.array_equal(e, s.conditioning.astype("<f4"))
                and np.array_equal(frames, flatten_frames(s.channel.frames).astype("<f4"))):
            raise FormatError(f"{path}: sample {n} differs from the regenerated sample")
        n += 1
    if n != count:
        raise FormatError(f"{path}: header says {count} samples, verified {n}")


def write_ddck(path, header: dict, arrays: "OrderedDict[str, np.ndarray]"):
    header = dict(header)
    header["blocks"] = [[name, list(a.shape)] for name, a in arrays.items()]
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(DDCK_MAGIC + struct.pack("<II", VERSION, len(text)))
        fh.write(text)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_ddck(path):
    """Return ``(header, arrays)``; arrays are float64 in header order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != DDCK_MAGIC:
        raise FormatError(f"{path}: not a DDCK checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported DDCK version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from None
    arrays = OrderedDict()
    offset = 12 + hlen
    for name, shape in header["blocks"]:
        n = int(np.prod(shape, dtype=np.int64))
        if offset + 4 * n > len(raw):
            raise FormatError(f"{path}: truncated block {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 4 * n
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
