"""Persistence: the sparse-ensemble binary format, parameter accounting,
IDX dataset ingestion, and synthetic blob data for desk-scale runs.

Ensemble file layout (version 1, all integers little-endian):

    magic           5 bytes  b"SPEN1"
    version         u16
    value_bytes     u8       8 = float64 (default), 4 = float32 (lossy)
    num_layers      u32
    per layer:      in_dim u32, out_dim u32, activation u8 (0=relu, 1=identity)
    num_classes     u32
    num_chains      u32
    per chain:      num_samples u32, active_count u64, method u8, seed u64,
                    source_iterations i64 (-1 = none), sample_start_epoch u32,
                    mask_offset u64, values_offset u64
    per chain:      packed mask bitset, ceil(K/8) bytes, LSB-first
    per chain:      num_samples * active_count values, sample-major
    crc32           u32      over every byte before it

Loads verify magic, version, and the checksum; a truncated or bit-flipped
file never yields a partial ensemble.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    ConsistencyError,
    FormatError,
    IntegrityError,
    ShapeError,
    UnsupportedVersionError,
    UsageError,
)
from .masking import MASK_METHODS, MaskProvenance, SparsityMask
from .network import IDENTITY, RELU, LayerSpec, NetworkSpec
from .sampling import ChainGroup, PosteriorEnsemble
from .streams import derive_rng

MAGIC = b"SPEN1"
VERSION = 1
DATA_ENV_VAR = "SPARSE_POSTERIOR_DATA"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_ACT_CODES = {RELU: 0, IDENTITY: 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass
class Dataset:
    """Feature matrix in [0, 1] with integer labels and a split tag."""

    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ShapeError("features must be 2-D, labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ConsistencyError("feature/label counts differ")
        if self.features.shape[0] < 1:
            raise ShapeError("dataset must be nonempty")
        if self.features.min() < 0.0 or self.features.max() > 1.0:
            raise ShapeError("features must lie in [0, 1]")
        if self.labels.min() < 0:
            raise ShapeError("labels must be nonnegative")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def total_stored_params(ensemble: PosteriorEnsemble) -> int:
    """Parameters the ensemble stores: sum over chains of S * active_count."""
    return sum(g.num_samples * g.mask.active_count() for g in ensemble.groups)


def save_ensemble(ensemble: PosteriorEnsemble, path, precision: str = "f64") -> None:
    """Write an ensemble; the round trip is bit-exact for float64 values.

    ``precision="f32"`` halves the value storage but is lossy; use it only
    for storage studies, never when bit-exact reloads matter.
    """
    if not ensemble.groups:
        raise UsageError("refusing to save an ensemble with no chains")
    if precision not in ("f64", "f32"):
        raise UsageError(f"unknown precision {precision!r}")
    value_bytes = 8 if precision == "f64" else 4
    net = ensemble.net
    header = bytearray()
    header += MAGIC
    header += struct.pack("<HB", VERSION, value_bytes)
    header += struct.pack("<I", len(net.layers))
    for l in net.layers:
        header += struct.pack("<IIB", l.in_dim, l.out_dim, _ACT_CODES[l.activation])
    header += struct.pack("<II", net.num_classes, len(ensemble.groups))
    chain_rec = struct.Struct("<IQBQqIQQ")
    header_len = len(header) + chain_rec.size * len(ensemble.groups)
    mask_blobs = [g.mask.pack() for g in ensemble.groups]
    mask_offsets, off = [], header_len
    for blob in mask_blobs:
        mask_offsets.append(off)
        off += len(blob)
    value_offsets = []
    for g in ensemble.groups:
        value_offsets.append(off)
        off += value_bytes * g.num_samples * g.mask.active_count()
    for g, moff, voff in zip(ensemble.groups, mask_offsets, value_offsets):
        p = g.provenance
        header += chain_rec.pack(
            g.num_samples,
            g.mask.active_count(),
            MASK_METHODS.index(p.method),
            p.seed & ((1 << 64) - 1),
            -1 if p.source_iterations is None else p.source_iterations,
            g.sample_start_epoch,
            moff,
            voff,
        )
    crc = zlib.crc32(header)
    value_dtype = "<f8" if value_bytes == 8 else "<f4"
    with open(path, "wb") as f:
        f.write(header)
        for blob in mask_blobs:
            f.write(blob)
            crc = zlib.crc32(blob, crc)
        for g in ensemble.groups:
            blob = np.ascontiguousarray(g.samples, dtype=value_dtype).tobytes()
            f.write(blob)
            crc = zlib.crc32(blob, crc)
        f.write(struct.pack("<I", crc & 0xFFFFFFFF))


def load_ensemble(path) -> PosteriorEnsemble:
    """Read an ensemble written by save_ensemble, verifying the checksum."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 3 + 4:
        raise IntegrityError("file too short to be an ensemble")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic; not an ensemble file")
    body, (stored_crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise IntegrityError("checksum mismatch; file corrupt or truncated")
    pos = len(MAGIC)
    version, value_bytes = struct.unpack_from("<HB", body, pos)
    pos += 3
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported ensemble version {version}")
    if value_bytes not in (4, 8):
        raise FormatError(f"unsupported value width {value_bytes}")
    (num_layers,) = struct.unpack_from("<I", body, pos)
    pos += 4
    layers = []
    for _ in range(num_layers):
        in_dim, out_dim, act = struct.unpack_from("<IIB", body, pos)
        pos += 9
        if act not in _ACT_NAMES:
            raise FormatError(f"unknown activation code {act}")
        layers.append(LayerSpec(in_dim, out_dim, _ACT_NAMES[act]))
    num_classes, num_chains = struct.unpack_from("<II", body, pos)
    pos += 8
    net = NetworkSpec(tuple(layers), num_classes)
    k = net.param_count
    chain_rec = struct.Struct("<IQBQqIQQ")
    records = []
    for _ in range(num_chains):
        records.append(chain_rec.unpack_from(body, pos))
        pos += chain_rec.size
    groups = []
    dtype = "<f8" if value_bytes == 8 else "<f4"
    for num_samples, active, method_idx, seed, src_iters, start_epoch, moff, voff in records:
        if method_idx >= len(MASK_METHODS):
            raise FormatError(f"unknown mask method code {method_idx}")
        mask_len = math.ceil(k / 8)
        if moff + mask_len > len(body) or voff + value_bytes * num_samples * active > len(body):
            raise IntegrityError("chain data extends past end of file")
        mask = SparsityMask.unpack(body[moff : moff + mask_len], k, net.layout())
        if mask.active_count() != active:
            raise IntegrityError("mask population does not match the header")
        vals = np.frombuffer(
            body, dtype=dtype, count=num_samples * active, offset=voff
        ).astype(np.float64)
        prov = MaskProvenance(
            MASK_METHODS[method_idx], seed, None if src_iters < 0 else int(src_iters)
        )
        groups.append(
            ChainGroup(mask, vals.reshape(num_samples, active), prov, sample_start_epoch=start_epoch)
        )
    return PosteriorEnsemble(net, groups)


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, path, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: too short for an IDX {what}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    with _open_maybe_gzip(images_path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x} in {images_path}")
        pixels = np.frombuffer(f.read(count * rows * cols), dtype=np.uint8)
    if pixels.size != count * rows * cols:
        raise IntegrityError(f"image file {images_path} is truncated")
    with _open_maybe_gzip(labels_path) as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x} in {labels_path}")
        labels = np.frombuffer(f.read(label_count), dtype=np.uint8)
    if labels.size != label_count:
        raise IntegrityError(f"label file {labels_path} is truncated")
    if count != label_count:
        raise ConsistencyError(f"{count} images but {label_count} labels")
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), source=str(images_path))


def resolve_data_dir(flag_value: Optional[str] = None) -> Optional[Path]:
    """Dataset directory from an explicit flag or the environment."""
    if flag_value:
        return Path(flag_value)
    env = os.environ.get(DATA_ENV_VAR)
    return Path(env) if env else None


_FMNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def fmnist_paths(data_dir: Path, split: str) -> tuple[Path, Path]:
    images, labels = _FMNIST_FILES[split]
    for suffix in ("", ".gz"):
        ip, lp = data_dir / (images + suffix), data_dir / (labels + suffix)
        if ip.exists() and lp.exists():
            return ip, lp
    return data_dir / images, data_dir / labels


def load_fmnist(data_dir: Path, split: str) -> Dataset:
    ip, lp = fmnist_paths(data_dir, split)
    ds = load_idx(ip, lp)
    ds.split = split
    return ds


def synth_blobs(
    num_classes: int, per_class: int, dim: int, spread: float, seed: int, split: str = "train"
) -> Dataset:
    """Gaussian class clusters at seeded random centers, clipped to [0, 1].

    Centers depend only on the seed, so train and test splits of the same
    seed share geometry while drawing independent noise.
    """
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ConsistencyError("num_classes, per_class, and dim must be positive")
    if spread < 0:
        raise ConsistencyError("spread must be nonnegative")
    centers = derive_rng(seed, "blob-centers").uniform(0.2, 0.8, (num_classes, dim))
    noise_rng = derive_rng(seed, "blob-noise", split)
    features = np.repeat(centers, per_class, axis=0)
    features = features + spread * noise_rng.standard_normal(features.shape)
    np.clip(features, 0.0, 1.0, out=features)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return Dataset(
        features,
        labels,
        split=split,
        source=f"synth-blobs(classes={num_classes}, per_class={per_class}, dim={dim}, spread={spread}, seed={seed})",
    )
