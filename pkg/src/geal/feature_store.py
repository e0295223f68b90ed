"""Binary feature-dump format (GEALFD01): ingestion, validation, synthetic generation.

Layout (integers unsigned little-endian, floats IEEE-754 binary32 little-endian):

    header: magic "GEALFD01" | format_version u32 (=1) | image_count u64
            | feature_dim u32 | reserved u32 (=0)
    record: id_len u32 | image_id UTF-8 | region_count u32
            | attention f32[R] | patch_features f32[R*D] row-major
            | global_feature f32[D]

No compression, no padding. Floats are stored in 32-bit; downstream arithmetic
is done in 64-bit.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError, ValidationError

FD_MAGIC = b"GEALFD01"
FD_VERSION = 1
ATTENTION_SUM_TOL = 1e-3

_HEADER = struct.Struct("<8sIQII")


def _as_f32(a, name):
    arr = np.asarray(a, dtype=np.float32)
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(eq=False)
class ImageRecord:
    """One image's per-region attention, per-region features, and global feature.

    Arrays are held in float32, exactly as stored on disk; consumers convert to
    float64 for arithmetic. Instances are immutable once constructed.
    """

    image_id: str
    attention: np.ndarray
    patch_features: np.ndarray
    global_feature: np.ndarray

    def __post_init__(self):
        self.attention = _as_f32(self.attention, "attention")
        self.patch_features = _as_f32(self.patch_features, "patch_features")
        self.global_feature = _as_f32(self.global_feature, "global_feature")

    @property
    def region_count(self) -> int:
        return self.patch_features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.patch_features.shape[1]

    def normalized_attention(self) -> np.ndarray:
        """Attention renormalized to unit sum, in float64."""
        a = self.attention.astype(np.float64)
        s = a.sum()
        if s <= 0:
            raise ValidationError(
                f"record {self.image_id!r}: attention sums to {s}, cannot renormalize",
                image_id=self.image_id,
            )
        return a / s

    def validate(self, require_nonzero_rows: bool = False) -> None:
        """Check all record invariants; raise ValidationError naming this record.

        With require_nonzero_rows (any cosine-distance stage configured in the
        run), all-zero patch rows and an all-zero global feature are rejected
        because cosine distance is undefined at the origin.
        """
        if not self.image_id:
            raise ValidationError("record has empty image_id", image_id=self.image_id)
        if self.patch_features.ndim != 2:
            raise ValidationError(
                f"record {self.image_id!r}: patch_features must be 2-D",
                image_id=self.image_id,
            )
        r, d = self.patch_features.shape
        if r < 1 or d < 1:
            raise ValidationError(
                f"record {self.image_id!r}: empty feature matrix {r}x{d}",
                image_id=self.image_id,
            )
        if self.attention.shape != (r,):
            raise ValidationError(
                f"record {self.image_id!r}: attention length {self.attention.shape} "
                f"does not match region count {r}",
                image_id=self.image_id,
            )
        if self.global_feature.shape != (d,):
            raise ValidationError(
                f"record {self.image_id!r}: global_feature length "
                f"{self.global_feature.shape} does not match feature dim {d}",
                image_id=self.image_id,
            )
        for name, arr in (
            ("attention", self.attention),
            ("patch_features", self.patch_features),
            ("global_feature", self.global_feature),
        ):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(
                    f"record {self.image_id!r}: non-finite values in {name}",
                    image_id=self.image_id,
                )
        if np.any(self.attention < 0):
            raise ValidationError(
                f"record {self.image_id!r}: negative attention entries",
                image_id=self.image_id,
            )
        s = float(self.attention.astype(np.float64).sum())
        if abs(s - 1.0) > ATTENTION_SUM_TOL:
            raise ValidationError(
                f"record {self.image_id!r}: attention sums to {s:.6f}, "
                f"expected 1 +/- {ATTENTION_SUM_TOL}",
                image_id=self.image_id,
            )
        if require_nonzero_rows:
            if np.any(~self.patch_features.any(axis=1)):
                raise ValidationError(
                    f"record {self.image_id!r}: all-zero patch row is invalid "
                    "under cosine distance",
                    image_id=self.image_id,
                )
            if not self.global_feature.any():
                raise ValidationError(
                    f"record {self.image_id!r}: all-zero global feature is invalid "
                    "under cosine distance",
                    image_id=self.image_id,
                )

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.attention.shape == other.attention.shape
            and self.patch_features.shape == other.patch_features.shape
            and self.global_feature.shape == other.global_feature.shape
            and self.attention.tobytes() == other.attention.tobytes()
            and self.patch_features.tobytes() == other.patch_features.tobytes()
            and self.global_feature.tobytes() == other.global_feature.tobytes()
        )


@dataclass(frozen=True)
class NoiseSpec:
    """Generative model for synthetic dumps: well-separated clean prototypes
    plus i.i.d. Gaussian per-coordinate noise of std `sigma`."""

    sigma: float = 1.0
    clean_cluster_count: int = 2
    spread: float = 100.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.clean_cluster_count < 1:
            raise ConfigError(
                f"clean_cluster_count must be >= 1, got {self.clean_cluster_count}"
            )
        if self.spread <= 0:
            raise ConfigError(f"spread must be > 0, got {self.spread}")


def write_dump(records: Iterable[ImageRecord], path) -> int:
    """Write records to a GEALFD01 file at `path`; returns the record count.

    Streams: the iterable is consumed lazily and the header image_count is
    back-patched at the end. All records must share one feature_dim and carry
    unique image ids. The partial file is removed if writing fails.
    """
    path = os.fspath(path)
    count = 0
    feature_dim = None
    seen = set()
    f = open(path, "wb")
    try:
        f.write(_HEADER.pack(FD_MAGIC, FD_VERSION, 0, 0, 0))
        for rec in records:
            rec.validate()
            if feature_dim is None:
                feature_dim = rec.feature_dim
            elif rec.feature_dim != feature_dim:
                raise FormatError(
                    f"record {rec.image_id!r} has feature_dim {rec.feature_dim}, "
                    f"dump started with {feature_dim}"
                )
            if rec.image_id in seen:
                raise ValidationError(
                    f"duplicate image_id {rec.image_id!r}", image_id=rec.image_id
                )
            seen.add(rec.image_id)
            id_bytes = rec.image_id.encode("utf-8")
            f.write(struct.pack("<I", len(id_bytes)))
            f.write(id_bytes)
            f.write(struct.pack("<I", rec.region_count))
            f.write(rec.attention.tobytes())
            f.write(rec.patch_features.tobytes())
            f.write(rec.global_feature.tobytes())
            count += 1
        f.seek(0)
        f.write(_HEADER.pack(FD_MAGIC, FD_VERSION, count, feature_dim or 0, 0))
        f.close()
    except BaseException:
        f.close()
        if os.path.exists(path):
            os.unlink(path)
        raise
    return count


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CorruptionError(f"file truncated while reading {what} "
                              f"(wanted {n} bytes, got {len(buf)})")
    return buf


def read_header(f):
    """Parse and validate a GEALFD01 header from an open binary file."""
    raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError("file too short to hold a GEALFD01 header")
    magic, version, image_count, feature_dim, reserved = _HEADER.unpack(raw)
    if magic != FD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FD_MAGIC!r}")
    if version != FD_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if reserved != 0:
        raise FormatError(f"reserved header field must be 0, got {reserved}")
    return image_count, feature_dim


def read_dump(path, require_nonzero_rows: bool = False) -> Iterator[ImageRecord]:
    """Yield validated ImageRecords from a GEALFD01 file, one at a time.

    Memory stays bounded by a single record. Raises FormatError on bad
    magic/version, CorruptionError on truncation, ValidationError (naming the
    image id) on invariant violations.
    """
    path = os.fspath(path)
    with open(path, "rb") as f:
        image_count, feature_dim = read_header(f)
        seen = set()
        for i in range(image_count):
            (id_len,) = struct.unpack("<I", _read_exact(f, 4, f"record {i} id_len"))
            try:
                image_id = _read_exact(f, id_len, f"record {i} image_id").decode("utf-8")
            except UnicodeDecodeError as e:
                raise ValidationError(f"record {i}: image_id is not valid UTF-8") from e
            (region_count,) = struct.unpack(
                "<I", _read_exact(f, 4, f"record {image_id!r} region_count")
            )
            if region_count == 0:
                raise ValidationError(
                    f"record {image_id!r}: region_count must be positive",
                    image_id=image_id,
                )
            att = np.frombuffer(
                _read_exact(f, 4 * region_count, f"record {image_id!r} attention"),
                dtype="<f4",
            )
            patches = np.frombuffer(
                _read_exact(
                    f,
                    4 * region_count * feature_dim,
                    f"record {image_id!r} patch_features",
                ),
                dtype="<f4",
            ).reshape(region_count, feature_dim)
            glob = np.frombuffer(
                _read_exact(f, 4 * feature_dim, f"record {image_id!r} global_feature"),
                dtype="<f4",
            )
            if image_id in seen:
                raise ValidationError(
                    f"duplicate image_id {image_id!r}", image_id=image_id
                )
            seen.add(image_id)
            rec = ImageRecord(image_id, att, patches, glob)
            rec.validate(require_nonzero_rows=require_nonzero_rows)
            yield rec
        if f.read(1):
            raise CorruptionError("trailing bytes after the last record")


def scan_record_offsets(path) -> tuple[int, list[int]]:
    """Cheap index pass: returns (feature_dim, byte offset of each record).

    Reads only the per-record length fields and seeks over payloads, so it is
    fast even on multi-gigabyte dumps. Used to hand out file slices to
    parallel workers.
    """
    path = os.fspath(path)
    offsets = []
    with open(path, "rb") as f:
        image_count, feature_dim = read_header(f)
        size = os.fstat(f.fileno()).st_size
        pos = _HEADER.size
        for i in range(image_count):
            offsets.append(pos)
            f.seek(pos)
            (id_len,) = struct.unpack("<I", _read_exact(f, 4, f"record {i} id_len"))
            f.seek(id_len, os.SEEK_CUR)
            (region_count,) = struct.unpack(
                "<I", _read_exact(f, 4, f"record {i} region_count")
            )
            pos = f.tell() + 4 * (region_count + region_count * feature_dim + feature_dim)
            if pos > size:
                raise CorruptionError(f"record {i} extends past end of file")
        if pos != size:
            raise CorruptionError("trailing bytes after the last record")
    return feature_dim, offsets


def read_record_at(f, feature_dim: int, offset: int) -> ImageRecord:
    """Read a single record from an open dump file at a known offset."""
    f.seek(offset)
    (id_len,) = struct.unpack("<I", _read_exact(f, 4, "id_len"))
    image_id = _read_exact(f, id_len, "image_id").decode("utf-8")
    (region_count,) = struct.unpack("<I", _read_exact(f, 4, "region_count"))
    att = np.frombuffer(_read_exact(f, 4 * region_count, "attention"), dtype="<f4")
    patches = np.frombuffer(
        _read_exact(f, 4 * region_count * feature_dim, "patch_features"), dtype="<f4"
    ).reshape(region_count, feature_dim)
    glob = np.frombuffer(_read_exact(f, 4 * feature_dim, "global_feature"), dtype="<f4")
    return ImageRecord(image_id, att, patches, glob)


def synthetic_prototypes(feature_dim: int, noise: NoiseSpec, seed: int) -> np.ndarray:
    """The clean prototype matrix a given (feature_dim, noise, seed) generates.

    Prototypes are `spread`-scaled orthonormal directions, so any two are
    exactly spread*sqrt(2) apart. Exposed so tests can compare recovered
    centroids against ground truth.
    """
    if noise.clean_cluster_count > feature_dim:
        raise ConfigError(
            f"clean_cluster_count {noise.clean_cluster_count} exceeds feature_dim "
            f"{feature_dim}; prototypes are built from orthonormal directions"
        )
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((feature_dim, noise.clean_cluster_count)))
    return noise.spread * q.T


def generate_synthetic(
    image_count: int,
    region_count: int,
    feature_dim: int,
    noise: NoiseSpec,
    seed: int,
    id_prefix: str = "img",
) -> Iterator[ImageRecord]:
    """Yield `image_count` deterministic synthetic records.

    Mirrors the statistics of detection-style corpora: each image carries a
    small random subset of the prototypes (2 to 4 "classes" for most images,
    plus a cluttered tail of about 7% carrying 6 to 12 when enough prototypes
    exist, like busy scenes), every region's clean feature is one of that
    support's prototypes plus Gaussian noise of std sigma, attention is the
    softmax of standard-normal logits (spiky, like real attention maps), and
    the global feature is the attention-weighted mean of the patch rows.

    Deterministic: a single PCG64 stream seeded with `seed` is consumed in a
    fixed order (prototype directions first, then per image: clutter draw,
    support size, support, region assignments, noise, attention logits).
    """
    if image_count < 0 or region_count < 1 or feature_dim < 1:
        raise ConfigError(
            f"invalid synthetic dimensions: images={image_count}, "
            f"regions={region_count}, dim={feature_dim}"
        )
    protos = synthetic_prototypes(feature_dim, noise, seed)
    rng = np.random.default_rng(seed)
    rng.standard_normal((feature_dim, noise.clean_cluster_count))  # skip prototype draw
    c = noise.clean_cluster_count
    for i in range(image_count):
        if c > 2:
            if c >= 8 and rng.random() < 0.07:
                size = int(rng.integers(6, min(12, c - 1) + 1))
            else:
                size = int(rng.integers(2, min(4, c - 1) + 1))
            support = rng.choice(c, size=size, replace=False)
        else:
            support = np.arange(c)
        assign = support[rng.integers(support.size, size=region_count)]
        patches = protos[assign]
        if noise.sigma > 0:
            patches = patches + noise.sigma * rng.standard_normal(
                (region_count, feature_dim)
            )
        logits = rng.standard_normal(region_count)
        raw = np.exp(logits - logits.max())
        att = raw / raw.sum()
        glob = att @ patches
        yield ImageRecord(f"{id_prefix}{i:06d}", att, patches, glob)
