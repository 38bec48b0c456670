"""Volume and label ingestion, the synthetic dataset generator, and split
management.

Volumes are [slices, rows, cols] stacks. Intensities are normalized to
[0, 1] at load (u8 divided by 255); the source dtype is remembered so a
save/load round trip is bit-exact. Voxel size metadata defaults to the
anisotropic (3, 3, 30) nm of the serial-section EM imagery this tooling is
aimed at.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import DataError, FormatError

VOL_MAGIC = b"ADNVOL01"
LAB_MAGIC = b"ADNLAB01"

DEFAULT_VOXEL_SIZE_NM = (3.0, 3.0, 30.0)

_DTYPES = {"u8": np.dtype(np.uint8), "f32": np.dtype("<f4")}


def _content_id(dims, dtype, payload):
    h = hashlib.sha256()
    h.update(json.dumps({"dims": list(dims), "dtype": dtype}).encode())
    h.update(payload)
    return h.hexdigest()[:16]


@dataclass
class Volume:
    """Voxel intensities, float32 in [0, 1] in memory."""
    data: np.ndarray
    voxel_size_nm: tuple = DEFAULT_VOXEL_SIZE_NM
    source_dtype: str = "f32"
    volume_id: str = ""

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DataError(f"volume must be 3d, got {self.data.ndim}d")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.data.setflags(write=False)
        if not self.volume_id:
            self.volume_id = _content_id(self.data.shape, self.source_dtype,
                                         self._payload())
        self.voxel_size_nm = tuple(float(v) for v in self.voxel_size_nm)

    @property
    def dims(self):
        return tuple(self.data.shape)

    def _payload(self):
        if self.source_dtype == "u8":
            return np.clip(np.rint(self.data * 255.0), 0, 255).astype(np.uint8).tobytes()
        return np.ascontiguousarray(self.data, dtype="<f4").tobytes()

    def slab(self, start, stop):
        """Sub-volume view over a slice range (shares the buffer)."""
        if not (0 <= start < stop <= self.dims[0]):
            raise DataError(f"slice range [{start}, {stop}) outside volume "
                            f"with {self.dims[0]} slices")
        return Volume(self.data[start:stop], self.voxel_size_nm,
                      self.source_dtype, f"{self.volume_id}[{start}:{stop}]")


@dataclass
class LabelVolume:
    """Binary target mask (uint8 0/1) aligned to a Volume."""
    data: np.ndarray
    volume_id: str = ""

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DataError(f"label volume must be 3d, got {self.data.ndim}d")
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        bad = np.setdiff1d(np.unique(self.data), [0, 1])
        if bad.size:
            raise FormatError(f"labels must be binary; found values {bad.tolist()}")
        self.data.setflags(write=False)

    @property
    def dims(self):
        return tuple(self.data.shape)

    def slab(self, start, stop):
        if not (0 <= start < stop <= self.dims[0]):
            raise DataError(f"slice range [{start}, {stop}) outside labels "
                            f"with {self.dims[0]} slices")
        return LabelVolume(self.data[start:stop], self.volume_id)


def save_volume(vol, path):
    payload = vol._payload()
    header = {"dims": list(vol.dims), "dtype": vol.source_dtype,
              "voxel_size_nm": list(vol.voxel_size_nm), "volume_id": vol.volume_id}
    data = container.encode(VOL_MAGIC, header, payload)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def _parse_volume_container(data, magic):
    # size is checked before the CRC so truncation reads as a size mismatch
    header, payload = container.parse(data, magic, crc_first=False)
    try:
        dims = tuple(int(d) for d in header["dims"])
        dtype = header["dtype"]
        itemsize = _DTYPES[dtype].itemsize if dtype in _DTYPES else None
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed volume header: {exc}") from exc
    if itemsize is None:
        raise FormatError(f"unknown volume dtype {dtype!r}")
    expected = dims[0] * dims[1] * dims[2] * itemsize
    if len(payload) != expected:
        raise FormatError(f"payload size mismatch: dims {dims} need {expected} "
                          f"bytes, file holds {len(payload)}")
    container.check_crc(data)
    return header, dims, dtype, payload


def load_volume(path):
    with open(path, "rb") as fh:
        data = fh.read()
    header, dims, dtype, payload = _parse_volume_container(data, VOL_MAGIC)
    raw = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(dims)
    values = raw.astype(np.float32) / 255.0 if dtype == "u8" else raw.astype(np.float32)
    return Volume(values, tuple(header.get("voxel_size_nm", DEFAULT_VOXEL_SIZE_NM)),
                  dtype, header.get("volume_id", ""))


def save_labels(labels, path):
    header = {"dims": list(labels.dims), "dtype": "u8",
              "voxel_size_nm": list(DEFAULT_VOXEL_SIZE_NM),
              "volume_id": labels.volume_id}
    data = container.encode(LAB_MAGIC, header, labels.data.tobytes())
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_labels(path, volume=None):
    with open(path, "rb") as fh:
        data = fh.read()
    header, dims, dtype, payload = _parse_volume_container(data, LAB_MAGIC)
    if dtype != "u8":
        raise FormatError(f"labels must be u8, got {dtype!r}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    labels = LabelVolume(raw, header.get("volume_id", ""))
    if volume is not None and labels.dims != volume.dims:
        raise FormatError(f"label dims {labels.dims} do not match volume dims "
                          f"{volume.dims}")
    return labels


@dataclass
class SynthConfig:
    dims: tuple = (64, 128, 128)
    blob_count: int = 20
    radius_range: tuple = (3.0, 6.0)
    noise_sigma: float = 0.05
    background: float = 0.1
    brightness_range: tuple = (0.7, 0.9)
    seed: int = 0
    max_placement_retries: int = 200


def synth_dataset(config=None, **overrides):
    """Generate a deterministic toy volume: dark noisy background with
    bright non-overlapping ellipsoidal blobs; labels mark blob voxels
    exactly. Stands in for full-scale EM data at desk scale."""
    cfg = config or SynthConfig(**overrides)
    rng = np.random.default_rng(cfg.seed)
    z, h, w = cfg.dims
    rmin, rmax = cfg.radius_range
    if cfg.blob_count > 0 and 2 * rmax >= min(cfg.dims):
        raise DataError(f"blobs of radius {rmax} cannot fit within dims {cfg.dims}")
    labels = np.zeros(cfg.dims, dtype=np.uint8)
    base = np.full(cfg.dims, cfg.background, dtype=np.float32)
    zi, yi, xi = np.ogrid[:z, :h, :w]
    for _ in range(cfg.blob_count):
        for attempt in range(cfg.max_placement_retries + 1):
            if attempt == cfg.max_placement_retries:
                raise DataError(
                    f"could not place {cfg.blob_count} non-overlapping blobs "
                    f"in dims {cfg.dims} after {cfg.max_placement_retries} retries")
            rz, ry, rx = rng.uniform(rmin, rmax, size=3)
            cz = rng.uniform(rz, z - 1 - rz)
            cy = rng.uniform(ry, h - 1 - ry)
            cx = rng.uniform(rx, w - 1 - rx)
            inside = (((zi - cz) / rz) ** 2 + ((yi - cy) / ry) ** 2
                      + ((xi - cx) / rx) ** 2) <= 1.0
            if not (labels[inside] != 0).any():
                labels[inside] = 1
                base[inside] = rng.uniform(*cfg.brightness_range)
                break
    noisy = base + rng.normal(0.0, cfg.noise_sigma, size=cfg.dims).astype(np.float32)
    volume = Volume(np.clip(noisy, 0.0, 1.0))
    return volume, LabelVolume(labels, volume.volume_id)


@dataclass
class SplitManifest:
    """Named dataset splits, each a (volume path, label path, slice range)
    triple. Ranges over the same volume file must be pairwise disjoint.
    The reference convention for real data is 75 train / 25 validation /
    100 test slices; it is recorded here as documentation, not enforced."""
    entries: dict = field(default_factory=dict)
    base_dir: str = "."

    REQUIRED = ("train", "validation", "test")

    def __post_init__(self):
        spans = {}
        for name, entry in self.entries.items():
            try:
                start, stop = entry["slices"]
                vol, lab = entry["volume"], entry["labels"]
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"malformed manifest entry {name!r}: {exc}") from exc
            if not (0 <= start < stop):
                raise DataError(f"split {name!r} has an empty or negative "
                                f"slice range [{start}, {stop})")
            spans.setdefault(vol, []).append((name, start, stop))
            del lab
        for vol, ranges in spans.items():
            ranges.sort(key=lambda r: r[1])
            for (na, a0, a1), (nb, b0, b1) in zip(ranges, ranges[1:]):
                if b0 < a1:
                    raise DataError(
                        f"splits {na!r} and {nb!r} overlap on {vol}: "
                        f"[{a0}, {a1}) vs [{b0}, {b1})")

    @classmethod
    def from_json(cls, text, base_dir="."):
        return cls(json.loads(text), base_dir)

    @classmethod
    def load_file(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read(), os.path.dirname(path) or ".")

    def to_json(self):
        return json.dumps(self.entries, sort_keys=True, indent=2) + "\n"

    def slice_range(self, name):
        return tuple(self.entries[name]["slices"])

    def load_split(self, name):
        """Materialize one split as (Volume, LabelVolume)."""
        if name not in self.entries:
            raise DataError(f"manifest has no split {name!r}; "
                            f"has {sorted(self.entries)}")
        entry = self.entries[name]
        vol = load_volume(os.path.join(self.base_dir, entry["volume"]))
        lab = load_labels(os.path.join(self.base_dir, entry["labels"]), vol)
        start, stop = entry["slices"]
        return vol.slab(start, stop), lab.slab(start, stop)
