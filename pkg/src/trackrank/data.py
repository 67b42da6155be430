"""Feature-file ingestion and synthetic tracklet datasets.

On disk a dataset is one JSON manifest plus one binary file per tracklet.
Each binary file is a 32-byte little-endian header followed by the
row-major payload::

    offset  size  field
    0       4     magic b"TRKF"
    4       2     format version (uint16, currently 1)
    6       1     dtype code (1 = float32, 2 = float64)
    7       1     rank (1..6)
    8       24    six uint32 dims; unused trailing dims are 0

A tracklet file holds (frames, D) vectors or (frames, w, h, C) maps. Any
pipeline that can write this header and a float buffer can feed real CNN
features in; see README for the manifest schema.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .sampling import Tracklet

MAGIC = b"TRKF"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sHBB6I")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {"float32": 1, "float64": 2}
ROLES = ("train", "query", "gallery")


class FormatError(ValueError):
    """A feature file or manifest is malformed or inconsistent."""


# tensor files

def write_tensor(path, array: np.ndarray, dtype: str = "float64") -> None:
    if dtype not in _CODES:
        raise ValueError(f"dtype must be one of {sorted(_CODES)}, got {dtype!r}")
    code = _CODES[dtype]
    arr = np.ascontiguousarray(array, dtype=_DTYPES[code])
    if not 1 <= arr.ndim <= 6:
        raise ValueError(f"tensor rank must be 1..6, got {arr.ndim}")
    dims = list(arr.shape) + [0] * (6 - arr.ndim)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, code, arr.ndim, *dims))
        fh.write(arr.tobytes(order="C"))


def read_header(raw: bytes, path="<bytes>") -> tuple[np.dtype, tuple[int, ...]]:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file is {len(raw)} bytes, shorter than the "
                          f"{_HEADER.size}-byte header")
    magic, version, code, rank, *dims = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        pos = next(i for i in range(4) if magic[i] != MAGIC[i])
        raise FormatError(f"{path}: bad magic at byte {pos}: expected {MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version} at byte 4")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code} at byte 6")
    if not 1 <= rank <= 6:
        raise FormatError(f"{path}: invalid rank {rank} at byte 7")
    shape = tuple(dims[:rank])
    if any(d == 0 for d in shape) or any(d != 0 for d in dims[rank:]):
        raise FormatError(f"{path}: invalid dims {dims} for rank {rank}")
    return _DTYPES[code], shape


def read_tensor(path, mmap: bool = False) -> np.ndarray:
    """Load a TRKF file; eager loads return float64, memory maps keep the stored dtype."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    dtype, shape = read_header(head, path)
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = path.stat().st_size - _HEADER.size
    if actual != expected:
        raise FormatError(f"{path}: payload is {actual} bytes, header {shape} {dtype} "
                          f"implies {expected}")
    if mmap:
        return np.memmap(path, dtype=dtype, mode="r", offset=_HEADER.size, shape=shape)
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        arr = np.frombuffer(fh.read(), dtype=dtype).reshape(shape)
    return arr.astype(np.float64)


# datasets

@dataclass
class Dataset:
    """Tracklets sharing one per-frame feature shape."""

    tracklets: list[Tracklet]
    feature_shape: tuple[int, ...]
    identity_map: dict[int, int] = field(default_factory=dict)  # original -> contiguous

    def __iter__(self) -> Iterator[Tracklet]:
        return iter(self.tracklets)

    def __len__(self) -> int:
        return len(self.tracklets)

    def __getitem__(self, i) -> Tracklet:
        return self.tracklets[i]

    @property
    def num_identities(self) -> int:
        return len({t.identity for t in self.tracklets})

    @property
    def total_frames(self) -> int:
        return sum(t.length for t in self.tracklets)

    def with_role(self, *roles: str) -> list[Tracklet]:
        return [t for t in self.tracklets if t.role in roles]


def _layout(feature_shape: Sequence[int]) -> dict:
    shape = [int(s) for s in feature_shape]
    return {"kind": "vector" if len(shape) == 1 else "map", "shape": shape}


def write_dataset(dataset: Dataset, directory, name: str = "manifest.json",
                  dtype: str = "float32", prefix: str | None = None) -> Path:
    """Write feature files under ``directory/features`` and a manifest; returns its path."""
    directory = Path(directory)
    feat_dir = directory / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    prefix = prefix if prefix is not None else Path(name).stem
    entries = []
    for i, tr in enumerate(dataset.tracklets):
        rel = Path("features") / f"{prefix}_{i:06d}.trkf"
        write_tensor(directory / rel, tr.frames, dtype)
        entries.append({"identity": int(tr.identity), "camera": int(tr.camera),
                        "path": rel.as_posix(), "frames": int(tr.length), "role": tr.role})
    manifest = {"version": MANIFEST_VERSION, "layout": _layout(dataset.feature_shape),
                "dtype": dtype, "tracklets": entries}
    path = directory / name
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_dataset(manifest_path, mmap: bool = False) -> Dataset:
    """Read a manifest and its feature files.

    Identities are re-indexed to 0..n-1 in sorted order of the original ids;
    the mapping is kept on ``Dataset.identity_map``.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{manifest_path}: unsupported manifest version {doc.get('version')!r}")
    layout = doc.get("layout", {})
    if layout.get("kind") not in ("vector", "map"):
        raise FormatError(f"{manifest_path}: layout kind must be 'vector' or 'map'")
    feature_shape = tuple(int(s) for s in layout.get("shape", ()))
    if len(feature_shape) != (1 if layout["kind"] == "vector" else 3):
        raise FormatError(f"{manifest_path}: layout shape {list(feature_shape)} does not fit "
                          f"kind {layout['kind']!r}")
    entries = doc.get("tracklets", [])
    originals = sorted({int(e["identity"]) for e in entries})
    identity_map = {orig: i for i, orig in enumerate(originals)}
    tracklets = []
    for n, e in enumerate(entries):
        path = manifest_path.parent / e["path"]
        frames = read_tensor(path, mmap=mmap)
        expected = (int(e["frames"]),) + feature_shape
        if frames.shape != expected:
            raise FormatError(f"tracklet {n} ({e['path']}): expected shape {expected}, "
                              f"found {frames.shape}")
        role = e.get("role", "train")
        if role not in ROLES:
            raise FormatError(f"tracklet {n}: unknown role {role!r}")
        tracklets.append(Tracklet(identity_map[int(e["identity"])], int(e["camera"]),
                                  frames, role))
    return Dataset(tracklets, feature_shape, identity_map)


# synthetic data

@dataclass(frozen=True)
class SynthConfig:
    """Gaussian identity clusters with per-frame noise and linear drift.

    ``num_identities`` is split evenly into train and test identities.
    ``drift_rate`` is the per-frame, per-dimension drift step (defaults to
    0.05 * sigma_within). ``camera_shift`` is the per-dimension std of a
    per-camera offset added to every frame seen by that camera.
    """

    num_identities: int = 64
    tracklets_per_identity: int = 4
    frames_per_tracklet: int = 16
    length_jitter: int = 0
    feature_dim: int = 64
    map_shape: tuple[int, int, int] | None = None
    sigma_within: float = 0.1
    sigma_between: float = 1.0
    drift_rate: float | None = None
    num_cameras: int = 2
    camera_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_within < 0:
            raise ValueError(f"sigma_within must be >= 0, got {self.sigma_within}")
        if not self.sigma_between > 0:
            raise ValueError(f"sigma_between must be > 0, got {self.sigma_between}")
        if self.num_identities < 2:
            raise ValueError(f"num_identities must be >= 2, got {self.num_identities}")
        if self.tracklets_per_identity < 1 or self.frames_per_tracklet < 1:
            raise ValueError("tracklets_per_identity and frames_per_tracklet must be >= 1")
        if not 0 <= self.length_jitter < self.frames_per_tracklet:
            raise ValueError("length_jitter must lie in [0, frames_per_tracklet)")
        if self.camera_shift < 0:
            raise ValueError(f"camera_shift must be >= 0, got {self.camera_shift}")
        if self.map_shape is not None and len(self.map_shape) != 3:
            raise ValueError(f"map_shape must be (w, h, C), got {self.map_shape}")

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.map_shape) if self.map_shape else (self.feature_dim,)

    @property
    def effective_drift(self) -> float:
        return 0.05 * self.sigma_within if self.drift_rate is None else self.drift_rate

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["map_shape"] is not None:
            d["map_shape"] = list(d["map_shape"])
        return d


def generate_synthetic(config: SynthConfig, evaluation: bool = True) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) datasets; test tracklets carry query/gallery roles.

    The first tracklet of every test identity is its query; the rest form the
    gallery. Tracklet j of an identity is seen by camera j mod num_cameras.
    """
    if evaluation and (config.num_cameras < 2 or config.tracklets_per_identity < 2):
        raise ValueError("an evaluation split needs >= 2 cameras and >= 2 tracklets per "
                         "identity so every query has a cross-camera match")
    rng = np.random.default_rng(config.seed)
    shape = config.feature_shape
    dim = int(np.prod(shape))
    centroids = rng.normal(0.0, config.sigma_between, size=(config.num_identities, dim))
    cam_offsets = rng.normal(0.0, 1.0, size=(config.num_cameras, dim)) * config.camera_shift
    n_train = config.num_identities // 2
    drift = config.effective_drift
    train, test = [], []
    for ident in range(config.num_identities):
        for j in range(config.tracklets_per_identity):
            jitter = config.length_jitter
            length = config.frames_per_tracklet + (
                int(rng.integers(-jitter, jitter + 1)) if jitter else 0)
            camera = j % config.num_cameras
            direction = rng.normal(0.0, 1.0, size=dim)
            noise = rng.normal(0.0, 1.0, size=(length, dim)) * config.sigma_within
            steps = np.arange(length)[:, None] * drift * direction[None, :]
            frames = centroids[ident] + cam_offsets[camera] + steps + noise
            frames = frames.reshape((length,) + shape)
            if ident < n_train:
                train.append(Tracklet(ident, camera, frames, "train"))
            else:
                role = "query" if j == 0 else "gallery"
                test.append(Tracklet(ident - n_train, camera, frames, role))
    n_test = config.num_identities - n_train
    return (Dataset(train, shape, {i: i for i in range(n_train)}),
            Dataset(test, shape, {i: i for i in range(n_test)}))
