"""Domain types, windowing, resampling, normalization and the on-disk dataset container.

Episodes keep their modalities as contiguous arrays (images, pressure maps,
wrenches, timestamps); the per-frame record types are views built on demand.
The container is one JSON manifest plus one little-endian binary blob per
episode, arrays concatenated in the order declared by the manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TACTILE_HZ = 30.0
FRAME_DT = 1.0 / TACTILE_HZ
GRID = 12
IMAGE_SIZE = 32
FORMAT_VERSION = 1
STD_FLOOR = 1e-8


class DatasetFormatError(ValueError):
    """Raised when a stored dataset does not match its manifest or reader."""


class ExtrapolationError(ValueError):
    pass


@dataclass(frozen=True)
class Wrench:
    f: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        vec = self.as_array()
        if vec.shape != (6,) or not np.all(np.isfinite(vec)):
            raise ValueError("wrench must hold six finite values")

    def as_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.f, dtype=np.float64).ravel(),
                               np.asarray(self.t, dtype=np.float64).ravel()])

    @classmethod
    def from_array(cls, vec) -> "Wrench":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(f=vec[:3].copy(), t=vec[3:6].copy())


@dataclass(frozen=True)
class PressureMap:
    p: np.ndarray
    taxel_area: float

    def __post_init__(self):
        if self.p.shape != (GRID, GRID):
            raise ValueError(f"pressure map must be {GRID}x{GRID}, got {self.p.shape}")
        if not np.all(np.isfinite(self.p)) or np.any(self.p < 0):
            raise ValueError("pressure entries must be finite and non-negative")


@dataclass(frozen=True)
class TactileImage:
    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError("tactile image must be a single-channel 2-D grid")
        if np.any(self.pixels < 0) or np.any(self.pixels > 1):
            raise ValueError("tactile image values must lie in [0, 1]")


@dataclass(frozen=True)
class SyncedFrame:
    t: float
    image: TactileImage
    pmap: PressureMap
    wrench: Wrench
    sensor_id: str


@dataclass
class Episode:
    """One contiguous recording at the tactile frame rate.

    ``extras`` carries additional per-frame arrays (e.g. demonstration
    actions); each must have the frame count as its leading dimension.
    """

    images: np.ndarray  # (T, H, W) float32
    pmaps: np.ndarray  # (T, 12, 12) float32
    wrenches: np.ndarray  # (T, 6) float64
    timestamps: np.ndarray  # (T,) float64
    sensor_id: str
    indenter_id: str
    seed: int
    taxel_area: float = (20e-3 / GRID) ** 2
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.pmaps = np.ascontiguousarray(self.pmaps, dtype=np.float32)
        self.wrenches = np.ascontiguousarray(self.wrenches, dtype=np.float64)
        self.timestamps = np.ascontiguousarray(self.timestamps, dtype=np.float64)
        n = len(self.timestamps)
        for name, arr in [("images", self.images), ("pmaps", self.pmaps),
                          ("wrenches", self.wrenches), *self.extras.items()]:
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} frames, expected {n}")
        if self.pmaps.shape[1:] != (GRID, GRID) or self.wrenches.shape[1:] != (6,):
            raise ValueError("pmaps must be (T, 12, 12) and wrenches (T, 6)")
        if n > 1 and np.max(np.abs(np.diff(self.timestamps) - FRAME_DT)) > 1e-9:
            raise ValueError("frames must be spaced 1/30 s apart (strictly increasing)")

    def __len__(self) -> int:
        return len(self.timestamps)

    def frame(self, i: int) -> SyncedFrame:
        return SyncedFrame(
            t=float(self.timestamps[i]),
            image=TactileImage(self.images[i]),
            pmap=PressureMap(self.pmaps[i], self.taxel_area),
            wrench=Wrench.from_array(self.wrenches[i]),
            sensor_id=self.sensor_id,
        )

    @property
    def frames(self) -> list[SyncedFrame]:
        return [self.frame(i) for i in range(len(self))]

    def replace(self, **changes) -> "Episode":
        kw = dict(images=self.images, pmaps=self.pmaps, wrenches=self.wrenches,
                  timestamps=self.timestamps, sensor_id=self.sensor_id,
                  indenter_id=self.indenter_id, seed=self.seed,
                  taxel_area=self.taxel_area, extras=dict(self.extras))
        kw.update(changes)
        return Episode(**kw)


@dataclass(frozen=True)
class WindowSample:
    """N consecutive frames of one episode, addressed by start index."""

    episode: Episode
    start: int
    n: int

    def __post_init__(self):
        if self.start < 0 or self.start + self.n > len(self.episode):
            raise IndexError("window does not fit inside the episode")

    @property
    def images(self) -> np.ndarray:
        return self.episode.images[self.start:self.start + self.n]

    @property
    def pmaps(self) -> np.ndarray:
        return self.episode.pmaps[self.start:self.start + self.n]

    @property
    def wrenches(self) -> np.ndarray:
        return self.episode.wrenches[self.start:self.start + self.n]

    @property
    def timestamps(self) -> np.ndarray:
        return self.episode.timestamps[self.start:self.start + self.n]

    @property
    def frames(self) -> list[SyncedFrame]:
        return [self.episode.frame(i) for i in range(self.start, self.start + self.n)]


@dataclass
class WindowBatch:
    """Stacked windows, the array form the learners consume."""

    images: np.ndarray  # (M, N, H, W)
    pmaps: np.ndarray  # (M, N, 12, 12)
    wrenches: np.ndarray  # (M, N, 6)
    episode_index: np.ndarray  # (M,)
    start: np.ndarray  # (M,)
    sensor_ids: np.ndarray  # (M,) object

    def __len__(self) -> int:
        return len(self.images)

    def take(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        return WindowBatch(self.images[idx], self.pmaps[idx], self.wrenches[idx],
                           self.episode_index[idx], self.start[idx], self.sensor_ids[idx])


@dataclass
class Normalization:
    """Z-score statistics per modality; std floored at ``STD_FLOOR``."""

    wrench_mean: np.ndarray
    wrench_std: np.ndarray
    pmap_mean: float
    pmap_std: float
    image_mean: float
    image_std: float

    def normalize_wrench(self, w):
        return (w - self.wrench_mean) / self.wrench_std

    def denormalize_wrench(self, w):
        return w * self.wrench_std + self.wrench_mean

    def normalize_pmap(self, p):
        return (p - self.pmap_mean) / self.pmap_std

    def denormalize_pmap(self, p):
        return p * self.pmap_std + self.pmap_mean

    def normalize_image(self, x):
        return (x - self.image_mean) / self.image_std

    def denormalize_image(self, x):
        return x * self.image_std + self.image_mean

    def to_dict(self) -> dict:
        return {
            "wrench_mean": [float(v) for v in self.wrench_mean],
            "wrench_std": [float(v) for v in self.wrench_std],
            "pmap_mean": float(self.pmap_mean), "pmap_std": float(self.pmap_std),
            "image_mean": float(self.image_mean), "image_std": float(self.image_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(np.asarray(d["wrench_mean"], dtype=np.float64),
                   np.asarray(d["wrench_std"], dtype=np.float64),
                   float(d["pmap_mean"]), float(d["pmap_std"]),
                   float(d["image_mean"]), float(d["image_std"]))


@dataclass
class EpisodeEntry:
    path: str
    frame_count: int
    sensor_id: str
    indenter_id: str
    seed: int


@dataclass
class DatasetManifest:
    episodes: list[EpisodeEntry]
    force_hz: float
    tactile_hz: float = TACTILE_HZ
    format_version: int = FORMAT_VERSION
    normalization: Normalization | None = None
    arrays: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "rates": {"tactile_hz": self.tactile_hz, "force_hz": self.force_hz},
            "arrays": self.arrays,
            "normalization": None if self.normalization is None else self.normalization.to_dict(),
            "episodes": [vars(e) for e in self.episodes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        norm = d.get("normalization")
        return cls(
            episodes=[EpisodeEntry(**e) for e in d["episodes"]],
            force_hz=float(d["rates"]["force_hz"]),
            tactile_hz=float(d["rates"]["tactile_hz"]),
            format_version=int(d["format_version"]),
            normalization=None if norm is None else Normalization.from_dict(norm),
            arrays=list(d.get("arrays", [])),
        )


def resample_to_tactile_rate(raw_t, raw_values, tactile_timestamps) -> np.ndarray:
    """Linearly interpolate a fast signal onto the tactile timestamps.

    ``raw_values`` may carry any trailing shape; interpolation runs over the
    leading (time) axis.
    """
    raw_t = np.asarray(raw_t, dtype=np.float64)
    values = np.asarray(raw_values, dtype=np.float64)
    query = np.asarray(tactile_timestamps, dtype=np.float64)
    if raw_t.size == 0:
        raise ValueError("empty raw signal")
    if values.shape[0] != raw_t.shape[0]:
        raise ValueError("raw timestamps and values differ in length")
    if raw_t.size > 1 and np.any(np.diff(raw_t) <= 0):
        raise ValueError("raw timestamps must be strictly increasing")
    if query.size and (query.min() < raw_t[0] or query.max() > raw_t[-1]):
        raise ExtrapolationError(
            f"tactile timestamps span [{query.min()}, {query.max()}] outside raw "
            f"range [{raw_t[0]}, {raw_t[-1]}]")
    flat = values.reshape(len(raw_t), -1)
    if raw_t.size == 1:
        out = np.repeat(flat, len(query), axis=0)
        return out.reshape((len(query),) + values.shape[1:])
    hi = np.clip(np.searchsorted(raw_t, query, side="right"), 1, len(raw_t) - 1)
    lo = hi - 1
    w = (query - raw_t[lo]) / (raw_t[hi] - raw_t[lo])
    out = flat[lo] + w[:, None] * (flat[hi] - flat[lo])
    return out.reshape((len(query),) + values.shape[1:])


def make_windows(episode: Episode, n: int, stride: int = 1) -> list[WindowSample]:
    if n < 1 or stride < 1:
        raise ValueError("window length and stride must be >= 1")
    return [WindowSample(episode, s, n) for s in range(0, len(episode) - n + 1, stride)]


def stack_windows(episodes: Sequence[Episode], n: int, stride: int = 1) -> WindowBatch:
    """All windows of ``episodes`` stacked into arrays."""
    imgs, pms, wrs, epi, starts, sids = [], [], [], [], [], []
    for k, ep in enumerate(episodes):
        s = np.arange(0, len(ep) - n + 1, stride)
        if len(s) == 0:
            continue
        idx = s[:, None] + np.arange(n)[None, :]
        imgs.append(ep.images[idx])
        pms.append(ep.pmaps[idx])
        wrs.append(ep.wrenches[idx])
        epi.append(np.full(len(s), k))
        starts.append(s)
        sids.append(np.full(len(s), ep.sensor_id, dtype=object))
    if not imgs:
        raise ValueError(f"no episode is long enough for windows of length {n}")
    return WindowBatch(np.concatenate(imgs), np.concatenate(pms), np.concatenate(wrs),
                       np.concatenate(epi), np.concatenate(starts), np.concatenate(sids))


def compute_normalization(episodes: Sequence[Episode]) -> Normalization:
    if not episodes:
        raise ValueError("cannot compute statistics of an empty dataset")
    w = np.concatenate([ep.wrenches for ep in episodes]).astype(np.float64)
    p = np.concatenate([ep.pmaps.ravel() for ep in episodes]).astype(np.float64)
    x = np.concatenate([ep.images.ravel() for ep in episodes]).astype(np.float64)
    return Normalization(
        wrench_mean=w.mean(axis=0), wrench_std=np.maximum(w.std(axis=0), STD_FLOOR),
        pmap_mean=float(p.mean()), pmap_std=max(float(p.std()), STD_FLOOR),
        image_mean=float(x.mean()), image_std=max(float(x.std()), STD_FLOOR),
    )


def split_episodes(episodes: Sequence[Episode], val_fraction: float = 0.1, seed: int = 0):
    """Seeded split by episode (never by window)."""
    n = len(episodes)
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [episodes[i] for i in train], [episodes[i] for i in val]


_BASE_ARRAYS = [
    ("images", "<f4"),
    ("pmaps", "<f4"),
    ("wrenches", "<f8"),
    ("timestamps", "<f8"),
]


def _array_layout(ep: Episode) -> list[dict]:
    layout = []
    for name, dtype in _BASE_ARRAYS:
        layout.append({"name": name, "dtype": dtype,
                       "frame_shape": list(getattr(ep, name).shape[1:])})
    for name, arr in sorted(ep.extras.items()):
        layout.append({"name": name, "dtype": "<f4", "frame_shape": list(arr.shape[1:])})
    return layout


def save_dataset(manifest: DatasetManifest, episodes: Sequence[Episode], path) -> DatasetManifest:
    """Write ``episodes`` under directory ``path``; returns the manifest as written.

    Every episode must share one array layout (the first episode's).
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layout = _array_layout(episodes[0]) if episodes else []
    entries = []
    for k, ep in enumerate(episodes):
        if _array_layout(ep) != layout:
            raise DatasetFormatError(f"episode {k} does not share the dataset array layout")
        name = f"episode_{k:05d}.bin"
        with open(root / name, "wb") as fh:
            for spec in layout:
                arr = ep.extras[spec["name"]] if spec["name"] in ep.extras else getattr(ep, spec["name"])
                fh.write(np.ascontiguousarray(arr, dtype=spec["dtype"]).tobytes(order="C"))
        entries.append(EpisodeEntry(name, len(ep), ep.sensor_id, ep.indenter_id, int(ep.seed)))
    written = DatasetManifest(episodes=entries, force_hz=manifest.force_hz,
                              tactile_hz=manifest.tactile_hz,
                              format_version=manifest.format_version,
                              normalization=manifest.normalization, arrays=layout)
    (root / "manifest.json").write_text(json.dumps(written.to_dict(), indent=2))
    return written


def load_dataset(path) -> tuple[DatasetManifest, list[Episode]]:
    root = Path(path)
    manifest = DatasetManifest.from_dict(json.loads((root / "manifest.json").read_text()))
    if manifest.format_version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"dataset format_version {manifest.format_version} does not match reader "
            f"version {FORMAT_VERSION}")
    episodes = []
    for entry in manifest.episodes:
        raw = (root / entry.path).read_bytes()
        n = entry.frame_count
        expected = sum(int(np.prod(s["frame_shape"], dtype=np.int64)) * n * np.dtype(s["dtype"]).itemsize
                       for s in manifest.arrays)
        if len(raw) != expected:
            raise DatasetFormatError(
                f"{entry.path}: blob holds {len(raw)} bytes but manifest frame count {n} "
                f"requires {expected} (shape mismatch)")
        arrays, offset = {}, 0
        for s in manifest.arrays:
            shape = (n, *s["frame_shape"])
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(raw, dtype=s["dtype"], count=count, offset=offset).reshape(shape)
            offset += count * np.dtype(s["dtype"]).itemsize
            arrays[s["name"]] = arr.copy()
        base = {name for name, _ in _BASE_ARRAYS}
        ep = Episode(
            images=arrays["images"], pmaps=arrays["pmaps"], wrenches=arrays["wrenches"],
            timestamps=arrays["timestamps"], sensor_id=entry.sensor_id,
            indenter_id=entry.indenter_id, seed=entry.seed,
            extras={k: v for k, v in arrays.items() if k not in base},
        )
        episodes.append(ep)
    return manifest, episodes
