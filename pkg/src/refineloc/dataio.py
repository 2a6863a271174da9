"""Dataset manifest, feature files, synthetic data and splits.

On disk a dataset is a directory holding ``manifest.json`` and one raw
little-endian float32 file per video (row-major ``T x D``, no header).
Segments are inclusive snippet-index intervals.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


class FeatureFormatError(ValueError):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any sequence of ints/strings."""
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


@dataclass(frozen=True)
class GroundTruthSegment:
    start: int
    end: int
    class_id: int

    def __post_init__(self):
        if self.start > self.end:
            raise ManifestError(f"segment start {self.start} > end {self.end}")


@dataclass
class VideoRecord:
    id: str
    T: int
    y: np.ndarray
    gt_segments: list[GroundTruthSegment]
    feature_path: str
    D: int

    def foreground_mask(self) -> np.ndarray:
        mask = np.zeros(self.T, dtype=bool)
        for seg in self.gt_segments:
            mask[seg.start:seg.end + 1] = True
        return mask


@dataclass
class DatasetManifest:
    name: str
    N: int
    D: int
    class_names: list[str]
    videos: list[VideoRecord]
    split: dict[str, str] = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        self._by_id = {v.id: v for v in self.videos}

    def video(self, vid: str) -> VideoRecord:
        return self._by_id[vid]

    def ids(self, split: str | None = None) -> list[str]:
        """Video ids (sorted) in ``split``, or all of them."""
        if split is None:
            return sorted(self._by_id)
        return sorted(v for v, s in self.split.items() if s == split)

    def feature_file(self, rec: VideoRecord) -> Path:
        return (self.root or Path(".")) / rec.feature_path

    def validate(self, check_files: bool = True) -> None:
        if len(self._by_id) != len(self.videos):
            seen = set()
            for v in self.videos:
                if v.id in seen:
                    raise ManifestError(f"duplicate video id {v.id!r}")
                seen.add(v.id)
        if len(self.class_names) != self.N:
            raise ManifestError(f"class_names has {len(self.class_names)} entries, N={self.N}")
        for v in self.videos:
            if v.T < 1:
                raise ManifestError(f"video {v.id!r}: T must be >= 1, got {v.T}")
            if v.y.shape != (self.N,):
                raise ManifestError(f"video {v.id!r}: label has length {v.y.size}, expected {self.N}")
            if np.any(v.y < 0) or abs(float(v.y.sum()) - 1.0) > 1e-6:
                raise ManifestError(f"video {v.id!r}: label must be a probability vector")
            for seg in v.gt_segments:
                if not (0 <= seg.start <= seg.end <= v.T - 1):
                    raise ManifestError(
                        f"video {v.id!r}: segment ({seg.start}, {seg.end}) outside [0, {v.T - 1}]")
                if not 0 <= seg.class_id < self.N:
                    raise ManifestError(f"video {v.id!r}: class_id {seg.class_id} out of range")
            if check_files:
                path = self.feature_file(v)
                if not path.exists():
                    raise ManifestError(f"video {v.id!r}: feature file {path} missing")
                expected = 4 * v.T * self.D
                actual = path.stat().st_size
                if actual != expected:
                    raise ManifestError(
                        f"video {v.id!r}: feature file has {actual} bytes, expected {expected}")
        for vid, s in self.split.items():
            if vid not in self._by_id:
                raise ManifestError(f"split names unknown video {vid!r}")
            if s not in SPLITS:
                raise ManifestError(f"video {vid!r}: unknown split {s!r}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "N": self.N,
            "D": self.D,
            "class_names": list(self.class_names),
            "videos": [
                {
                    "id": v.id,
                    "T": v.T,
                    "y": [float(x) for x in v.y],
                    "gt_segments": [
                        {"start": s.start, "end": s.end, "class_id": s.class_id} for s in v.gt_segments
                    ],
                    "feature_path": v.feature_path,
                }
                for v in self.videos
            ],
            "split": {k: self.split[k] for k in sorted(self.split)},
        }


_MANIFEST_KEYS = {"name", "N", "D", "class_names", "videos", "split"}
_VIDEO_KEYS = {"id", "T", "y", "gt_segments", "feature_path"}
_SEG_KEYS = {"start", "end", "class_id"}


def _check_keys(obj, expected: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: expected an object")
    if set(obj) != expected:
        extra = sorted(set(obj) - expected)
        missing = sorted(expected - set(obj))
        raise ManifestError(f"{where}: unexpected keys {extra}, missing keys {missing}")


def manifest_from_json(doc: dict, root: Path | None = None) -> DatasetManifest:
    _check_keys(doc, _MANIFEST_KEYS, "manifest")
    videos = []
    for i, v in enumerate(doc["videos"]):
        where = f"videos[{i}]" + (f" ({v.get('id')!r})" if isinstance(v, dict) else "")
        _check_keys(v, _VIDEO_KEYS, where)
        segs = []
        for j, s in enumerate(v["gt_segments"]):
            _check_keys(s, _SEG_KEYS, f"{where}.gt_segments[{j}]")
            try:
                segs.append(GroundTruthSegment(int(s["start"]), int(s["end"]), int(s["class_id"])))
            except ManifestError as e:
                raise ManifestError(f"video {v['id']!r}: {e}") from None
        videos.append(VideoRecord(
            id=str(v["id"]), T=int(v["T"]), y=np.asarray(v["y"], dtype=np.float64),
            gt_segments=segs, feature_path=str(v["feature_path"]), D=int(doc["D"]),
        ))
    return DatasetManifest(
        name=doc["name"], N=int(doc["N"]), D=int(doc["D"]), class_names=list(doc["class_names"]),
        videos=videos, split=dict(doc["split"]), root=root,
    )


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    with open(path) as f:
        doc = json.load(f)
    m = manifest_from_json(doc, root=path.parent)
    m.validate(check_files=check_files)
    return m


def save_manifest(m: DatasetManifest, path) -> None:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    with open(path, "w") as f:
        json.dump(m.to_json(), f, indent=1)
        f.write("\n")


# --- features -------------------------------------------------------------

def write_features(path, F: np.ndarray) -> None:
    np.ascontiguousarray(F, dtype="<f4").tofile(path)


def read_feature_file(path, T: int, D: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    expected = 4 * T * D
    if len(raw) != expected:
        raise FeatureFormatError(f"{path}: expected {expected} bytes (T={T}, D={D}), got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(T, D).astype(np.float64)


def load_features(record: VideoRecord, root=None) -> np.ndarray:
    path = Path(root) / record.feature_path if root is not None else Path(record.feature_path)
    return read_feature_file(path, record.T, record.D)


def load_all_features(m: DatasetManifest, ids=None) -> dict[str, np.ndarray]:
    ids = m.ids() if ids is None else ids
    return {vid: load_features(m.video(vid), m.root) for vid in ids}


# --- splitting ------------------------------------------------------------

def _check_fractions(val_fraction: float, test_fraction: float) -> None:
    if not (0 <= val_fraction < 1 and 0 <= test_fraction < 1 and val_fraction + test_fraction < 1):
        raise ValueError(f"invalid split fractions val={val_fraction}, test={test_fraction}")


def split_dataset(m: DatasetManifest, val_fraction: float, test_fraction: float,
                  seed: int) -> DatasetManifest:
    """Assign every video to train/val/test. Counts use floor for test and val."""
    _check_fractions(val_fraction, test_fraction)
    ids = m.ids()
    n = len(ids)
    # tiny slack so e.g. 300 * (50/300) floors to 50
    n_test = math.floor(n * test_fraction + 1e-9)
    n_val = math.floor(n * val_fraction + 1e-9)
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(n)
    split = {}
    for rank, idx in enumerate(order):
        split[ids[idx]] = "test" if rank < n_test else "val" if rank < n_test + n_val else "train"
    m.split = split
    return m


# --- synthetic data -------------------------------------------------------

@dataclass
class SyntheticConfig:
    N: int = 5
    D: int = 32
    video_count: int = 300
    T_range: tuple[int, int] = (40, 80)
    segments_per_video_range: tuple[int, int] = (1, 3)
    segment_len_range: tuple[int, int] = (5, 15)
    noise_sigma: float = 1.0
    prototype_scale: float = 1.0
    seed: int = 0
    val_fraction: float = 1 / 6
    test_fraction: float = 1 / 6
    name: str = "synthetic"

    def __post_init__(self):
        self.T_range = tuple(self.T_range)
        self.segments_per_video_range = tuple(self.segments_per_video_range)
        self.segment_len_range = tuple(self.segment_len_range)
        for label, (lo, hi) in (("T_range", self.T_range),
                                ("segments_per_video_range", self.segments_per_video_range),
                                ("segment_len_range", self.segment_len_range)):
            if lo > hi or lo < 0:
                raise ValueError(f"{label} must be a nonempty range, got ({lo}, {hi})")
        if self.T_range[0] < 1 or self.segment_len_range[0] < 1:
            raise ValueError("T and segment lengths must be >= 1")
        if self.N < 1 or self.D < 1 or self.video_count < 0:
            raise ValueError("N, D must be >= 1 and video_count >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        _check_fractions(self.val_fraction, self.test_fraction)


def sample_prototypes(cfg: SyntheticConfig) -> np.ndarray:
    """(N+1) x D prototypes; the last row is background."""
    rng = np.random.default_rng(derive_seed(cfg.seed, "prototypes"))
    return cfg.prototype_scale * rng.standard_normal((cfg.N + 1, cfg.D))


def _plant(rng: np.random.Generator, cfg: SyntheticConfig):
    for _ in range(100):
        T = int(rng.integers(cfg.T_range[0], cfg.T_range[1] + 1))
        k = int(rng.integers(cfg.segments_per_video_range[0], cfg.segments_per_video_range[1] + 1))
        lens = rng.integers(cfg.segment_len_range[0], cfg.segment_len_range[1] + 1, size=k)
        # planted segments are separated by at least one background snippet
        free = T - int(lens.sum()) - max(k - 1, 0)
        if free < 0:
            continue
        # split the free snippets into k+1 gaps (stars and bars)
        cuts = np.sort(rng.integers(0, free + 1, size=k))
        gaps = np.diff(np.concatenate([[0], cuts, [free]]))
        spans, t = [], int(gaps[0])
        for i in range(k):
            spans.append((t, t + int(lens[i]) - 1))
            t += int(lens[i]) + 1 + int(gaps[i + 1])
        return T, spans
    raise ValueError("could not plant segments: segment lengths do not fit in T_range after 100 attempts")


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> DatasetManifest:
    """Write a synthetic dataset to ``out_dir`` and return its manifest.

    Each video has one class ``c``; snippets inside planted segments are the
    class-``c`` prototype plus isotropic noise, every other snippet is the
    background prototype plus noise. The weak label is one-hot(c).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    protos = sample_prototypes(cfg)
    rng = np.random.default_rng(derive_seed(cfg.seed, "videos"))
    width = max(4, len(str(max(cfg.video_count - 1, 0))))
    videos = []
    if cfg.video_count:
        (out_dir / "features").mkdir(exist_ok=True)
    for i in range(cfg.video_count):
        vid = f"video_{i:0{width}d}"
        T, spans = _plant(rng, cfg)
        c = int(rng.integers(cfg.N))
        labels = np.full(T, cfg.N)
        for s, e in spans:
            labels[s:e + 1] = c
        F = protos[labels] + cfg.noise_sigma * rng.standard_normal((T, cfg.D))
        rel = f"features/{vid}.f32"
        write_features(out_dir / rel, F)
        y = np.zeros(cfg.N)
        y[c] = 1.0
        videos.append(VideoRecord(vid, T, y, [GroundTruthSegment(s, e, c) for s, e in spans], rel, cfg.D))
    m = DatasetManifest(cfg.name, cfg.N, cfg.D, [f"class_{n}" for n in range(cfg.N)], videos, root=out_dir)
    split_dataset(m, cfg.val_fraction, cfg.test_fraction, cfg.seed)
    save_manifest(m, out_dir / MANIFEST_NAME)
    return m


def foreground_fraction(m: DatasetManifest, ids=None) -> float:
    ids = m.ids() if ids is None else ids
    fg = sum(int(m.video(v).foreground_mask().sum()) for v in ids)
    total = sum(m.video(v).T for v in ids)
    return fg / total if total else 0.0
