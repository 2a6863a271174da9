"""Turn attention and class-activation maps into scored temporal segments."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .wstal import BG, ForwardMaps


@dataclass
class PostprocConfig:
    alpha_A: float = 0.5
    alpha_C: float = 0.005
    top_k: int = 2
    gap_tolerance: int = 1
    inflation: int = 2

    def validate(self) -> None:
        if not 0.0 <= self.alpha_A <= 1.0:
            raise ValueError(f"alpha_A must be in [0, 1], got {self.alpha_A}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.gap_tolerance < 0 or self.inflation < 0:
            raise ValueError("gap_tolerance and inflation must be >= 0")


@dataclass(frozen=True)
class SegmentPrediction:
    video_id: str
    start: int
    end: int
    class_id: int
    score: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentPrediction":
        if set(d) != {"video_id", "start", "end", "class_id", "score"}:
            raise ValueError(f"bad prediction record keys: {sorted(d)}")
        return cls(str(d["video_id"]), int(d["start"]), int(d["end"]), int(d["class_id"]), float(d["score"]))


def foreground_mask(maps: ForwardMaps, alpha_A: float) -> np.ndarray:
    # background attention equal to alpha_A is kept
    return maps.Abf[:, BG] <= alpha_A


def class_mask(maps: ForwardMaps, n: int, alpha_C: float) -> np.ndarray:
    return maps.Cbar[:, n] >= alpha_C


def group_segments(mask, gap_tolerance: int = 1) -> list[tuple[int, int]]:
    """Merge kept snippets separated by at most ``gap_tolerance`` dropped ones."""
    kept = np.flatnonzero(np.asarray(mask, dtype=bool))
    if kept.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(kept) > gap_tolerance + 1)
    starts = np.concatenate([[kept[0]], kept[breaks + 1]])
    ends = np.concatenate([kept[breaks], [kept[-1]]])
    return [(int(s), int(e)) for s, e in zip(starts, ends)]


def score_segment(maps: ForwardMaps, seg: tuple[int, int], n: int, yhat=None) -> float:
    t1, t2 = seg
    yhat = maps.yhat if yhat is None else yhat
    inner = maps.Atime[t1:t2 + 1] + maps.Cbar[t1:t2 + 1, n]
    return float(inner.sum() / (t2 - t1 + 1) + yhat[n])


def inflate(seg: tuple[int, int], inflation: int, T: int) -> tuple[int, int]:
    t1, t2 = seg
    return max(0, t1 - inflation), min(T - 1, t2 + inflation)


def top_classes(yhat: np.ndarray, k: int) -> list[int]:
    # ties go to the lower class id
    return sorted(range(len(yhat)), key=lambda n: (-yhat[n], n))[:k]


def predict_segments(maps: ForwardMaps, cfg: PostprocConfig, video_id: str = "",
                     yhat=None) -> list[SegmentPrediction]:
    yhat = maps.yhat if yhat is None else np.asarray(yhat)
    fg = foreground_mask(maps, cfg.alpha_A)
    out = []
    for n in top_classes(yhat, cfg.top_k):
        mask = fg & class_mask(maps, n, cfg.alpha_C)
        for seg in group_segments(mask, cfg.gap_tolerance):
            # scored on the un-inflated extent
            s = score_segment(maps, seg, n, yhat)
            t1, t2 = inflate(seg, cfg.inflation, maps.T)
            out.append(SegmentPrediction(video_id, t1, t2, n, s))
    return out


def write_predictions(preds, path) -> None:
    with open(path, "w") as f:
        for p in preds:
            f.write(p.to_json() + "\n")


def read_predictions(path) -> list[SegmentPrediction]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(SegmentPrediction.from_dict(json.loads(line)))
            except (ValueError, TypeError, AttributeError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return out
