"""Lip landmark metrics: LSE-D and TMDC.

LSE-D is the temporal mean of the per-frame mean Euclidean distance between
corresponding landmarks (lower is better). TMDC averages the Pearson
correlations of five mouth-shape series between a real and a generated
sequence (higher is better).
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

N_LANDMARKS = 26
EPS = 1e-8
FEATURE_NAMES = ("width", "height", "area", "aspect_ratio", "openness")

# Indices into the 26-point layout produced by synthcorpus.render_landmarks:
# points run counter-clockwise from the right corner with the anchors at the
# ellipse extrema.
DEFAULT_ANCHORS = {"right": 0, "top": 7, "left": 13, "bottom": 20}


class LandmarkError(ValueError):
    """Malformed landmark data; carries the offending frame when known."""

    def __init__(self, msg, frame=None, source=None):
        where = "".join([f" in {source}" if source else "", f" at frame {frame}" if frame is not None else ""])
        super().__init__(msg + where)
        self.frame = frame
        self.source = source


@dataclass
class LandmarkSequence:
    coords: np.ndarray
    role: str = "real"
    anchors: dict = field(default_factory=lambda: dict(DEFAULT_ANCHORS))
    fps: float = 25.0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[1:] != (N_LANDMARKS, 2):
            raise LandmarkError(f"expected T x {N_LANDMARKS} x 2 coordinates, got {self.coords.shape}")
        bad = np.flatnonzero(~np.isfinite(self.coords).all(axis=(1, 2)))
        if bad.size:
            raise LandmarkError("non-finite coordinates", frame=int(bad[0]))
        for name in ("left", "right", "top", "bottom"):
            idx = self.anchors.get(name)
            if idx is None or not 0 <= int(idx) < N_LANDMARKS:
                raise LandmarkError(f"anchor {name!r} missing or out of range")
        self.anchors = {k: int(v) for k, v in self.anchors.items()}

    @property
    def T(self) -> int:
        return self.coords.shape[0]

    def anchor(self, name: str) -> np.ndarray:
        return self.coords[:, self.anchors[name], :]

    def with_coords(self, coords) -> "LandmarkSequence":
        return LandmarkSequence(coords, self.role, dict(self.anchors), self.fps)

    def to_json(self) -> dict:
        return {"fps": self.fps, "anchors": self.anchors, "frames": self.coords.tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, data: dict, role: str = "real", source=None) -> "LandmarkSequence":
        frames = data.get("frames")
        if not isinstance(frames, list) or not frames:
            raise LandmarkError("missing or empty 'frames'", source=source)
        for t, fr in enumerate(frames):
            if not isinstance(fr, list) or len(fr) != N_LANDMARKS or any(
                    not isinstance(p, list) or len(p) != 2 for p in fr):
                raise LandmarkError(f"frame must hold {N_LANDMARKS} [x, y] points", frame=t, source=source)
        try:
            coords = np.array(frames, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise LandmarkError(f"non-numeric coordinates ({exc})", source=source) from None
        try:
            return cls(coords, role, data.get("anchors", dict(DEFAULT_ANCHORS)), float(data.get("fps", 25.0)))
        except LandmarkError as exc:
            raise LandmarkError(str(exc), source=source) from None

    @classmethod
    def load(cls, path, role: str = "real") -> "LandmarkSequence":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise LandmarkError(f"invalid JSON ({exc.msg})", source=str(path)) from None
        return cls.from_json(data, role, source=str(path))


def normalize_landmarks(seq: LandmarkSequence) -> LandmarkSequence:
    """Per frame: move the landmark centroid to the origin and scale the corner distance to 1."""
    c = seq.coords - seq.coords.mean(axis=1, keepdims=True)
    width = np.linalg.norm(seq.anchor("left") - seq.anchor("right"), axis=1)
    zero = np.flatnonzero(width <= 0)
    if zero.size:
        raise LandmarkError("mouth corners coincide", frame=int(zero[0]))
    return seq.with_coords(c / width[:, None, None])


def lse_d(real: LandmarkSequence, gen: LandmarkSequence) -> float:
    if real.T != gen.T:
        raise ValueError(f"sequence lengths differ ({real.T} vs {gen.T})")
    per_frame = np.linalg.norm(real.coords - gen.coords, axis=2).mean(axis=1)
    return float(per_frame.mean())


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> list[tuple[float, float]]:
    """Andrew's monotone chain; counter-clockwise, collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).tolist())))
    if len(pts) <= 2:
        return pts
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def polygon_area(vertices) -> float:
    """Shoelace area of a simple polygon (absolute value)."""
    v = np.asarray(vertices, dtype=np.float64)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def convex_hull_area(points) -> float:
    return polygon_area(convex_hull(points))


@dataclass
class MouthFeatureSeries:
    """5 x T matrix; rows follow FEATURE_NAMES."""

    values: np.ndarray

    def row(self, name: str) -> np.ndarray:
        return self.values[FEATURE_NAMES.index(name)]


def mouth_features(seq: LandmarkSequence) -> MouthFeatureSeries:
    width = np.linalg.norm(seq.anchor("left") - seq.anchor("right"), axis=1)
    height = np.linalg.norm(seq.anchor("top") - seq.anchor("bottom"), axis=1)
    area = np.array([convex_hull_area(fr) for fr in seq.coords])
    aspect = width / (height + EPS)
    openness = height / (width + EPS)
    return MouthFeatureSeries(np.stack([width, height, area, aspect, openness]))


def pearson(x, y) -> float:
    """Centered correlation; 0 (with a warning) if either series is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"series lengths differ ({x.size} vs {y.size})")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 samples")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    # test the range, not sxx: the mean of a constant series can be off by an ulp
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0 or sxx == 0.0 or syy == 0.0:
        warnings.warn("zero-variance series; correlation set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    r = float(np.dot(dx, dy)) / (np.sqrt(sxx) * np.sqrt(syy))
    return min(1.0, max(-1.0, r))


def feature_correlations(real: LandmarkSequence, gen: LandmarkSequence) -> np.ndarray:
    if real.T != gen.T:
        raise ValueError(f"sequence lengths differ ({real.T} vs {gen.T})")
    fr, fg = mouth_features(real).values, mouth_features(gen).values
    return np.array([pearson(fr[k], fg[k]) for k in range(len(FEATURE_NAMES))])


def tmdc_from_features(real: MouthFeatureSeries, gen: MouthFeatureSeries) -> float:
    return float(np.mean([pearson(a, b) for a, b in zip(real.values, gen.values)]))


def tmdc(real: LandmarkSequence, gen: LandmarkSequence) -> float:
    return float(feature_correlations(real, gen).mean())


def evaluate_pair(real: LandmarkSequence, gen: LandmarkSequence, normalize: bool = False) -> dict:
    if normalize:
        real, gen = normalize_landmarks(real), normalize_landmarks(gen)
    r = feature_correlations(real, gen)
    return {"lse_d": lse_d(real, gen), "tmdc": float(r.mean()), "r": r.tolist()}


def write_metrics_csv(path_or_file, rows: list[tuple[str, dict]]) -> None:
    header = ["id", "LSE-D", "TMDC"] + [f"r_{k + 1}" for k in range(len(FEATURE_NAMES))]

    def emit(fh):
        w = csv.writer(fh)
        w.writerow(header)
        for pair_id, m in rows:
            w.writerow([pair_id, repr(m["lse_d"]), repr(m["tmdc"])] + [repr(x) for x in m["r"]])

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            emit(fh)
