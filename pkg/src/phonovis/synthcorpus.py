"""Synthetic multilingual phoneme/viseme corpus with known correspondences.

All languages share one universe of phoneme and viseme archetypes; they
differ only in which phonemes they use and in their Markov transition
matrices. Every utterance carries four time-aligned views: phoneme ids,
speech features, visual features, and rendered lip landmarks and frames.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .generator import FRAME
from .metrics import DEFAULT_ANCHORS, N_LANDMARKS, LandmarkSequence

TRANSITION_FRAMES = 3
RASTER_EXTENT = 1.4
RASTER_SHARPNESS = 4.0


@dataclass
class Universe:
    phoneme_archetypes: np.ndarray   # K x d_p
    viseme_archetypes: np.ndarray    # K x d_v
    correspondence: np.ndarray       # phoneme id -> viseme id (bijection)
    mouth_params: np.ndarray         # K x 2 (width, height) per viseme

    @property
    def K(self) -> int:
        return len(self.correspondence)

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("phoneme_archetypes", "viseme_archetypes", "correspondence", "mouth_params")}

    @classmethod
    def from_json(cls, d: dict) -> "Universe":
        return cls(np.array(d["phoneme_archetypes"], float), np.array(d["viseme_archetypes"], float),
                   np.array(d["correspondence"], int), np.array(d["mouth_params"], float))


def _min_pairwise(a: np.ndarray) -> float:
    d = np.sqrt(((a[:, None] - a[None]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return float(d.min())


def make_universe(K_true: int = 8, d_p: int = 16, d_v: int = 12, seed: int = 0,
                  sigma: float = 0.5, max_draws: int = 1000) -> Universe:
    """Draw archetypes N(0, I) until every pair is at least 6 * sigma apart."""
    if K_true < 2:
        raise ValueError("K_true must be >= 2")
    rng = np.random.default_rng(seed)
    need = 6.0 * sigma

    def draw(d):
        for _ in range(max_draws):
            a = rng.normal(size=(K_true, d))
            if _min_pairwise(a) >= need and _min_pairwise(a) > 0:
                return a
        raise ValueError(f"could not place {K_true} archetypes {need:.3g} apart in {d} dims "
                         f"within {max_draws} draws; lower K_true or sigma")

    P, V = draw(d_p), draw(d_v)
    corr = rng.permutation(K_true)
    # mouth shapes on a jittered grid so every viseme is visually distinct
    side = math.ceil(math.sqrt(K_true))
    cells = rng.permutation(side * side)[:K_true]
    w = 1.2 + 0.8 * ((cells % side) + 0.5 + rng.uniform(-0.2, 0.2, K_true)) / side
    h = 0.2 + 1.0 * ((cells // side) + 0.5 + rng.uniform(-0.2, 0.2, K_true)) / side
    return Universe(P, V, corr, np.stack([w, h], axis=1))


@dataclass
class LanguageSpec:
    name: str
    phonemes: list
    transition: np.ndarray
    T: int = 50
    sigma_p: float = 0.5
    sigma_v: float = 0.5
    seed: int = 0
    n_utterances: int = 200

    def __post_init__(self):
        self.phonemes = [int(p) for p in self.phonemes]
        self.transition = np.asarray(self.transition, dtype=np.float64)
        n = len(self.phonemes)
        if n == 0:
            raise ValueError(f"language {self.name!r} has no phonemes")
        if self.transition.shape != (n, n):
            raise ValueError(f"transition must be {n} x {n}")
        if (self.transition < 0).any() or np.abs(self.transition.sum(axis=1) - 1).max() > 1e-9:
            raise ValueError("transition rows must be probability vectors")
        if self.sigma_p < 0 or self.sigma_v < 0 or self.T < 1:
            raise ValueError("noise levels must be >= 0 and T >= 1")

    def to_json(self) -> dict:
        return {"name": self.name, "phonemes": self.phonemes, "transition": self.transition.tolist(),
                "T": self.T, "sigma_p": self.sigma_p, "sigma_v": self.sigma_v, "seed": self.seed,
                "n_utterances": self.n_utterances}

    @classmethod
    def from_json(cls, d: dict) -> "LanguageSpec":
        return cls(**d)


@dataclass
class Utterance:
    ids: np.ndarray
    z_p: np.ndarray
    z_v: np.ndarray
    landmarks: LandmarkSequence
    frames: np.ndarray
    language: str = ""

    def __post_init__(self):
        T = len(self.ids)
        if not (len(self.z_p) == len(self.z_v) == self.landmarks.T == len(self.frames) == T):
            raise ValueError("utterance views are not time-aligned")

    @property
    def T(self) -> int:
        return len(self.ids)


@dataclass
class Language:
    spec: LanguageSpec
    utterances: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.spec.name


def sticky_transition(n: int, rng: np.random.Generator, stay: float = 0.7) -> np.ndarray:
    """Self-transition ``stay`` plus a Dirichlet spread over the other states."""
    if n == 1:
        return np.ones((1, 1))
    m = np.zeros((n, n))
    for i in range(n):
        others = rng.dirichlet(np.ones(n - 1)) * (1.0 - stay)
        m[i, np.arange(n) != i] = others
        m[i, i] = stay
    return m / m.sum(axis=1, keepdims=True)


def markov_chain(transition: np.ndarray, T: int, rng: np.random.Generator) -> np.ndarray:
    """State indices of a chain started uniformly."""
    n = len(transition)
    cdf = np.cumsum(transition, axis=1)
    states = np.empty(T, dtype=int)
    s = int(rng.integers(n))
    u = rng.random(T)
    for t in range(T):
        states[t] = s
        s = min(int(np.searchsorted(cdf[s], u[t], side="right")), n - 1)
    return states


def _ellipse_angles() -> np.ndarray:
    """26 angles: anchors at 0, pi/2, pi, 3pi/2 with 6, 5, 6, 5 points between them."""
    out = []
    for q, n_between in enumerate((6, 5, 6, 5)):
        start = q * math.pi / 2
        out.extend(start + (math.pi / 2) * j / (n_between + 1) for j in range(n_between + 1))
    return np.array(out)


ANGLES = _ellipse_angles()
assert len(ANGLES) == N_LANDMARKS
assert [int(np.argmin(np.abs(ANGLES - a))) for a in (0, math.pi / 2, math.pi, 1.5 * math.pi)] == \
    [DEFAULT_ANCHORS[k] for k in ("right", "top", "left", "bottom")]


def mouth_trajectory(targets: np.ndarray) -> np.ndarray:
    """Linear moves to each new target over TRANSITION_FRAMES frames."""
    targets = np.asarray(targets, dtype=np.float64)
    out = np.empty_like(targets)
    start, t0 = targets[0].copy(), 0
    for t in range(len(targets)):
        if t > 0 and not np.array_equal(targets[t], targets[t - 1]):
            start, t0 = out[t - 1].copy(), t
        frac = (t - t0 + 1) / TRANSITION_FRAMES
        out[t] = targets[t] if frac >= 1.0 else start + (targets[t] - start) * frac
    return out


def render_landmarks(params, T: int | None = None, fps: float = 25.0) -> LandmarkSequence:
    """26 ellipse landmarks per frame from (width, height) mouth parameters.

    ``params`` is one (width, height) pair held for ``T`` frames, or a T x 2
    sequence of targets that is smoothed with :func:`mouth_trajectory`.
    """
    p = np.asarray(params, dtype=np.float64)
    if p.ndim == 1:
        if T is None:
            raise ValueError("T is required for a single (width, height) pair")
        p = np.tile(p, (T, 1))
    if (p <= 0).any():
        raise ValueError("mouth width and height must be positive")
    return ellipse_landmarks(mouth_trajectory(p), "real", fps)


def ellipse_landmarks(width_height, role: str = "real", fps: float = 25.0) -> LandmarkSequence:
    """Landmarks for per-frame (width, height) with no smoothing."""
    wh = np.asarray(width_height, dtype=np.float64)
    a, b = wh[:, :1] / 2.0, wh[:, 1:] / 2.0
    x = a * np.cos(ANGLES)[None, :]
    y = b * np.sin(ANGLES)[None, :]
    # exact zeros at the anchors keep Width == width
    x[:, [DEFAULT_ANCHORS["top"], DEFAULT_ANCHORS["bottom"]]] = 0.0
    y[:, [DEFAULT_ANCHORS["left"], DEFAULT_ANCHORS["right"]]] = 0.0
    return LandmarkSequence(np.stack([x, y], axis=2), role, dict(DEFAULT_ANCHORS), fps)


_GRID = (np.arange(FRAME) + 0.5) / FRAME * 2 * RASTER_EXTENT - RASTER_EXTENT


def rasterize(seq: LandmarkSequence) -> np.ndarray:
    """Soft-edged filled mouth ellipse per frame, T x 16 x 16 in (0, 1)."""
    width = np.linalg.norm(seq.anchor("left") - seq.anchor("right"), axis=1)
    height = np.linalg.norm(seq.anchor("top") - seq.anchor("bottom"), axis=1)
    center = seq.coords.mean(axis=1)
    a = np.maximum(width / 2, 1e-3)[:, None, None]
    b = np.maximum(height / 2, 1e-3)[:, None, None]
    xx = _GRID[None, None, :] - center[:, 0, None, None]
    yy = _GRID[::-1][None, :, None] - center[:, 1, None, None]
    inside = 1.0 - (xx / a) ** 2 - (yy / b) ** 2
    return 1.0 / (1.0 + np.exp(np.minimum(-RASTER_SHARPNESS * inside, 700.0)))


class MouthFitter:
    """Recover (width, height) from a frame by nearest match against a raster grid.

    Stands in for a landmark detector on generated frames.
    """

    def __init__(self, widths=np.linspace(0.4, 2.6, 45), heights=np.linspace(0.05, 1.6, 63)):
        ww, hh = np.meshgrid(widths, heights, indexing="ij")
        self.params = np.stack([ww.ravel(), hh.ravel()], axis=1)
        self.bank = rasterize(ellipse_landmarks(self.params)).reshape(len(self.params), -1)
        self._bank_sq = (self.bank**2).sum(axis=1)

    def fit(self, frames) -> np.ndarray:
        f = np.asarray(frames, dtype=np.float64).reshape(-1, FRAME * FRAME)
        d2 = self._bank_sq[None, :] - 2.0 * f @ self.bank.T
        return self.params[d2.argmin(axis=1)]

    def landmarks(self, frames, role: str = "generated") -> LandmarkSequence:
        return ellipse_landmarks(self.fit(frames), role)


def generate_utterance(spec: LanguageSpec, universe: Universe, index: int) -> Utterance:
    rng = np.random.default_rng([spec.seed, index])
    states = markov_chain(spec.transition, spec.T, rng)
    ids = np.asarray(spec.phonemes)[states]
    vis = universe.correspondence[ids]
    z_p = universe.phoneme_archetypes[ids] + spec.sigma_p * rng.normal(size=(spec.T, universe.phoneme_archetypes.shape[1]))
    z_v = universe.viseme_archetypes[vis] + spec.sigma_v * rng.normal(size=(spec.T, universe.viseme_archetypes.shape[1]))
    lm = render_landmarks(universe.mouth_params[vis])
    return Utterance(ids, z_p, z_v, lm, rasterize(lm), spec.name)


def generate_language(spec: LanguageSpec, universe: Universe) -> Language:
    bad = [p for p in spec.phonemes if not 0 <= p < universe.K]
    if bad:
        raise ValueError(f"language {spec.name!r} uses phonemes outside the universe: {bad}")
    return Language(spec, [generate_utterance(spec, universe, i) for i in range(spec.n_utterances)])


def default_language_specs(n_languages: int = 5, K_true: int = 8, per_language: int = 6,
                           T: int = 50, n_utterances: int = 200, sigma_p: float = 0.5,
                           sigma_v: float = 0.5, seed: int = 0) -> list[LanguageSpec]:
    """Rotating phoneme subsets so the first n-1 languages jointly cover the universe;
    the last language uses a shifted subset with its own transition matrix."""
    rng = np.random.default_rng([seed, 7919])
    per_language = min(per_language, K_true)
    stride = max(1, math.ceil((K_true - per_language) / max(1, n_languages - 2))) if n_languages > 2 else 1
    specs = []
    for i in range(n_languages):
        if i < n_languages - 1:
            subset = sorted({(i * stride + j) % K_true for j in range(per_language)})
        else:
            subset = sorted(rng.choice(K_true, per_language, replace=False).tolist())
        specs.append(LanguageSpec(f"L{i}", subset, sticky_transition(len(subset), rng), T,
                                  sigma_p, sigma_v, seed * 1000 + i, n_utterances))
    return specs


def split_seen_unseen(languages: list[Language], unseen_names, universe: Universe | None = None):
    """Partition languages into (train, zero-shot) lists by name."""
    names = [lang.name for lang in languages]
    unknown = [n for n in unseen_names if n not in names]
    if unknown:
        raise ValueError(f"unknown language(s): {unknown}")
    unseen = [lang for lang in languages if lang.name in set(unseen_names)]
    seen = [lang for lang in languages if lang.name not in set(unseen_names)]
    if universe is not None:
        for lang in unseen:
            if any(not 0 <= p < universe.K for p in lang.spec.phonemes):
                raise ValueError(f"unseen language {lang.name!r} uses phonemes outside the universe")
    return seen, unseen


# ---------------------------------------------------------------- disk layout


def save_corpus(root, universe: Universe, languages: list[Language], unseen: list[str]) -> dict:
    """One directory per language; returns the manifest (also written to manifest.json)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = {}

    def put(rel: str, data: bytes):
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
        files[rel] = hashlib.sha256(data).hexdigest()

    put("universe.json", json.dumps(universe.to_json()).encode())
    for lang in languages:
        put(f"{lang.name}/language.json", json.dumps(lang.spec.to_json()).encode())
        for i, u in enumerate(lang.utterances):
            stem = f"{lang.name}/utt{i:04d}"
            put(f"{stem}.json", json.dumps({"ids": u.ids.tolist(), "z_p": u.z_p.tolist(),
                                            "z_v": u.z_v.tolist()}).encode())
            put(f"{stem}.landmarks.json", json.dumps(u.landmarks.to_json()).encode())
            put(f"{stem}.frames.bin", u.frames.astype("<f8").tobytes())
    digest = hashlib.sha256("".join(f"{k}:{v}\n" for k, v in sorted(files.items())).encode()).hexdigest()
    manifest = {"languages": [lang.name for lang in languages], "unseen": list(unseen),
                "n_files": len(files), "content_hash": digest, "files": files}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_corpus(root, verify: bool = True):
    """Read a corpus written by :func:`save_corpus`.

    Returns (universe, languages, unseen names). With ``verify`` every file is
    checked against the manifest hash.
    """
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())

    def get(rel: str) -> bytes:
        data = (root / rel).read_bytes()
        if verify and hashlib.sha256(data).hexdigest() != manifest["files"].get(rel):
            raise ValueError(f"hash mismatch for {rel}")
        return data

    universe = Universe.from_json(json.loads(get("universe.json")))
    languages = []
    for name in manifest["languages"]:
        spec = LanguageSpec.from_json(json.loads(get(f"{name}/language.json")))
        utts = []
        for i in range(spec.n_utterances):
            stem = f"{name}/utt{i:04d}"
            d = json.loads(get(f"{stem}.json"))
            lm = LandmarkSequence.from_json(json.loads(get(f"{stem}.landmarks.json")), source=stem)
            frames = np.frombuffer(get(f"{stem}.frames.bin"), dtype="<f8").reshape(-1, FRAME, FRAME).copy()
            utts.append(Utterance(np.array(d["ids"], int), np.array(d["z_p"], float),
                                  np.array(d["z_v"], float), lm, frames, name))
        languages.append(Language(spec, utts))
    return universe, languages, manifest["unseen"]


def validate_corpus(universe: Universe, languages: list[Language]) -> list[str]:
    """Human-readable problems; empty when the corpus is consistent."""
    problems = []
    if sorted(universe.correspondence.tolist()) != list(range(universe.K)):
        problems.append("correspondence is not a bijection")
    for lang in languages:
        for i, u in enumerate(lang.utterances):
            if not set(u.ids.tolist()) <= set(lang.spec.phonemes):
                problems.append(f"{lang.name}/{i}: ids outside the phoneme subset")
            if u.z_p.shape[1] != universe.phoneme_archetypes.shape[1] or \
                    u.z_v.shape[1] != universe.viseme_archetypes.shape[1]:
                problems.append(f"{lang.name}/{i}: feature width mismatch")
            if not (np.isfinite(u.z_p).all() and np.isfinite(u.z_v).all() and np.isfinite(u.frames).all()):
                problems.append(f"{lang.name}/{i}: non-finite values")
    return problems
