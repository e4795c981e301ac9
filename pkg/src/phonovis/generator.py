"""Toy 16x16 frame decoder and the generation objective."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import diffcore as dc

FRAME = 16
PIXELS = FRAME * FRAME
FEATURE_DIM = 32


class PerceptualNet:
    """Frozen random feature extractor standing in for a pretrained image net."""

    def __init__(self, seed: int = 1234, hidden: int = 64):
        self.spec = dc.MLPSpec([PIXELS, hidden, FEATURE_DIM], ["tanh"])
        self.params = dc.ParameterBlock.for_mlp(self.spec, seed)
        self.params.values.setflags(write=False)
        self.seed = seed

    def __call__(self, frames):
        """Features of frames shaped (..., 16, 16) -> (N, 32)."""
        flat = dc.reshape(frames, (-1, PIXELS))
        return dc.mlp_forward(self.params, self.spec, flat)


def make_decoder(in_dim: int, seed: int, hidden: int | None = None) -> dc.Net:
    widths = [in_dim, PIXELS] if hidden is None else [in_dim, hidden, PIXELS]
    return dc.Net(dc.MLPSpec(widths), seed)


def decode_frames(moe_outputs, decoder, tape=None):
    """One logistic-squashed 16x16 frame per row of ``moe_outputs``."""
    x = moe_outputs
    n_in = decoder.spec.n_in if isinstance(decoder, dc.Net) else None
    if n_in is not None and dc.const(x).shape[-1] != n_in:
        raise ValueError(f"decoder expects width {n_in}, got {dc.const(x).shape[-1]}")
    logits = decoder(x, tape) if isinstance(decoder, dc.Net) else decoder(x)
    if dc.const(logits).shape[-1] != PIXELS:
        raise ValueError(f"decoder must output {PIXELS} values")
    return dc.reshape(dc.sigmoid(logits), (-1, FRAME, FRAME))


def temporal_diff(frames):
    """out[t] = frames[t + 1] - frames[t] along the time axis (third from last)."""
    shape = dc.const(frames).shape
    if len(shape) < 3 or shape[-3] < 2:
        raise ValueError("temporal differences need at least 2 frames")
    T = shape[-3]
    lead = (slice(None),) * (len(shape) - 3)
    return dc.sub(dc.take(frames, lead + (slice(1, T),)), dc.take(frames, lead + (slice(0, T - 1),)))


def generation_loss(gen, real, phi: PerceptualNet, lambda1: float = 1.0, lambdap: float = 0.1,
                    lambdat: float = 0.5, parts: dict | None = None):
    """lambda1 * mean|gen - real| + lambdap * mean_t ||phi(gen_t) - phi(real_t)||^2
    + lambdat * mean|diff_t gen - diff_t real|.

    Frames are (T, 16, 16) or (N, T, 16, 16); temporal differences stay within
    each sequence.
    """
    g_shape, r_shape = dc.const(gen).shape, np.shape(dc.const(real))
    if g_shape != r_shape:
        raise ValueError(f"shape mismatch: generated {g_shape} vs real {r_shape}")
    if min(lambda1, lambdap, lambdat) < 0:
        raise ValueError("loss weights must be >= 0")
    pix = dc.mean(dc.abs_(dc.sub(gen, real)))
    feat = dc.sub(phi(gen), phi(dc.const(real)))
    perc = dc.mean(dc.sum_(dc.square(feat), axis=1))
    temp = dc.mean(dc.abs_(dc.sub(temporal_diff(gen), temporal_diff(dc.const(real)))))
    if parts is not None:
        parts.update(pixel=float(dc.const(pix)), perceptual=float(dc.const(perc)),
                     temporal=float(dc.const(temp)))
    return dc.add(dc.add(dc.mul(pix, lambda1), dc.mul(perc, lambdap)), dc.mul(temp, lambdat))


def generation_loss_reference(gen, real, phi: PerceptualNet, lambda1, lambdap, lambdat) -> float:
    """Plain-loop evaluation for a single (T, 16, 16) pair (test oracle)."""
    gen, real = np.asarray(gen, float), np.asarray(real, float)
    T = gen.shape[0]
    l1 = 0.0
    for t in range(T):
        for i in range(FRAME):
            for j in range(FRAME):
                l1 += abs(gen[t, i, j] - real[t, i, j])
    l1 /= T * PIXELS
    perc = 0.0
    for t in range(T):
        fg = dc.mlp_reference(phi.params, phi.spec, gen[t].ravel())
        fr = dc.mlp_reference(phi.params, phi.spec, real[t].ravel())
        perc += sum((a - b) ** 2 for a, b in zip(fg, fr))
    perc /= T
    tl = 0.0
    for t in range(T - 1):
        for i in range(FRAME):
            for j in range(FRAME):
                tl += abs((gen[t + 1, i, j] - gen[t, i, j]) - (real[t + 1, i, j] - real[t, i, j]))
    tl /= (T - 1) * PIXELS
    return lambda1 * l1 + lambdap * perc + lambdat * tl


def total_loss(l_align, l_router, l_gen, lambda_task: float):
    """l_align + l_router + lambda_task * l_gen."""
    for name, term in (("L_align", l_align), ("L_router", l_router), ("L_gen", l_gen)):
        if not np.isfinite(dc.const(term)).all():
            raise FloatingPointError(f"{name} is not finite")
    if not math.isfinite(lambda_task):
        raise FloatingPointError("lambda_task is not finite")
    return dc.add(dc.add(l_align, l_router), dc.mul(l_gen, lambda_task))


def save_frames(path, frames, pgm: bool = False) -> None:
    """Flat little-endian f64 ``<path>.bin`` plus ``<path>.json`` shape sidecar."""
    path = Path(path)
    frames = np.asarray(dc.const(frames), dtype=np.float64)
    if not np.isfinite(frames).all():
        raise ValueError("frames must be finite")
    frames.astype("<f8").tofile(path.with_suffix(".bin"))
    path.with_suffix(".json").write_text(json.dumps({"shape": list(frames.shape), "dtype": "<f8"}))
    if pgm:
        for t, frame in enumerate(frames.reshape(-1, FRAME, FRAME)):
            px = np.clip(np.rint(frame * 255), 0, 255).astype(np.uint8)
            header = f"P5\n{FRAME} {FRAME}\n255\n".encode()
            path.with_name(f"{path.stem}_{t:04d}.pgm").write_bytes(header + px.tobytes())


def load_frames(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape(meta["shape"])
