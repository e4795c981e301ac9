"""Jensen-Shannon mutual information and the phoneme-viseme alignment loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

log = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of range(n) with no fixed point (rejection sampling)."""
    if n < 2:
        raise ValueError("a derangement needs at least 2 elements")
    while True:
        perm = rng.permutation(n)
        if not (perm == np.arange(n)).any():
            return perm


@dataclass
class PairBatch:
    """Matched pairs (x_i, y_i) and mismatched pairs (x_i, y_perm[i])."""

    xs: object
    ys: object
    perm: np.ndarray

    def __post_init__(self):
        n = len(dc.const(self.xs))
        if n < 2 or len(dc.const(self.ys)) != n:
            raise ValueError("need matching xs/ys with batch size >= 2")
        if (self.perm == np.arange(n)).any():
            raise ValueError("negative pairing must be a derangement")

    @property
    def size(self) -> int:
        return len(self.perm)

    def positives(self):
        return dc.concat([self.xs, self.ys], axis=1)

    def negatives(self):
        return dc.concat([self.xs, dc.take(self.ys, self.perm)], axis=1)


def make_negative_pairs(xs, ys, seed) -> PairBatch:
    """Index-aligned positives plus a seeded derangement of ``ys`` for negatives."""
    n = len(dc.const(xs))
    if n != len(dc.const(ys)):
        raise ValueError(f"xs and ys differ in length ({n} vs {len(dc.const(ys))})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return PairBatch(_as_rows(xs), _as_rows(ys), derangement(n, rng))


def _as_rows(a):
    return dc.reshape(a, (-1, 1)) if dc.const(a).ndim == 1 else a


@dataclass
class MIEstimator:
    """Discriminator D([x; y]) -> logit used by the JS bound."""

    net: dc.Net
    frozen: bool = False
    clamp_count: int = field(default=0, init=False)

    @classmethod
    def create(cls, x_dim: int, y_dim: int, hidden: int = 32, seed: int = 0,
               activation: str = "tanh") -> "MIEstimator":
        spec = dc.MLPSpec([x_dim + y_dim, hidden, 1], [activation])
        return cls(dc.Net(spec, seed))

    @property
    def input_width(self) -> int:
        return self.net.spec.n_in

    def logits(self, pairs, tape=None, weights=None):
        if weights is not None:
            out = dc.mlp_forward(weights, self.net.spec, pairs)
        else:
            out = self.net(pairs, tape)
        return dc.reshape(out, (-1,))


def estimate_js_mi(est: MIEstimator, batch: PairBatch, tape=None, weights=None):
    """E_P[log s(D)] + E_N[log(1 - s(D))]; logits clamped to +-30 before the log."""
    pos = est.logits(batch.positives(), tape, weights)
    neg = est.logits(batch.negatives(), tape, weights)
    n_clamped = int((np.abs(dc.const(pos)) > LOGIT_CLAMP).sum() + (np.abs(dc.const(neg)) > LOGIT_CLAMP).sum())
    if n_clamped:
        est.clamp_count += n_clamped
        log.debug("js-mi: clamped %d logits", n_clamped)
    pos = dc.clip(pos, -LOGIT_CLAMP, LOGIT_CLAMP)
    neg = dc.clip(neg, -LOGIT_CLAMP, LOGIT_CLAMP)
    # log(1 - sigmoid(a)) = log_sigmoid(-a)
    return dc.add(dc.mean(dc.log_sigmoid(pos)), dc.mean(dc.log_sigmoid(dc.neg(neg))))


def estimate_js_mi_reference(est: MIEstimator, xs, ys, perm) -> float:
    """Two-loop evaluation of the JS bound (test oracle)."""
    xs, ys = np.atleast_2d(np.asarray(xs, float)), np.asarray(ys, float)
    ys = ys.reshape(len(ys), -1)
    if xs.shape[0] == 1 and len(ys) > 1:
        xs = xs.T
    pos = 0.0
    for i in range(len(xs)):
        d = float(dc.mlp_reference(est.net.params, est.net.spec, np.concatenate([xs[i], ys[i]]))[0])
        d = min(max(d, -LOGIT_CLAMP), LOGIT_CLAMP)
        pos += np.log(1.0 / (1.0 + np.exp(-d)))
    neg = 0.0
    for i in range(len(xs)):
        d = float(dc.mlp_reference(est.net.params, est.net.spec, np.concatenate([xs[i], ys[perm[i]]]))[0])
        d = min(max(d, -LOGIT_CLAMP), LOGIT_CLAMP)
        neg += np.log(1.0 - 1.0 / (1.0 + np.exp(-d)))
    return pos / len(xs) + neg / len(xs)


def alignment_loss(q_p_soft, q_v_soft, z_p, z_v, est_proto: MIEstimator, est_raw: MIEstimator,
                   lambda_neg: float, seed, tape=None, proto_weights=None, raw_weights=None):
    """-I_JS(prototype codes) + lambda_neg * I_JS(raw features).

    Prototype-level pairs are soft-assignment vectors. Both estimates share one
    derangement so the two terms see the same mismatches.
    """
    n = len(dc.const(q_p_soft))
    lengths = {len(dc.const(a)) for a in (q_p_soft, q_v_soft, z_p, z_v)}
    if len(lengths) != 1:
        raise ValueError(f"sequences must be time-aligned, got lengths {sorted(lengths)}")
    if lambda_neg < 0:
        raise ValueError("lambda_neg must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = derangement(n, rng)
    proto = estimate_js_mi(est_proto, PairBatch(q_p_soft, q_v_soft, perm), tape, proto_weights)
    loss = dc.neg(proto)
    if lambda_neg > 0:
        raw = estimate_js_mi(est_raw, PairBatch(_as_rows(z_p), _as_rows(z_v), perm), tape, raw_weights)
        loss = dc.add(loss, dc.mul(raw, lambda_neg))
    return loss


def train_estimator(est: MIEstimator, sampler, steps: int, lr: float = 1e-2, seed: int = 0,
                    batch: int = 64) -> list[float]:
    """Maximize the JS bound with Adam on fresh batches from ``sampler(rng, batch)``."""
    rng = np.random.default_rng(seed)
    state = dc.AdamState.zeros(len(est.net.params))
    trace = []
    for _ in range(steps):
        x, y = sampler(rng, batch)
        tape = dc.Tape()
        leaf, w = est.net.params.bind(tape)
        mi = estimate_js_mi(est, make_negative_pairs(x, y, rng), weights=w)
        g = dc.backward(tape, dc.neg(mi), leaf)
        dc.adam_step(est.net.params, g, state, lr=lr)
        trace.append(float(dc.const(mi)))
    return trace
