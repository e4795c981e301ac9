"""Pseudo-phoneme guided sparse mixture-of-experts routing."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .prototypes import PrototypeBank, soft_assign


@dataclass
class RouterConfig:
    M: int = 4
    S: int = 2
    beta: float = 0.5
    lambda_util: float = 0.01
    lambda_ent: float = 0.001
    K: int = 8
    phoneme_to_expert: tuple[int, ...] | None = None
    entropy_sign: float = 1.0  # +1 follows the printed loss (sharpening); -1 rewards spread
    use_route_loss: bool = True

    def __post_init__(self):
        if not 1 <= self.S <= self.M:
            raise ValueError(f"need 1 <= S <= M, got S={self.S}, M={self.M}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.lambda_util < 0 or self.lambda_ent < 0:
            raise ValueError("loss weights must be >= 0")
        if self.phoneme_to_expert is None:
            self.phoneme_to_expert = tuple(k % self.M for k in range(self.K))
        self.phoneme_to_expert = tuple(int(e) for e in self.phoneme_to_expert)
        if len(self.phoneme_to_expert) != self.K:
            raise ValueError("phoneme_to_expert must have one entry per prototype")
        if set(self.phoneme_to_expert) != set(range(self.M)):
            raise ValueError("phoneme_to_expert must be a surjection onto the experts")

    def expert_map_matrix(self) -> np.ndarray:
        """K x M 0/1 matrix that sums label mass per expert."""
        m = np.zeros((self.K, self.M))
        m[np.arange(self.K), self.phoneme_to_expert] = 1.0
        return m


@dataclass
class RoutingOutcome:
    """Per-timestep routing for a batch of B timesteps.

    ``scores`` (B x M) and ``weights`` (B x S) may be tape nodes.
    ``selected`` rows are ordered by decreasing score.
    """

    scores: object
    selected: np.ndarray
    weights: object
    usage: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.selected.shape[0]

    def top_expert(self) -> np.ndarray:
        return self.selected[:, 0]

    def selection_mask(self, M: int) -> np.ndarray:
        mask = np.zeros((self.batch_size, M), dtype=bool)
        np.put_along_axis(mask, self.selected, True, axis=1)
        return mask


def pseudo_phoneme_label(z_p, bank: PrototypeBank):
    """Soft assignment of speech features to phoneme prototypes."""
    if bank.modality != "phoneme":
        raise ValueError("pseudo-phoneme labels need a phoneme bank")
    return soft_assign(z_p, bank)


def top_s(scores: np.ndarray, S: int) -> np.ndarray:
    """Indices of the S largest entries per row, ordered by score, ties to the lowest index."""
    scores = np.atleast_2d(scores)
    return np.argsort(-scores, axis=1, kind="stable")[:, :S]


def route(h, v, cfg: RouterConfig, g_phon: Callable, g_cont: Callable) -> RoutingOutcome:
    """Blend phoneme and content gates, keep the top-S experts, softmax their scores."""
    single = dc.const(h).ndim == 1
    if single:
        h = dc.reshape(h, (1, -1))
        v = dc.reshape(v, (1, -1))
    s_phon = g_phon(v)
    s_cont = g_cont(h)
    if dc.const(s_phon).shape[-1] != cfg.M or dc.const(s_cont).shape[-1] != cfg.M:
        raise ValueError(f"gates must produce {cfg.M} scores")
    scores = dc.add(dc.mul(s_phon, cfg.beta), dc.mul(s_cont, 1.0 - cfg.beta))
    selected = top_s(dc.const(scores), cfg.S)
    rows = np.arange(selected.shape[0])[:, None]
    weights = dc.softmax(dc.take(scores, (rows, selected)), axis=1)
    usage = np.bincount(selected.ravel(), minlength=cfg.M)
    return RoutingOutcome(scores, selected, weights, usage)


def moe_forward(h, outcome: RoutingOutcome, experts: Sequence[Callable]):
    """sum_{i in Q} w_i * expert_i(h), evaluating each expert only on the rows that chose it."""
    h_val = dc.const(h)
    single = h_val.ndim == 1
    if single:
        h = dc.reshape(h, (1, -1))
    n = outcome.batch_size
    if len(dc.const(h)) != n:
        raise ValueError(f"{len(dc.const(h))} inputs but {n} routing decisions")
    out = None
    out_dim = None
    for i, expert in enumerate(experts):
        rows, slot = np.nonzero(outcome.selected == i)
        if rows.size == 0:
            continue
        y = expert(dc.take(h, rows))
        if out_dim is None:
            out_dim = dc.const(y).shape[-1]
        elif dc.const(y).shape[-1] != out_dim:
            raise ValueError("experts disagree on output width")
        w = dc.reshape(dc.take(outcome.weights, (rows, slot)), (-1, 1))
        part = dc.scatter_rows(dc.mul(y, w), rows, n)
        out = part if out is None else dc.add(out, part)
    return dc.reshape(out, (-1,)) if single else out


def utilization_term(usage: np.ndarray, batch_size: int, M: int) -> float:
    """(M / B) * sum_i (n_i / B)^2, from hard usage counts."""
    usage = np.asarray(usage, dtype=np.float64)
    return float(M / batch_size * np.sum((usage / batch_size) ** 2))


def route_targets(labels, cfg: RouterConfig, selected: np.ndarray) -> np.ndarray:
    """Label mass summed per expert, restricted to the selected set and renormalized."""
    mass = dc.const(labels) @ cfg.expert_map_matrix()
    rows = np.arange(len(mass))[:, None]
    t = mass[rows, selected]
    total = t.sum(axis=1, keepdims=True)
    return np.where(total > 0, t / np.maximum(total, 1e-300), 1.0 / selected.shape[1])


def router_loss(outcome: RoutingOutcome, labels, cfg: RouterConfig, parts: dict | None = None):
    """Masked routing cross-entropy + utilization penalty + weight-entropy term.

    Targets are detached; the usage counts enter as a constant.
    """
    B = outcome.batch_size
    if B < 1:
        raise ValueError("router_loss needs at least one timestep")
    if len(dc.const(labels)) != B:
        raise ValueError("one label vector per routed timestep is required")
    log_w = dc.log(dc.clip(outcome.weights, 1e-300, 1.0))
    if cfg.use_route_loss:
        targets = route_targets(labels, cfg, outcome.selected)
        ce = dc.neg(dc.mean(dc.sum_(dc.mul(log_w, targets), axis=1)))
    else:
        ce = 0.0
    util = cfg.lambda_util * utilization_term(outcome.usage, B, cfg.M)
    neg_ent = dc.mean(dc.sum_(dc.mul(outcome.weights, log_w), axis=1))  # sum w log w
    ent = dc.mul(neg_ent, -cfg.lambda_ent * cfg.entropy_sign)
    if parts is not None:
        parts.update(route=float(dc.const(ce)), util=util, ent=float(dc.const(ent)))
    return dc.add(dc.add(ce, util), ent)


def write_routing_trace(path, labels, outcome: RoutingOutcome) -> None:
    """CSV rows: t, argmax label, selected experts, weights."""
    labels = dc.const(labels)
    weights = dc.const(outcome.weights)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "label", "experts", "weights"])
        for t in range(outcome.batch_size):
            w.writerow([t, int(np.argmax(labels[t])),
                        " ".join(str(int(e)) for e in outcome.selected[t]),
                        " ".join(f"{x:.6f}" for x in weights[t])])
