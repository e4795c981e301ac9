"""Finite-difference verification of every differentiable training objective.

Each loss family is rebuilt on a tiny random problem at a fixed seed, with
all of its trainable inputs packed into one :class:`ParameterBlock`, and
checked with :func:`diffcore.finite_diff_check`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .align import MIEstimator, PairBatch, alignment_loss, derangement, estimate_js_mi
from .generator import FRAME, PerceptualNet, decode_frames, generation_loss, make_decoder
from .prototypes import PrototypeBank, soft_assign
from .router import RouterConfig, route, router_loss

FAMILIES = ("L_align", "JS-MI", "L_router", "L_gen")
SEEDS = (0, 1, 2)
TOLERANCE = 1e-4
H = 1e-5


@dataclass
class GradcheckRow:
    family: str
    seed: int
    n_params: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < TOLERANCE)


def _block(rng, parts: dict) -> dc.ParameterBlock:
    """Pack named arrays into one flat block (order preserved)."""
    values = np.concatenate([np.asarray(a, float).ravel() for a in parts.values()])
    return dc.ParameterBlock(values, [(k, np.shape(a)) for k, a in parts.items()], int(rng.integers(2**31)))


def _views(block: dc.ParameterBlock, flat) -> dict:
    return block.unpack(flat)


def _sub_weights(net: dc.Net, flat_part):
    """Named MLP weights of ``net`` read from a flat slice (array or tape node)."""
    return net.params.unpack(dc.reshape(flat_part, (-1,)))


def problem_align(seed: int):
    """-I(soft codes) + lambda_neg * I(raw features) w.r.t. features and both discriminators."""
    rng = np.random.default_rng([seed, 1])
    B, d, K = 6, 3, 4
    # a soft temperature keeps every code probability (and so every
    # discriminator gradient) well above the difference round-off
    bank_p = PrototypeBank(rng.normal(size=(K, d)), "phoneme", 2.0)
    bank_v = PrototypeBank(rng.normal(size=(K, d)), "viseme", 2.0)
    est_p = MIEstimator.create(K, K, 5, seed + 10)
    est_r = MIEstimator.create(d, d, 5, seed + 20)
    block = _block(rng, {"z_p": rng.normal(size=(B, d)), "z_v": rng.normal(size=(B, d)),
                         "proto": est_p.net.params.values, "raw": est_r.net.params.values})

    def f(flat):
        v = _views(block, flat)
        vp, vv = soft_assign(v["z_p"], bank_p), soft_assign(v["z_v"], bank_v)
        return alignment_loss(vp, vv, v["z_p"], v["z_v"], est_p, est_r, 0.5, seed,
                              proto_weights=_sub_weights(est_p.net, v["proto"]),
                              raw_weights=_sub_weights(est_r.net, v["raw"]))

    return f, block


def problem_js(seed: int):
    """The JS bound w.r.t. discriminator weights and both inputs."""
    rng = np.random.default_rng([seed, 2])
    B, dx, dy = 8, 3, 2
    est = MIEstimator.create(dx, dy, 6, seed + 30)
    perm = derangement(B, rng)
    block = _block(rng, {"x": rng.normal(size=(B, dx)), "y": rng.normal(size=(B, dy)),
                         "psi": est.net.params.values})

    def f(flat):
        v = _views(block, flat)
        return estimate_js_mi(est, PairBatch(v["x"], v["y"], perm), weights=_sub_weights(est.net, v["psi"]))

    return f, block


def problem_router(seed: int):
    """Routing cross-entropy + utilization + entropy w.r.t. both gates and the features.

    Selection and usage counts are piecewise constant, so ``f`` refuses to
    evaluate where the top-S set differs from the one at the base point.
    """
    rng = np.random.default_rng([seed, 3])
    B, d, K, M = 7, 3, 5, 4
    cfg = RouterConfig(M=M, S=2, beta=0.5, lambda_util=0.01, lambda_ent=0.05, K=K)
    g_phon = dc.Net(dc.MLPSpec([K, 6, M]), seed + 40)
    g_cont = dc.Net(dc.MLPSpec([d, 6, M]), seed + 41)
    labels = rng.dirichlet(np.ones(K), size=B)
    block = _block(rng, {"h": rng.normal(size=(B, d)), "phon": g_phon.params.values,
                         "cont": g_cont.params.values})

    base: dict = {}

    def f(flat):
        v = _views(block, flat)
        wp, wc = _sub_weights(g_phon, v["phon"]), _sub_weights(g_cont, v["cont"])
        out = route(v["h"], labels, cfg, lambda x: dc.mlp_forward(wp, g_phon.spec, x),
                    lambda x: dc.mlp_forward(wc, g_cont.spec, x))
        ref = base.setdefault("selected", out.selected)
        if not np.array_equal(ref, out.selected):
            raise RuntimeError("expert selection changed inside the difference step")
        return router_loss(out, labels, cfg)

    return f, block


def problem_gen(seed: int):
    """Pixel L1 + perceptual + temporal loss w.r.t. decoder weights and decoder inputs."""
    rng = np.random.default_rng([seed, 4])
    T, d = 4, 3
    decoder = make_decoder(d, seed + 50)
    phi = PerceptualNet(seed + 51)
    block = _block(rng, {"y": rng.normal(size=(T, d)), "dec": decoder.params.values})
    # Place the target so that every pixel residual and every temporal-difference
    # residual is at least 0.1 from the L1 kink at zero.
    gen0 = dc.const(decode_frames(block.view("y"), decoder))
    sign = rng.choice([-1.0, 1.0], size=(1, FRAME, FRAME))
    real = gen0 + sign * (0.1 + 0.2 * np.arange(T))[:, None, None]

    def f(flat):
        v = _views(block, flat)
        w = _sub_weights(decoder, v["dec"])
        frames = decode_frames(v["y"], lambda x: dc.mlp_forward(w, decoder.spec, x))
        return generation_loss(frames, real, phi, 1.0, 0.1, 0.5)

    return f, block


PROBLEMS = {"L_align": problem_align, "JS-MI": problem_js, "L_router": problem_router, "L_gen": problem_gen}


def analytic_grad(f, block: dc.ParameterBlock) -> np.ndarray:
    tape = dc.Tape()
    leaf = tape.watch(block.values.copy())
    return dc.backward(tape, f(leaf), leaf)


def check(family: str, seed: int, corrupt: bool = False) -> GradcheckRow:
    """Max relative error for one family at one seed.

    ``corrupt`` perturbs the analytic gradient before comparison (fault injection).
    """
    f, block = PROBLEMS[family](seed)
    grad = None
    if corrupt:
        grad = analytic_grad(f, block)
        grad[len(grad) // 2] += 0.1 * (abs(grad[len(grad) // 2]) + 1.0)
    err = dc.finite_diff_check(f, block, h=H, grad=grad)
    return GradcheckRow(family, seed, len(block), err)


def run_suite(seeds=SEEDS, corrupt: str | None = None) -> list[GradcheckRow]:
    if corrupt is not None and corrupt not in PROBLEMS:
        raise ValueError(f"unknown loss family {corrupt!r}; choose from {', '.join(FAMILIES)}")
    return [check(name, s, corrupt == name) for name in FAMILIES for s in seeds]


def format_table(rows: list[GradcheckRow]) -> str:
    lines = [f"{'loss':<10} {'seed':>4} {'params':>6} {'max rel err':>12}  result"]
    for r in rows:
        lines.append(f"{r.family:<10} {r.seed:>4} {r.n_params:>6} {r.max_rel_err:>12.3e}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
