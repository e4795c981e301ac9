"""Joint training of alignment, routing and generation on the synthetic corpus.

One step runs: speech/visual encoders -> prototype soft assignments and the
alignment loss -> pseudo-phoneme labels and top-S routing -> frame decoding
and the generation loss -> one Adam update of every model network on the
summed objective, then one ascent step for each discriminator.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diffcore as dc
from .align import MIEstimator, alignment_loss, estimate_js_mi, make_negative_pairs
from .config import ExperimentConfig
from .generator import PerceptualNet, decode_frames, generation_loss, make_decoder, total_loss
from .metrics import lse_d, tmdc
from .prototypes import PrototypeBank, due_for_refit, hard_assign, kmeanspp_init, refit, soft_assign
from .router import RouterConfig, moe_forward, route, router_loss
from .synthcorpus import (Language, MouthFitter, Universe, default_language_specs, generate_language,
                          make_universe)

log = logging.getLogger(__name__)


class NumericalAbort(FloatingPointError):
    """Training hit a non-finite loss; ``report`` holds everything up to the last good epoch."""

    report = None


def make_corpus(cfg: ExperimentConfig) -> tuple[Universe, list[Language]]:
    """The synthetic corpus described by the corpus fields of ``cfg``."""
    universe = make_universe(cfg.K_true, cfg.d_p, cfg.d_v, cfg.seed, max(cfg.sigma_p, cfg.sigma_v))
    specs = default_language_specs(cfg.n_languages, cfg.K_true, cfg.phonemes_per_language, cfg.T,
                                   cfg.utterances, cfg.sigma_p, cfg.sigma_v, cfg.seed)
    names = {s.name for s in specs}
    missing = [u for u in cfg.unseen if u not in names]
    if missing:
        raise ValueError(f"unseen language(s) {missing} not among {sorted(names)}")
    return universe, [generate_language(s, universe) for s in specs]


# ---------------------------------------------------------------- data


@dataclass
class Split:
    """Utterances stacked as arrays: rows are (utterance, t) pairs."""

    ids: np.ndarray      # U x T
    z_p: np.ndarray      # U x T x d_p
    z_v: np.ndarray      # U x T x d_v
    frames: np.ndarray   # U x T x 16 x 16
    landmarks: list
    languages: list

    @classmethod
    def from_utterances(cls, utts) -> "Split":
        if not utts:
            return cls(np.zeros((0, 0), int), np.zeros((0, 0, 0)), np.zeros((0, 0, 0)),
                       np.zeros((0, 0, 16, 16)), [], [])
        return cls(np.stack([u.ids for u in utts]), np.stack([u.z_p for u in utts]),
                   np.stack([u.z_v for u in utts]), np.stack([u.frames for u in utts]),
                   [u.landmarks for u in utts], [u.language for u in utts])

    def __len__(self):
        return len(self.ids)

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])


def split_corpus(languages: list[Language], unseen: list[str], holdout: float, seed: int):
    """(train, held-out seen, zero-shot) splits; held-out is a per-language tail sample."""
    rng = np.random.default_rng([seed, 31337])
    train, held, zero = [], [], []
    for lang in languages:
        if lang.name in unseen:
            zero.extend(lang.utterances)
            continue
        order = rng.permutation(len(lang.utterances))
        n_held = max(1, int(round(holdout * len(order))))
        held.extend(lang.utterances[i] for i in sorted(order[:n_held]))
        train.extend(lang.utterances[i] for i in sorted(order[n_held:]))
    return Split.from_utterances(train), Split.from_utterances(held), Split.from_utterances(zero)


# ---------------------------------------------------------------- evaluation helpers


def contingency(a: np.ndarray, b: np.ndarray, n_a: int, n_b: int) -> np.ndarray:
    c = np.zeros((n_a, n_b))
    np.add.at(c, (a, b), 1.0)
    return c


def hungarian_map(table: np.ndarray) -> np.ndarray:
    """Row -> column assignment maximizing total co-occurrence (rectangular allowed)."""
    rows, cols = linear_sum_assignment(-table)
    out = np.full(table.shape[0], -1, dtype=int)
    out[rows] = cols
    # rows left over (more rows than columns) fall back to their argmax
    missing = out < 0
    out[missing] = table[missing].argmax(axis=1)
    return out


@dataclass
class CorrespondenceMap:
    """Learned phoneme-code -> viseme-code map plus the viseme-code labelling."""

    pcode_to_vcode: np.ndarray
    vcode_to_viseme: np.ndarray

    @classmethod
    def fit(cls, p_codes, v_codes, visemes, K: int, K_true: int) -> "CorrespondenceMap":
        co = contingency(p_codes, v_codes, K, K)
        lab = contingency(v_codes, visemes, K, K_true)
        return cls(hungarian_map(co), hungarian_map(lab))

    def predict(self, p_codes) -> np.ndarray:
        return self.vcode_to_viseme[self.pcode_to_vcode[p_codes]]

    def accuracy(self, p_codes, ids, correspondence) -> float:
        if len(p_codes) == 0:
            return float("nan")
        return float(np.mean(self.predict(p_codes) == np.asarray(correspondence)[ids]))


def normalized_mutual_info(a, b) -> float:
    """NMI with arithmetic-mean normalization; 0 when either labelling is constant."""
    a = np.unique(np.asarray(a), return_inverse=True)[1]
    b = np.unique(np.asarray(b), return_inverse=True)[1]
    joint = contingency(a, b, a.max() + 1, b.max() + 1) / len(a)
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum())
    ha = -float((pa * np.log(pa)).sum())
    hb = -float((pb * np.log(pb)).sum())
    if ha == 0.0 or hb == 0.0:
        return 0.0
    return max(0.0, mi / ((ha + hb) / 2.0))


# ---------------------------------------------------------------- model


class Model:
    """All networks, prototype banks and optimizer state for one run."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        seed = cfg.seed * 1009
        d = cfg.feature_dim
        hidden = [cfg.encoder_hidden]
        self.enc_p = dc.Net(dc.MLPSpec([cfg.d_p, *hidden, d]), seed + 1)
        self.enc_v = dc.Net(dc.MLPSpec([cfg.d_v, *hidden, d]), seed + 2)
        self.est_proto = MIEstimator.create(cfg.K, cfg.K, cfg.disc_hidden, seed + 3)
        self.est_raw = MIEstimator.create(d, d, cfg.disc_hidden, seed + 4)
        M = 1 if cfg.disable_moe else cfg.M
        S = 1 if cfg.disable_moe else cfg.S
        gate_hidden = cfg.gate_hidden or 2 * M
        self.router_cfg = RouterConfig(M=M, S=S, beta=cfg.routed_beta, lambda_util=cfg.lambda_util,
                                       lambda_ent=cfg.lambda_ent, K=cfg.K, entropy_sign=cfg.entropy_sign,
                                       use_route_loss=not cfg.disable_phoneme_guidance)
        self.g_phon = dc.Net(dc.MLPSpec([cfg.K, gate_hidden, M]), seed + 5)
        self.g_cont = dc.Net(dc.MLPSpec([d, gate_hidden, M]), seed + 6)
        self.experts = [dc.Net(dc.MLPSpec([d, cfg.expert_hidden, cfg.expert_out]), seed + 10 + i)
                        for i in range(M)]
        self.decoder = make_decoder(cfg.expert_out, seed + 7)
        self.phi = PerceptualNet(seed + 8)
        self.bank_p: PrototypeBank | None = None
        self.bank_v: PrototypeBank | None = None
        self.adam = {name: dc.AdamState.zeros(len(net.params)) for name, net in self.trainable().items()}
        self.disc_adam = {"proto": dc.AdamState.zeros(len(self.est_proto.net.params)),
                          "raw": dc.AdamState.zeros(len(self.est_raw.net.params))}
        self.expert_calls = np.zeros(M, dtype=int)

    def trainable(self) -> dict:
        nets = {"enc_p": self.enc_p, "enc_v": self.enc_v, "g_phon": self.g_phon, "g_cont": self.g_cont,
                "decoder": self.decoder}
        nets.update({f"expert{i}": e for i, e in enumerate(self.experts)})
        return nets

    def parameter_count(self) -> int:
        nets = list(self.trainable().values()) + [self.est_proto.net, self.est_raw.net]
        return int(sum(len(n.params) for n in nets))

    # -- encoding & prototypes

    def embed_p(self, x, tape=None):
        # unit-norm features give tau a fixed scale; otherwise the encoders can
        # saturate the prototype softmax just by growing their output norm
        return dc.l2_normalize(self.enc_p(x, tape))

    def embed_v(self, x, tape=None):
        return dc.l2_normalize(self.enc_v(x, tape))

    def encode(self, split: Split) -> tuple[np.ndarray, np.ndarray]:
        return self.embed_p(split.flat("z_p")), self.embed_v(split.flat("z_v"))

    def init_banks(self, train: Split, rng: np.random.Generator) -> None:
        zp, zv = self._refit_sample(train, rng)
        n = self.cfg.kmeans_restarts
        self.bank_p = kmeanspp_init(zp, self.cfg.K, int(rng.integers(2**31)), "phoneme", self.cfg.tau, n_init=n)
        self.bank_v = kmeanspp_init(zv, self.cfg.K, int(rng.integers(2**31)), "viseme", self.cfg.tau, n_init=n)

    def refit_banks(self, train: Split, epoch: int, rng: np.random.Generator) -> None:
        zp, zv = self._refit_sample(train, rng)
        n = self.cfg.kmeans_restarts - 1
        self.bank_p = refit(self.bank_p, zp, epoch, restarts=n, seed=int(rng.integers(2**31)))
        self.bank_v = refit(self.bank_v, zv, epoch, restarts=n, seed=int(rng.integers(2**31)))

    def _refit_sample(self, train: Split, rng):
        zp, zv = self.encode(train)
        if len(zp) > self.cfg.refit_sample:
            idx = np.sort(rng.choice(len(zp), self.cfg.refit_sample, replace=False))
            zp, zv = zp[idx], zv[idx]
        return zp, zv

    # -- forward

    def forward(self, zp_raw, zv_raw, real_frames, rng, tape=None, parts=None):
        """Losses for one batch of U utterances (inputs U x T x ...)."""
        cfg = self.cfg
        U, T = zp_raw.shape[:2]
        zp = self.embed_p(zp_raw.reshape(U * T, -1), tape)
        zv = self.embed_v(zv_raw.reshape(U * T, -1), tape)
        vp = soft_assign(zp, self.bank_p)
        if cfg.disable_pv_align:
            l_align = 0.0
        else:
            vv = soft_assign(zv, self.bank_v)
            l_align = alignment_loss(vp, vv, zp, zv, self.est_proto, self.est_raw, cfg.lambda_neg, rng, tape)
        outcome = route(zp, vp, self.router_cfg, lambda v: self.g_phon(v, tape), lambda h: self.g_cont(h, tape))
        experts = [self._counted(i, tape) for i in range(len(self.experts))]
        y = moe_forward(zp, outcome, experts)
        l_router = 0.0 if cfg.disable_moe else router_loss(outcome, vp, self.router_cfg, parts)
        frames = dc.reshape(decode_frames(y, self.decoder, tape), (U, T, 16, 16))
        l_gen = generation_loss(frames, real_frames, self.phi, cfg.lambda1, cfg.lambdap, cfg.lambdat, parts)
        total = total_loss(l_align, l_router, l_gen, cfg.lambda_task)
        if parts is not None:
            parts.update(align=float(dc.const(l_align)), router=float(dc.const(l_router)),
                         gen=float(dc.const(l_gen)), total=float(dc.const(total)))
        return total, outcome, (zp, zv, vp)

    def _counted(self, i, tape):
        expert = self.experts[i]

        def call(x):
            self.expert_calls[i] += len(dc.const(x))
            return expert(x, tape)

        return call

    # -- one optimization step

    def train_step(self, zp_raw, zv_raw, real_frames, rng) -> tuple[dict, np.ndarray]:
        cfg = self.cfg
        tape = dc.Tape()
        parts: dict = {}
        try:
            total, outcome, (zp, zv, vp) = self.forward(zp_raw, zv_raw, real_frames, rng, tape, parts)
        except FloatingPointError as exc:
            raise NumericalAbort(str(exc)) from exc
        if not np.isfinite(parts["total"]):
            raise NumericalAbort(f"non-finite total loss ({parts})")
        dc.backward(tape, total)
        for name, net in self.trainable().items():
            dc.adam_step(net.params, net.grad(tape), self.adam[name], lr=cfg.lr)
        if not cfg.disable_pv_align:
            self._discriminator_step(dc.const(zp), dc.const(zv), dc.const(vp), rng)
        return parts, outcome.usage

    def _discriminator_step(self, zp, zv, vp, rng) -> None:
        """Ascend the JS bound of each estimator on detached inputs."""
        vv = soft_assign(zv, self.bank_v)
        jobs = [("proto", self.est_proto, vp, vv)]
        if not self.cfg.freeze_raw_estimator and self.cfg.lambda_neg > 0:
            jobs.append(("raw", self.est_raw, zp, zv))
        for name, est, x, y in jobs:
            tape = dc.Tape()
            leaf, w = est.net.params.bind(tape)
            mi = estimate_js_mi(est, make_negative_pairs(x, y, rng), weights=w)
            g = dc.backward(tape, dc.neg(mi), leaf)
            dc.adam_step(est.net.params, g, self.disc_adam[name], lr=self.cfg.disc_lr)

    # -- inference

    def codes(self, split: Split) -> tuple[np.ndarray, np.ndarray]:
        zp, zv = self.encode(split)
        return hard_assign(zp, self.bank_p), hard_assign(zv, self.bank_v)

    def infer(self, split: Split):
        """Routing outcome and generated frames (no tape)."""
        zp = self.embed_p(split.flat("z_p"))
        vp = soft_assign(zp, self.bank_p)
        outcome = route(zp, vp, self.router_cfg, self.g_phon, self.g_cont)
        y = moe_forward(zp, outcome, self.experts)
        frames = decode_frames(y, self.decoder).reshape(split.ids.shape + (16, 16))
        return outcome, frames


# ---------------------------------------------------------------- report


@dataclass
class RunReport:
    config: dict
    epochs: list = field(default_factory=list)
    alignment_accuracy: float = float("nan")
    zero_shot_accuracy: float = float("nan")
    routing_nmi: float = float("nan")
    expert_usage: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    parameter_count: int = 0
    tokens_per_second: float = 0.0
    wall_clock: float = 0.0
    status: str = "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))

    def deterministic_view(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock")
        d.pop("tokens_per_second")
        for e in d["epochs"]:
            e.pop("seconds", None)
        return d

    def table(self) -> str:
        lines = [f"{'epoch':>5} {'L_align':>10} {'L_router':>10} {'L_gen':>10} {'total':>10} {'align_acc':>9}"]
        for e in self.epochs:
            lines.append(f"{e['epoch']:>5} {e['align']:>10.5f} {e['router']:>10.5f} {e['gen']:>10.5f} "
                         f"{e['total']:>10.5f} {e['align_acc']:>9.4f}")
        lines.append("")
        lines.append(f"alignment accuracy (seen held-out): {self.alignment_accuracy:.4f}")
        lines.append(f"alignment accuracy (zero-shot):     {self.zero_shot_accuracy:.4f}")
        lines.append(f"routing NMI (phoneme vs expert):    {self.routing_nmi:.4f}")
        lines.append(f"expert usage: {self.expert_usage}")
        for split, m in self.final_metrics.items():
            lines.append(f"{split}: LSE-D {m['lse_d']:.5f}  TMDC {m['tmdc']:.5f}")
        lines.append(f"status: {self.status}")
        return "\n".join(lines)


def evaluate(model: Model, held: Split, zero: Split, universe: Universe, fitter: MouthFitter | None = None):
    """Alignment accuracy, routing NMI, usage and landmark metrics."""
    cfg = model.cfg
    corr = universe.correspondence
    p_codes, v_codes = model.codes(held)
    ids = held.flat("ids")
    cmap = CorrespondenceMap.fit(p_codes, v_codes, corr[ids], cfg.K, universe.K)
    out = {"align_acc": cmap.accuracy(p_codes, ids, corr)}
    if len(zero):
        zp_codes, _ = model.codes(zero)
        out["zero_shot_acc"] = cmap.accuracy(zp_codes, zero.flat("ids"), corr)
    else:
        out["zero_shot_acc"] = float("nan")
    outcome, frames = model.infer(held)
    out["nmi"] = normalized_mutual_info(ids, outcome.top_expert())
    out["usage"] = outcome.usage.tolist()
    if fitter is not None:
        metrics = {}
        for name, split in (("held_out", held), ("zero_shot", zero)):
            if not len(split):
                continue
            _, gen = (outcome, frames) if split is held else model.infer(split)
            ls, tm = [], []
            for real_lm, gen_frames in zip(split.landmarks, gen):
                gen_lm = fitter.landmarks(gen_frames)
                ls.append(lse_d(real_lm, gen_lm))
                with warnings.catch_warnings():
                    # a frozen generated mouth scores 0 by design
                    warnings.simplefilter("ignore", RuntimeWarning)
                    tm.append(tmdc(real_lm, gen_lm))
            metrics[name] = {"lse_d": float(np.mean(ls)), "tmdc": float(np.mean(tm))}
        out["metrics"] = metrics
    return out


def train(cfg: ExperimentConfig, universe: Universe, languages: list[Language], unseen: list[str],
          checkpoint_dir=None, with_metrics: bool = True) -> tuple[RunReport, Model]:
    """Run the full training workflow and return the report and the trained model."""
    t_start = time.perf_counter()
    train_split, held, zero = split_corpus(languages, unseen, cfg.holdout, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2024])
    model = Model(cfg)
    model.init_banks(train_split, rng)
    report = RunReport(config=cfg.to_dict(), parameter_count=model.parameter_count())
    fitter = MouthFitter() if with_metrics else None
    n_train = len(train_split)
    tokens = 0
    step_seconds = 0.0
    last_good = None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(n_train)
            sums: dict = {}
            n_steps = 0
            usage = np.zeros(model.router_cfg.M, dtype=int)
            for lo in range(0, n_train, cfg.batch):
                idx = np.sort(order[lo:lo + cfg.batch])
                if len(idx) * cfg.T < 2:
                    continue
                parts, u = model.train_step(train_split.z_p[idx], train_split.z_v[idx],
                                            train_split.frames[idx], rng)
                usage += u
                tokens += len(idx) * cfg.T
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                n_steps += 1
            step_seconds += time.perf_counter() - t0
            if due_for_refit(model.bank_p, epoch, cfg.refit_period):
                model.refit_banks(train_split, epoch, rng)
            row = {k: v / max(n_steps, 1) for k, v in sums.items()}
            row.update(epoch=epoch, usage=usage.tolist(), seconds=time.perf_counter() - t0)
            row["align_acc"] = evaluate(model, held, zero, universe)["align_acc"]
            report.epochs.append(row)
            last_good = epoch
            if checkpoint_dir is not None:
                save_checkpoint(model, checkpoint_dir)
            log.info("epoch %d total %.5f align_acc %.4f", epoch, row["total"], row["align_acc"])
    except NumericalAbort as exc:
        report.status = f"aborted: non-finite loss after epoch {last_good}"
        report.tokens_per_second = tokens / step_seconds if step_seconds > 0 else 0.0
        report.wall_clock = time.perf_counter() - t_start
        exc.report = report
        raise
    final = evaluate(model, held, zero, universe, fitter)
    report.alignment_accuracy = final["align_acc"]
    report.zero_shot_accuracy = final["zero_shot_acc"]
    report.routing_nmi = final["nmi"]
    report.expert_usage = final["usage"]
    report.final_metrics = final.get("metrics", {})
    report.tokens_per_second = tokens / step_seconds if step_seconds > 0 else 0.0
    report.wall_clock = time.perf_counter() - t_start
    return report, model


def save_checkpoint(model: Model, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, net in model.trainable().items():
        net.params.save(directory / name)
    model.est_proto.net.params.save(directory / "disc_proto")
    model.est_raw.net.params.save(directory / "disc_raw")
    model.bank_p.save(directory / "bank_phoneme")
    model.bank_v.save(directory / "bank_viseme")
