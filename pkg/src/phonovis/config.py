"""Experiment configuration: a flat ``key = value`` text format.

Blank lines and ``#`` comments are ignored. Unknown keys are errors, as are
values that do not parse as the key's type. Lists are comma separated.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def default_output_root() -> str:
    return os.environ.get("PHONOVIS_OUTPUT_ROOT", "runs")


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: str = field(default_factory=lambda: str(Path(default_output_root()) / "corpus"))
    output: str = field(default_factory=lambda: str(Path(default_output_root()) / "run"))

    # corpus generation
    n_languages: int = 5
    unseen: list = field(default_factory=lambda: ["L4"])
    K_true: int = 8
    d_p: int = 16
    d_v: int = 12
    sigma_p: float = 0.5
    sigma_v: float = 0.5
    phonemes_per_language: int = 6
    utterances: int = 200
    T: int = 50

    # prototypes
    K: int = 8
    tau: float = 0.5
    refit_period: int = 10
    kmeans_restarts: int = 10

    # network widths
    feature_dim: int = 16
    encoder_hidden: int = 32
    disc_hidden: int = 32
    expert_hidden: int = 32
    expert_out: int = 16
    gate_hidden: int = 0  # 0 -> 2 * M

    # routing
    S: int = 2
    M: int = 4
    beta: float = 0.5
    entropy_sign: float = 1.0

    # loss weights
    lambda_neg: float = 0.1
    lambda_util: float = 0.01
    lambda_ent: float = 0.001
    lambda_task: float = 1.0
    lambda1: float = 1.0
    lambdap: float = 0.1
    lambdat: float = 0.5

    # optimization
    lr: float = 3e-3
    disc_lr: float = 3e-3
    epochs: int = 20
    batch: int = 8  # utterances per step; routed timesteps B = batch * T
    holdout: float = 0.1
    refit_sample: int = 4000

    # ablations and switches
    disable_moe: bool = False
    disable_pv_align: bool = False
    disable_phoneme_guidance: bool = False
    freeze_raw_estimator: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.K >= 2, "K must be >= 2")
        need(self.tau > 0, "tau must be > 0")
        need(self.refit_period >= 1, "refit_period must be >= 1")
        need(self.kmeans_restarts >= 1, "kmeans_restarts must be >= 1")
        need(1 <= self.S <= self.M, f"need 1 <= S <= M (S={self.S}, M={self.M})")
        need(0.0 <= self.beta <= 1.0, "beta must lie in [0, 1]")
        need(self.entropy_sign in (1.0, -1.0), "entropy_sign must be +1 or -1")
        for name in ("lambda_neg", "lambda_util", "lambda_ent", "lambda_task", "lambda1", "lambdap", "lambdat"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        need(self.lr > 0 and self.disc_lr > 0, "learning rates must be > 0")
        need(self.epochs >= 0, "epochs must be >= 0")
        need(self.batch >= 1 and self.batch * self.T >= 2, "batch must hold at least 2 timesteps")
        need(self.T >= 2, "T must be >= 2")
        need(0.0 < self.holdout < 1.0, "holdout must lie in (0, 1)")
        need(self.K_true >= 2 and self.utterances >= 2, "K_true and utterances must be >= 2")
        need(1 <= self.phonemes_per_language <= self.K_true, "phonemes_per_language must lie in [1, K_true]")
        need(self.sigma_p >= 0 and self.sigma_v >= 0, "noise levels must be >= 0")
        need(self.n_languages >= 1, "n_languages must be >= 1")
        need(all(isinstance(u, str) for u in self.unseen), "unseen must be a list of names")
        for name in ("feature_dim", "encoder_hidden", "disc_hidden", "expert_hidden", "expert_out", "d_p", "d_v"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")

    @property
    def routed_beta(self) -> float:
        return 0.0 if self.disable_phoneme_guidance else self.beta

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {k: _coerce(known[k], v) for k, v in d.items()}
        return cls(**kwargs)

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in raw:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            raw[key] = value
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text(), str(path))


def _coerce(f, value):
    if not isinstance(value, str):
        return value
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "list":
            return [s.strip() for s in value.split(",") if s.strip()]
        return value
    except ValueError:
        raise ConfigError(f"bad value for {f.name}: {value!r} (expected {kind})") from None
