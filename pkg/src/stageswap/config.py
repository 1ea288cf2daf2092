"""Run configuration: plain key=value files over a fixed, documented key set.

Every key has a default, a type, and a constraint; unknown keys, duplicate
keys, bad values, and constraint violations are rejected with the offending
file line or field named. The regime tag is internal (set by the commands),
not a file key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .compress import LossWeights, ReplacementSchedule
from .data import TaskSpec
from .model import TrackerConfig

REGIMES = ("teacher", "compress", "naive", "distill", "decoupled", "sweep")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epochs: int = 60
    iters_per_epoch: int = 200
    batch: int = 32
    lr: float = 4e-4
    lr_decay_epoch: int = 48
    weight_decay: float = 1e-4
    lambda_track: float = 1.0
    lambda_pred: float = 1.0
    lambda_feat: float = 0.2
    p_init: float = 0.5
    alpha1: float = 0.1
    alpha2: float = 0.1
    teacher_layers: int = 8
    student_layers: int = 4
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    patch: int = 4
    template: int = 16
    search: int = 32
    stage_mode: str = "even"
    uneven_sizes: tuple[int, ...] = ()
    init_policy: str = "skip"
    decoder_init: str = "teacher"
    decoder_trainable: bool = True
    noise: float = 0.1
    distractors: int = 2
    regime: str = "teacher"

    def __post_init__(self):
        def need(cond: bool, field: str, msg: str):
            if not cond:
                raise ConfigError(f"{field}: {msg}")

        need(self.seed >= 0, "seed", f"must be >= 0, got {self.seed}")
        for field in ("epochs", "iters_per_epoch", "batch", "teacher_layers",
                      "student_layers", "embed_dim", "heads", "mlp_ratio",
                      "patch", "template", "search"):
            v = getattr(self, field)
            need(v >= 1, field, f"must be >= 1, got {v}")
        need(self.lr > 0, "lr", f"must be > 0, got {self.lr}")
        need(self.lr_decay_epoch >= 0, "lr_decay_epoch",
             f"must be >= 0, got {self.lr_decay_epoch}")
        need(self.weight_decay >= 0, "weight_decay",
             f"must be >= 0, got {self.weight_decay}")
        for field in ("lambda_track", "lambda_pred", "lambda_feat"):
            v = getattr(self, field)
            need(v >= 0, field, f"must be >= 0, got {v}")
        need(0.0 < self.p_init <= 1.0, "p_init",
             f"must be in (0, 1], got {self.p_init}")
        need(self.alpha1 >= 0, "alpha1", f"must be >= 0, got {self.alpha1}")
        need(self.alpha2 >= 0, "alpha2", f"must be >= 0, got {self.alpha2}")
        need(self.alpha1 + self.alpha2 < 1.0, "alpha1",
             f"alpha1 + alpha2 must be < 1, got {self.alpha1 + self.alpha2}")
        need(self.student_layers <= self.teacher_layers, "student_layers",
             f"must be <= teacher_layers, got {self.student_layers} > {self.teacher_layers}")
        need(self.embed_dim % self.heads == 0, "embed_dim",
             f"{self.embed_dim} not divisible by heads={self.heads}")
        need(self.template % self.patch == 0, "template",
             f"{self.template} not divisible by patch={self.patch}")
        need(self.search == 2 * self.template, "search",
             f"must be 2*template={2 * self.template}, got {self.search}")
        need(self.stage_mode in ("even", "uneven"), "stage_mode",
             f"must be even or uneven, got {self.stage_mode!r}")
        if self.stage_mode == "even":
            need(self.teacher_layers % self.student_layers == 0, "student_layers",
                 f"even stage mode needs teacher_layers divisible by student_layers, "
                 f"got {self.teacher_layers}/{self.student_layers}")
        else:
            need(len(self.uneven_sizes) == self.student_layers, "uneven_sizes",
                 f"need {self.student_layers} sizes, got {len(self.uneven_sizes)}")
            need(all(s >= 1 for s in self.uneven_sizes), "uneven_sizes",
                 "every stage size must be >= 1")
            need(sum(self.uneven_sizes) == self.teacher_layers, "uneven_sizes",
                 f"sizes sum to {sum(self.uneven_sizes)}, expected {self.teacher_layers}")
        need(self.init_policy in ("skip", "first", "random"), "init_policy",
             f"must be skip, first, or random, got {self.init_policy!r}")
        need(self.decoder_init in ("teacher", "random"), "decoder_init",
             f"must be teacher or random, got {self.decoder_init!r}")
        need(self.noise >= 0, "noise", f"must be >= 0, got {self.noise}")
        need(self.distractors >= 0, "distractors",
             f"must be >= 0, got {self.distractors}")
        need(self.regime in REGIMES, "regime",
             f"must be one of {REGIMES}, got {self.regime!r}")

    # -- derived pieces ------------------------------------------------------

    def teacher_model_config(self) -> TrackerConfig:
        return TrackerConfig(embed_dim=self.embed_dim, num_layers=self.teacher_layers,
                             num_heads=self.heads, mlp_ratio=self.mlp_ratio,
                             patch_size=self.patch, template_side=self.template,
                             search_side=self.search)

    def student_model_config(self) -> TrackerConfig:
        return TrackerConfig(embed_dim=self.embed_dim, num_layers=self.student_layers,
                             num_heads=self.heads, mlp_ratio=self.mlp_ratio,
                             patch_size=self.patch, template_side=self.template,
                             search_side=self.search)

    def task_spec(self) -> TaskSpec:
        return TaskSpec(template_side=self.template, search_side=self.search,
                        patch=self.patch, noise=self.noise,
                        distractors=self.distractors)

    def schedule(self) -> ReplacementSchedule:
        return ReplacementSchedule(p_init=self.p_init, alpha1=self.alpha1,
                                   alpha2=self.alpha2, total_epochs=self.epochs)

    def loss_weights(self) -> LossWeights:
        return LossWeights(track=self.lambda_track, pred=self.lambda_pred,
                           feat=self.lambda_feat)

    def with_(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["uneven_sizes"] = list(self.uneven_sizes)
        return d


def config_from_dict(d: dict) -> RunConfig:
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(d) - fields
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    d = dict(d)
    if "uneven_sizes" in d:
        d["uneven_sizes"] = tuple(int(s) for s in d["uneven_sizes"])
    return RunConfig(**d)


# -- file parsing --------------------------------------------------------------

def _parse_bool(v: str) -> bool:
    if v == "true":
        return True
    if v == "false":
        return False
    raise ValueError(f"expected true or false, got {v!r}")


def _parse_sizes(v: str) -> tuple[int, ...]:
    if not v.strip():
        return ()
    return tuple(int(part) for part in v.split(","))


_PARSERS = {
    "seed": int, "epochs": int, "iters_per_epoch": int, "batch": int,
    "lr": float, "lr_decay_epoch": int, "weight_decay": float,
    "lambda_track": float, "lambda_pred": float, "lambda_feat": float,
    "p_init": float, "alpha1": float, "alpha2": float,
    "teacher_layers": int, "student_layers": int,
    "embed_dim": int, "heads": int, "mlp_ratio": int,
    "patch": int, "template": int, "search": int,
    "stage_mode": str, "uneven_sizes": _parse_sizes,
    "init_policy": str, "decoder_init": str,
    "decoder_trainable": _parse_bool,
    "noise": float, "distractors": int,
}


def parse_config(path: str) -> RunConfig:
    """Read a key=value config file into a validated RunConfig."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    values: dict = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _PARSERS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e

    try:
        return RunConfig(**values)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e
