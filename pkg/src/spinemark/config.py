"""Run configuration: one JSON document covering every stage.

The defaults reproduce the published protocol. ``desk_scale()`` returns the
reduced setting that trains on phantoms in minutes on a laptop CPU.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .net import CnnArch
from .sequence import BiRnnArch, RnnHyper
from .train import CnnHyper


class ConfigError(ValueError):
    """Raised for unknown, missing or contradictory configuration keys."""


@dataclass
class DataConfig:
    per_vertebra: int = 40           # positive CNN crops per vertebra
    negative_ratio: float = 1.0      # negatives per positive
    rnn_per_vertebra: int = 30       # RNN subimages per vertebra
    rnn_max_dims: tuple[int, int, int] = (96, 256, 256)
    seed: int = 0


@dataclass
class EvalConfig:
    threshold_mm: float = 20.0


@dataclass
class PathsConfig:
    train_dir: str | None = None
    test_dir: str | None = None
    run_dir: str | None = None


@dataclass
class RunConfig:
    cnn_arch: CnnArch = field(default_factory=CnnArch)
    cnn: CnnHyper = field(default_factory=CnnHyper)
    rnn_arch: BiRnnArch = field(default_factory=BiRnnArch)
    rnn: RnnHyper = field(default_factory=RnnHyper)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        problems = []
        for name, hyper in (("cnn", self.cnn), ("rnn", self.rnn)):
            if hyper.learning_rate <= 0:
                problems.append(f"{name}.learning_rate must be positive")
            if hyper.weight_decay < 0:
                problems.append(f"{name}.weight_decay must be non-negative")
            if not 0 <= hyper.momentum < 1:
                problems.append(f"{name}.momentum must lie in [0, 1)")
            if hyper.lam < 0:
                problems.append(f"{name}.lam must be non-negative")
            if hyper.batch_size < 1 or hyper.epochs < 0:
                problems.append(f"{name}.batch_size must be >= 1 and epochs >= 0")
        if not 0 < self.cnn.lr_decay <= 1 or self.cnn.lr_decay_every < 1:
            problems.append("cnn.lr_decay must lie in (0, 1] and cnn.lr_decay_every be >= 1")
        if self.rnn.max_len < 2:
            problems.append("rnn.max_len must be >= 2")
        if self.rnn_arch.input_dim != self.cnn_arch.fc5:
            problems.append(f"rnn_arch.input_dim {self.rnn_arch.input_dim} contradicts "
                            f"cnn_arch.fc5 {self.cnn_arch.fc5}")
        if self.rnn_arch.hidden < 1 or self.rnn_arch.layers < 1:
            problems.append("rnn_arch.hidden and rnn_arch.layers must be >= 1")
        if self.data.per_vertebra < 0 or self.data.rnn_per_vertebra < 0 or self.data.negative_ratio < 0:
            problems.append("data counts must be non-negative")
        if self.eval.threshold_mm <= 0:
            problems.append("eval.threshold_mm must be positive")
        try:
            self.cnn_arch.pool4_shape
        except ValueError as exc:
            problems.append(f"cnn_arch: {exc}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_json(self) -> dict:
        doc = {}
        for f in fields(self):
            section = asdict(getattr(self, f.name))
            doc[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        """Strict parse: unknown sections or keys and wrongly typed values are
        rejected; absent keys keep their defaults."""
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}")
        base = cls()
        parts = {}
        for name in known:
            current = getattr(base, name)
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            parts[name] = _parse_section(name, current, section)
        return cls(**parts).validate()

    def require(self, *path_keys: str) -> None:
        missing = [k for k in path_keys if getattr(self.paths, k) in (None, "")]
        if missing:
            raise ConfigError(f"missing required paths: {', '.join('paths.' + k for k in missing)}")


def _parse_section(name, current, section: dict):
    allowed = {f.name: f for f in fields(current)}
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    values = {}
    for key, raw in section.items():
        default = getattr(current, key)
        values[key] = _coerce(f"{name}.{key}", default, raw)
    return replace(current, **values)


def _coerce(where, default, raw):
    if isinstance(default, bool):
        ok = isinstance(raw, bool)
    elif isinstance(default, int):
        ok = isinstance(raw, int) and not isinstance(raw, bool)
    elif isinstance(default, float):
        ok = isinstance(raw, (int, float)) and not isinstance(raw, bool)
        raw = float(raw) if ok else raw
    elif isinstance(default, tuple):
        ok = isinstance(raw, list) and len(raw) == len(default) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in raw)
        raw = tuple(raw) if ok else raw
    else:  # optional strings
        ok = raw is None or isinstance(raw, str)
    if not ok:
        raise ConfigError(f"{where}: expected a value like {default!r}, got {raw!r}")
    return raw


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    return RunConfig.from_json(doc)


def desk_scale() -> RunConfig:
    """Narrow networks and short schedules sized for phantom corpora."""
    cfg = RunConfig(
        cnn_arch=CnnArch(channels=(8, 16, 32, 32), kernel=1, fc5=256),
        cnn=CnnHyper(epochs=16, batch_size=8, learning_rate=0.003, lr_decay=0.4, lr_decay_every=2100),
        rnn_arch=BiRnnArch(input_dim=256, hidden=32, layers=2),
        rnn=RnnHyper(epochs=200, batch_size=16, learning_rate=0.01, max_len=320),
        data=DataConfig(per_vertebra=6, rnn_per_vertebra=4),
    )
    return cfg.validate()
