"""Flat YAML experiment configuration with line-numbered diagnostics.

Every key is optional and falls back to the default declared on
:class:`ExperimentConfig`; unknown keys and ill-typed values are rejected with the line
they appear on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ConfigError


@dataclass
class ExperimentConfig:
    # randomness
    seed: int = 0
    data_seed: int | None = None
    # task
    task: str = "blobs"
    n_classes: int = 4
    dim: int = 20
    n_train: int = 2000
    n_test: int = 1000
    separation: float = 3.0
    noise: float = 1.0
    edge_offset: float = 12.0
    edge_spread: float = 0.4
    n_edge_train: int = 200
    n_edge_test: int = 200
    # model
    model: str = "mlp"
    hidden: list = field(default_factory=lambda: [16])
    # federated training
    U: int = 25
    T: int = 30
    lr_kind: str = "constant"
    lr: float = 0.05
    lr_a: float = 1.0
    lr_b0: float = 10.0
    epochs: int = 2
    batch_size: int = 16
    dirichlet: float = 0.5
    workers: int = 1
    # backdoor
    attacker: int = 0
    backdoor_source: int = 0
    backdoor_target: int = 1
    backdoor_fraction: float = 1.0
    unlearn_user: int = 0
    # compression
    Ubar: int = 10
    replacement: bool = False
    threshold: float = 0.0
    threshold_kind: str = "constant"
    lattice: str = "hexagonal"
    lattice_step: float = 1.0
    rate: float = 4.0
    gamma: float | None = None
    bypass: bool = False
    write_raw: bool = True
    write_medu: bool = True
    # sweep / adapt / verify
    sweep_Ubar: list = field(default_factory=lambda: [10])
    sweep_threshold: list = field(default_factory=lambda: [0.0])
    sweep_rate: list = field(default_factory=lambda: [4.0])
    sweep_lattice: list = field(default_factory=lambda: ["hexagonal"])
    sweep_seeds: list = field(default_factory=lambda: [0])
    adapt_rounds: int = 10
    adapt_users: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    verify_seeds: int = 500
    verify_level: float = 0.05
    out: str = "runs"

    def validate(self):
        def bad(msg):
            err = ConfigError(msg)
            err.key = next((w for w in msg.replace("=", " ").split() if w in _TYPES), None)
            raise err

        if self.task not in ("blobs", "digits"):
            bad(f"task must be blobs or digits, got {self.task!r}")
        if self.model not in ("mlp", "logistic", "linear"):
            bad(f"model must be mlp, logistic or linear, got {self.model!r}")
        if self.model == "mlp" and not self.hidden:
            bad("mlp needs at least one hidden width")
        if self.U < 2:
            bad("U must be at least 2")
        if self.T < 0:
            bad("T must be >= 0")
        for name in ("attacker", "unlearn_user"):
            v = getattr(self, name)
            if not 0 <= v <= self.U:
                bad(f"{name} must be 0 (none) or a user id in [1, {self.U}], got {v}")
        if self.Ubar < 1 or (not self.replacement and self.Ubar > self.U):
            bad(f"Ubar={self.Ubar} incompatible with U={self.U} (replacement={self.replacement})")
        if self.lattice not in ("scalar", "hexagonal"):
            bad(f"lattice must be scalar or hexagonal, got {self.lattice!r}")
        if self.lr_kind not in ("constant", "decaying"):
            bad(f"lr_kind must be constant or decaying, got {self.lr_kind!r}")
        if self.threshold_kind not in ("constant", "decaying"):
            bad(f"threshold_kind must be constant or decaying, got {self.threshold_kind!r}")
        for name in ("sweep_Ubar", "sweep_threshold", "sweep_rate", "sweep_lattice", "sweep_seeds"):
            if not getattr(self, name):
                bad(f"sweep axis {name} is empty")
        for name in ("dirichlet", "lr", "lr_a", "lr_b0", "lattice_step", "rate", "noise"):
            if not getattr(self, name) > 0:
                bad(f"{name} must be positive")
        if self.backdoor_source == self.backdoor_target:
            bad("backdoor_source and backdoor_target must differ")
        for name in ("backdoor_source", "backdoor_target"):
            if not 0 <= getattr(self, name) < self.n_classes:
                bad(f"{name} must be a class index below n_classes={self.n_classes}")
        return self

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig(**d).validate()


_TYPES = {}
for _f in fields(ExperimentConfig):
    _TYPES[_f.name] = _f.type


def _coerce(name, value, line):
    kind = _TYPES[name]
    where = f"line {line}: {name}"
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if kind in ("int", "int | None"):
        if value is None and kind == "int | None":
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if kind in ("float", "float | None"):
        if value is None and kind == "float | None":
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if kind == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return value
    raise AssertionError(kind)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict) or (node is not None and not isinstance(node, yaml.MappingNode)):
        raise ConfigError(f"{source}: top level must be a mapping of keys to values")
    lines = {}
    if node is not None:
        for key_node, _ in node.value:
            lines[key_node.value] = key_node.start_mark.line + 1
    kw = {}
    for key, value in data.items():
        line = lines.get(str(key), "?")
        if key not in _TYPES:
            raise ConfigError(f"{source}: line {line}: unknown key {key!r}")
        try:
            kw[key] = _coerce(key, value, line)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from exc
    try:
        return ExperimentConfig(**kw).validate()
    except ConfigError as exc:
        line = lines.get(getattr(exc, "key", None))
        where = f"{source}: line {line}" if line else source
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
