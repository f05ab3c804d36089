"""Flat run configuration, read from TOML and overridable from the command line."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from metadt.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def _key(default, module: str, help: str):
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata={"module": module, "help": help})
    return field(default=default, metadata={"module": module, "help": help})


@dataclass
class RunConfig:
    # data sources
    hierarchy_path: str = _key("", "hierarchy", "hierarchy JSON file; empty builds a balanced synthetic tree")
    features_path: str = _key("", "episodes", "feature file; mutually exclusive with synthetic = true")
    synthetic: bool = _key(True, "episodes", "generate hierarchy-aligned synthetic features")
    data_seed: int = _key(0, "episodes", "seed of the synthetic world (centers, samples, semantics)")
    synthetic_branching: list = _key([5, 5], "episodes", "children per node at each depth of the synthetic tree")
    samples_per_class: int = _key(40, "episodes", "synthetic samples per leaf class")
    superclass_spread: float = _key(1.0, "episodes", "radius of superclass centers around their parent")
    class_spread: float = _key(0.5, "episodes", "radius of leaf centers around their parent")
    noise_sigma: float = _key(0.3, "episodes", "per-coordinate Gaussian noise of synthetic samples")
    semantic_mode: str = _key("aligned", "episodes", "aligned | random | file: source of node semantic vectors")
    semantic_noise: float = _key(0.5, "episodes", "Gaussian noise added to aligned semantic vectors")
    novel_classes: list = _key([], "episodes", "leaf ids held out for meta-test; empty picks n_novel stratified")
    n_novel: int = _key(5, "episodes", "number of held-out classes when novel_classes is empty")
    # episodes
    n_way: int = _key(5, "episodes", "classes per episode (N)")
    k_shot: int = _key(1, "episodes", "support samples per class (K)")
    q_per_class: int = _key(15, "episodes", "query samples per class")
    # network
    d_s: int = _key(16, "dtinet", "semantic vector dimension (input of W0)")
    d_in: int = _key(32, "dtinet", "output width of the first graph convolution")
    d_hid: int = _key(64, "dtinet", "output width of the second graph convolution")
    d_f: int = _key(32, "dtinet", "feature / prototype dimension")
    dropout_rate: float = _key(0.5, "dtinet", "dropout probability after each hidden ReLU")
    dropout_phases: list = _key(["outer_train"], "dtinet", "phases with dropout: outer_train, inner_adapt, eval")
    adjacency_norm: str = _key("symmetric", "hierarchy", "symmetric | asymmetric adjacency normalization")
    self_loops: bool = _key(True, "hierarchy", "add identity to the adjacency before normalizing")
    gamma: float = _key(10.0, "iddtree", "cosine scale inside the sibling softmax")
    # optimization
    m_train: int = _key(25, "metalearn", "inner-loop steps during meta-training")
    m_test: int = _key(25, "metalearn", "inner-loop steps during meta-test")
    inner_lr: float = _key(0.05, "metalearn", "inner-loop learning rate")
    epochs: int = _key(20, "metalearn", "outer-loop epochs")
    episodes_per_epoch: int = _key(50, "metalearn", "episodes (outer steps) per epoch")
    outer_lr: float = _key(1e-3, "metalearn", "AdamW learning rate")
    weight_decay: float = _key(5e-4, "metalearn", "decoupled weight decay")
    beta1: float = _key(0.9, "metalearn", "Adam beta1")
    beta2: float = _key(0.999, "metalearn", "Adam beta2")
    adam_eps: float = _key(1e-8, "metalearn", "Adam epsilon")
    grad_mode: str = _key("first_order", "metalearn", "first_order | full_second_order (m_train <= 3)")
    # evaluation
    eval_episodes: int = _key(600, "metalearn", "meta-test episodes")
    fusion_lambda: Any = _key("auto", "fusion", "tree weight in the fused distribution; auto = 0.8 (1-shot) / 0.1 (5-shot)")
    seed: int = _key(0, "cli", "seed for initialization, episode sampling and dropout")
    # ablations
    no_semantic: bool = _key(False, "cli", "one-hot node vectors instead of semantics")
    no_gcn: bool = _key(False, "cli", "identity adjacency: fully-connected layers")
    no_dtinet: bool = _key(False, "cli", "mean-prototype tree without the network")
    no_adapt: bool = _key(False, "cli", "skip fast adaptation at meta-test (m_test = 0)")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            expected = f.type
            if expected == "bool" and not isinstance(value, bool):
                raise ConfigError(f"{f.name} must be a boolean, got {value!r}")
            if expected == "int" and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{f.name} must be an integer, got {value!r}")
            if expected == "float":
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{f.name} must be a number, got {value!r}")
                setattr(self, f.name, float(value))
            if expected == "str" and not isinstance(value, str):
                raise ConfigError(f"{f.name} must be a string, got {value!r}")
            if expected == "list" and not isinstance(value, list):
                raise ConfigError(f"{f.name} must be a list, got {value!r}")
        if bool(self.features_path) == self.synthetic:
            raise ConfigError("set exactly one of features_path or synthetic = true")
        if self.semantic_mode not in ("aligned", "random", "file"):
            raise ConfigError(f"semantic_mode must be aligned, random or file, got {self.semantic_mode!r}")
        if self.semantic_mode == "file" and not self.hierarchy_path:
            raise ConfigError("semantic_mode = 'file' needs hierarchy_path")
        if not self.synthetic and self.semantic_mode != "file":
            raise ConfigError("feature files take semantics from the hierarchy file (semantic_mode = 'file')")
        if self.features_path and not self.hierarchy_path:
            raise ConfigError("features_path needs hierarchy_path")
        if self.adjacency_norm not in ("symmetric", "asymmetric"):
            raise ConfigError(f"adjacency_norm must be symmetric or asymmetric, got {self.adjacency_norm!r}")
        if self.grad_mode not in ("first_order", "full_second_order"):
            raise ConfigError(f"unknown grad_mode {self.grad_mode!r}")
        positive = ("d_s", "d_in", "d_hid", "d_f", "n_way", "k_shot", "samples_per_class",
                    "episodes_per_epoch", "eval_episodes", "gamma", "inner_lr")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("m_train", "m_test", "epochs", "q_per_class"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.q_per_class < 1:
            raise ConfigError("q_per_class must be >= 1")
        if self.outer_lr < 0 or self.weight_decay < 0:
            raise ConfigError("outer_lr and weight_decay must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.fusion_lambda != "auto":
            if isinstance(self.fusion_lambda, bool) or not isinstance(self.fusion_lambda, (int, float)):
                raise ConfigError("fusion_lambda must be a number in [0, 1] or 'auto'")
            if not 0.0 <= self.fusion_lambda <= 1.0:
                raise ConfigError("fusion_lambda must lie in [0, 1]")
        if self.class_spread > self.superclass_spread:
            raise ConfigError("class_spread must not exceed superclass_spread")
        if not all(isinstance(b, int) and b > 0 for b in self.synthetic_branching) or not self.synthetic_branching:
            raise ConfigError("synthetic_branching must be a non-empty list of positive integers")

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def effective_m_test(self) -> int:
        return 0 if self.no_adapt else self.m_test


KEYS = {f.name: f for f in fields(RunConfig)}


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value`` with the value in TOML syntax; bare words are taken as strings."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        unknown = sorted(set(values) - KEYS.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        base = Path(path).parent
        for key in ("hierarchy_path", "features_path"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(base / values[key])
    values.update(overrides or {})
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def describe_keys() -> str:
    """One line per key: name, default and owning module, for ``--help``."""
    lines = []
    defaults = RunConfig()
    for f in fields(RunConfig):
        lines.append(f"  {f.name:<20} default={getattr(defaults, f.name)!r:<16} [{f.metadata['module']}] "
                     f"{f.metadata['help']}")
    return "\n".join(lines)


def model_config(cfg: RunConfig, effective_d_s: int) -> dict:
    """The settings that determine checkpoint compatibility (hashed into its digest)."""
    return {
        "d_s": effective_d_s,
        "d_in": cfg.d_in,
        "d_hid": cfg.d_hid,
        "d_f": cfg.d_f,
        "adjacency_norm": cfg.adjacency_norm,
        "self_loops": cfg.self_loops,
        "no_semantic": cfg.no_semantic,
        "no_gcn": cfg.no_gcn,
        "gamma": cfg.gamma,
    }
