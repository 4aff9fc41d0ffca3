"""
Experiment configuration files

An experiment is described by a YAML document whose sections map onto the
dataclasses below. Every field has a default, unknown sections or keys are
rejected, and all problems are reported together in one ConfigError before
any work starts.
"""

from dataclasses import dataclass, field, fields, replace
import logging
import os

import yaml

from cilkit.errors import ConfigError
from cilkit.models import BackboneConfig
from cilkit.services.inference_service import StrategyKind
from cilkit.services.trainer_service import PretrainConfig, TrainConfig
from cilkit.utils.datasets import ProtocolSpec, SyntheticConfig

logger = logging.getLogger(__name__)

SECTIONS = {
    "protocol": ProtocolSpec,
    "synthetic": SyntheticConfig,
    "backbone": BackboneConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
}
SCALARS = ("name", "seed", "strategies", "data", "backbone_checkpoint")
DATA_KEYS = ("train", "test")


@dataclass
class ExperimentConfig:
    name: str = "default"
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    strategies: list = field(default_factory=lambda: [k.value for k in StrategyKind])
    seed: int = 1
    data: dict = field(default_factory=dict)
    backbone_checkpoint: str = None

    @property
    def uses_files(self):
        return bool(self.data)

    def problems(self):
        issues = []
        for name in SECTIONS:
            issues.extend(getattr(self, name).problems())
        if not isinstance(self.seed, int):
            issues.append(f"seed must be an integer, got {self.seed!r}")
        if not self.strategies:
            issues.append("strategies must name at least one strategy")
        valid = [k.value for k in StrategyKind]
        for name in self.strategies:
            if name not in valid:
                issues.append(f"unknown strategy {name!r}; choose from {', '.join(valid)}")
        if len(set(self.strategies)) != len(self.strategies):
            issues.append("strategies must not repeat")

        if self.data:
            unknown = sorted(set(self.data) - set(DATA_KEYS))
            if unknown:
                issues.append(f"data: unknown keys {unknown}")
            if set(self.data) & set(DATA_KEYS) != set(DATA_KEYS):
                issues.append("data needs both 'train' and 'test' paths")
        else:
            if self.synthetic.num_classes != self.protocol.total_classes:
                issues.append(
                    f"synthetic.num_classes ({self.synthetic.num_classes}) must equal "
                    f"protocol.total_classes ({self.protocol.total_classes})"
                )
            if self.synthetic.token_dim != self.backbone.token_dim:
                issues.append(
                    f"synthetic.token_dim ({self.synthetic.token_dim}) must equal "
                    f"backbone.token_dim ({self.backbone.token_dim})"
                )
            if self.synthetic.seq_len != self.backbone.seq_len:
                issues.append(
                    f"synthetic.seq_len ({self.synthetic.seq_len}) must equal backbone.seq_len ({self.backbone.seq_len})"
                )
        return issues

    def validate(self):
        issues = self.problems()
        if issues:
            raise ConfigError(f"experiment '{self.name}' is invalid", issues)
        return self

    def with_seed(self, seed):
        """Copy whose data and training randomness both follow ``seed``"""
        return replace(
            self,
            seed=seed,
            synthetic=replace(self.synthetic, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def with_train(self, **changes):
        return replace(self, train=replace(self.train, **changes))

    def to_dict(self):
        out = {name: getattr(self, name).to_dict() for name in SECTIONS}
        out.update(
            name=self.name,
            seed=self.seed,
            strategies=list(self.strategies),
            data=dict(self.data),
            backbone_checkpoint=self.backbone_checkpoint,
        )
        return out

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


def _build_section(name, cls, values, problems):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        problems.append(f"{name}: expected a mapping, got {type(values).__name__}")
        return cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        problems.append(f"{name}: unknown keys {unknown}")
    return cls(**{k: v for k, v in values.items() if k in known})


def _apply_override(raw, key, value):
    section, _, leaf = key.partition(".")
    if leaf:
        raw.setdefault(section, {})
        if raw[section] is None:
            raw[section] = {}
        raw[section][leaf] = value
    else:
        raw[section] = value


def load_experiment_config(path=None, overrides=None):
    """
    Read, override and validate an experiment file

    Args:
        path: YAML file; None means all defaults
        overrides: mapping of keys such as ``seed``, ``strategies``,
            ``train.lambda0`` or ``train.orth_mode`` to values that replace
            the file's

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: listing every problem found
    """
    raw = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as handle:
                raw = yaml.safe_load(handle) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")

    for key, value in (overrides or {}).items():
        if value is not None:
            _apply_override(raw, key, value)

    problems = []
    unknown = sorted(set(raw) - set(SECTIONS) - set(SCALARS))
    if unknown:
        problems.append(f"unknown sections {unknown}")

    sections = {name: _build_section(name, cls, raw.get(name), problems) for name, cls in SECTIONS.items()}
    strategies = raw.get("strategies")
    if strategies is not None and not isinstance(strategies, (list, tuple)):
        problems.append("strategies must be a list")
        strategies = None
    data = raw.get("data") or {}
    if not isinstance(data, dict):
        problems.append("data must be a mapping with 'train' and 'test' paths")
        data = {}

    cfg = ExperimentConfig(
        name=raw.get("name") or (os.path.splitext(os.path.basename(path))[0] if path else "default"),
        strategies=list(strategies) if strategies is not None else [k.value for k in StrategyKind],
        seed=sections["train"].seed,
        data=dict(data),
        backbone_checkpoint=raw.get("backbone_checkpoint"),
        **sections,
    )
    if "seed" in raw:
        if isinstance(raw["seed"], int):
            cfg = cfg.with_seed(raw["seed"])
        else:
            problems.append(f"seed must be an integer, got {raw['seed']!r}")

    problems.extend(cfg.problems())
    if problems:
        raise ConfigError(f"experiment config {path or '<defaults>'} is invalid", problems)
    logger.debug(f"Loaded experiment '{cfg.name}' ({cfg.protocol.label}, seed {cfg.seed})")
    return cfg
