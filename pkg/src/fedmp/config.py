"""Flat key = value experiment configuration with a typed schema.

Unknown keys are rejected with the offending key name; every key can be
overridden through the environment with the ``FEDMP_`` prefix (dots in key
names are not used, so ``learning_rate`` becomes ``FEDMP_LEARNING_RATE``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .data import DatasetSpec
from .federation import FederationConfig
from .nn import NetworkSpec, mlp_spec

ENV_PREFIX = "FEDMP_"
MODES = ("fedavg", "fedmp", "fewshot", "single", "centralized")


class ConfigError(ValueError):
    pass


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_int_list(value: str) -> tuple:
    value = value.strip()
    if not value:
        return ()
    return tuple(int(v.strip()) for v in value.split(","))


def _parse_mode(value: str) -> str:
    v = value.strip().lower()
    if v not in MODES:
        raise ValueError(f"must be one of {MODES}")
    return v


@dataclass
class ExperimentConfig:
    mode: str = "fedmp"
    seeds: tuple = (0, 1, 2)
    output_dir: str = "out"
    # dataset
    input_dim: int = 16
    classes: int = 3
    clients: int = 3
    samples_per_client: int = 64
    skew_strength: float = 2.0
    noise_std: float = 0.1
    dataset_seed: int = 0
    # network
    hidden_extractor: tuple = (64, 32)
    hidden_classifier: tuple = (16,)
    # federation
    rounds: int = 30
    local_epochs: int = 2
    batch_size: int = 64
    mu_client: float = 0.5
    mu_server: float = 0.7
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    enable_sfmc: bool = True
    enable_cpgma: bool = True
    sample_count: int = 64
    bank_capacity: int = 512
    eps_guard: float = 1e-8
    optimizer: str = "adam"
    track_geometry: bool = True
    stage_epochs: tuple = (30, 60, 60)
    # privacy attack
    attack_layers: tuple = (2, 4)
    attack_epochs: int = 200
    attack_train_fraction: float = 0.5
    attack_learning_rate: float = 1e-2

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            input_dim=self.input_dim,
            num_classes=self.classes,
            samples_per_client=self.samples_per_client,
            num_clients=self.clients,
            skew_strength=self.skew_strength,
            noise_std=self.noise_std,
            seed=self.dataset_seed,
        )

    def network_spec(self) -> NetworkSpec:
        return mlp_spec(self.input_dim, self.hidden_extractor,
                        self.hidden_classifier, self.classes)

    def federation_config(self, seed: int, mode: str | None = None) -> FederationConfig:
        mode = mode or self.mode
        modules = mode in ("fedmp", "fewshot", "single")
        return FederationConfig(
            rounds=self.rounds,
            num_clients=self.clients,
            local_epochs=self.local_epochs,
            num_classes=self.classes,
            batch_size=self.batch_size,
            mu_client=self.mu_client,
            mu_server=self.mu_server,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            enable_sfmc=self.enable_sfmc and modules and mode != "single",
            enable_cpgma=self.enable_cpgma and modules and mode != "single",
            sample_count=self.sample_count,
            bank_capacity=self.bank_capacity,
            eps_guard=self.eps_guard,
            seed=seed,
            optimizer=self.optimizer,
            track_geometry=self.track_geometry,
        )


_PARSERS = {
    "mode": _parse_mode,
    "seeds": _parse_int_list,
    "output_dir": str,
    "input_dim": int,
    "classes": int,
    "clients": int,
    "samples_per_client": int,
    "skew_strength": float,
    "noise_std": float,
    "dataset_seed": int,
    "hidden_extractor": _parse_int_list,
    "hidden_classifier": _parse_int_list,
    "rounds": int,
    "local_epochs": int,
    "batch_size": int,
    "mu_client": float,
    "mu_server": float,
    "learning_rate": float,
    "weight_decay": float,
    "enable_sfmc": _parse_bool,
    "enable_cpgma": _parse_bool,
    "sample_count": int,
    "bank_capacity": int,
    "eps_guard": float,
    "optimizer": str,
    "track_geometry": _parse_bool,
    "stage_epochs": _parse_int_list,
    "attack_layers": _parse_int_list,
    "attack_epochs": int,
    "attack_train_fraction": float,
    "attack_learning_rate": float,
}

assert set(_PARSERS) == {f.name for f in fields(ExperimentConfig)}


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _PARSERS:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}: line {lineno}: {key}: {exc}") from None
    return ExperimentConfig(**values)


def apply_env_overrides(config: ExperimentConfig, environ=None) -> ExperimentConfig:
    environ = os.environ if environ is None else environ
    for key in _PARSERS:
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            try:
                setattr(config, key, _PARSERS[key](environ[env_key]))
            except ValueError as exc:
                raise ConfigError(f"env {env_key}: {exc}") from None
    return config


def load_config(path, environ=None) -> ExperimentConfig:
    with open(path) as fh:
        config = parse_config_text(fh.read(), source=str(path))
    return apply_env_overrides(config, environ)


def config_echo(config: ExperimentConfig) -> dict:
    out = {}
    for f in fields(config):
        v = getattr(config, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out
