"""Experiment configuration: a YAML key-value tree with CLI overrides.

Example::

    setting: I              # I | II | III (omit and give `data:` for CSV runs)
    d_A: [5]                # Setting III accepts any of 3, 5, 7, 9
    methods: [Baseline-ERM, DRUM, DRUM-Debiased (unconstrained)]
    scales: [0.6, 1.0, 1.4, 1.8]
    mc: 100                 # Monte-Carlo test sets per scale
    seeds: [0]
    profile: I              # hyperparameter profile; defaults to the setting
    train_fraction: 0.8     # share of source rows used for training
    sim: {n: 5000, N: 1000, n_test: 1000}
    overrides:              # per method, or `baselines` / `drum` for a family
      drum: {outcome: {epochs: 50}}
    grids:                  # only read by `grid`
      Baseline-ERM: {lr: [1.0e-4, 1.0e-3], epochs: [20, 30]}
    data: {source: src.csv, target: tgt.csv, schema: schema.yaml}
    output_dir: runs/setting1
    threads: 1              # worker threads for MC evaluation
    parallel_methods: false # also fit methods concurrently (uses `threads`)
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from ..errors import ConfigError
from ..simgen import SCALES, SUPPORTED_DA
from .methods import PROFILES, canonical

OUTPUT_ROOT_ENV = "DRUM_OUTPUT_ROOT"


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "drum-out")


@dataclass
class ExperimentConfig:
    setting: str | None = "I"
    d_A: list | None = None
    methods: list = field(default_factory=list)
    scales: list = field(default_factory=lambda: list(SCALES))
    mc: int = 100
    seeds: list = field(default_factory=lambda: [0])
    profile: str | None = None
    train_fraction: float = 0.8
    sim: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)
    grids: dict = field(default_factory=dict)
    data: dict | None = None
    output_dir: str | None = None
    threads: int = 1
    parallel_methods: bool = False
    task: str = "regression"
    save_models: bool = True

    def __post_init__(self):
        self.methods = [canonical(m) for m in self.methods]
        if self.setting is not None:
            self.setting = str(self.setting)
            if self.setting not in SUPPORTED_DA:
                raise ConfigError(f"unknown setting {self.setting!r}")
            if self.d_A is None:
                self.d_A = list(SUPPORTED_DA[self.setting]) if self.setting != "III" else [3, 5, 7, 9]
            elif isinstance(self.d_A, int):
                self.d_A = [self.d_A]
            for d in self.d_A:
                if d not in SUPPORTED_DA[self.setting]:
                    raise ConfigError(f"d_A={d} is not available in Setting {self.setting}")
        elif self.data is None:
            raise ConfigError("config needs either a simulation setting or a data section")
        if self.profile is None:
            self.profile = self.setting if self.setting is not None else "realdata"
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if int(self.mc) < 1:
            raise ConfigError("mc must be at least 1")
        self.mc = int(self.mc)
        self.scales = [float(s) for s in self.scales]
        if any(s < 0 for s in self.scales):
            raise ConfigError("perturbation scales must be non-negative")
        if isinstance(self.seeds, int):
            self.seeds = [self.seeds]
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        for name in self.grids:
            canonical(name)

    def validate_for_run(self) -> None:
        if not self.methods:
            raise ConfigError("method list is empty")
        if self.setting is None:
            raise ConfigError("run needs a simulation setting")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = {k: v for k, v in self.to_dict().items() if k not in ("output_dir", "threads", "parallel_methods")}
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]

    def out_dir(self) -> str:
        return self.output_dir or os.path.join(default_output_root(), f"run-{self.hash()}")


def load_config(path: str | None = None, **cli) -> ExperimentConfig:
    """Read a YAML config (if given) and apply non-``None`` keyword overrides."""
    blob: dict = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            blob = yaml.safe_load(fh) or {}
        if not isinstance(blob, dict):
            raise ConfigError(f"{path}: config must be a mapping")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(blob) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    blob.update({k: v for k, v in cli.items() if v is not None})
    return ExperimentConfig(**blob)
