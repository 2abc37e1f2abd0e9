"""Run configuration: one YAML/JSON document with a section per stage."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSection(Section):
    kind: Literal["double_well", "mueller_brown", "harmonic", "chain", "chain_family"]
    dimension: int = 1
    n_atoms: int = 1
    train_sequences: list[list[int]] = Field(default_factory=list)
    heldout_sequences: list[list[int]] = Field(default_factory=list)
    sequence: list[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self):
        if self.kind in ("chain", "chain_family") and self.dimension not in (2, 3):
            raise ValueError("chain systems need dimension 2 or 3")
        if self.kind == "chain" and len(self.sequence) < 2:
            raise ValueError("chain needs a bead-type sequence of length >= 2")
        if self.kind == "chain_family" and not self.train_sequences:
            raise ValueError("chain_family needs train_sequences")
        return self


class PotentialSection(Section):
    temperature: float = 1.0
    params: dict = Field(default_factory=dict)  # potential-specific constants


class DynamicsSection(Section):
    dt: float = 0.005
    gamma: float = 1.0
    tau_steps: int = 100  # pair spacing in integrator steps
    n_frames: int = 2000  # stored frames per training trajectory
    burn_in_tau: int = 10  # discarded prefix, in units of tau
    val_frames: int = 400
    replicas: int = 1  # >1: frames are split over independent vectorised replicas


class DatasetSection(Section):
    max_pairs: int = 2000


class FlowSection(Section):
    n_coupling: int = 4
    n_transformer: int = 2
    hidden: int = 32
    embed: int = 8
    lengthscales: list[float] = Field(default_factory=lambda: [0.1, 0.3, 0.7, 1.2])
    n_types: int = 64
    scale_clamp: float = 5.0
    layer_norm: bool = False
    canonicalize: Optional[bool] = None  # None: on for chains, off for external potentials


class TrainingSection(Section):
    lr: float = 5e-4
    batch_size: int = 64
    likelihood_steps: int = 3000
    acceptance_steps: int = 1000
    eval_every: int = 100
    patience: int = 5
    max_halvings: int = 4
    w_lik: float = 0.99
    w_acc: float = 0.01
    w_ent: float = 0.1
    acceptance_lr: Optional[float] = None  # stage (ii) learning rate; None uses lr
    rotate: bool = True
    checkpoint_every: int = 5
    grad_clip: float = 0.0  # max global gradient norm, 0 = off


class SamplerSection(Section):
    steps: int = 10000
    batch: int = 10
    du_max_factor: float = 30.0  # exploration cutoff in units of T
    explore_chains: int = 100
    explore_steps: int = 10000
    constraint: Optional[list[int]] = None  # dihedral atoms i, j, k, l for the sign check


class AnalysisSection(Section):
    tica_lag: int = 10
    n_bins: int = 50
    component: int = 0


class RunConfig(Section):
    seed: int
    output_dir: str
    system: SystemSection
    potential: PotentialSection = Field(default_factory=PotentialSection)
    dynamics: DynamicsSection = Field(default_factory=DynamicsSection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    flow: FlowSection = Field(default_factory=FlowSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    analysis: AnalysisSection = Field(default_factory=AnalysisSection)

    def dump(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


class ConfigError(ValueError):
    pass


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"])
        if e["type"] == "missing":
            parts.append(f"missing required key '{loc}'")
        elif e["type"] == "extra_forbidden":
            parts.append(f"unknown key '{loc}'")
        else:
            parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_describe(err)) from None


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for dotted, value in (overrides or {}).items():
        node = data
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return parse_config(data)
