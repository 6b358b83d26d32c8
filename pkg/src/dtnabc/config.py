"""Experiment configuration (JSON) with validation."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

__all__ = [
    "ExperimentConfig",
    "GridSpec",
    "BcSpec",
    "InitialSpec",
    "ReferenceSpec",
    "DtnSpec",
    "TdhfSpec",
    "load_config",
    "config_schema",
    "bundled_config",
    "bundled_names",
    "ValidationError",
]

_CONFIG_DIR = Path(__file__).with_name("configs")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSpec(_Strict):
    box: list[list[float]] = Field(description="one [lo, hi] pair per axis, or a single pair for all axes")
    h: float = Field(gt=0)
    open_faces: Optional[list[list[bool]]] = Field(
        default=None, description="[low_open, high_open] per axis; default all open"
    )

    @field_validator("box")
    @classmethod
    def _box(cls, v):
        for pair in v:
            if len(pair) != 2 or not pair[1] > pair[0]:
                raise ValueError(f"box entry {pair} must be [lo, hi] with hi > lo")
        return v


class BcSpec(_Strict):
    kind: Literal["dirichlet", "abc", "cap"] = "dirichlet"
    order: Optional[int] = Field(default=None, ge=0, le=2)
    variant: Optional[
        Literal["zeroth", "first_limit", "first_twopoint", "first_moment", "second_fourpoint"]
    ] = None
    nodes: list[float] = Field(default_factory=list)
    eta: Optional[float] = None
    cap_outer: list[float] = Field(default_factory=lambda: [-16.0, 7.0])
    cap_profile: Literal["printed", "outward"] = "printed"

    @model_validator(mode="after")
    def _consistent(self):
        errs = []
        if self.kind == "abc":
            need = {"zeroth": (0, 1), "first_limit": (1, 1), "first_twopoint": (1, 2),
                    "first_moment": (1, 1), "second_fourpoint": (2, 4)}
            if self.variant is None:
                errs.append("abc needs a variant")
            else:
                order, count = need[self.variant]
                if self.order is not None and self.order != order:
                    errs.append(f"variant {self.variant} has order {order}, not {self.order}")
                self.order = order
                if len(self.nodes) != count:
                    errs.append(f"variant {self.variant} needs {count} nodes, got {len(self.nodes)}")
            if any(not s > 0 for s in self.nodes):
                errs.append(f"nodes must be positive: {self.nodes}")
            if len(set(self.nodes)) != len(self.nodes):
                errs.append(f"nodes must be distinct: {self.nodes}")
        if self.kind == "cap" and not (self.eta is not None and self.eta > 0):
            errs.append("cap needs eta > 0")
        if errs:
            raise ValueError("; ".join(errs))
        return self


class InitialSpec(_Strict):
    k0: float = 5.0
    xc: float = -6.0


class ReferenceSpec(_Strict):
    kind: Literal["analytic", "large_domain", "none"] = "analytic"
    factor: int = Field(default=2, ge=2)


class DtnSpec(_Strict):
    route: Literal["boundary_element", "dense_oracle"] = "boundary_element"
    quad_n: int = Field(default=100, ge=32)
    oracle_layers: int = Field(default=40, ge=1)
    derivative: Literal["finite_difference", "oracle"] = "finite_difference"
    max_gamma: int = Field(default=8000, ge=1, description="memory cap on n_Gamma for dense kernels")
    cache_dir: Optional[str] = None


class TdhfSpec(_Strict):
    t0: float = -497.726
    t3: float = 17270.0
    V0: float = -166.9239
    a: float = 0.45979
    e2: float = 1.439965
    hbarc: float = 197.327
    mc2: float = 938.919
    degeneracy: int = 4
    coulomb_bc: Literal["monopole", "dirichlet"] = "monopole"
    centers: list[list[float]] = Field(default_factory=lambda: [[-4.0, 0.0, 0.0], [4.0, 0.0, 0.0]])
    boost: float = Field(default=0.2, description="|k| per fragment in 1/fm, opposite signs along x")
    gs_dtau: float = Field(default=0.004, gt=0)
    gs_tol: float = Field(default=1e-6, gt=0)
    gs_max_iter: int = Field(default=4000, ge=1)
    sc_tol: float = 1e-8
    sc_max_iter: int = 5
    cg_tol: float = 1e-8


class ExperimentConfig(_Strict):
    name: str = "experiment"
    model: Literal["free_1d", "free_3d", "tdhf"]
    grid: GridSpec
    stencil: Literal["fd3", "fd5", "fd7", "fd9"] = "fd5"
    bc: BcSpec = Field(default_factory=BcSpec)
    integrator: Literal["cn", "taylor4"] = "cn"
    dt: float = Field(gt=0)
    T: float = Field(ge=0)
    stride: int = Field(default=100, ge=1)
    initial: InitialSpec = Field(default_factory=InitialSpec)
    reference: ReferenceSpec = Field(default_factory=ReferenceSpec)
    dtn: DtnSpec = Field(default_factory=DtnSpec)
    snapshots: list[float] = Field(default_factory=list)
    tdhf: Optional[TdhfSpec] = None

    @model_validator(mode="after")
    def _consistent(self):
        errs = []
        dim = 1 if self.model == "free_1d" else 3
        if len(self.grid.box) not in (1, dim):
            errs.append(f"grid.box needs 1 or {dim} pairs for {self.model}")
        if self.grid.open_faces is not None and len(self.grid.open_faces) != dim:
            errs.append(f"grid.open_faces needs {dim} pairs")
        if self.bc.kind == "cap" and self.model != "free_1d":
            errs.append("cap boundary is only defined for free_1d")
        if self.model == "tdhf" and self.tdhf is None:
            self.tdhf = TdhfSpec()
        if self.model != "tdhf" and self.tdhf is not None:
            errs.append("tdhf section given for a non-tdhf model")
        if self.model == "tdhf" and self.reference.kind == "analytic":
            errs.append("tdhf has no analytic reference; use large_domain or none")
        if any(t < 0 or t > self.T + 1e-12 for t in self.snapshots):
            errs.append("snapshot times must lie in [0, T]")
        if errs:
            raise ValueError("; ".join(errs))
        return self

    @property
    def dim(self) -> int:
        return 1 if self.model == "free_1d" else 3

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def load_config(path_or_text) -> ExperimentConfig:
    """Parse a config from a path, a bundled name or raw JSON text."""
    text = str(path_or_text)
    if text.lstrip().startswith("{"):
        return ExperimentConfig.model_validate_json(text)
    p = Path(text)
    if not p.exists() and (_CONFIG_DIR / f"{text}.json").exists():
        p = _CONFIG_DIR / f"{text}.json"
    return ExperimentConfig.model_validate_json(p.read_text())


def bundled_names() -> list[str]:
    return sorted(p.stem for p in _CONFIG_DIR.glob("*.json"))


def bundled_config(name: str) -> ExperimentConfig:
    return load_config(_CONFIG_DIR / f"{name}.json")


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()
