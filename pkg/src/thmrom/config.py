"""Study configuration: one JSON document for every stage of a study."""
from __future__ import annotations

from dataclasses import dataclass, field

from . import io
from .constitutive import ConcreteParams, SteelParams
from .fom import LoadSchedule, StepperConfig
from .geometry import BCConfig, GeometryConfig
from .thermo_hydric import ThermoHydricConfig

# parameter names accepted in grids and --mu strings, mapped to ConcreteParams
MU_FIELDS = {
    "eta_dc": "eta_dc",
    "kappa": "kappa0",
    "alpha_dc": "alpha_dc",
    "eta_is": "eta_is0",
    "eta_id": "eta_id0",
}

DEFAULT_GRID = {"dims": [{"name": "eta_dc", "range": [5e8, 5e10], "n": 5},
                         {"name": "kappa", "range": [1e-5, 1e-3], "n": 5}]}
DEFAULT_TEST_GRID = {"dims": [{"name": "eta_dc", "range": [5e8, 5e10], "n": 7},
                              {"name": "kappa", "range": [1e-5, 1e-3], "n": 7}]}


@dataclass
class RomConfig:
    eps_u: float = 1e-4
    eps_S: float = 1e-4
    delta: float = 1e-4
    pod_mode: str = "full"  # or "incremental"
    n_u: int | None = None  # fixed primal size instead of eps_u

    def __post_init__(self):
        if self.pod_mode not in ("full", "incremental"):
            raise ValueError(f"unknown pod_mode {self.pod_mode!r}")


@dataclass
class GreedyConfig:
    grid: dict = field(default_factory=lambda: dict(DEFAULT_GRID))
    test_grid: dict | None = None
    max_iters: int = 5
    target: float = 1e-2


@dataclass
class StudyConfig:
    geometry: dict = field(default_factory=dict)
    bc: dict = field(default_factory=dict)
    time: dict = field(default_factory=dict)
    thermal: dict = field(default_factory=dict)
    hydric: dict = field(default_factory=dict)
    concrete: dict = field(default_factory=dict)
    steel: dict = field(default_factory=dict)
    loads: dict = field(default_factory=dict)
    rom: RomConfig = field(default_factory=RomConfig)
    greedy: GreedyConfig = field(default_factory=GreedyConfig)

    @classmethod
    def from_dict(cls, d: dict | None) -> "StudyConfig":
        d = dict(d or {})
        known = {"geometry", "bc", "time", "thermal", "hydric", "concrete", "steel", "loads", "rom", "greedy"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config blocks: {sorted(extra)}")
        rom = RomConfig(**d.pop("rom", {}))
        greedy = GreedyConfig(**d.pop("greedy", {}))
        cfg = cls(**{k: dict(v or {}) for k, v in d.items()}, rom=rom, greedy=greedy)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "StudyConfig":
        return cls.from_dict(io.read_json(path))

    def to_dict(self) -> dict:
        return io.to_jsonable(self)

    # -- typed views ------------------------------------------------------
    def geometry_config(self) -> GeometryConfig:
        return GeometryConfig.from_dict(self.geometry)

    def bc_config(self) -> BCConfig:
        return BCConfig.from_dict(self.bc)

    def stepper(self) -> StepperConfig:
        return StepperConfig.from_dict(self.time)

    def thermo_hydric(self) -> ThermoHydricConfig:
        th = dict(self.thermal)
        if self.hydric:
            th["hydric"] = dict(self.hydric)
        return ThermoHydricConfig.from_dict(th)

    def schedule(self) -> LoadSchedule:
        return LoadSchedule.from_dict(self.loads)

    def steel_params(self) -> SteelParams:
        return SteelParams.from_dict(self.steel)

    def concrete_params(self, mu: dict | None = None) -> ConcreteParams:
        base = ConcreteParams.from_dict(self.concrete)
        return base.with_values(**mu_to_fields(mu or {}))

    def validate(self) -> None:
        th = self.thermo_hydric()
        sch = self.schedule()
        if sch.t_f > th.t_final * (1 + 1e-12):
            raise ValueError("the load schedule outlasts the thermo-hydric history")
        self.stepper()
        self.geometry_config()
        self.concrete_params()
        self.steel_params()

    # -- hashing ----------------------------------------------------------
    def fom_dict(self) -> dict:
        """Blocks that influence a full-order run (everything except rom/greedy)."""
        d = self.to_dict()
        d.pop("rom")
        d.pop("greedy")
        return d

    def aux_hash(self) -> str:
        return io.content_hash({"geometry": self.geometry, "thermal": self.thermal, "hydric": self.hydric})

    def fom_hash(self) -> str:
        return io.content_hash(self.fom_dict())


def mu_to_fields(mu: dict) -> dict:
    out = {}
    for k, v in mu.items():
        if k not in MU_FIELDS:
            raise KeyError(f"unknown parameter {k!r}; expected one of {sorted(MU_FIELDS)}")
        out[MU_FIELDS[k]] = float(v)
    return out


def parse_mu(text: str | None) -> dict:
    """``"eta_dc=5e9,kappa=4.2e-4"`` -> ``{"eta_dc": 5e9, "kappa": 4.2e-4}``."""
    mu = {}
    for part in filter(None, (p.strip() for p in (text or "").split(","))):
        if "=" not in part:
            raise ValueError(f"malformed parameter assignment {part!r}")
        k, v = (s.strip() for s in part.split("=", 1))
        if k not in MU_FIELDS:
            raise KeyError(f"unknown parameter {k!r}; expected one of {sorted(MU_FIELDS)}")
        mu[k] = float(v)
    return mu
