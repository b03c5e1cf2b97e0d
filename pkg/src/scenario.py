"""Scenario documents: schema validation, parsing, presets and re-emission."""
import copy
import json
import logging
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import jsonschema

from src.config import DEFAULT_SEED, FLUID_HORIZON, OUTPUT_DIR, PRESET_NAMES, TOLERANCES, Tolerances
from src.dessim import SimConfig
from src.errors import ValidationError
from src.network import NetworkSpec, validate
from src.policies import PolicyConfig

logger = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).with_name("scenario_schema.json")


class ScenarioError(ValidationError):
    """Raised for a document that breaks the schema, an unknown preset or an unreadable file."""
    pass


_LINE = [[0, 0, 1, 0], [0, 0, 0, 0], [0, 0, 0, 1], [0, 1, 0, 0]]

PRESETS: Dict[str, Dict[str, Any]] = {
    "lu-kumar-lq": {
        "name": "lu-kumar-lq",
        "description": "Route 1->3->4->2 under LQ; group 1 empties first, then everything drains.",
        "network": {
            "groups": [[1, 2], [3, 4]],
            "routing": _LINE,
            "arrival_rates": [0.4, 0, 0, 0],
            "service_rates": [3, 1, 1, 1],
        },
        "policy": {"kind": "LQ", "tiebreak": "natural"},
        "fluid": {"x0": [40, 30, 20, 10]},
        "sim": {"horizon": 10000.0, "r_list": [10, 50, 200]},
    },
    "ldq-acyclic": {
        "name": "ldq-acyclic",
        "description": "Route 1->3->4->2 with unit service under LDQ; queues equalize and drain together.",
        "network": {
            "groups": [[1, 2], [3, 4]],
            "routing": _LINE,
            "arrival_rates": [0.4, 0, 0, 0],
            "service_rates": [1, 1, 1, 1],
        },
        "policy": {"kind": "LDQ", "tiebreak": "natural"},
        "fluid": {"x0": [40, 30, 20, 10]},
        "sim": {"horizon": 10000.0},
    },
    "ldq-cycle": {
        "name": "ldq-cycle",
        "description": "Two single-queue groups feeding each other under LDQ; the fluid path stalls.",
        "network": {
            "groups": [[1], [2]],
            "routing": [[0, 1], [0.6, 0]],
            "arrival_rates": [0.2, 0],
            "service_rates": [1, 1],
        },
        "policy": {"kind": "LDQ", "tiebreak": "natural"},
        "fluid": {"x0": [20, 10]},
        "sim": {"horizon": 10000.0},
    },
    "priority-unstable": {
        "name": "priority-unstable",
        "description": "Static priority to queues 2 and 3 makes {2,3} a virtual group with load above one.",
        "network": {
            "groups": [[1, 2], [3, 4]],
            "routing": _LINE,
            "arrival_rates": [1, 0, 0, 0],
            "service_rates": [5, 1.8, 1.8, 5],
            "virtual_groups": [[2, 3]],
        },
        "policy": {"kind": "StaticPriority", "tiebreak": "natural", "priority_order": [[2, 1], [3, 4]]},
        "fluid": {"x0": [0, 0, 0, 0]},
        "sim": {"horizon": 100000.0, "seeds": [1, 2, 3]},
    },
}


@dataclass
class Scenario:
    """A parsed scenario: validated network, policy, fluid and simulation settings.

    Queue ids are 0-based here and 1-based in the document form.
    """

    net: NetworkSpec
    policy: PolicyConfig
    name: str = ""
    description: str = ""
    virtual_groups: Tuple[Tuple[int, ...], ...] = ()
    x0: Optional[Tuple[float, ...]] = None
    fluid_horizon: float = FLUID_HORIZON
    tolerances: Tolerances = TOLERANCES
    sim: SimConfig = field(default_factory=SimConfig)
    sim_x0: Optional[Tuple[int, ...]] = None
    seeds: Tuple[int, ...] = ()
    r_list: Tuple[float, ...] = ()
    out_dir: str = OUTPUT_DIR
    write_csv: bool = True
    write_dot: bool = True

    @property
    def fluid_x0(self) -> Tuple[float, ...]:
        return self.x0 if self.x0 is not None else tuple([0.0] * self.net.K)

    @property
    def run_seeds(self) -> Tuple[int, ...]:
        return self.seeds if self.seeds else (int(self.sim.seed),)

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[str] = None) -> "Scenario":
        """Apply command-line overrides; a seed replaces any seed list."""
        scenario = self
        if seed is not None:
            scenario = replace(scenario, sim=replace(scenario.sim, seed=int(seed)), seeds=())
        if out_dir is not None:
            scenario = replace(scenario, out_dir=out_dir)
        return scenario

    def to_dict(self) -> Dict[str, Any]:
        """Document form; parse(to_dict()) reproduces the scenario."""
        network = self.net.to_dict()
        if self.virtual_groups:
            network["virtual_groups"] = [[i + 1 for i in group] for group in self.virtual_groups]

        fluid: Dict[str, Any] = {"horizon": self.fluid_horizon}
        if self.x0 is not None:
            fluid["x0"] = list(self.x0)
        overrides = {f.name: getattr(self.tolerances, f.name) for f in fields(Tolerances)
                     if getattr(self.tolerances, f.name) != getattr(TOLERANCES, f.name)}
        if overrides:
            fluid["tolerances"] = overrides

        sim = self.sim.to_dict()
        if self.sim_x0 is not None:
            sim["x0"] = list(self.sim_x0)
        if self.seeds:
            sim["seeds"] = list(self.seeds)
        if self.r_list:
            sim["r_list"] = list(self.r_list)

        doc: Dict[str, Any] = {
            "name": self.name,
            "network": network,
            "policy": self.policy.to_dict(),
            "fluid": fluid,
            "sim": sim,
            "outputs": {"directory": self.out_dir, "csv": self.write_csv, "dot": self.write_dot},
        }
        if self.description:
            doc["description"] = self.description
        return doc

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)


@lru_cache(maxsize=1)
def load_schema() -> Dict[str, Any]:
    """The published scenario schema."""
    with open(SCHEMA_PATH, "r", encoding="utf-8") as f:
        return json.load(f)


def check_document(doc: Mapping[str, Any]) -> None:
    """Validate a document against the schema; unknown keys are errors.

    Raises:
        ScenarioError: naming the offending path
    """
    try:
        jsonschema.validate(instance=doc, schema=load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        logger.error(f"scenario rejected at {where}: {exc.message}")
        raise ScenarioError(f"schema violation at {where}: {exc.message}")


def _zero_based(groups: List[List[int]]) -> Tuple[Tuple[int, ...], ...]:
    return tuple(tuple(i - 1 for i in group) for group in groups)


def parse(doc: Mapping[str, Any]) -> Scenario:
    """Build a Scenario from a document.

    Raises:
        ScenarioError: on schema violations
        NetworkValidationError: when the network breaks a model invariant
        PolicyConfigError: when the policy orders do not fit the groups
    """
    check_document(doc)
    raw = doc["network"]
    net = validate({
        "R": raw["routing"],
        "lam": raw["arrival_rates"],
        "mu": raw["service_rates"],
        "groups": _zero_based(raw["groups"]),
        "names": raw.get("names"),
    })
    virtual_groups = _zero_based(raw.get("virtual_groups", []))
    for group in virtual_groups:
        if any(not 0 <= i < net.K for i in group):
            raise ScenarioError(f"virtual group {[i + 1 for i in group]} names a queue outside 1..{net.K}")

    policy = PolicyConfig.from_dict(doc["policy"]).validate_for(net)

    fluid = doc.get("fluid", {})
    x0 = tuple(float(v) for v in fluid["x0"]) if "x0" in fluid else None
    if x0 is not None and len(x0) != net.K:
        raise ScenarioError(f"fluid x0 has {len(x0)} entries for {net.K} queues")
    tolerances = replace(TOLERANCES, **fluid.get("tolerances", {}))

    sim_doc = doc.get("sim", {})
    sim = SimConfig.from_dict(sim_doc).validate_for(net)
    sim_x0 = tuple(int(v) for v in sim_doc["x0"]) if "x0" in sim_doc else None
    if sim_x0 is not None and len(sim_x0) != net.K:
        raise ScenarioError(f"sim x0 has {len(sim_x0)} entries for {net.K} queues")

    outputs = doc.get("outputs", {})
    scenario = Scenario(
        net=net,
        policy=policy,
        name=doc.get("name", ""),
        description=doc.get("description", ""),
        virtual_groups=virtual_groups,
        x0=x0,
        fluid_horizon=float(fluid.get("horizon", FLUID_HORIZON)),
        tolerances=tolerances,
        sim=sim,
        sim_x0=sim_x0,
        seeds=tuple(int(s) for s in sim_doc.get("seeds", ())),
        r_list=tuple(float(r) for r in sim_doc.get("r_list", ())),
        out_dir=outputs.get("directory", OUTPUT_DIR),
        write_csv=bool(outputs.get("csv", True)),
        write_dot=bool(outputs.get("dot", True)),
    )
    logger.debug(f"parsed scenario {scenario.name or '<unnamed>'}: {net!r}, policy {policy.kind}")
    return scenario


def load(path: str) -> Scenario:
    """Read and parse a scenario file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario {path} is not valid JSON: {exc}")
    return parse(doc)


def preset_document(name: str) -> Dict[str, Any]:
    """Deep copy of a built-in scenario document."""
    if name not in PRESETS:
        raise ScenarioError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
    doc = copy.deepcopy(PRESETS[name])
    doc.setdefault("sim", {}).setdefault("seed", DEFAULT_SEED)
    return doc


def preset(name: str) -> Scenario:
    """Parse a built-in scenario."""
    return parse(preset_document(name))
