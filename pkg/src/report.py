"""Human-readable report objects for the analyze, fluid, simulate and statediagram commands."""
import json
from typing import Any, Dict, List, Optional, Sequence

from src.dessim import InstabilityVerdict, ScalingReport, SimResult
from src.fluid import FluidTrajectory
from src.network import DerivedQuantities, NetworkSpec, UtilizationReport
from src.statespace import CertificateResult, NoLoopReport, StateNode, TransitionEdge

RULE = "=" * 70
THIN = "-" * 70


def _fmt(values: Sequence[float], digits: int = 6) -> str:
    return "[" + ", ".join(f"{float(v):.{digits}g}" for v in values) + "]"


def _queues(queues: Sequence[int]) -> str:
    return "{" + ",".join(str(i + 1) for i in queues) + "}"


def _header(title: str) -> List[str]:
    return [RULE, title, RULE, ""]


class AnalysisReport:
    """
    Static analysis of a network: nominal traffic, drift matrix, utilization,
    topology and which stability guarantee applies.
    """

    def __init__(
        self,
        net: NetworkSpec,
        dq: DerivedQuantities,
        utilization: UtilizationReport,
        acyclic: bool,
        policy: str,
        virtual_loads: Optional[Dict[str, float]] = None
    ):
        """
        Initialize analysis report.

        Args:
            net: Validated network
            dq: Derived quantities of the network
            utilization: Per-group utilization and slack
            acyclic: Whether the routing topology has no directed cycle
            policy: Policy kind named in the scenario
            virtual_loads: Load of each declared virtual group, keyed by its label
        """
        self.net = net
        self.dq = dq
        self.utilization = utilization
        self.acyclic = acyclic
        self.policy = policy
        self.virtual_loads = virtual_loads or {}

    def is_stable(self) -> bool:
        """Utilization met in every group and every declared virtual group."""
        return self.utilization.stable and all(load < 1.0 for load in self.virtual_loads.values())

    def applicability(self) -> List[str]:
        """Notes on which stability guarantee covers this network."""
        notes = []
        if self.net.is_two_by_two() and self.utilization.stable:
            notes.append("LQ: two groups of two queues with utilization met; LQ is stable")
        else:
            notes.append("LQ: stability guarantee needs two groups of two queues and utilization met")
        if self.acyclic and self.utilization.stable:
            notes.append("LDQ: acyclic routing with utilization met; LDQ is stable")
        else:
            notes.append("LDQ: stability guarantee needs acyclic routing and utilization met")
        return notes

    def to_dict(self) -> Dict[str, Any]:
        return {
            "K": self.net.K,
            "J": self.net.J,
            "nu": self.dq.nu.tolist(),
            "D": self.dq.D.tolist(),
            "utilization": self.utilization.to_dict(),
            "acyclic": self.acyclic,
            "virtual_groups": self.virtual_loads,
            "stable": self.is_stable(),
            "applicability": self.applicability(),
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)

    def get_summary(self) -> str:
        verdict = "STABLE" if self.is_stable() else "UNSTABLE"
        return (f"{verdict} | rho = {_fmt(self.utilization.rho, 4)} | "
                f"{'acyclic' if self.acyclic else 'cyclic'}")

    def render(self) -> str:
        lines = _header("NETWORK ANALYSIS")
        lines.append(f"Queues K = {self.net.K}, groups J = {self.net.J}")
        for j, members in enumerate(self.net.groups):
            lines.append(f"  group {j + 1}: {_queues(members)}")
        lines.append("")
        lines.append("NOMINAL TRAFFIC")
        lines.append(THIN)
        lines.append(f"nu = {_fmt(self.dq.nu)}")
        lines.append("D = M(R - I):")
        for row in self.dq.D:
            lines.append(f"  {_fmt(row)}")
        lines.append("")
        lines.append("UTILIZATION")
        lines.append(THIN)
        for g in self.utilization.groups:
            mark = " (bottleneck)" if g.bottleneck else ""
            status = "ok" if g.stable else "OVERLOADED"
            lines.append(f"  group {g.group + 1}: rho = {g.rho:.6g}, slack = {g.slack:.6g} [{status}]{mark}")
        for label, load in self.virtual_loads.items():
            status = "ok" if load < 1.0 else "OVERLOADED"
            lines.append(f"  virtual group {label}: load = {load:.6g} [{status}]")
        lines.append("")
        lines.append("TOPOLOGY")
        lines.append(THIN)
        lines.append("Routing is acyclic" if self.acyclic else "Routing contains a directed cycle")
        for note in self.applicability():
            lines.append(f"• {note}")
        lines.append("")
        lines.append(RULE)
        lines.append(self.get_summary())
        lines.append(RULE)
        return "\n".join(lines)

    def __str__(self) -> str:
        return self.get_summary()


class FluidReport:
    """State path and terminal status of a fluid trajectory."""

    def __init__(self, traj: FluidTrajectory):
        self.traj = traj

    def to_dict(self) -> Dict[str, Any]:
        data = self.traj.to_dict()
        data["max_residual"] = self.traj.max_residual()
        return data

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)

    def get_summary(self) -> str:
        return f"{self.traj.policy} fluid: {self.traj.status} after {len(self.traj.segments)} segments"

    def render(self) -> str:
        lines = _header(f"FLUID TRAJECTORY ({self.traj.policy})")
        lines.append(f"X0 = {_fmt(self.traj.x0)}")
        lines.append("")
        lines.append("STATE PATH")
        lines.append(THIN)
        lines.append(" -> ".join(s.label() for s in self.traj.state_path()))
        lines.append("")
        lines.append(f"Largest segment residual: {self.traj.max_residual():.3e}")
        lines.append(f"status: {self.traj.status}")
        return "\n".join(lines)


class SimulationReport:
    """Per-seed simulation totals, instability verdicts and optional scaling errors."""

    def __init__(
        self,
        results: Sequence[SimResult],
        verdicts: Sequence[Optional[InstabilityVerdict]],
        scaling: Optional[ScalingReport] = None
    ):
        self.results = list(results)
        self.verdicts = list(verdicts)
        self.scaling = scaling

    def is_unstable(self) -> bool:
        """True when every seed with a verdict is flagged unstable."""
        decided = [v for v in self.verdicts if v is not None]
        return bool(decided) and all(v.unstable for v in decided)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "runs": [r.to_dict() for r in self.results],
            "verdicts": [None if v is None else v.to_dict() for v in self.verdicts],
            "unstable": self.is_unstable(),
            "scaling": None if self.scaling is None else self.scaling.to_dict(),
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)

    def get_summary(self) -> str:
        return "UNSTABLE (queue lengths grow)" if self.is_unstable() else "no growth detected"

    def render(self) -> str:
        lines = _header("SIMULATION")
        for result, verdict in zip(self.results, self.verdicts):
            lines.append(result.get_summary())
            lines.append(f"  busy fraction = {_fmt(result.busy_fraction, 4)}")
            if verdict is None:
                lines.append("  verdict: not enough snapshots")
            else:
                lines.append(f"  verdict: {'unstable' if verdict.unstable else 'stable'} "
                             f"(slope {verdict.slope:.4g} ± {verdict.stderr:.3g}, "
                             f"{verdict.batches} batch means)")
        if self.scaling is not None:
            lines.append("")
            lines.append("FLUID SCALING")
            lines.append(THIN)
            for point in self.scaling.points:
                lines.append(f"  r = {point.r:g}: sup-norm error {point.error:.4g}")
        lines.append("")
        lines.append(RULE)
        lines.append(self.get_summary())
        lines.append(RULE)
        return "\n".join(lines)


class StateDiagramReport:
    """Counts of the maxima state diagram plus the no-loop and certificate outcomes."""

    def __init__(
        self,
        nodes: Sequence[StateNode],
        edges: Sequence[TransitionEdge],
        no_loop: Optional[NoLoopReport] = None,
        certificate: Optional[CertificateResult] = None,
        skipped: Optional[str] = None
    ):
        self.nodes = list(nodes)
        self.edges = list(edges)
        self.no_loop = no_loop
        self.certificate = certificate
        self.skipped = skipped

    def to_dict(self) -> Dict[str, Any]:
        kinds: Dict[str, int] = {}
        for edge in self.edges:
            kinds[edge.kind] = kinds.get(edge.kind, 0) + 1
        return {
            "nodes": len(self.nodes),
            "feasible": sum(1 for n in self.nodes if n.feasible),
            "edges": kinds,
            "no_loop": None if self.no_loop is None else self.no_loop.to_dict(),
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
            "skipped": self.skipped,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)

    def get_summary(self) -> str:
        feasible = sum(1 for n in self.nodes if n.feasible)
        text = f"{len(self.nodes)} states ({feasible} feasible), {len(self.edges)} transitions"
        if self.no_loop is not None:
            text += f"; {self.no_loop.loops} loops in {self.no_loop.samples} trajectories"
        return text

    def render(self) -> str:
        lines = _header("MAXIMA STATE DIAGRAM")
        for node in self.nodes:
            lines.append(f"  {node.label:<16} {''.join(node.drift_signs):<6}"
                         f"{' absorbing' if node.absorbing else ''}")
        lines.append("")
        lines.append("TRANSITIONS")
        lines.append(THIN)
        for edge in self.edges:
            lines.append(f"  {edge.source.label()} -> {edge.target.label()}  {edge.kind}")
        if self.no_loop is not None:
            lines.append("")
            lines.append("NO-LOOP CHECK")
            lines.append(THIN)
            lines.append(self.no_loop.get_summary())
        if self.certificate is not None:
            lines.append(f"Four-cycle jump conditions sum to {self.certificate.total:.6g} "
                         f"({'impossible' if self.certificate.impossible else 'POSSIBLE'})")
        if self.skipped:
            lines.append(f"No-loop check skipped: {self.skipped}")
        lines.append("")
        lines.append(RULE)
        lines.append(self.get_summary())
        lines.append(RULE)
        return "\n".join(lines)


def virtual_label(queues: Sequence[int]) -> str:
    """1-based set label of a virtual group."""
    return _queues(queues)

