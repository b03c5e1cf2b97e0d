"""Maxima state diagram of LQ networks: enumeration, transitions and the no-loop check."""
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.config import DEFAULT_SEED, FLUID_HORIZON, TOLERANCES
from src.errors import PropertyViolation, ValidationError
from src.fluid import (
    MaximaState,
    NoFeasibleSubstate,
    PhaseSolution,
    SingularPhase,
    integrate,
    resolve_jump,
    solve_phase_lq,
)
from src.network import DerivedQuantities, NetworkSpec, utilization_check

logger = logging.getLogger(__name__)

INCREASE = "Increase"
JUMP = "Jump"
EMPTY = "Empty"


class LoopFound(PropertyViolation):
    """Raised when a fluid trajectory revisits a maxima state before reaching zero."""
    pass


class NotApplicable(ValidationError):
    """Raised when the no-loop check's preconditions do not hold."""
    pass


@dataclass(frozen=True, eq=False)
class StateNode:
    """A maxima state with its LQ feasibility classification."""

    state: MaximaState
    feasible: bool
    alpha: Optional[np.ndarray] = None
    phase: Optional[PhaseSolution] = None

    @property
    def absorbing(self) -> bool:
        return self.state.is_zero and self.feasible

    @property
    def drift_signs(self) -> Tuple[str, ...]:
        if self.alpha is None:
            return tuple("?" for _ in self.state.sets)
        signs = []
        for j, members in enumerate(self.state.sets):
            value = self.alpha[j]
            if not members or abs(value) <= TOLERANCES.rate:
                signs.append("0")
            else:
                signs.append("+" if value > 0 else "-")
        return tuple(signs)

    @property
    def label(self) -> str:
        return state_label(self.state, self.feasible)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "state": self.state.label(),
            "feasible": self.feasible,
            "absorbing": self.absorbing,
            "alpha": None if self.alpha is None else self.alpha.tolist(),
            "drift_signs": "".join(self.drift_signs),
        }


@dataclass(frozen=True)
class TransitionEdge:
    """A move out of a feasible state: a new maximum (Increase or Jump) or a group emptying."""

    source: MaximaState
    target: MaximaState
    kind: str
    entering: Optional[int]
    guard: bool
    residual: float
    min_tdot: Optional[float] = None
    via: Optional[MaximaState] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "from": self.source.label(),
            "to": self.target.label(),
            "kind": self.kind,
            "entering": None if self.entering is None else self.entering + 1,
            "guard": self.guard,
            "residual": self.residual,
            "min_tdot": self.min_tdot,
            "via": None if self.via is None else state_label(self.via, False),
        }


@dataclass
class NoLoopReport:
    """Outcome of sampling fluid trajectories for repeated maxima states."""

    samples: int
    loops: int = 0
    drained: int = 0
    longest_path: int = 0
    longest: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "samples": self.samples,
            "loops": self.loops,
            "drained": self.drained,
            "longest_path": self.longest_path,
            "longest": self.longest,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)

    def get_summary(self) -> str:
        return (f"{self.samples} trajectories, {self.loops} loops, {self.drained} drained, "
                f"longest state path {self.longest_path}")


@dataclass(frozen=True)
class CertificateResult:
    """Left-hand sides of the four jump conditions of a (1,3)->(1,4)->(2,4)->(2,3) cycle."""

    lhs: Tuple[float, float, float, float]
    total: float
    coefficients: Tuple[float, float, float, float]
    impossible: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lhs": list(self.lhs),
            "sum": self.total,
            "coefficients": list(self.coefficients),
            "impossible": self.impossible,
        }


def state_label(S: MaximaState, feasible: bool = True) -> str:
    """(1,2,∅)-style label; infeasible states carry a ₀ marker."""
    return S.label() if feasible else S.label() + "₀"


def _classify(net: NetworkSpec, dq: DerivedQuantities, S: MaximaState) -> StateNode:
    try:
        phase = solve_phase_lq(net, dq, S)
    except SingularPhase as exc:
        logger.debug(f"state {S.label()} is singular: {exc}")
        return StateNode(state=S, feasible=False)
    feasible = phase.feasible and not phase.overloaded
    return StateNode(state=S, feasible=feasible, alpha=phase.alpha, phase=phase)


def enumerate_states(net: NetworkSpec, dq: DerivedQuantities) -> List[StateNode]:
    """All 2^K maxima states (every subset of every group), classified by the LQ phase solve."""
    per_group = []
    for members in net.groups:
        subsets = [()]
        for r in range(1, len(members) + 1):
            subsets.extend(itertools.combinations(members, r))
        per_group.append(subsets)
    nodes = [_classify(net, dq, MaximaState(tuple(sets))) for sets in itertools.product(*per_group)]
    feasible = sum(1 for n in nodes if n.feasible)
    logger.info(f"enumerated {len(nodes)} maxima states, {feasible} feasible")
    return nodes


def successors(net: NetworkSpec, dq: DerivedQuantities, node: StateNode) -> List[TransitionEdge]:
    """Outgoing moves of a feasible non-zero state.

    A non-maximum queue whose drift exceeds its group maximum's catches up:
    Increase when the augmented state is feasible, otherwise Jump to the
    resolved sub-state. A group maximum with negative drift gives an Empty edge.
    """
    if not node.feasible or node.state.is_zero or node.phase is None:
        return []
    S, phase = node.state, node.phase
    edges: List[TransitionEdge] = []
    for j, members in enumerate(S.sets):
        if not members:
            continue
        for q in net.groups[j]:
            if q in members:
                continue
            rate = float(phase.drift[q] - phase.alpha[j])
            if rate <= TOLERANCES.rate:
                continue
            augmented = S.with_queue(j, q)
            target_node = _classify(net, dq, augmented)
            min_tdot = None
            if target_node.phase is not None:
                min_tdot = float(min(target_node.phase.Tdot[i] for i in augmented.members))
            if target_node.feasible:
                edges.append(TransitionEdge(S, augmented, INCREASE, q, True, rate, min_tdot))
                continue
            try:
                target = resolve_jump(net, dq, augmented, q)
            except (NoFeasibleSubstate, SingularPhase) as exc:
                logger.warning(f"no jump target from {augmented.label()}: {exc}")
                continue
            edges.append(TransitionEdge(S, target, JUMP, q, True, rate, min_tdot, via=augmented))
        if phase.alpha[j] < -TOLERANCES.rate:
            edges.append(TransitionEdge(S, S.with_group(j, ()), EMPTY, None, True,
                                        float(phase.alpha[j])))
    return edges


def _check_applicable(net: NetworkSpec, dq: DerivedQuantities) -> None:
    if not net.is_two_by_two():
        raise NotApplicable(f"no-loop check needs two groups of two queues, got sizes {net.group_sizes}")
    report = utilization_check(dq, net)
    if not report.stable:
        raise NotApplicable(f"utilization conditions fail (rho = {np.round(report.rho, 6).tolist()})")


def verify_no_loop(net: NetworkSpec, dq: DerivedQuantities, samples: int = 500,
                   seed: int = DEFAULT_SEED, horizon: float = FLUID_HORIZON) -> NoLoopReport:
    """Integrate LQ trajectories from random X0 and check no maxima state repeats before zero.

    Raises:
        NotApplicable: unless the network has two groups of two queues and meets utilization
        LoopFound: when a trajectory revisits a state
    """
    _check_applicable(net, dq)
    rng = np.random.default_rng(seed)
    report = NoLoopReport(samples=samples)
    for n in range(samples):
        x0 = rng.uniform(0.0, 100.0, size=net.K)
        traj = integrate(net, x0, "LQ", horizon=horizon, dq=dq)
        path = traj.state_path()
        seen = set()
        for state in path:
            if state in seen and not state.is_zero:
                report.loops += 1
                labels = [s.label() for s in path]
                logger.error(f"state {state.label()} repeated on sample {n}: {labels}")
                raise LoopFound(f"trajectory from X0={np.round(x0, 6).tolist()} revisits "
                                f"{state.label()}: {' -> '.join(labels)}")
            seen.add(state)
        if traj.status is not None and traj.status.drained:
            report.drained += 1
        if len(path) > report.longest_path:
            report.longest_path = len(path)
            report.longest = [s.label() for s in path]
    logger.info(f"no-loop check: {report.get_summary()}")
    return report


def four_cycle_certificate(net: NetworkSpec) -> CertificateResult:
    """Evaluate the four jump conditions whose sum must be positive for a jump-only loop.

    The loop (1,3)->(1,4)->(2,4)->(2,3)->(1,3) needs every left-hand side to be
    positive. Their sum is -sum_i mu_i * bracket_i with non-negative brackets
    whenever row sums of R are at most 1, so the loop is impossible.
    """
    if not net.is_two_by_two():
        raise NotApplicable(f"certificate needs two groups of two queues, got sizes {net.group_sizes}")
    R, lam, mu = net.R, net.lam, net.mu

    def r(a: int, b: int) -> float:
        return float(R[a - 1, b - 1])

    l1, l2, l3, l4 = (float(v) for v in lam)
    m1, m2, m3, m4 = (float(v) for v in mu)
    lhs = (
        l4 - m4 + m1 * r(1, 4) - l3 - m1 * r(1, 3) - m4 * r(4, 3) + m4 * r(4, 4),
        l2 - m2 + m4 * r(4, 2) - l1 - m4 * r(4, 1) - m2 * r(2, 1) + m2 * r(2, 2),
        l3 - m3 + m2 * r(2, 3) - l4 - m2 * r(2, 4) - m3 * r(3, 4) + m3 * r(3, 3),
        l1 - m1 + m1 * r(1, 1) + m3 * r(3, 1) - l2 - m1 * r(1, 2) - m3 * r(3, 2),
    )
    coefficients = (
        -m1 * (1 - r(1, 1) + r(1, 2) + r(1, 3) - r(1, 4)),
        -m2 * (1 + r(2, 1) - r(2, 2) - r(2, 3) + r(2, 4)),
        -m3 * (1 - r(3, 1) + r(3, 2) - r(3, 3) + r(3, 4)),
        -m4 * (1 + r(4, 1) - r(4, 2) + r(4, 3) - r(4, 4)),
    )
    total = float(sum(lhs))
    return CertificateResult(lhs=lhs, total=total, coefficients=coefficients,
                             impossible=total <= 1e-12)
