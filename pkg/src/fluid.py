"""Event-driven fluid model integrator for LQ and LDQ scheduling.

The fluid levels X(t) are piecewise linear, so the integrator never steps
time: every phase is solved exactly and the next event time is computed in
closed form from the affine dynamics X' = lam - (I - R^T) M T'.
"""
import itertools
import json
import logging
import warnings
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve
from scipy.optimize import linprog

from src.config import FLUID_HORIZON, TOLERANCES, Tolerances
from src.errors import NumericError, PropertyViolation, ValidationError
from src.network import DerivedQuantities, NetworkSpec, derive

logger = logging.getLogger(__name__)

FLUID_POLICIES = ("LQ", "LDQ")

_HIGHS_OPTIONS = {
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


class SingularPhase(NumericError):
    """Raised when a phase system cannot be solved."""
    pass


class NoFeasibleSubstate(NumericError):
    """Raised when no sub-state of an infeasible state is consistent."""
    pass


class PhaseLoopGuard(PropertyViolation):
    """Raised when phases keep changing without the largest queue shrinking."""
    pass


class UnsupportedPolicy(ValidationError):
    """Raised for a policy the fluid integrator has no phase model for."""
    pass


class InvalidInitialState(ValidationError):
    """Raised when X0 has the wrong shape or negative entries."""
    pass


@dataclass(frozen=True)
class MaximaState:
    """Per-group sets of queues attaining the group maximum (empty for an empty group)."""

    sets: Tuple[Tuple[int, ...], ...]

    @classmethod
    def of(cls, sets: Iterable[Iterable[int]]) -> "MaximaState":
        return cls(tuple(tuple(sorted(set(s))) for s in sets))

    @classmethod
    def zero(cls, net: NetworkSpec) -> "MaximaState":
        return cls(tuple(() for _ in range(net.J)))

    @property
    def L(self) -> int:
        return sum(len(s) for s in self.sets)

    @property
    def is_zero(self) -> bool:
        return all(not s for s in self.sets)

    @property
    def members(self) -> Tuple[int, ...]:
        return tuple(sorted(i for s in self.sets for i in s))

    def empty_groups(self) -> Tuple[int, ...]:
        return tuple(j for j, s in enumerate(self.sets) if not s)

    def with_queue(self, j: int, q: int) -> "MaximaState":
        sets = list(self.sets)
        sets[j] = tuple(sorted(set(sets[j]) | {q}))
        return MaximaState(tuple(sets))

    def with_group(self, j: int, members: Iterable[int]) -> "MaximaState":
        sets = list(self.sets)
        sets[j] = tuple(sorted(set(members)))
        return MaximaState(tuple(sets))

    def label(self) -> str:
        """Render as (1,2,∅) with 1-based queue ids."""
        parts = []
        for s in self.sets:
            parts.append(",".join(str(i + 1) for i in s) if s else "∅")
        return "(" + ",".join(parts) + ")"

    def __str__(self) -> str:
        return self.label()


@dataclass(frozen=True, eq=False)
class PhaseSolution:
    """Time-sharing rates Tdot, group-maximum drifts alpha and full drift vector of one phase."""

    Tdot: np.ndarray
    alpha: np.ndarray
    drift: np.ndarray
    feasible: bool
    overloaded: Tuple[int, ...] = ()
    policy: str = "LQ"
    components: Tuple[Tuple[int, ...], ...] = ()

    @property
    def served_set(self) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.Tdot > TOLERANCES.rate))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "policy": self.policy,
            "Tdot": self.Tdot.tolist(),
            "alpha": self.alpha.tolist(),
            "drift": self.drift.tolist(),
            "feasible": self.feasible,
            "overloaded": [j + 1 for j in self.overloaded],
            "served": [i + 1 for i in self.served_set],
        }


@dataclass(frozen=True)
class HoldAllocation:
    """Service rates that keep an empty group empty, or an overload marker."""

    group: int
    Tdot: Tuple[float, ...]
    load: float
    overloaded: bool


@dataclass(frozen=True, eq=False)
class Segment:
    """One affine piece of the trajectory."""

    t_start: float
    t_end: float
    X_start: np.ndarray
    X_end: np.ndarray
    state: MaximaState
    phase: PhaseSolution

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def residual(self) -> float:
        """Largest deviation of the endpoints from X' = lam - (I - R^T) M T'."""
        predicted = self.X_start + self.phase.drift * self.duration
        return float(np.max(np.abs(self.X_end - predicted)))


@dataclass(frozen=True)
class TerminalStatus:
    """How a trajectory ended: Drained(t*), Stalled or HorizonReached."""

    kind: str
    time: float

    @property
    def drained(self) -> bool:
        return self.kind == "Drained"

    def __str__(self) -> str:
        if self.kind == "Drained":
            return f"Drained(t*={self.time:.6g})"
        return f"{self.kind}(t={self.time:.6g})"


@dataclass(eq=False)
class FluidTrajectory:
    """Ordered segments of a fluid path plus its terminal status."""

    policy: str
    x0: np.ndarray
    segments: List[Segment] = field(default_factory=list)
    status: Optional[TerminalStatus] = None

    @property
    def end_time(self) -> float:
        return self.segments[-1].t_end if self.segments else 0.0

    def at(self, t: float) -> np.ndarray:
        """X(t) by locating the segment containing t and interpolating."""
        if not self.segments or t <= self.segments[0].t_start:
            return self.x0.copy()
        starts = [s.t_start for s in self.segments]
        seg = self.segments[bisect_right(starts, t) - 1]
        if t >= seg.t_end or seg.duration <= 0:
            return seg.X_end.copy()
        w = (t - seg.t_start) / seg.duration
        return (1.0 - w) * seg.X_start + w * seg.X_end

    def state_path(self) -> List[MaximaState]:
        """Distinct maxima states in visiting order (consecutive repeats collapsed)."""
        path: List[MaximaState] = []
        for seg in self.segments:
            if not path or path[-1] != seg.state:
                path.append(seg.state)
        return path

    def max_norm(self) -> List[Tuple[float, float]]:
        """V(X) = max_i X_i at every segment endpoint."""
        if not self.segments:
            return [(0.0, float(np.max(self.x0)) if self.x0.size else 0.0)]
        values = [(self.segments[0].t_start, float(np.max(self.segments[0].X_start)))]
        values.extend((s.t_end, float(np.max(s.X_end))) for s in self.segments)
        return values

    def breakpoints(self) -> Tuple[np.ndarray, np.ndarray]:
        """Times and levels at every segment endpoint."""
        times = [s.t_start for s in self.segments[:1]] + [s.t_end for s in self.segments]
        levels = [s.X_start for s in self.segments[:1]] + [s.X_end for s in self.segments]
        return np.array(times), np.array(levels)

    def max_residual(self) -> float:
        return max((s.residual() for s in self.segments), default=0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "policy": self.policy,
            "x0": self.x0.tolist(),
            "status": self.status.kind if self.status else None,
            "end_time": self.end_time,
            "segments": len(self.segments),
            "state_path": [s.label() for s in self.state_path()],
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)


def _tied(a: float, b: float, tol: float) -> bool:
    return abs(a - b) <= tol * (1.0 + max(abs(a), abs(b)))


def _strictly_below(a: float, b: float, tol: float) -> bool:
    return b - a > tol * (1.0 + abs(b))


def maxima(X: Sequence[float], net: NetworkSpec, tol: float = TOLERANCES.tie) -> MaximaState:
    """Per-group argmax sets under a relative tie tolerance; empty when the group max is <= tol."""
    X = np.asarray(X, dtype=float)
    sets = []
    for members in net.groups:
        top = max(X[i] for i in members)
        if top <= tol:
            sets.append(())
            continue
        sets.append(tuple(i for i in members if top - X[i] <= tol * (1.0 + top)))
    return MaximaState(tuple(sets))


def dominating_sets(net: NetworkSpec, X: Sequence[float], S: MaximaState,
                    tol: float = TOLERANCES.tie) -> Tuple[Tuple[int, ...], ...]:
    """Queues of each group that feed no strictly longer group maximum anywhere in the network."""
    X = np.asarray(X, dtype=float)
    tops = S.members
    result = []
    for members in net.groups:
        result.append(tuple(
            i for i in members
            if not any(net.R[i, s] > 0 and _strictly_below(X[i], X[s], tol) for s in tops)
        ))
    return tuple(result)


def hold_at_zero(net: NetworkSpec, j: int, inflow: Sequence[float],
                 tol: float = TOLERANCES.rate) -> HoldAllocation:
    """Allocation Tdot_i = inflow_i / mu_i keeping group j empty, or Overloaded.

    Args:
        net: Validated network
        j: Group index
        inflow: Rates into the queues of group j, in the group's member order
            (a full K-vector is also accepted)

    Returns:
        HoldAllocation with overloaded set when the group cannot stay empty
    """
    members = list(net.groups[j])
    inflow = np.asarray(inflow, dtype=float)
    if inflow.shape[0] == net.K and len(members) != net.K:
        inflow = inflow[members]
    tdot = inflow / net.mu[members]
    load = float(np.sum(tdot))
    return HoldAllocation(group=j, Tdot=tuple(float(v) for v in tdot), load=load,
                          overloaded=load > 1.0 + tol)


def _solve_dense(A: np.ndarray, b: np.ndarray, context: str) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        try:
            factor = lu_factor(A)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise SingularPhase(f"{context}: {exc}")
    pivots = np.abs(np.diag(factor[0]))
    scale = max(1.0, float(np.max(np.abs(A))))
    if pivots.size and pivots.min() <= 1e-12 * scale:
        raise SingularPhase(f"{context}: block system is singular (smallest pivot {pivots.min():.3e})")
    x = lu_solve(factor, b)
    if not np.all(np.isfinite(x)):
        raise SingularPhase(f"{context}: solve produced non-finite values")
    return x


def solve_phase_lq(net: NetworkSpec, dq: DerivedQuantities, S: MaximaState,
                   tolerances: Tolerances = TOLERANCES) -> PhaseSolution:
    """Solve the LQ block system [-D_A^T, E; E^T, 0][Tdot_A; alpha] = [lam_A; 1].

    A holds the maxima of every non-empty group plus all queues of the empty
    groups. Queues of empty groups are held at zero (drift 0, no group-sum
    row); hold_at_zero then classifies each empty group from its inflow.

    Raises:
        SingularPhase: if the block matrix is singular
    """
    nonempty = [j for j, s in enumerate(S.sets) if s]
    held = [j for j, s in enumerate(S.sets) if not s]
    active = sorted(set(S.members) | {i for j in held for i in net.groups[j]})
    pos = {q: n for n, q in enumerate(active)}
    n_active = len(active)
    size = n_active + len(nonempty)

    Dt = dq.D.T
    A = np.zeros((size, size))
    b = np.zeros(size)
    A[:n_active, :n_active] = -Dt[np.ix_(active, active)]
    b[:n_active] = net.lam[active]
    for col, j in enumerate(nonempty, start=n_active):
        for q in S.sets[j]:
            A[pos[q], col] = 1.0
            A[col, pos[q]] = 1.0
        b[col] = 1.0

    x = _solve_dense(A, b, f"phase {S.label()}")
    Tdot = np.zeros(net.K)
    Tdot[active] = x[:n_active]
    alpha = np.zeros(net.J)
    for col, j in enumerate(nonempty, start=n_active):
        alpha[j] = x[col]
    drift = net.lam + Dt @ Tdot

    feasible = bool(np.all(Tdot[active] >= -tolerances.rate))
    inflow = drift + net.mu * Tdot
    overloaded = tuple(j for j in held
                       if hold_at_zero(net, j, inflow[list(net.groups[j])], tolerances.rate).overloaded)
    return PhaseSolution(Tdot=Tdot, alpha=alpha, drift=drift, feasible=feasible,
                         overloaded=overloaded, policy="LQ")


def _consistent(net: NetworkSpec, S: MaximaState, phase: PhaseSolution,
                removed: Iterable[int], tol: float) -> bool:
    """Every removed queue must drift strictly below its group maximum."""
    owner = net.group_of
    for q in removed:
        j = owner[q]
        if q in S.sets[j] or not S.sets[j]:
            continue
        if phase.drift[q] >= phase.alpha[j] - tol:
            return False
    return True


def _brute_force_substate(net: NetworkSpec, dq: DerivedQuantities, S: MaximaState,
                          entering: FrozenSet[int], tolerances: Tolerances) -> MaximaState:
    choices = []
    for members in S.sets:
        if not members:
            choices.append([()])
            continue
        must = tuple(q for q in members if q in entering)
        optional = [q for q in members if q not in entering]
        subsets = []
        for r in range(len(optional), -1, -1):
            for combo in itertools.combinations(optional, r):
                sub = tuple(sorted(must + combo))
                if sub:
                    subsets.append(sub)
        choices.append(subsets)

    candidates = sorted(itertools.product(*choices), key=lambda c: -sum(len(s) for s in c))
    dump = []
    for combo in candidates:
        state = MaximaState(tuple(combo))
        try:
            phase = solve_phase_lq(net, dq, state, tolerances)
        except SingularPhase as exc:
            dump.append(f"{state.label()}: singular ({exc})")
            continue
        removed = set(S.members) - set(state.members)
        if phase.feasible and _consistent(net, state, phase, removed, tolerances.rate):
            return state
        dump.append(f"{state.label()}: feasible={phase.feasible} Tdot={np.round(phase.Tdot, 6).tolist()}")
    logger.error(f"no consistent sub-state of {S.label()}")
    raise NoFeasibleSubstate(f"no consistent sub-state of {S.label()} keeps "
                             f"{sorted(q + 1 for q in entering)}:\n" + "\n".join(dump))


def _as_keep(entering: Union[int, Iterable[int], None]) -> FrozenSet[int]:
    if entering is None:
        return frozenset()
    if isinstance(entering, (int, np.integer)):
        return frozenset([int(entering)])
    return frozenset(int(q) for q in entering)


def resolve_jump(net: NetworkSpec, dq: DerivedQuantities, S_infeasible: MaximaState,
                 entering: Union[int, Iterable[int], None],
                 tolerances: Tolerances = TOLERANCES) -> MaximaState:
    """Find the feasible state an infeasible state jumps to.

    Queues with the most negative Tdot are removed one at a time (never an
    entering queue, never the last maximum of a group) and the phase is
    re-solved. The result is accepted when every removed queue drifts below
    its group maximum; otherwise all sub-states are searched, largest first.
    An empty group that cannot stay empty re-opens with all its queues tied
    at zero, so (1,∅) -> (1,2,∅)₀ may land on (1,2,3,4).

    Raises:
        NoFeasibleSubstate: if no sub-state containing the entering queues is consistent
    """
    state, _ = _settle(net, dq, S_infeasible, _as_keep(entering), tolerances)
    return state


def _drop_negative(net: NetworkSpec, dq: DerivedQuantities, S_infeasible: MaximaState,
                   keep: FrozenSet[int], tolerances: Tolerances) -> MaximaState:
    owner = net.group_of
    state = S_infeasible
    removed: List[int] = []
    phase = solve_phase_lq(net, dq, state, tolerances)
    while not phase.feasible:
        candidates = [q for q in state.members
                      if phase.Tdot[q] < -tolerances.rate and q not in keep
                      and len(state.sets[owner[q]]) > 1]
        if not candidates:
            break
        worst = min(candidates, key=lambda q: (phase.Tdot[q], q))
        j = owner[worst]
        state = state.with_group(j, [q for q in state.sets[j] if q != worst])
        removed.append(worst)
        phase = solve_phase_lq(net, dq, state, tolerances)

    if phase.feasible and _consistent(net, state, phase, removed, tolerances.rate):
        if removed:
            logger.debug(f"jump {S_infeasible.label()} -> {state.label()} "
                         f"(removed {[q + 1 for q in removed]})")
        return state

    logger.debug(f"greedy jump from {S_infeasible.label()} inconsistent; searching all sub-states")
    return _brute_force_substate(net, dq, S_infeasible, keep, tolerances)


# --- LDQ phase programme -------------------------------------------------------------------


@dataclass(frozen=True)
class _LdqStructure:
    S: MaximaState
    dominating: Tuple[Tuple[int, ...], ...]
    candidates: Tuple[Tuple[int, ...], ...]
    sliding: Dict[int, Tuple[int, ...]]
    components: Tuple[Tuple[int, ...], ...]
    work_conserving: Tuple[bool, ...]
    cycles: Tuple[Tuple[int, ...], ...]
    held: Tuple[int, ...]


def _ldq_structure(net: NetworkSpec, X: np.ndarray, tol: float) -> _LdqStructure:
    S = maxima(X, net, tol)
    dominating = dominating_sets(net, X, S, tol)
    tops = S.members

    candidates = []
    for D in dominating:
        positive = [i for i in D if X[i] > tol]
        if not positive:
            candidates.append(())
            continue
        top = max(X[i] for i in positive)
        candidates.append(tuple(i for i in positive if _tied(X[i], top, tol)))

    sliding: Dict[int, Tuple[int, ...]] = {}
    for Z in candidates:
        for i in Z:
            targets = tuple(s for s in tops
                            if s != i and net.R[i, s] > 0 and _tied(X[i], X[s], tol))
            if targets:
                sliding[i] = targets

    ties = nx.Graph()
    for Z in candidates:
        ties.add_nodes_from(Z)
        ties.add_edges_from((Z[0], i) for i in Z[1:])
    for i, targets in sliding.items():
        ties.add_edges_from((i, s) for s in targets)
    components = sorted((tuple(sorted(c)) for c in nx.connected_components(ties)),
                        key=lambda c: (-max(X[i] for i in c), c[0]))

    chains = nx.DiGraph()
    chains.add_nodes_from(sliding)
    chains.add_edges_from((i, s) for i, targets in sliding.items() for s in targets if s in sliding)
    cycles = tuple(tuple(c) for c in nx.simple_cycles(chains))

    work_conserving = tuple(any(i not in sliding for i in Z) for Z in candidates)
    held = tuple(i for j, D in enumerate(dominating) if not work_conserving[j]
                 for i in D if X[i] <= tol)
    return _LdqStructure(S=S, dominating=dominating, candidates=tuple(candidates),
                         sliding=sliding, components=tuple(components),
                         work_conserving=work_conserving, cycles=cycles, held=held)


class _PhaseProgram:
    """Linear constraints over [Tdot; alpha_c] solved stage by stage with HiGHS."""

    def __init__(self, n: int, bounds: List[Tuple[Optional[float], Optional[float]]]):
        self.n = n
        self.bounds = bounds
        self.eq_rows: List[np.ndarray] = []
        self.eq_rhs: List[float] = []
        self.ub_rows: List[np.ndarray] = []
        self.ub_rhs: List[float] = []
        self.ub_structural: List[bool] = []

    def equal(self, row: np.ndarray, rhs: float) -> None:
        self.eq_rows.append(row)
        self.eq_rhs.append(rhs)

    def at_most(self, row: np.ndarray, rhs: float, structural: bool = True) -> None:
        self.ub_rows.append(row)
        self.ub_rhs.append(rhs)
        self.ub_structural.append(structural)

    def solve(self, cost: np.ndarray) -> np.ndarray:
        result = linprog(
            cost,
            A_ub=np.array(self.ub_rows) if self.ub_rows else None,
            b_ub=np.array(self.ub_rhs) if self.ub_rows else None,
            A_eq=np.array(self.eq_rows) if self.eq_rows else None,
            b_eq=np.array(self.eq_rhs) if self.eq_rows else None,
            bounds=self.bounds,
            method="highs",
            options=_HIGHS_OPTIONS,
        )
        if result.status != 0 or result.x is None:
            raise SingularPhase(f"LDQ phase programme failed: {result.message}")
        return np.asarray(result.x, dtype=float)

    def _feasible(self, y: np.ndarray, slack: float) -> bool:
        if not np.all(np.isfinite(y)):
            return False
        if self.eq_rows and np.max(np.abs(np.array(self.eq_rows) @ y - np.array(self.eq_rhs))) > slack:
            return False
        if self.ub_rows and np.max(np.array(self.ub_rows) @ y - np.array(self.ub_rhs)) > slack:
            return False
        for value, (lo, hi) in zip(y, self.bounds):
            if lo is not None and value < lo - slack:
                return False
            if hi is not None and value > hi + slack:
                return False
        return True

    def polish(self, x: np.ndarray, active: float) -> np.ndarray:
        """Re-solve the active constraints exactly; keep the LP point if that breaks feasibility."""
        rows = list(self.eq_rows)
        rhs = list(self.eq_rhs)
        for row, b, structural in zip(self.ub_rows, self.ub_rhs, self.ub_structural):
            if structural and b - row @ x <= active:
                rows.append(row)
                rhs.append(b)
        for k, (lo, hi) in enumerate(self.bounds):
            if lo is None and hi is None:
                continue
            unit = np.zeros(self.n)
            unit[k] = 1.0
            if lo is not None and x[k] - lo <= active:
                rows.append(unit)
                rhs.append(lo)
            elif hi is not None and hi - x[k] <= active:
                rows.append(unit)
                rhs.append(hi)
        if not rows:
            return x
        y, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
        if self._feasible(y, 1e-9):
            return y
        logger.debug("LDQ polish rejected; keeping the LP point")
        return x


def solve_phase_ldq(net: NetworkSpec, dq: DerivedQuantities, X: Sequence[float],
                    tolerances: Tolerances = TOLERANCES) -> PhaseSolution:
    """Solve one LDQ phase at levels X.

    Each group serves its longest positive dominating queues. A candidate tied
    with a group maximum it feeds slides along that maximum, tied queues share
    one drift, and a routing cycle of sliding candidates cannot be served in
    full at once. Tied components are minimised one at a time from the highest
    level down; dominating empty queues of groups without a work-conserving
    candidate are held at zero and served as much as possible.

    Raises:
        SingularPhase: if the phase programme cannot be solved
    """
    X = np.asarray(X, dtype=float)
    K = net.K
    structure = _ldq_structure(net, X, tolerances.tie)
    Dt = dq.D.T
    n_comp = len(structure.components)
    n = K + n_comp

    servable = {i for Z in structure.candidates for i in Z} | set(structure.held)
    bounds: List[Tuple[Optional[float], Optional[float]]] = [
        (0.0, 1.0) if i in servable else (0.0, 0.0) for i in range(K)
    ]
    bounds.extend((None, None) for _ in range(n_comp))
    program = _PhaseProgram(n, bounds)

    for j, members in enumerate(net.groups):
        row = np.zeros(n)
        row[list(members)] = 1.0
        if structure.work_conserving[j]:
            program.equal(row, 1.0)
        else:
            program.at_most(row, 1.0)
    for c, component in enumerate(structure.components):
        for m in component:
            row = np.zeros(n)
            row[:K] = Dt[m]
            row[K + c] = -1.0
            program.at_most(row, -net.lam[m])
    for cycle in structure.cycles:
        row = np.zeros(n)
        row[list(cycle)] = 1.0
        program.at_most(row, len(cycle) - 1.0)
    for h in structure.held:
        row = np.zeros(n)
        row[:K] = -Dt[h]
        program.at_most(row, net.lam[h])

    x = None
    for c in range(n_comp):
        cost = np.zeros(n)
        cost[K + c] = 1.0
        x = program.solve(cost)
        best = x[K + c]
        fix = np.zeros(n)
        fix[K + c] = 1.0
        program.at_most(fix, best + 1e-9 * (1.0 + abs(best)), structural=False)

    cost = np.zeros(n)
    cost[list(structure.sliding)] = 1.0
    cost[list(structure.held)] = -1.0
    if x is None or np.any(cost):
        x = program.solve(cost)
    drift = net.lam + Dt @ x[:K]
    for c, component in enumerate(structure.components):
        x[K + c] = max(drift[m] for m in component)
    y = program.polish(x, tolerances.lp_active)

    Tdot = np.clip(y[:K], 0.0, 1.0)
    drift = net.lam + Dt @ Tdot
    alpha = np.array([max(drift[i] for i in s) if s else 0.0 for s in structure.S.sets])
    return PhaseSolution(Tdot=Tdot, alpha=alpha, drift=drift, feasible=True,
                         policy="LDQ", components=structure.components)


# --- integration -----------------------------------------------------------------------------


class _ProgressGuard:
    """Counts phase changes since the largest level last decreased."""

    def __init__(self, K: int):
        self.limit = 10 * 2 ** K
        self.best = float("inf")
        self.count = 0

    def step(self, X: np.ndarray, label: str) -> None:
        level = float(np.max(X))
        if level < self.best - 1e-12 * (1.0 + abs(self.best)):
            self.best = level
            self.count = 0
            return
        self.count += 1
        if self.count > self.limit:
            logger.error(f"{self.count} phase changes without progress at {label}")
            raise PhaseLoopGuard(f"{self.count} phase changes without max-norm decrease; "
                                 f"last state {label}, X={np.round(X, 9).tolist()}")


def _settle(net: NetworkSpec, dq: DerivedQuantities, S: MaximaState, keep: FrozenSet[int],
            tolerances: Tolerances) -> Tuple[MaximaState, PhaseSolution]:
    """Drop negative maxima and re-open overloaded empty groups until the phase is feasible."""
    for _ in range(4 * net.K + 4):
        phase = solve_phase_lq(net, dq, S, tolerances)
        if not phase.feasible:
            S = _drop_negative(net, dq, S, keep, tolerances)
            continue
        if phase.overloaded:
            for j in phase.overloaded:
                logger.debug(f"empty group {j + 1} overloaded; re-opening it")
                S = S.with_group(j, net.groups[j])
            continue
        return S, phase
    raise PhaseLoopGuard(f"could not settle a feasible LQ phase from {S.label()}")


def _check_x0(net: NetworkSpec, X0: Sequence[float], tolerances: Tolerances) -> np.ndarray:
    try:
        X = np.array(X0, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InvalidInitialState(f"X0 is not numeric: {exc}")
    if X.shape != (net.K,):
        raise InvalidInitialState(f"X0 has shape {X.shape}, expected ({net.K},)")
    if not np.all(np.isfinite(X)) or np.any(X < tolerances.negative_floor):
        raise InvalidInitialState(f"X0 must be finite and non-negative, got {X.tolist()}")
    return np.maximum(X, 0.0)


def _policy_name(policy: Any) -> str:
    kind = getattr(policy, "kind", policy)
    name = str(kind).upper()
    if name not in FLUID_POLICIES:
        raise UnsupportedPolicy(f"fluid model supports {FLUID_POLICIES}, got {kind!r}")
    return name


def _finish(traj: FluidTrajectory, kind: str, t: float) -> FluidTrajectory:
    traj.status = TerminalStatus(kind=kind, time=t)
    logger.info(f"{traj.policy} fluid trajectory {traj.status} after {len(traj.segments)} segments")
    return traj


def _zero_phase(net: NetworkSpec, dq: DerivedQuantities, policy: str,
                tolerances: Tolerances) -> PhaseSolution:
    if policy == "LQ":
        return solve_phase_lq(net, dq, MaximaState.zero(net), tolerances)
    return solve_phase_ldq(net, dq, np.zeros(net.K), tolerances)


def _drained(net, dq, traj, t, policy, tolerances) -> FluidTrajectory:
    zero = np.zeros(net.K)
    traj.segments.append(Segment(t, t, zero, zero.copy(), MaximaState.zero(net),
                                 _zero_phase(net, dq, policy, tolerances)))
    return _finish(traj, "Drained", t)


def _integrate_lq(net: NetworkSpec, dq: DerivedQuantities, X: np.ndarray, horizon: float,
                  tolerances: Tolerances, traj: FluidTrajectory) -> FluidTrajectory:
    t = 0.0
    S, phase = _settle(net, dq, maxima(X, net, tolerances.tie), frozenset(), tolerances)
    guard = _ProgressGuard(net.K)
    while True:
        if np.max(np.abs(phase.drift)) <= tolerances.stall:
            traj.segments.append(Segment(t, t, X.copy(), X.copy(), S, phase))
            return _finish(traj, "Stalled", t)

        nonempty = [j for j, s in enumerate(S.sets) if s]
        level = {j: float(max(X[i] for i in S.sets[j])) for j in nonempty}
        events: List[Tuple[float, str, int, int]] = []
        for j in nonempty:
            for q in net.groups[j]:
                if q in S.sets[j]:
                    continue
                rate = phase.drift[q] - phase.alpha[j]
                if rate > tolerances.rate:
                    events.append((max(level[j] - X[q], 0.0) / rate, "enter", j, q))
            if phase.alpha[j] < -tolerances.rate:
                events.append((level[j] / -phase.alpha[j], "empty", j, -1))

        tau = min((e[0] for e in events), default=float("inf"))
        if t + tau >= horizon:
            tau = horizon - t
            batch = []
        else:
            batch = [e for e in events if e[0] <= tau + tolerances.event_time]

        X_new = X + phase.drift * tau
        for j in nonempty:
            X_new[list(S.sets[j])] = level[j] + phase.alpha[j] * tau
        emptied = {e[2] for e in batch if e[1] == "empty"}
        entering = [(e[2], e[3]) for e in batch if e[1] == "enter" and e[2] not in emptied]
        for j, q in entering:
            X_new[q] = level[j] + phase.alpha[j] * tau
        for j in emptied:
            X_new[list(net.groups[j])] = 0.0
        X_new = np.maximum(X_new, 0.0)

        if tau > 0:
            traj.segments.append(Segment(t, t + tau, X.copy(), X_new.copy(), S, phase))
        t += tau
        X = X_new
        if not batch:
            return _finish(traj, "HorizonReached", t)
        if np.all(X <= tolerances.tie):
            return _drained(net, dq, traj, t, "LQ", tolerances)

        S_next = S
        for j in emptied:
            S_next = S_next.with_group(j, ())
        for j, q in entering:
            S_next = S_next.with_queue(j, q)
        S_new, phase = _settle(net, dq, S_next, frozenset(q for _, q in entering), tolerances)
        kind = "jump" if S_new != S_next else ("empty" if emptied and not entering else "increase")
        logger.debug(f"t={t:.6g} {kind} {S.label()} -> {S_new.label()} "
                     f"Tdot={np.round(phase.Tdot, 6).tolist()} alpha={np.round(phase.alpha, 6).tolist()}")
        S = S_new
        guard.step(X, S.label())


def _snap(X_new: np.ndarray, members: Sequence[int], target: float, affine: np.ndarray,
          limit: float) -> None:
    """Move members to target only when each stays within limit of its affine end value."""
    members = list(members)
    if np.all(np.abs(affine[members] - target) <= limit):
        X_new[members] = target


def _merge_ties(X_start: np.ndarray, affine: np.ndarray, drift: np.ndarray,
                tolerances: Tolerances) -> np.ndarray:
    """Keep queues tied at the start tied at the end when their drifts agree."""
    K = X_start.shape[0]
    ties = nx.Graph()
    ties.add_nodes_from(range(K))
    for a, b in itertools.combinations(range(K), 2):
        if (_tied(X_start[a], X_start[b], tolerances.tie)
                and abs(drift[a] - drift[b]) <= tolerances.lp_active):
            ties.add_edge(a, b)
    merged = affine.copy()
    limit = 0.5 * tolerances.segment_residual
    for component in nx.connected_components(ties):
        if len(component) > 1:
            members = sorted(component)
            _snap(merged, members, float(np.mean(affine[members])), affine, limit)
    return merged


def _integrate_ldq(net: NetworkSpec, dq: DerivedQuantities, X: np.ndarray, horizon: float,
                   tolerances: Tolerances, traj: FluidTrajectory) -> FluidTrajectory:
    t = 0.0
    guard = _ProgressGuard(net.K)
    tie = tolerances.tie
    while True:
        phase = solve_phase_ldq(net, dq, X, tolerances)
        S = maxima(X, net, tie)
        if np.max(np.abs(phase.drift)) <= tolerances.stall:
            traj.segments.append(Segment(t, t, X.copy(), X.copy(), S, phase))
            return _finish(traj, "Stalled", t)

        d = phase.drift
        events: List[Tuple[float, str, int, int]] = []
        for a in range(net.K):
            if X[a] > tie and d[a] < -tolerances.rate:
                events.append((X[a] / -d[a], "zero", a, a))
            for b in range(net.K):
                if a == b or X[a] <= X[b] or _tied(X[a], X[b], tie):
                    continue
                closing = d[b] - d[a]
                if closing > tolerances.rate:
                    events.append(((X[a] - X[b]) / closing, "meet", a, b))

        tau = min((e[0] for e in events), default=float("inf"))
        if t + tau >= horizon:
            tau = horizon - t
            batch = []
        else:
            batch = [e for e in events if e[0] <= tau + tolerances.event_time]

        affine = X + d * tau
        limit = 0.5 * tolerances.segment_residual
        X_new = _merge_ties(X, affine, d, tolerances)
        for _, kind, a, b in batch:
            if kind == "meet":
                _snap(X_new, [b], float(X_new[a]), affine, limit)
        for _, kind, a, _b in batch:
            if kind == "zero":
                _snap(X_new, [a], 0.0, affine, limit)
        X_new = np.maximum(X_new, 0.0)

        if tau > 0:
            traj.segments.append(Segment(t, t + tau, X.copy(), X_new.copy(), S, phase))
        t += tau
        X = X_new
        if not batch:
            return _finish(traj, "HorizonReached", t)
        if np.all(X <= tie):
            return _drained(net, dq, traj, t, "LDQ", tolerances)
        logger.debug(f"t={t:.6g} LDQ events {[(k, a + 1, b + 1) for _, k, a, b in batch]} "
                     f"Tdot={np.round(phase.Tdot, 6).tolist()}")
        guard.step(X, maxima(X, net, tie).label())


def integrate(net: NetworkSpec, X0: Sequence[float], policy: Any = "LQ",
              horizon: float = FLUID_HORIZON, dq: Optional[DerivedQuantities] = None,
              tolerances: Tolerances = TOLERANCES) -> FluidTrajectory:
    """Integrate the fluid model from X0 under LQ or LDQ until drained, stalled or the horizon.

    Args:
        net: Validated network
        X0: Initial fluid levels (K-vector, non-negative)
        policy: "LQ", "LDQ" or a PolicyConfig with one of those kinds
        horizon: Time bound of the integration
        dq: Derived quantities (computed when omitted)
        tolerances: Numeric constants

    Returns:
        FluidTrajectory with its terminal status

    Raises:
        SingularPhase, NoFeasibleSubstate, PhaseLoopGuard, UnsupportedPolicy
    """
    name = _policy_name(policy)
    X = _check_x0(net, X0, tolerances)
    if not np.isfinite(horizon) or horizon <= 0:
        raise InvalidInitialState(f"horizon must be finite and positive, got {horizon}")
    dq = dq if dq is not None else derive(net)
    traj = FluidTrajectory(policy=name, x0=X.copy())
    logger.debug(f"integrating {name} fluid model from X0={X.tolist()} up to t={horizon:g}")
    if np.all(X <= tolerances.tie):
        return _drained(net, dq, traj, 0.0, name, tolerances)
    if name == "LQ":
        return _integrate_lq(net, dq, X, horizon, tolerances, traj)
    return _integrate_ldq(net, dq, X, horizon, tolerances, traj)
