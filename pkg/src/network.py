"""Network model, validation and static quantities of an open Lu-Kumar network."""
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy.linalg import lu_factor, lu_solve

from src.config import TOLERANCES
from src.errors import NumericError, ValidationError

logger = logging.getLogger(__name__)

OPENNESS_SQUARINGS = 64


class NetworkValidationError(ValidationError):
    """Base exception for rejected network descriptions."""
    pass


class MalformedNetwork(NetworkValidationError):
    """Raised when array shapes disagree or values are not finite numbers."""
    pass


class NonStochasticRouting(NetworkValidationError):
    """Raised when a routing entry leaves [0, 1] or a row sums above 1."""
    pass


class NotOpen(NetworkValidationError):
    """Raised when jobs can circulate forever (spectral radius of R >= 1)."""
    pass


class BadPartition(NetworkValidationError):
    """Raised when the groups overlap, are empty or miss a queue."""
    pass


class BadRates(NetworkValidationError):
    """Raised when a service rate is not positive or an arrival rate is negative."""
    pass


class NumericalSingularity(NumericError):
    """Raised when a traffic solve fails or leaves a large residual."""
    pass


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """A validated open network: K queues, J groups, routing R, rates lam and mu.

    Queue and group indices are 0-based. Instances are immutable and can be
    shared between threads and processes.
    """

    R: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    groups: Tuple[Tuple[int, ...], ...]
    names: Tuple[str, ...] = ()

    @property
    def K(self) -> int:
        return int(self.mu.shape[0])

    @property
    def J(self) -> int:
        return len(self.groups)

    @property
    def group_of(self) -> Tuple[int, ...]:
        owner = [0] * self.K
        for j, members in enumerate(self.groups):
            for i in members:
                owner[i] = j
        return tuple(owner)

    @property
    def group_sizes(self) -> Tuple[int, ...]:
        return tuple(len(members) for members in self.groups)

    def group_indicator(self, j: int) -> np.ndarray:
        """Indicator vector of group j over the K queues."""
        e = np.zeros(self.K)
        e[list(self.groups[j])] = 1.0
        return e

    def is_two_by_two(self) -> bool:
        """True for two groups of two queues each."""
        return self.J == 2 and self.group_sizes == (2, 2)

    def with_arrivals(self, lam: Sequence[float]) -> "NetworkSpec":
        """Copy of the network with a different exterior arrival vector."""
        return validate({
            "R": self.R, "lam": lam, "mu": self.mu,
            "groups": self.groups, "names": self.names,
        })

    def to_dict(self) -> Dict[str, Any]:
        """Document form (1-based groups) of the network."""
        return {
            "names": list(self.names),
            "groups": [[i + 1 for i in members] for members in self.groups],
            "routing": self.R.tolist(),
            "arrival_rates": self.lam.tolist(),
            "service_rates": self.mu.tolist(),
        }

    def __repr__(self) -> str:
        return f"NetworkSpec(K={self.K}, J={self.J}, groups={self.groups})"


@dataclass(frozen=True, eq=False)
class DerivedQuantities:
    """Static quantities of a network: Q, nominal traffic nu, drift matrix D, rho."""

    Q: np.ndarray
    nu: np.ndarray
    D: np.ndarray
    rho: np.ndarray
    residual: float = 0.0

    def drift_inverse_transpose(self) -> np.ndarray:
        """D^-T by LU solves against the identity."""
        K = self.D.shape[0]
        factor = lu_factor(self.D.T)
        return lu_solve(factor, np.eye(K))


@dataclass(frozen=True)
class GroupUtilization:
    """Utilization verdict of one group."""

    group: int
    rho: float
    slack: float
    stable: bool
    bottleneck: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "group": self.group + 1,
            "rho": self.rho,
            "slack": self.slack,
            "stable": self.stable,
            "bottleneck": self.bottleneck,
        }


@dataclass(frozen=True)
class UtilizationReport:
    """Per-group utilization conditions and their equivalent slack form."""

    groups: Tuple[GroupUtilization, ...] = field(default_factory=tuple)

    @property
    def stable(self) -> bool:
        return all(g.stable for g in self.groups)

    @property
    def rho(self) -> np.ndarray:
        return np.array([g.rho for g in self.groups])

    @property
    def slack(self) -> np.ndarray:
        return np.array([g.slack for g in self.groups])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stable": self.stable,
            "groups": [g.to_dict() for g in self.groups],
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _check_shapes(R: np.ndarray, lam: np.ndarray, mu: np.ndarray) -> int:
    if mu.ndim != 1 or mu.shape[0] == 0:
        raise MalformedNetwork("service rates must be a non-empty vector")
    K = mu.shape[0]
    if lam.shape != (K,):
        raise MalformedNetwork(f"arrival vector has shape {lam.shape}, expected ({K},)")
    if R.shape != (K, K):
        raise MalformedNetwork(f"routing matrix has shape {R.shape}, expected ({K}, {K})")
    for label, values in (("routing", R), ("arrival rates", lam), ("service rates", mu)):
        if not np.all(np.isfinite(values)):
            raise MalformedNetwork(f"{label} contain non-finite values")
    return K


def _check_rates(lam: np.ndarray, mu: np.ndarray) -> None:
    bad_mu = np.flatnonzero(mu <= 0)
    if bad_mu.size:
        raise BadRates(f"service rate of queue {bad_mu[0] + 1} is {mu[bad_mu[0]]}, must be > 0")
    bad_lam = np.flatnonzero(lam < 0)
    if bad_lam.size:
        raise BadRates(f"arrival rate of queue {bad_lam[0] + 1} is {lam[bad_lam[0]]}, must be >= 0")
    if not np.any(lam > 0):
        logger.warning("no queue has a positive exterior arrival rate; the scenario is degenerate")


def _check_routing(R: np.ndarray) -> None:
    outside = np.argwhere((R < 0) | (R > 1))
    if outside.size:
        i, j = outside[0]
        raise NonStochasticRouting(f"r_{i + 1}{j + 1} = {R[i, j]} lies outside [0, 1]")
    sums = R.sum(axis=1)
    over = np.flatnonzero(sums > 1 + 1e-12)
    if over.size:
        i = over[0]
        raise NonStochasticRouting(f"row {i + 1} of the routing matrix sums to {sums[i]:.6g} > 1")


def _check_partition(groups: Sequence[Sequence[int]], K: int) -> Tuple[Tuple[int, ...], ...]:
    seen: Dict[int, int] = {}
    normalized = []
    for j, members in enumerate(groups):
        members = tuple(int(i) for i in members)
        if not members:
            raise BadPartition(f"group {j + 1} is empty")
        for i in members:
            if not 0 <= i < K:
                raise BadPartition(f"group {j + 1} names queue {i + 1}, outside 1..{K}")
            if i in seen:
                raise BadPartition(f"queue {i + 1} belongs to groups {seen[i] + 1} and {j + 1}")
            seen[i] = j
        normalized.append(members)
    missing = sorted(set(range(K)) - set(seen))
    if missing:
        raise BadPartition(f"queues {[i + 1 for i in missing]} belong to no group")
    return tuple(normalized)


def _check_open(R: np.ndarray, lam: np.ndarray) -> None:
    """Reject R unless (I - R^T) is solvable and the spectral radius of R is below one.

    Powers of R^T are then confirmed to vanish by repeated squaring.
    """
    K = R.shape[0]
    A = np.eye(K) - R.T
    try:
        factor = lu_factor(A, check_finite=True)
        x = lu_solve(factor, lam if np.any(lam > 0) else np.ones(K))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NotOpen(f"I - R^T is singular: {exc}")
    if not np.all(np.isfinite(x)) or np.min(np.abs(np.diag(factor[0]))) < 1e-14:
        raise NotOpen("I - R^T is singular; some jobs never leave the network")

    radius = float(np.max(np.abs(np.linalg.eigvals(R))))
    if radius >= 1.0:
        raise NotOpen(f"spectral radius of R is {radius:.12g} >= 1; some jobs never leave the network")

    eps = TOLERANCES.openness_eps
    power = R.T.copy()
    for squarings in range(OPENNESS_SQUARINGS + 1):
        if np.linalg.norm(power, np.inf) < eps:
            return
        power = power @ power
    raise NotOpen(f"powers of R^T do not vanish after R^(2^{squarings}) "
                  f"(spectral radius {radius:.12g})")


def validate(raw: Mapping[str, Any]) -> NetworkSpec:
    """Validate a candidate network description.

    Args:
        raw: Mapping with keys "R" (K x K), "lam" (K), "mu" (K), "groups"
            (0-based queue lists) and optionally "names".

    Returns:
        The validated, immutable NetworkSpec

    Raises:
        MalformedNetwork, BadRates, NonStochasticRouting, BadPartition, NotOpen
    """
    try:
        R = np.array(raw["R"], dtype=float)
        lam = np.array(raw["lam"], dtype=float)
        mu = np.array(raw["mu"], dtype=float)
        groups = raw["groups"]
    except KeyError as exc:
        raise MalformedNetwork(f"missing network field {exc}")
    except (TypeError, ValueError) as exc:
        raise MalformedNetwork(f"network fields are not numeric arrays: {exc}")

    K = _check_shapes(R, lam, mu)
    _check_rates(lam, mu)
    _check_routing(R)
    normalized = _check_partition(groups, K)
    _check_open(R, lam)

    names = tuple(raw.get("names") or ())
    if not names:
        names = tuple(f"q{i + 1}" for i in range(K))
    elif len(names) != K:
        raise MalformedNetwork(f"{len(names)} queue names given for {K} queues")

    return NetworkSpec(R=_frozen(R), lam=_frozen(lam), mu=_frozen(mu),
                       groups=normalized, names=names)


def network_from_arrays(R: Sequence[Sequence[float]], lam: Sequence[float],
                        mu: Sequence[float], groups: Sequence[Sequence[int]],
                        names: Optional[Sequence[str]] = None) -> NetworkSpec:
    """Convenience wrapper around validate() for 0-based groups."""
    return validate({"R": R, "lam": lam, "mu": mu, "groups": groups, "names": names})


def derive(net: NetworkSpec) -> DerivedQuantities:
    """Compute Q = (I - R^T)^-1, nominal traffic nu, drift matrix D and rho.

    Raises:
        NumericalSingularity: if the traffic equations cannot be solved accurately
    """
    K = net.K
    A = np.eye(K) - net.R.T
    try:
        factor = lu_factor(A)
        nu = lu_solve(factor, net.lam)
        Q = lu_solve(factor, np.eye(K))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalSingularity(f"traffic equations cannot be solved: {exc}")
    if not (np.all(np.isfinite(nu)) and np.all(np.isfinite(Q))):
        raise NumericalSingularity("traffic solve produced non-finite values")

    residual = float(np.max(np.abs(A @ nu - net.lam)))
    bound = TOLERANCES.residual * (1.0 + float(np.max(np.abs(net.lam))))
    if residual > bound:
        raise NumericalSingularity(f"traffic residual {residual:.3e} exceeds {bound:.3e}")

    D = np.diag(net.mu) @ (net.R - np.eye(K))
    load = nu / net.mu
    rho = np.array([load[list(members)].sum() for members in net.groups])
    return DerivedQuantities(Q=_frozen(Q), nu=_frozen(nu), D=_frozen(D),
                             rho=_frozen(rho), residual=residual)


def utilization_check(dq: DerivedQuantities, net: NetworkSpec) -> UtilizationReport:
    """Utilization conditions rho_j < 1 together with slack_j = e_j^T D^-T lam + 1.

    The slack is computed from an independent solve against D^T, so the two
    columns of the report cross-check each other.
    """
    factor = lu_factor(dq.D.T)
    scaled = lu_solve(factor, net.lam)
    slacks = [float(net.group_indicator(j) @ scaled + 1.0) for j in range(net.J)]
    top = int(np.argmax(dq.rho))
    entries = tuple(
        GroupUtilization(group=j, rho=float(dq.rho[j]), slack=slacks[j],
                         stable=bool(dq.rho[j] < 1.0), bottleneck=(j == top))
        for j in range(net.J)
    )
    report = UtilizationReport(groups=entries)
    if not report.stable:
        logger.warning(f"utilization conditions fail: rho = {np.round(dq.rho, 6).tolist()}")
    return report


def routing_graph(net: NetworkSpec, queues: Optional[Sequence[int]] = None) -> nx.DiGraph:
    """Directed graph with an edge i -> j whenever r_ij > 0 (optionally restricted)."""
    nodes = range(net.K) if queues is None else queues
    graph = nx.DiGraph()
    graph.add_nodes_from(nodes)
    for i in graph.nodes:
        for j in graph.nodes:
            if net.R[i, j] > 0:
                graph.add_edge(i, j)
    return graph


def is_acyclic(net: NetworkSpec) -> bool:
    """True when the routing topology has no directed cycle (self-loops count)."""
    try:
        nx.find_cycle(routing_graph(net), orientation="original")
    except nx.NetworkXNoCycle:
        return True
    return False


def virtual_group_load(net: NetworkSpec, dq: DerivedQuantities, queues: Sequence[int]) -> float:
    """Work arriving per unit time at a set of queues that are never served together."""
    members = list(queues)
    return float(np.sum(dq.nu[members] / net.mu[members]))


def nominal_traffic_fixed_point(net: NetworkSpec, tol: float = 1e-12,
                                max_iter: int = 1_000_000) -> np.ndarray:
    """Iterate nu <- lam + R^T nu until the update falls below tol."""
    nu = net.lam.copy()
    for _ in range(max_iter):
        updated = net.lam + net.R.T @ nu
        if np.max(np.abs(updated - nu)) < tol:
            return updated
        nu = updated
    return nu
