"""Scheduling policies: pure decisions from queue lengths to the queue each group serves."""
import logging
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.errors import ValidationError
from src.fluid import dominating_sets, maxima
from src.network import NetworkSpec

logger = logging.getLogger(__name__)

LQ = "LQ"
LDQ = "LDQ"
STATIC_PRIORITY = "StaticPriority"
POLICY_KINDS = (LQ, LDQ, STATIC_PRIORITY)

NATURAL = "natural"
RANDOM = "random"
FIXED = "fixed"
TIEBREAKS = (NATURAL, RANDOM, FIXED)

Idle = None


class PolicyConfigError(ValidationError):
    """Raised when a policy configuration does not fit the network."""
    pass


@dataclass(frozen=True)
class PolicyConfig:
    """Policy kind, tie-break rule and per-group orders (0-based queue ids).

    tiebreak "natural" serves the lowest-numbered tied queue, "random" draws
    uniformly from the tie-break stream and "fixed" follows fixed_order.
    """

    kind: str = LQ
    tiebreak: str = NATURAL
    fixed_order: Tuple[Tuple[int, ...], ...] = ()
    priority_order: Tuple[Tuple[int, ...], ...] = ()

    def validate_for(self, net: NetworkSpec) -> "PolicyConfig":
        """Check orders cover exactly each group's queues."""
        if self.kind not in POLICY_KINDS:
            raise PolicyConfigError(f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}")
        if self.tiebreak not in TIEBREAKS:
            raise PolicyConfigError(f"unknown tie-break {self.tiebreak!r}; expected one of {TIEBREAKS}")
        if self.tiebreak == FIXED:
            self._check_orders(net, self.fixed_order, "fixed_order")
        if self.kind == STATIC_PRIORITY:
            self._check_orders(net, self.priority_order, "priority_order")
        return self

    @staticmethod
    def _check_orders(net: NetworkSpec, orders: Sequence[Sequence[int]], name: str) -> None:
        if len(orders) != net.J:
            raise PolicyConfigError(f"{name} needs one permutation per group ({net.J}), got {len(orders)}")
        for j, (order, members) in enumerate(zip(orders, net.groups)):
            if sorted(order) != sorted(members):
                raise PolicyConfigError(
                    f"{name} for group {j + 1} is {[i + 1 for i in order]}, "
                    f"not a permutation of {[i + 1 for i in members]}")

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"kind": self.kind, "tiebreak": self.tiebreak}
        if self.fixed_order:
            data["fixed_order"] = [[i + 1 for i in order] for order in self.fixed_order]
        if self.priority_order:
            data["priority_order"] = [[i + 1 for i in order] for order in self.priority_order]
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PolicyConfig":
        """Build from the document form (1-based queue ids)."""
        return cls(
            kind=data.get("kind", LQ),
            tiebreak=data.get("tiebreak", NATURAL),
            fixed_order=tuple(tuple(i - 1 for i in order) for order in data.get("fixed_order", ())),
            priority_order=tuple(tuple(i - 1 for i in order) for order in data.get("priority_order", ())),
        )


def _break_tie(j: int, tied: Sequence[int], cfg: PolicyConfig,
               rng: Optional[np.random.Generator]) -> int:
    if len(tied) == 1:
        return tied[0]
    if cfg.tiebreak == RANDOM:
        if rng is None:
            raise PolicyConfigError("random tie-break needs a generator")
        return tied[int(rng.integers(len(tied)))]
    if cfg.tiebreak == FIXED:
        rank = {q: n for n, q in enumerate(cfg.fixed_order[j])}
        return min(tied, key=lambda q: rank[q])
    return min(tied)


def lq_decide(net: NetworkSpec, j: int, X: Sequence[float], cfg: PolicyConfig,
              rng: Optional[np.random.Generator] = None) -> Optional[int]:
    """Serve a longest non-empty queue of group j, or Idle when the group is empty."""
    members = net.groups[j]
    top = max(X[i] for i in members)
    if top <= 0:
        return Idle
    return _break_tie(j, [i for i in members if X[i] == top], cfg, rng)


def ldq_decide(net: NetworkSpec, j: int, X: Sequence[float], cfg: PolicyConfig,
               rng: Optional[np.random.Generator] = None) -> Optional[int]:
    """Serve the longest positive dominating queue of group j, or Idle when there is none.

    A queue is dominated when it feeds (r > 0) a group maximum that is strictly
    longer; equal lengths never disqualify.
    """
    X = np.asarray(X, dtype=float)
    S = maxima(X, net, tol=0.0)
    dominating = dominating_sets(net, X, S, tol=0.0)[j]
    positive = [i for i in dominating if X[i] > 0]
    if not positive:
        return Idle
    top = max(X[i] for i in positive)
    return _break_tie(j, [i for i in positive if X[i] == top], cfg, rng)


def priority_decide(net: NetworkSpec, j: int, X: Sequence[float], cfg: PolicyConfig,
                    rng: Optional[np.random.Generator] = None) -> Optional[int]:
    """Serve the highest-priority non-empty queue of group j, or Idle."""
    for q in cfg.priority_order[j]:
        if X[q] > 0:
            return q
    return Idle


_DECIDERS = {LQ: lq_decide, LDQ: ldq_decide, STATIC_PRIORITY: priority_decide}


def decide_group(net: NetworkSpec, j: int, X: Sequence[float], cfg: PolicyConfig,
                 rng: Optional[np.random.Generator] = None) -> Optional[int]:
    """Decision of one group under cfg.kind."""
    try:
        decider = _DECIDERS[cfg.kind]
    except KeyError:
        raise PolicyConfigError(f"unknown policy kind {cfg.kind!r}")
    return decider(net, j, X, cfg, rng)


def decide(net: NetworkSpec, X: Sequence[float], cfg: PolicyConfig,
           rng: Optional[np.random.Generator] = None) -> Tuple[Optional[int], ...]:
    """Per-group decision vector (queue id or Idle for each group)."""
    return tuple(decide_group(net, j, X, cfg, rng) for j in range(net.J))
