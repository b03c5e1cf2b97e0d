"""Discrete-event simulation of a Lu-Kumar network and the fluid-scaling harness."""
import hashlib
import heapq
import itertools
import json
import logging
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import linregress

from src.config import DEFAULT_SEED, SAMPLE_POINTS, SUBSTREAM_LAYOUT, TOOL_NAME, TOOL_VERSION
from src.errors import PropertyViolation, ValidationError
from src.fluid import FluidTrajectory
from src.network import NetworkSpec
from src.policies import LDQ, LQ, STATIC_PRIORITY, PolicyConfig, decide_group

logger = logging.getLogger(__name__)

EXPONENTIAL = "exponential"
DETERMINISTIC = "deterministic"
UNIFORM = "uniform"
FAMILIES = (EXPONENTIAL, DETERMINISTIC, UNIFORM)

BLOCK = 4096
ARRIVAL = 0
COMPLETION = 1
GROWTH_BATCHES = 20


class SimConfigError(ValidationError):
    """Raised for an invalid simulation configuration or initial state."""
    pass


class InsufficientData(ValidationError):
    """Raised when the regression window holds too few snapshots."""
    pass


class AuditViolation(PropertyViolation):
    """Raised in audit mode when FIFO, nonpreemption, conservation or work conservation breaks."""
    pass


@dataclass(frozen=True)
class Process:
    """Renewal family of inter-event times; the rate comes from the network."""

    family: str = EXPONENTIAL
    spread: float = 0.5

    def validate(self) -> "Process":
        if self.family not in FAMILIES:
            raise SimConfigError(f"unknown process family {self.family!r}; expected one of {FAMILIES}")
        if self.family == UNIFORM and not 0.0 <= self.spread <= 1.0:
            raise SimConfigError(f"uniform spread must lie in [0, 1], got {self.spread}")
        return self

    def draw(self, rng: np.random.Generator, rate: float, size: int) -> np.ndarray:
        mean = 1.0 / rate
        if self.family == EXPONENTIAL:
            return rng.exponential(mean, size)
        if self.family == DETERMINISTIC:
            return np.full(size, mean)
        return rng.uniform(mean * (1.0 - self.spread), mean * (1.0 + self.spread), size)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"family": self.family}
        if self.family == UNIFORM:
            data["spread"] = self.spread
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Process":
        return cls(family=data.get("family", EXPONENTIAL), spread=data.get("spread", 0.5)).validate()


@dataclass(frozen=True)
class SimConfig:
    """Input processes, seed, horizon and snapshot interval of one simulation run.

    arrivals/services hold one Process per queue; when empty, the shared
    arrival/service process applies to every queue.
    """

    seed: int = DEFAULT_SEED
    horizon: float = 1e4
    sample_interval: Optional[float] = None
    arrival: Process = Process()
    service: Process = Process()
    arrivals: Tuple[Process, ...] = ()
    services: Tuple[Process, ...] = ()
    audit: bool = False

    @property
    def interval(self) -> float:
        return self.sample_interval if self.sample_interval else self.horizon / SAMPLE_POINTS

    def arrival_process(self, i: int) -> Process:
        return self.arrivals[i] if self.arrivals else self.arrival

    def service_process(self, i: int) -> Process:
        return self.services[i] if self.services else self.service

    def validate_for(self, net: NetworkSpec) -> "SimConfig":
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise SimConfigError(f"horizon must be finite and positive, got {self.horizon}")
        if self.interval <= 0:
            raise SimConfigError(f"sample interval must be positive, got {self.interval}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise SimConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        for label, per_queue in (("arrivals", self.arrivals), ("services", self.services)):
            if per_queue and len(per_queue) != net.K:
                raise SimConfigError(f"{label} lists {len(per_queue)} processes for {net.K} queues")
        for i in range(net.K):
            self.arrival_process(i).validate()
            self.service_process(i).validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "seed": int(self.seed),
            "horizon": self.horizon,
            "arrival": self.arrival.to_dict(),
            "service": self.service.to_dict(),
            "audit": self.audit,
        }
        if self.sample_interval:
            data["sample_interval"] = self.sample_interval
        if self.arrivals:
            data["arrivals"] = [p.to_dict() for p in self.arrivals]
        if self.services:
            data["services"] = [p.to_dict() for p in self.services]
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], seed: Optional[int] = None) -> "SimConfig":
        return cls(
            seed=int(seed if seed is not None else data.get("seed", DEFAULT_SEED)),
            horizon=float(data.get("horizon", 1e4)),
            sample_interval=data.get("sample_interval"),
            arrival=Process.from_dict(data.get("arrival", {})),
            service=Process.from_dict(data.get("service", {})),
            arrivals=tuple(Process.from_dict(p) for p in data.get("arrivals", ())),
            services=tuple(Process.from_dict(p) for p in data.get("services", ())),
            audit=bool(data.get("audit", False)),
        )


@dataclass(eq=False)
class SimResult:
    """Snapshots, busy fractions and job totals of one run."""

    times: np.ndarray
    snapshots: np.ndarray
    busy_fraction: np.ndarray
    arrivals: int
    departures: int
    initial: int
    in_system: int
    horizon: float
    seed: int
    policy: str
    events: int
    growth_slope: float = float("nan")

    def totals(self) -> np.ndarray:
        """Total queue length at every snapshot."""
        return self.snapshots.sum(axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "policy": self.policy,
            "horizon": self.horizon,
            "events": self.events,
            "arrivals": self.arrivals,
            "departures": self.departures,
            "initial": self.initial,
            "in_system": self.in_system,
            "busy_fraction": self.busy_fraction.tolist(),
            "growth_slope": self.growth_slope,
            "final": self.snapshots[-1].tolist() if len(self.snapshots) else [],
        }

    def get_summary(self) -> str:
        return (f"seed {self.seed}: {self.events} events, {self.arrivals} arrivals, "
                f"{self.departures} departures, {self.in_system} in system, "
                f"growth slope {self.growth_slope:.4g}")


@dataclass(frozen=True)
class InstabilityVerdict:
    """Slope test on the last half of the total queue length."""

    unstable: bool
    slope: float
    stderr: float
    batches: int
    points: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "unstable": self.unstable,
            "slope": self.slope,
            "stderr": self.stderr,
            "batches": self.batches,
            "points": self.points,
        }


@dataclass(frozen=True)
class ScalingPoint:
    """Sup-norm distance between a scaled simulation and the fluid path for one r."""

    r: float
    error: float
    per_seed: Tuple[float, ...]

    def to_dict(self) -> Dict[str, Any]:
        return {"r": self.r, "error": self.error, "per_seed": list(self.per_seed)}


@dataclass
class ScalingReport:
    """Per-r errors of a fluid-scaling sweep."""

    points: List[ScalingPoint] = field(default_factory=list)

    @property
    def errors(self) -> List[float]:
        return [p.error for p in self.points]

    def to_dict(self) -> Dict[str, Any]:
        return {"points": [p.to_dict() for p in self.points]}


class _Buffered:
    """Draws variates in blocks from one generator."""

    def __init__(self, draw: Callable[[int], np.ndarray]):
        self._draw = draw
        self._buffer = np.empty(0)
        self._pos = 0

    def next(self) -> float:
        if self._pos >= self._buffer.size:
            self._buffer = self._draw(BLOCK)
            self._pos = 0
        value = self._buffer[self._pos]
        self._pos += 1
        return float(value)


def substreams(seed: int) -> Dict[str, np.random.Generator]:
    """Independent generators spawned from one seed, in SUBSTREAM_LAYOUT order."""
    children = np.random.SeedSequence(int(seed)).spawn(len(SUBSTREAM_LAYOUT))
    return {name: np.random.default_rng(child) for name, child in zip(SUBSTREAM_LAYOUT, children)}


def _check_x0(net: NetworkSpec, X0: Optional[Sequence[int]]) -> np.ndarray:
    if X0 is None:
        return np.zeros(net.K, dtype=np.int64)
    X = np.asarray(X0)
    if X.shape != (net.K,):
        raise SimConfigError(f"X0 has shape {X.shape}, expected ({net.K},)")
    if np.any(X < 0) or np.any(np.asarray(X, dtype=float) != np.round(np.asarray(X, dtype=float))):
        raise SimConfigError(f"X0 must hold non-negative integers, got {X.tolist()}")
    return X.astype(np.int64)


class _Simulation:
    """Mutable state of one run: lengths, FIFO tickets, servers and the event calendar."""

    def __init__(self, net: NetworkSpec, policy: PolicyConfig, sim: SimConfig, X0: np.ndarray):
        self.net = net
        self.policy = policy
        self.sim = sim
        self.K, self.J = net.K, net.J
        self.owner = net.group_of
        streams = substreams(sim.seed)
        self.arrival_gaps = [self._stream(streams["arrivals"], sim.arrival_process(i), net.lam[i])
                             for i in range(self.K)]
        self.service_times = [self._stream(streams["services"], sim.service_process(i), net.mu[i])
                              for i in range(self.K)]
        self.routing = _Buffered(lambda n, rng=streams["routing"]: rng.random(n))
        self.tiebreak = streams["tiebreak"]
        self.cumulative = np.cumsum(net.R, axis=1)

        self.X = X0.copy()
        self.queues: List[deque] = [deque(range(int(X0[i]))) for i in range(self.K)]
        self.issued = [int(X0[i]) for i in range(self.K)]
        self.released = [0] * self.K
        self.busy: List[Optional[int]] = [None] * self.J
        self.busy_since = [0.0] * self.J
        self.busy_until = [0.0] * self.J
        self.busy_time = np.zeros(self.K)
        self.arrived = 0
        self.departed = 0
        self.initial = int(X0.sum())
        self.events = 0
        self.calendar: List[Tuple[float, int, int, int]] = []
        self.sequence = itertools.count()

    @staticmethod
    def _stream(rng: np.random.Generator, process: Process, rate: float) -> Optional[_Buffered]:
        if rate <= 0:
            return None
        return _Buffered(lambda n: process.draw(rng, rate, n))

    def schedule(self, time: float, kind: int, queue: int) -> None:
        heapq.heappush(self.calendar, (time, next(self.sequence), kind, queue))

    def route(self, i: int) -> Optional[int]:
        dest = int(np.searchsorted(self.cumulative[i], self.routing.next(), side="right"))
        return dest if dest < self.K else None

    def enqueue(self, i: int) -> None:
        self.X[i] += 1
        self.queues[i].append(self.issued[i])
        self.issued[i] += 1

    def consult(self, now: float) -> None:
        """Start service at every free server the policy wants busy."""
        for j in range(self.J):
            if self.busy[j] is not None:
                continue
            q = decide_group(self.net, j, self.X, self.policy, self.tiebreak)
            if q is None:
                continue
            if self.X[q] <= 0:
                raise AuditViolation(f"policy chose empty queue {q + 1} in group {j + 1}")
            self.busy[j] = q
            self.busy_since[j] = now
            self.busy_until[j] = now + self.service_times[q].next()
            self.schedule(self.busy_until[j], COMPLETION, q)
        if self.sim.audit:
            self.audit(now)

    def audit(self, now: float) -> None:
        if self.arrived + self.initial != self.departed + int(self.X.sum()):
            raise AuditViolation(f"job conservation broken at t={now}")
        for j, members in enumerate(self.net.groups):
            if self.busy[j] is not None or not any(self.X[i] > 0 for i in members):
                continue
            if self.policy.kind in (LQ, STATIC_PRIORITY):
                raise AuditViolation(f"group {j + 1} idles with work present at t={now}")
            if self.policy.kind == LDQ:
                logger.debug(f"t={now:.6g} LDQ idles group {j + 1}: no positive dominating queue")

    def arrive(self, now: float, i: int) -> None:
        self.enqueue(i)
        self.arrived += 1
        self.schedule(now + self.arrival_gaps[i].next(), ARRIVAL, i)

    def complete(self, now: float, i: int) -> None:
        j = self.owner[i]
        if self.sim.audit and (self.busy[j] != i or self.busy_until[j] != now):
            raise AuditViolation(f"service of queue {i + 1} ended at t={now} out of turn")
        ticket = self.queues[i].popleft()
        if self.sim.audit and ticket != self.released[i]:
            raise AuditViolation(f"queue {i + 1} released job {ticket} before job {self.released[i]}")
        self.released[i] += 1
        self.X[i] -= 1
        self.busy_time[i] += now - self.busy_since[j]
        self.busy[j] = None
        dest = self.route(i)
        if dest is None:
            self.departed += 1
        else:
            self.enqueue(dest)

    def execute(self, times: np.ndarray) -> np.ndarray:
        snapshots = np.zeros((times.size, self.K), dtype=np.int64)
        horizon = self.sim.horizon
        for i in range(self.K):
            if self.arrival_gaps[i] is not None:
                self.schedule(self.arrival_gaps[i].next(), ARRIVAL, i)
        self.consult(0.0)

        sample = 0
        while self.calendar and self.calendar[0][0] <= horizon:
            now, _, kind, i = heapq.heappop(self.calendar)
            while sample < times.size and times[sample] < now:
                snapshots[sample] = self.X
                sample += 1
            if kind == ARRIVAL:
                self.arrive(now, i)
            else:
                self.complete(now, i)
            self.events += 1
            self.consult(now)
        snapshots[sample:] = self.X

        for j, q in enumerate(self.busy):
            if q is not None:
                self.busy_time[q] += horizon - self.busy_since[j]
        return snapshots


def _growth_fit(times: np.ndarray, totals: np.ndarray, horizon: float):
    mask = times >= horizon / 2.0
    return times[mask], totals[mask].astype(float)


def run(net: NetworkSpec, policy: PolicyConfig, sim: SimConfig,
        X0: Optional[Sequence[int]] = None) -> SimResult:
    """Simulate the network under a policy until the horizon.

    Servers re-decide only while free; a started service always completes.
    Identical inputs and seed give a bit-identical result.

    Args:
        net: Validated network
        policy: Scheduling policy
        sim: Simulation configuration
        X0: Initial integer queue lengths (zeros when omitted)

    Returns:
        SimResult with snapshots at every sample interval
    """
    policy.validate_for(net)
    sim.validate_for(net)
    X = _check_x0(net, X0)
    count = int(math.floor(sim.horizon / sim.interval + 1e-9)) + 1
    times = sim.interval * np.arange(count)

    state = _Simulation(net, policy, sim, X)
    snapshots = state.execute(times)
    result = SimResult(
        times=times,
        snapshots=snapshots,
        busy_fraction=state.busy_time / sim.horizon,
        arrivals=state.arrived,
        departures=state.departed,
        initial=state.initial,
        in_system=int(state.X.sum()),
        horizon=sim.horizon,
        seed=int(sim.seed),
        policy=policy.kind,
        events=state.events,
    )
    t, y = _growth_fit(times, result.totals(), sim.horizon)
    if t.size >= 3 and np.ptp(t) > 0:
        result.growth_slope = float(linregress(t, y).slope)
    logger.info(f"simulation {result.get_summary()}")
    return result


def detect_instability(result: SimResult, min_points: int = 100,
                       batches: int = GROWTH_BATCHES) -> InstabilityVerdict:
    """Growth-slope test: unstable when the slope exceeds three standard errors.

    The last half of the path is cut into contiguous batches and the line is
    fitted to the batch means; the standard error is that of this fit.

    Raises:
        InsufficientData: if the last half holds fewer than min_points snapshots
    """
    t, y = _growth_fit(result.times, result.totals(), result.horizon)
    if t.size < min_points:
        logger.warning(f"only {t.size} snapshots in the regression window")
        raise InsufficientData(f"{t.size} snapshots in the last half, need at least {min_points}")
    if np.ptp(y) == 0:
        return InstabilityVerdict(unstable=False, slope=0.0, stderr=0.0, batches=0, points=int(t.size))

    count = max(3, min(batches, t.size))
    t_means = np.array([chunk.mean() for chunk in np.array_split(t, count)])
    y_means = np.array([chunk.mean() for chunk in np.array_split(y, count)])
    fit = linregress(t_means, y_means)
    stderr = float(fit.stderr)
    unstable = bool(fit.slope > 3.0 * stderr)
    verdict = InstabilityVerdict(unstable=unstable, slope=float(fit.slope), stderr=stderr,
                                 batches=count, points=int(t.size))
    if unstable:
        logger.warning(f"seed {result.seed}: total queue length grows at {fit.slope:.4g} "
                       f"(stderr {stderr:.3g})")
    return verdict


def _run_task(args: Tuple[NetworkSpec, PolicyConfig, SimConfig, Optional[Sequence[int]]]) -> SimResult:
    return run(*args)


def replicate(net: NetworkSpec, policy: PolicyConfig, sim: SimConfig,
              X0: Optional[Sequence[int]], seeds: Sequence[int], jobs: int = 1) -> List[SimResult]:
    """Independent runs, one per seed, returned in seed order."""
    tasks = [(net, policy, replace(sim, seed=int(s)), X0) for s in seeds]
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_task(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_task, tasks))


def fluid_scaling_check(net: NetworkSpec, policy: PolicyConfig, X0: Sequence[float],
                        r_list: Sequence[float], sim: SimConfig, fluid_traj: FluidTrajectory,
                        seeds: Optional[Sequence[int]] = None, jobs: int = 1,
                        margin: float = 0.1) -> ScalingReport:
    """Sup-norm error of X(rt)/r against the fluid path for every scaling factor r.

    Each run starts from ceil(r X0) and lasts r times the fluid end time plus
    the margin; errors are averaged over the seeds.
    """
    seeds = list(seeds) if seeds else [int(sim.seed)]
    end = max(fluid_traj.end_time, 1.0)
    report = ScalingReport()
    for r in r_list:
        horizon = r * end * (1.0 + margin)
        scaled = replace(sim, horizon=horizon, sample_interval=horizon / SAMPLE_POINTS)
        x0 = np.ceil(r * np.asarray(X0, dtype=float)).astype(np.int64)
        errors = []
        for result in replicate(net, policy, scaled, x0, seeds, jobs):
            fluid = np.array([fluid_traj.at(t / r) for t in result.times])
            errors.append(float(np.max(np.abs(result.snapshots / r - fluid))))
        point = ScalingPoint(r=float(r), error=float(np.mean(errors)), per_seed=tuple(errors))
        logger.info(f"scaling r={r:g}: sup-norm error {point.error:.4g}")
        report.points.append(point)
    return report


def config_hash(net: NetworkSpec, policy: PolicyConfig, sim: SimConfig,
                X0: Optional[Sequence[int]]) -> str:
    """SHA-256 of the canonical JSON form of a run's inputs."""
    payload = {
        "network": net.to_dict(),
        "policy": policy.to_dict(),
        "sim": sim.to_dict(),
        "x0": [int(v) for v in (X0 if X0 is not None else [0] * net.K)],
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def run_metadata(net: NetworkSpec, policy: PolicyConfig, sim: SimConfig,
                 X0: Optional[Sequence[int]]) -> Dict[str, Any]:
    """Seed, substream layout and config hash of a run."""
    return {
        "tool": TOOL_NAME,
        "version": TOOL_VERSION,
        "seed": int(sim.seed),
        "substreams": {
            "derivation": "numpy.random.SeedSequence(seed).spawn(4)",
            "layout": list(SUBSTREAM_LAYOUT),
            "block": BLOCK,
        },
        "config_hash": config_hash(net, policy, sim, X0),
    }
