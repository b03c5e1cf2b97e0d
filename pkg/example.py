"""Example usage of luknet on the built-in scenarios."""
import json
from dataclasses import replace

from src.dessim import InsufficientData, detect_instability, run
from src.errors import LabError
from src.fluid import integrate
from src.network import derive, utilization_check, virtual_group_load
from src.policies import LQ, PolicyConfig
from src.scenario import preset


def print_fluid_summary(name):
    """Print the state path and terminal status of a preset's fluid trajectory."""
    scenario = preset(name)
    traj = integrate(scenario.net, scenario.fluid_x0, scenario.policy, horizon=scenario.fluid_horizon)
    print(f"\n{'='*70}")
    print(f"Fluid model: {name} ({traj.policy})")
    print(f"{'='*70}")
    print(" -> ".join(s.label() for s in traj.state_path()))
    print(f"status: {traj.status}")
    print(f"largest segment residual: {traj.max_residual():.2e}")


def print_priority_comparison(horizon=2e4):
    """Simulate the priority network under static priority and under LQ."""
    scenario = preset("priority-unstable")
    net = scenario.net
    dq = derive(net)
    report = utilization_check(dq, net)
    print(f"\n{'='*70}")
    print("Virtual group instability")
    print(f"{'='*70}")
    print(f"rho per group: {[round(g.rho, 4) for g in report.groups]}")
    print(f"load of virtual group {{2,3}}: {virtual_group_load(net, dq, [1, 2]):.4f}")

    sim = replace(scenario.sim, horizon=horizon, seed=1)
    for label, policy in (("static priority", scenario.policy), ("LQ", PolicyConfig(LQ))):
        result = run(net, policy, sim)
        try:
            verdict = detect_instability(result)
            outcome = "UNSTABLE" if verdict.unstable else "stable"
            print(f"  {label:<16} slope {verdict.slope:8.4f} ± {verdict.stderr:.4f}  {outcome}")
        except InsufficientData as e:
            print(f"  {label:<16} {e}")


def main():
    """Demonstrate fluid integration and the growth test."""
    print("luknet - Lu-Kumar Network Stability Lab Demo")
    print("="*70)

    for name in ("lu-kumar-lq", "ldq-acyclic", "ldq-cycle"):
        try:
            print_fluid_summary(name)
        except LabError as e:
            print(f"\nError integrating {name}: {type(e).__name__}: {e}\n")

    print_priority_comparison()

    print("\n" + "="*70)
    print("Scenario document (for --scenario):")
    print("="*70)
    print(json.dumps(preset("lu-kumar-lq").to_dict(), indent=2))


if __name__ == "__main__":
    main()
