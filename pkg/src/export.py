"""CSV, DOT, text and JSON writers for fluid, simulation and state-diagram artifacts.

Every CSV carries a header row and a fixed column order; queue and group ids
are 1-based.
"""
import csv
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Sequence

from src.config import TOOL_NAME, TOOL_VERSION
from src.dessim import SimResult
from src.fluid import FluidTrajectory, Segment
from src.network import NetworkSpec
from src.statespace import StateNode, TransitionEdge, state_label

logger = logging.getLogger(__name__)


def _queue_columns(prefix: str, count: int) -> List[str]:
    return [f"{prefix}{i + 1}" for i in range(count)]


def _ensure_parent(filepath: str) -> None:
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)


def _row(seg: Segment, t: float, X: Sequence[float]) -> List[Any]:
    return [repr(float(t))] + [repr(float(v)) for v in X] + [seg.state.label()] + \
        [repr(float(a)) for a in seg.phase.alpha]


class ExportManager:
    """Writes run artifacts; every writer returns True on success."""

    @staticmethod
    def export_trajectory_csv(filepath: str, traj: FluidTrajectory, net: NetworkSpec) -> bool:
        """One row per segment endpoint: t, X1..XK, state, alpha1..alphaJ.

        A row carries the state and drifts of the segment starting at that
        point; the final row repeats those of the last segment.

        Args:
            filepath: Destination CSV path
            traj: Integrated fluid trajectory
            net: Network the trajectory belongs to

        Returns:
            True if export was successful, False otherwise
        """
        try:
            _ensure_parent(filepath)
            with open(filepath, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["t"] + _queue_columns("X", net.K) + ["state"] +
                                _queue_columns("alpha", net.J))
                for seg in traj.segments:
                    writer.writerow(_row(seg, seg.t_start, seg.X_start))
                if traj.segments:
                    last = traj.segments[-1]
                    writer.writerow(_row(last, last.t_end, last.X_end))
            return True
        except OSError as e:
            logger.error(f"Error exporting trajectory to {filepath}: {e}")
            return False

    @staticmethod
    def export_segments_csv(filepath: str, traj: FluidTrajectory, net: NetworkSpec) -> bool:
        """One row per segment with its time-sharing rates, drifts and residual."""
        try:
            _ensure_parent(filepath)
            with open(filepath, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["t_start", "t_end", "state"] + _queue_columns("Tdot", net.K) +
                                _queue_columns("alpha", net.J) + ["residual"])
                for seg in traj.segments:
                    writer.writerow(
                        [repr(seg.t_start), repr(seg.t_end), seg.state.label()] +
                        [repr(float(v)) for v in seg.phase.Tdot] +
                        [repr(float(a)) for a in seg.phase.alpha] +
                        [repr(seg.residual())]
                    )
            return True
        except OSError as e:
            logger.error(f"Error exporting segments to {filepath}: {e}")
            return False

    @staticmethod
    def export_states_txt(filepath: str, traj: FluidTrajectory) -> bool:
        """Numbered state path followed by the terminal status line."""
        try:
            lines = []
            for n, state in enumerate(traj.state_path(), 1):
                lines.append(f"{n:4d}  {state.label()}")
            lines.append(f"status: {traj.status}")
            _ensure_parent(filepath)
            with open(filepath, "w", encoding="utf-8") as f:
                f.write("\n".join(lines) + "\n")
            return True
        except OSError as e:
            logger.error(f"Error exporting state path to {filepath}: {e}")
            return False

    @staticmethod
    def export_snapshots_csv(filepath: str, result: SimResult, net: NetworkSpec) -> bool:
        """Snapshot rows: t, X1..XK, total."""
        try:
            _ensure_parent(filepath)
            totals = result.totals()
            with open(filepath, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["t"] + _queue_columns("X", net.K) + ["total"])
                for t, row, total in zip(result.times, result.snapshots, totals):
                    writer.writerow([repr(float(t))] + [int(v) for v in row] + [int(total)])
            return True
        except OSError as e:
            logger.error(f"Error exporting snapshots to {filepath}: {e}")
            return False

    @staticmethod
    def export_metadata_json(filepath: str, record: Dict[str, Any]) -> bool:
        """Run-metadata record plus export date, tool name and version."""
        try:
            export_data = dict(record)
            export_data["metadata"] = {
                "export_date": datetime.now().isoformat(),
                "tool": TOOL_NAME,
                "version": TOOL_VERSION,
            }
            _ensure_parent(filepath)
            with open(filepath, "w", encoding="utf-8") as f:
                json.dump(export_data, f, indent=2, ensure_ascii=False)
            return True
        except (OSError, TypeError) as e:
            logger.error(f"Error exporting metadata to {filepath}: {e}")
            return False

    @staticmethod
    def export_nodes_csv(filepath: str, nodes: Sequence[StateNode], net: NetworkSpec) -> bool:
        """One row per maxima state: label, feasibility, absorbing flag, drift signs, alphas."""
        try:
            _ensure_parent(filepath)
            with open(filepath, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["state", "feasible", "absorbing", "drift_signs"] +
                                _queue_columns("alpha", net.J))
                for node in nodes:
                    alphas = [""] * net.J if node.alpha is None else [repr(float(a)) for a in node.alpha]
                    writer.writerow([node.state.label(), node.feasible, node.absorbing,
                                     "".join(node.drift_signs)] + alphas)
            return True
        except OSError as e:
            logger.error(f"Error exporting nodes to {filepath}: {e}")
            return False

    @staticmethod
    def export_edges_csv(filepath: str, edges: Sequence[TransitionEdge]) -> bool:
        """One row per transition: from, to, kind, entering, residual, min_tdot, via."""
        try:
            _ensure_parent(filepath)
            with open(filepath, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["from", "to", "kind", "entering", "residual", "min_tdot", "via"])
                for edge in edges:
                    writer.writerow([
                        edge.source.label(),
                        edge.target.label(),
                        edge.kind,
                        "" if edge.entering is None else edge.entering + 1,
                        repr(edge.residual),
                        "" if edge.min_tdot is None else repr(edge.min_tdot),
                        "" if edge.via is None else state_label(edge.via, False),
                    ])
            return True
        except OSError as e:
            logger.error(f"Error exporting edges to {filepath}: {e}")
            return False

    @staticmethod
    def render_dot(nodes: Sequence[StateNode], edges: Sequence[TransitionEdge]) -> str:
        """Graphviz digraph: feasible solid, infeasible dashed, zero state doubled."""
        ids = {node.state: f"s{n}" for n, node in enumerate(nodes)}
        lines = ["digraph states {", "  rankdir=LR;", '  node [shape=ellipse, fontname="Helvetica"];']
        for node in nodes:
            attrs = [f'label="{node.label}"']
            if node.state.is_zero:
                attrs.append("shape=doublecircle")
            attrs.append("style=solid" if node.feasible else "style=dashed")
            lines.append(f"  {ids[node.state]} [{', '.join(attrs)}];")
        for edge in edges:
            if edge.source not in ids or edge.target not in ids:
                continue
            style = "dashed" if edge.kind == "Jump" else "solid"
            lines.append(f'  {ids[edge.source]} -> {ids[edge.target]} '
                         f'[label="{edge.kind}", style={style}];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def export_dot(filepath: str, nodes: Sequence[StateNode], edges: Sequence[TransitionEdge]) -> bool:
        """Write the state diagram as a DOT file."""
        try:
            _ensure_parent(filepath)
            with open(filepath, "w", encoding="utf-8") as f:
                f.write(ExportManager.render_dot(nodes, edges))
            return True
        except OSError as e:
            logger.error(f"Error exporting DOT to {filepath}: {e}")
            return False

    @staticmethod
    def export_report_txt(filepath: str, text: str) -> bool:
        """Write a rendered report."""
        try:
            _ensure_parent(filepath)
            with open(filepath, "w", encoding="utf-8") as f:
                f.write(text if text.endswith("\n") else text + "\n")
            return True
        except OSError as e:
            logger.error(f"Error exporting report to {filepath}: {e}")
            return False
