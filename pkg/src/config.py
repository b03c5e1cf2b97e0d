"""Configuration management for the Lu-Kumar network stability lab."""
import os
from dataclasses import dataclass
from dotenv import load_dotenv

load_dotenv()

LOG_LEVEL = os.getenv("LUKNET_LOG_LEVEL", "INFO").upper()
DEFAULT_SEED = int(os.getenv("LUKNET_DEFAULT_SEED", "20240101"))
FLUID_HORIZON = float(os.getenv("LUKNET_FLUID_HORIZON", "1e6"))
SAMPLE_POINTS = int(os.getenv("LUKNET_SAMPLE_POINTS", "2000"))
OUTPUT_DIR = os.getenv("LUKNET_OUTPUT_DIR", "out")

TOOL_NAME = "luknet"
TOOL_VERSION = "1.0.0"


@dataclass(frozen=True)
class Tolerances:
    """Numeric constants shared by every module."""

    residual: float = 1e-9
    rate: float = 1e-9
    tie: float = 1e-9
    event_time: float = 1e-12
    stall: float = 1e-9
    negative_floor: float = -1e-9
    segment_residual: float = 1e-8
    openness_eps: float = 1e-12
    lp_active: float = 1e-7


TOLERANCES = Tolerances()

# Random substreams derived from one seed, in spawn order.
SUBSTREAM_LAYOUT = ("arrivals", "services", "routing", "tiebreak")

PRESET_NAMES = ["lu-kumar-lq", "ldq-acyclic", "ldq-cycle", "priority-unstable"]

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_PROPERTY = 4
EXIT_OUTPUT = 5
