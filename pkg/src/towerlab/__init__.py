"""Intermittent circle maps, their solenoid extension, induced towers and couplings."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .circle_map import CircleMapParams  # noqa: E402
from .solenoid import SolenoidParams  # noqa: E402
