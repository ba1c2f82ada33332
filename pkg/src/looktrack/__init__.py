"""Neural track reconstruction on a toy multi-station detector."""

from .config import TrainConfig
from .estimators import LootTracker, SeedTrackClassifier
from .simulator import Event, SimConfig, generate_event

__all__ = ["Event", "LootTracker", "SeedTrackClassifier", "SimConfig", "TrainConfig", "generate_event"]
__version__ = "0.1.0"
