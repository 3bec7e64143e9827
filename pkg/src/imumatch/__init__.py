"""Match camera tracks to wearable inertial sensors."""

__version__ = "0.1.0"
