"""Time utility functions for formatting and measuring durations."""

import time
from typing import Optional


def format_duration(seconds: Optional[float]) -> str:
    """Format a duration for console output.

    Args:
        seconds: Duration in seconds

    Returns:
        '850 ms', '12.4s', '3m 05s' or '1h 02m', or 'N/A' if None
    """
    if seconds is None:
        return "N/A"
    if seconds < 1.0:
        return f"{seconds * 1000:.0f} ms"
    if seconds < 60.0:
        return f"{seconds:.1f}s"

    minutes, secs = divmod(int(round(seconds)), 60)
    if minutes < 60:
        return f"{minutes}m {secs:02d}s"
    hours, minutes = divmod(minutes, 60)
    return f"{hours}h {minutes:02d}m"


def format_samples(n_samples: int, sample_rate: int) -> str:
    """'40800 samples (2.55s)'"""
    return f"{n_samples} samples ({n_samples / sample_rate:.2f}s)"


class Stopwatch:
    """Wall-clock timer usable as a context manager."""

    def __init__(self):
        self.started = time.perf_counter()
        self.stopped: Optional[float] = None

    def __enter__(self) -> 'Stopwatch':
        self.started = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.stopped = time.perf_counter()

    @property
    def elapsed(self) -> float:
        end = self.stopped if self.stopped is not None else time.perf_counter()
        return end - self.started
