"""Utilities package - media I/O, time formatting and console summaries."""

from .time_utils import format_duration, Stopwatch
from .summaries import SummaryBuilder

__all__ = ['format_duration', 'Stopwatch', 'SummaryBuilder']
