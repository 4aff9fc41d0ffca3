"""
Performance monitoring utilities for the class-incremental adapter toolkit
Provides decorators and context managers for timing training stages
"""

import functools
import time

from cilkit.utils.logging_config import get_logger

logger = get_logger(__name__)

_thresholds = {"SLOW_STAGE_THRESHOLD": 30.0}


def configure(settings):
    """Pick up timing thresholds from a Config instance"""
    _thresholds["SLOW_STAGE_THRESHOLD"] = settings.get("SLOW_STAGE_THRESHOLD", 30.0)


def timer(func):
    """Log the wall-clock time of every call; slow calls are warned about"""

    @functools.wraps(func)
    def timed(*args, **kwargs):
        with PerformanceMonitor(func.__qualname__):
            return func(*args, **kwargs)

    return timed


class TimingLog:
    """Ordered record of named durations for one run"""

    def __init__(self):
        self.entries = []

    def add(self, operation, duration, success=True):
        self.entries.append({"operation": operation, "duration": duration, "success": success})

    def total(self, prefix=""):
        return sum(e["duration"] for e in self.entries if e["operation"].startswith(prefix))

    def as_dict(self):
        """operation -> summed seconds"""
        summary = {}
        for entry in self.entries:
            summary[entry["operation"]] = summary.get(entry["operation"], 0.0) + entry["duration"]
        return summary


class PerformanceMonitor:
    """Context manager for monitoring performance of code blocks"""

    def __init__(self, operation_name, timings=None, log_threshold=None):
        self.operation_name = operation_name
        self.timings = timings
        self.log_threshold = log_threshold
        self.start_time = None
        self.duration = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.duration = time.perf_counter() - self.start_time
        threshold = self.log_threshold
        if threshold is None:
            threshold = _thresholds["SLOW_STAGE_THRESHOLD"]

        if exc_type:
            logger.error(f"Operation '{self.operation_name}' failed after {self.duration:.3f}s: {exc_val}")
        elif self.duration > threshold:
            logger.warning(
                f"Slow operation '{self.operation_name}' took {self.duration:.3f}s (threshold: {threshold}s)"
            )
        else:
            logger.debug(f"Operation '{self.operation_name}' completed in {self.duration:.3f}s")

        if self.timings is not None:
            self.timings.add(self.operation_name, self.duration, exc_type is None)
