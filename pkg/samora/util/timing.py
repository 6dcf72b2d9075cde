"""
Wall-clock timing for training loops and pipeline stages.
"""

import time


def format_duration(seconds):
    """
    Format a duration for log messages.

    >>> format_duration(0.25)
    '250ms'
    >>> format_duration(75.5)
    '1m15.50s'
    >>> format_duration(3725)
    '1h2m5.00s'
    """
    if seconds < 1:
        return '{:0.0f}ms'.format(seconds * 1000)
    if seconds < 60:
        return '{:0.2f}s'.format(seconds)
    m, s = divmod(seconds, 60)
    if m < 60:
        return '{:0.0f}m{:0.2f}s'.format(m, s)
    h, m = divmod(m, 60)
    return '{:0.0f}h{:0.0f}m{:0.2f}s'.format(h, m, s)


class Stopwatch:
    """
    Elapsed-time recorder.  Its string form is the elapsed time, for log lines
    such as ``'[%s] finished epoch %d', timer, epoch``.  :meth:`lap` splits the
    run into epochs or stages; a stopwatch is also a context manager that stops
    when its block exits.
    """
    start_time = None
    stop_time = None
    lap_time = None

    def __init__(self, start=True):
        if start:
            self.start()

    def start(self):
        self.start_time = time.perf_counter()
        self.lap_time = self.start_time
        self.stop_time = None

    def stop(self):
        self.stop_time = time.perf_counter()

    def elapsed(self):
        "Elapsed time in seconds."
        end = self.stop_time if self.stop_time is not None else time.perf_counter()
        return end - self.start_time

    def lap(self):
        "Seconds since the previous lap (or the start); starts a new lap."
        now = time.perf_counter()
        split = now - self.lap_time
        self.lap_time = now
        return split

    def __enter__(self):
        if self.start_time is None:
            self.start()
        return self

    def __exit__(self, *args):
        self.stop()

    def __str__(self):
        return format_duration(self.elapsed())
