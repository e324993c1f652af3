"""Invocation counters for the transfer-once architecture checks.

The serving layer and tests assert that rendering frames never triggers
feature transfer or decoding; these counters make that observable.
"""

import threading

_lock = threading.Lock()
_counts = {}


def bump(name: str):
    with _lock:
        _counts[name] = _counts.get(name, 0) + 1


def get(name: str) -> int:
    with _lock:
        return _counts.get(name, 0)


def snapshot() -> dict:
    with _lock:
        return dict(_counts)
