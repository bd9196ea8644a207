"""Collects one verdict per acceptance criterion for the terminal summary."""

from __future__ import annotations

RESULTS: dict[int, tuple[str, bool, str]] = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
    RESULTS[number] = (title, bool(passed), detail)
    return bool(passed)
