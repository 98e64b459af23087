"""Small argument checks shared by the integrators and studies."""

from __future__ import annotations

import math


def check_positive(value, name):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_step_count(T, tau):
    """Number of steps ``T / tau``; it must be an integer up to round-off."""
    check_positive(T, "T")
    check_positive(tau, "tau")
    ratio = T / tau
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-12 * max(1.0, n) * 8:
        raise ValueError(f"T / tau = {ratio!r} is not an integer")
    return int(n)


def check_choice(value, choices, name):
    if value not in choices:
        raise ValueError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value


def check_sizes(sizes, name="sizes"):
    sizes = [int(s) for s in sizes]
    if not sizes or any(s < 1 for s in sizes):
        raise ValueError(f"{name} must be a non-empty list of positive integers")
    return sizes
