"""Data-driven model sizing: a fitted log-log line from data volume to
compute-optimal parameter count, and preset selection against it.

The line log10(N) = 0.51 * log10(D) + 0.0617 was fit on published
compute-optimal (data size, parameter count) pairs; D counts route segments
(one segment = one sequence position).
"""

from __future__ import annotations

import math
import warnings

from .models import RET_PRESETS, TransformerConfig, param_count

SLOPE = 0.51
INTERCEPT = 0.0617

SIZING_NOTE = (
    "note: the fitted sizing line and the preset ladder were derived separately "
    "and disagree at fleet scale (the line gives ~9.5k params at D=48M segments, "
    "while the ladder tops out at ~3M); both are surfaced so the choice is explicit."
)


class UndersizedBudgetWarning(UserWarning):
    """Budget below the smallest preset; the floor preset is returned."""


def optimal_params_raw(segments: float) -> float:
    """Compute-optimal parameter count for a training set of `segments`, unrounded."""
    if segments < 1:
        raise ValueError(f"data size must be >= 1 segment, got {segments}")
    return 10.0 ** (SLOPE * math.log10(segments) + INTERCEPT)


def optimal_params(segments: float) -> int:
    """optimal_params_raw rounded to the nearest whole parameter."""
    return round(optimal_params_raw(segments))


def segments_for_params(n_params: float) -> float:
    """Inverse of the sizing line: data size at which n_params is optimal."""
    if n_params <= 0:
        raise ValueError(f"parameter count must be > 0, got {n_params}")
    return 10.0 ** ((math.log10(n_params) - INTERCEPT) / SLOPE)


def preset_param_counts(input_width: int = 9) -> dict[str, int]:
    return {
        name: param_count(TransformerConfig(input_width, blocks, dim))
        for name, (blocks, dim) in RET_PRESETS.items()
    }


def preset_for_budget(n_params: float, input_width: int = 9) -> str:
    """Largest preset whose exact parameter count fits within 1.25x the budget.

    Below the smallest preset the floor preset is returned with a warning
    rather than failing, since some model is always better than none.
    """
    if n_params <= 0:
        raise ValueError(f"parameter budget must be > 0, got {n_params}")
    counts = preset_param_counts(input_width)
    fitting = [name for name, c in counts.items() if c <= 1.25 * n_params]
    if not fitting:
        smallest = min(counts, key=counts.get)
        warnings.warn(
            f"budget {n_params:.0f} params is below the smallest preset "
            f"({smallest}, {counts[smallest]} params); returning it anyway",
            UndersizedBudgetWarning,
        )
        return smallest
    return max(fitting, key=lambda name: counts[name])
