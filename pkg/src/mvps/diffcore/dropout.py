"""Modality dropout over condition branches and the text prompt."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KEEP_ALL, DROP_ALL, PER_CONDITION = "keep_all", "drop_all", "per_condition"


@dataclass
class DropoutPolicy:
    p_keep_all: float = 0.3
    p_drop_all: float = 0.1
    p_each: float = 0.5
    p_text_empty: float = 0.5

    def __post_init__(self):
        for name in ("p_keep_all", "p_drop_all", "p_each", "p_text_empty"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")
        if self.p_keep_all + self.p_drop_all > 1.0:
            raise ValueError("p_keep_all + p_drop_all must not exceed 1")


def draw_dropout(n_conditions: int, policy: DropoutPolicy, rng: np.random.Generator):
    """One draw: (regime, drop mask of length n_conditions, text_empty)."""
    u = rng.random()
    if u < policy.p_keep_all:
        regime, drop = KEEP_ALL, np.zeros(n_conditions, dtype=bool)
    elif u < policy.p_keep_all + policy.p_drop_all:
        regime, drop = DROP_ALL, np.ones(n_conditions, dtype=bool)
    else:
        regime, drop = PER_CONDITION, rng.random(n_conditions) < policy.p_each
    text_empty = bool(rng.random() < policy.p_text_empty)
    return regime, drop, text_empty


def apply_modality_dropout(conditions, policy: DropoutPolicy, rng: np.random.Generator):
    """Return a copy of a ConditionSet with dropped slots zeroed and flagged.

    Slots that were already dropped (padding) stay dropped.
    """
    _, drop, text_empty = draw_dropout(len(conditions.drop_mask), policy, rng)
    return conditions.with_drops(drop, prompt="" if text_empty else None)
