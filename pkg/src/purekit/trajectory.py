"""Per-step purification trajectory records.

A log row holds (step, energy, l2-to-clean-reference, l2-to-poisoned-
reference); distances are NaN when the corresponding reference image was
not supplied, energy is NaN for stages without an energy model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrajectoryLog:
    steps: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    l2_clean: list = field(default_factory=list)
    l2_poisoned: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def validate(self):
        if self.steps and self.steps[0] != 0:
            raise ValueError("trajectory must start at step 0")
        for a, b in zip(self.steps, self.steps[1:]):
            if b <= a:
                raise ValueError("trajectory step indices must strictly increase")


class TrajectoryTracker:
    """Accumulates a TrajectoryLog while a purification run progresses.

    Shared by the EBM and DDPM stages of a composed transform so step
    indices keep counting across stage boundaries.
    """

    def __init__(self, ref_clean=None, ref_poisoned=None, energy_model=None):
        self.ref_clean = None if ref_clean is None else np.asarray(ref_clean)
        self.ref_poisoned = None if ref_poisoned is None else np.asarray(ref_poisoned)
        self.energy_model = energy_model
        self.log = TrajectoryLog()
        self._step = 0

    @staticmethod
    def _l2(x, ref):
        if ref is None:
            return float("nan")
        d = x.astype(np.float64) - ref.astype(np.float64)
        return float(np.sqrt((d * d).sum()))

    def record(self, x, energy=None):
        if energy is None and self.energy_model is not None:
            energy = self.energy_model.energy(x)
        self.log.steps.append(self._step)
        self.log.energy.append(float("nan") if energy is None else float(energy))
        self.log.l2_clean.append(self._l2(x, self.ref_clean))
        self.log.l2_poisoned.append(self._l2(x, self.ref_poisoned))
        self._step += 1
