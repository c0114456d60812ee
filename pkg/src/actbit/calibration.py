from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CalibrationSet:
    """Observations over which sensitivity expectations are taken.

    ``observations`` is an (n, input_dim) array; ``source_trajectories`` and
    ``seed`` record where the rows came from.
    """

    observations: np.ndarray
    source_trajectories: int = 0
    seed: int = 0

    def __post_init__(self):
        obs = np.array(self.observations, dtype=np.float64, copy=True)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.ndim != 2 or obs.shape[0] == 0:
            raise ValueError("calibration set is empty")
        if not np.all(np.isfinite(obs)):
            raise ValueError("calibration observations contain non-finite entries")
        obs.setflags(write=False)
        object.__setattr__(self, "observations", obs)

    def __len__(self) -> int:
        return self.observations.shape[0]

    def check_dim(self, input_dim: int) -> None:
        if self.observations.shape[1] != input_dim:
            raise ValueError(
                f"calibration observations have {self.observations.shape[1]} features, "
                f"model expects {input_dim}"
            )


def as_calibration(calib) -> CalibrationSet:
    if isinstance(calib, CalibrationSet):
        return calib
    return CalibrationSet(np.asarray(calib, dtype=np.float64))
