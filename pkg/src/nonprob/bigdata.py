"""Selection into the non-probability dataset B."""

from __future__ import annotations

import dataclasses
from typing import Mapping

import numpy as np
from scipy.special import expit

from .population import INDUSTRIES, PopulationFrame

SAR_PHI = (0.09, 0.009, 0.0)
SNAR_PHI = (0.85, 0.009, -0.1)
DEFAULT_DOWNWEIGHTS = {"G": 0.5, "H": 0.5, "S": 0.5}


class SelectionError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class SelectionModel:
    """Logistic first stage on (frame employment, ln earnings), then industry downweights."""

    phi0: float
    phi1: float
    phi2: float = 0.0
    industry_downweights: Mapping[str, float] = dataclasses.field(
        default_factory=lambda: dict(DEFAULT_DOWNWEIGHTS))

    def __post_init__(self):
        for ind, f in self.industry_downweights.items():
            if ind not in INDUSTRIES:
                raise SelectionError(f"unknown industry {ind!r} in downweights")
            if not 0 < f <= 1:
                raise SelectionError(f"downweight for {ind} must be in (0, 1], got {f}")

    @property
    def is_sar(self) -> bool:
        return self.phi2 == 0

    @classmethod
    def sar(cls, downweights=None) -> "SelectionModel":
        return cls(*SAR_PHI, industry_downweights=_dw(downweights))

    @classmethod
    def snar(cls, downweights=None) -> "SelectionModel":
        return cls(*SNAR_PHI, industry_downweights=_dw(downweights))

    def downweight_vector(self) -> np.ndarray:
        return np.array([self.industry_downweights.get(d, 1.0) for d in INDUSTRIES])


def _dw(downweights):
    return dict(DEFAULT_DOWNWEIGHTS if downweights is None else downweights)


def log_earnings(earnings: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(earnings, 1.0))


def selection_probabilities(frame: PopulationFrame, model: SelectionModel) -> np.ndarray:
    """Final inclusion probabilities pi^B over U."""
    eta = model.phi0 + model.phi1 * frame.frame_employment
    if model.phi2 != 0:
        if (frame.earnings < 0).any():
            raise SelectionError("negative earnings with an earnings-dependent selection model")
        eta = eta + model.phi2 * log_earnings(frame.earnings)
    return expit(eta) * model.downweight_vector()[frame.industry]


@dataclasses.dataclass
class BigDataset:
    """Membership of B over U plus the probabilities that generated it."""

    delta: np.ndarray
    true_pi: np.ndarray
    use_starred: bool = False

    @property
    def N_B(self) -> int:
        return int(self.delta.sum())

    @property
    def members(self) -> np.ndarray:
        return np.flatnonzero(self.delta)

    def member_ids(self, frame: PopulationFrame) -> set[int]:
        return set(frame.unit_id[self.delta].tolist())

    def y(self, frame: PopulationFrame) -> np.ndarray:
        """Survey values as recorded in B (starred when measured with error)."""
        return frame.y(self.use_starred)[self.delta]

    def totals(self, frame: PopulationFrame) -> np.ndarray:
        return self.y(frame).sum(axis=0)


def draw_big_dataset(frame: PopulationFrame, pi: np.ndarray, use_starred: bool,
                     rng: np.random.Generator) -> BigDataset:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (frame.N,):
        raise SelectionError(f"expected {frame.N} probabilities, got shape {pi.shape}")
    if (pi < 0).any() or (pi > 1).any():
        raise SelectionError("inclusion probabilities must lie in [0, 1]")
    delta = rng.random(frame.N) < pi
    return BigDataset(delta=delta, true_pi=pi, use_starred=use_starred)
