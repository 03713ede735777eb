"""Covariate designs: confounders only, or the extended set with imputed predictors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, augment
from .missingness import SCHEMES, impute


@dataclass(frozen=True)
class Design:
    """``kind="x"`` uses X; ``kind="xdagger"`` uses [X | W~ | R] with W~ from ``impute``."""

    kind: str = "x"
    impute: str | None = None

    def __post_init__(self):
        if self.kind not in ("x", "xdagger"):
            raise ValueError(f"unknown design {self.kind!r}; expected x or xdagger")
        if self.kind == "x" and self.impute is not None:
            raise ValueError("design x takes no imputation scheme")
        if self.kind == "xdagger":
            if self.impute is None:
                object.__setattr__(self, "impute", "zero")
            if self.impute not in SCHEMES:
                raise ValueError(f"unknown imputation scheme {self.impute!r}")

    @classmethod
    def parse(cls, text: str, default_impute: str = "median") -> "Design":
        text = text.strip().lower()
        if text == "x":
            return cls("x")
        kind, _, scheme = text.partition(":")
        if kind != "xdagger":
            raise ValueError(f"unknown design {text!r}; expected x or xdagger[:scheme]")
        return cls("xdagger", scheme or default_impute)

    @property
    def id(self) -> str:
        return "x" if self.kind == "x" else f"xdagger:{self.impute}"

    @property
    def label(self) -> str:
        return "X" if self.kind == "x" else f"X†_{'0' if self.impute == 'zero' else self.impute}"


X = Design("x")
SIMULATION_DESIGNS = (X, *(Design("xdagger", s) for s in SCHEMES))


def design_matrix(ds: Dataset, design: Design) -> tuple[np.ndarray, int]:
    """Covariate matrix for ``design`` and the number of predictive columns it carries."""
    if design.kind == "x" or ds.q == 0:
        return np.asarray(ds.x), 0
    aug = augment(ds, impute(ds, design.impute))
    return np.asarray(aug.columns), ds.q
