"""Optimal dynamic reinsurance via one-dimensional martingale optimal transport."""

from remot.laws import (
    Atom,
    ClaimLaw,
    DeterministicClaims,
    EmpiricalClaims,
    ExponentialClaims,
    LawSummary,
    QuantileGrid,
    SurplusPaths,
    SurplusSpec,
    increment_law,
    mt_law,
    mt_quantile_grid,
    sample_paths,
)

__all__ = [
    "Atom",
    "ClaimLaw",
    "DeterministicClaims",
    "EmpiricalClaims",
    "ExponentialClaims",
    "LawSummary",
    "QuantileGrid",
    "SurplusPaths",
    "SurplusSpec",
    "increment_law",
    "mt_law",
    "mt_quantile_grid",
    "sample_paths",
]
