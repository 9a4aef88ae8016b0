"""Penalized change-point detection baselines."""

from .costs import (
    COSTS,
    Cost,
    CostAR,
    CostGaussian,
    CostKernel,
    CostL1,
    CostL2,
    CostLinear,
    CostRank,
    SegmentTooShort,
    make_cost,
    median_bandwidth,
    segment_cost,
)
from .search import (
    BRUTE_FORCE_MAX_LEN,
    DEFAULT_PENALTIES,
    DEFAULT_WINDOW_WIDTH,
    METHODS,
    InfeasibleSegmentation,
    Segmentation,
    brute_force_segmentation,
    detect_change_points,
    penalized_cost,
)

__all__ = [
    "COSTS", "Cost", "CostAR", "CostGaussian", "CostKernel", "CostL1", "CostL2", "CostLinear",
    "CostRank", "SegmentTooShort", "make_cost", "median_bandwidth", "segment_cost",
    "BRUTE_FORCE_MAX_LEN", "DEFAULT_PENALTIES", "DEFAULT_WINDOW_WIDTH", "METHODS",
    "InfeasibleSegmentation", "Segmentation", "brute_force_segmentation", "detect_change_points",
    "penalized_cost",
]
