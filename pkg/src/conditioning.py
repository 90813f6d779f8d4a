"""Network conditioning input for DeskDownscale.

Builds the conditioning block Concat[u_bar, s] that accompanies the noisy
state: the coarse forecast bilinearly upsampled to the fine grid and
standardized, optionally spectrally smoothed, followed by the static fields.
"""

import numpy as np

from .errors import ShapeError
from .grid import Field, Grid, StandardizationStats, concat_fields, standardize, upsample_bilinear
from .spectral import smooth


def standardized_condition(coarse: Field, fine_grid: Grid, stats: StandardizationStats) -> Field:
    """
    Upsample a coarse forecast to the fine grid and standardize it.

    Args:
        coarse: Coarse-resolution state
        fine_grid: Network grid
        stats: Standardization statistics

    Returns:
        Standardized field on the fine grid
    """
    return standardize(upsample_bilinear(coarse, fine_grid), stats)


def condition_field(cond: Field, statics: Field, alpha: float = 0.0) -> Field:
    """
    Conditioning block for the network: smoothed forecast channels, then statics.

    Only the forecast channels are smoothed; statics pass through unchanged.

    Args:
        cond: Standardized, upsampled coarse forecast
        statics: Static fields (z, lsm) on the same grid
        alpha: Smoothing strength, 0 for none

    Returns:
        Field with cond channels followed by static channels
    """
    if not statics.grid.matches(cond.grid):
        raise ShapeError("Static fields and conditioning are on different grids")
    return concat_fields([smooth(cond, alpha), statics])


def condition_input(cond: Field, statics: Field, alpha: float = 0.0) -> np.ndarray:
    """Channels-last array of condition_field, shape (H, W, cond + static channels)."""
    return condition_field(cond, statics, alpha).data
