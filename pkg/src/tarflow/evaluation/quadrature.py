import logging

import numpy as np

from tarflow.errors import ParameterError
from tarflow.flow.model import TarFlowModel
from tarflow.numerics import Tensor
from tarflow.transformer.block import Labels

logger = logging.getLogger(__name__)

BOUNDARY_DENSITY = 1e-6


def trapezoid_weights(points: int, step: float) -> np.ndarray:
    weights = np.full(points, step)
    weights[[0, -1]] = step / 2
    return weights


def quadrature_normalization(
    model: TarFlowModel,
    domain: tuple[float, float] = (-6.0, 6.0),
    step: float = 0.01,
    labels: Labels = None,
    chunk_size: int = 16384,
) -> float:
    """Trapezoid-rule mass of exp(log_prob) over domain², for models whose
    total dimension N·D is 2."""
    if model.num_positions * model.patch_dim != 2:
        raise ParameterError(
            "quadrature needs total dimension 2, model has "
            f"N={model.num_positions}, D={model.patch_dim}"
        )
    if model.config.dtype != np.float64:
        model = model.astype(np.float64)
    low, high = domain
    axis = np.linspace(low, high, int(round((high - low) / step)) + 1)
    weights = trapezoid_weights(len(axis), axis[1] - axis[0])
    a, b = np.meshgrid(axis, axis, indexing="ij")
    points = np.stack([a.ravel(), b.ravel()], axis=1)
    shape = (model.num_positions, model.patch_dim)
    density = np.empty(len(points))
    for start in range(0, len(points), chunk_size):
        chunk = points[start : start + chunk_size]
        seq = Tensor(chunk.reshape(len(chunk), *shape))
        density[start : start + chunk_size] = np.exp(
            model.log_prob(seq, labels).data
        )
    density = density.reshape(len(axis), len(axis))
    edges = [density[0], density[-1], density[:, 0], density[:, -1]]
    boundary = max(float(edge.max()) for edge in edges)
    if boundary > BOUNDARY_DENSITY:
        logger.warning(
            f"[quadrature] density {boundary:.3g} on the boundary of "
            f"{domain}, the domain may be too small"
        )
    mass = float(weights @ density @ weights)
    logger.debug(f"[quadrature] mass {mass:.6f} on {len(axis)}² points")
    return mass
