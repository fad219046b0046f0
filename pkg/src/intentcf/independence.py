"""Distance correlation over intent chunks and the pairwise independence loss.

The estimator is the classic biased one: Euclidean distance matrices,
double centering, dCov^2 as the mean elementwise product, and the
correlation as the ratio of square roots. All functions are differentiable
torch ops so the loss can drive training.
"""

from __future__ import annotations

import logging

import torch

from .errors import DataError

log = logging.getLogger(__name__)

# Keeps the correlation ratio finite for near-constant samples.
DCOR_EPS = 1e-10


def pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    """Euclidean distances between all row pairs: symmetric, zero diagonal.

    The diagonal is pinned to exact zero with unit-shifted square roots so
    autograd never differentiates sqrt at 0.
    """
    if x.dim() != 2 or x.shape[0] < 2:
        raise DataError("need a 2-D sample matrix with at least 2 rows")
    squared_norms = (x * x).sum(dim=1)
    squared = squared_norms[:, None] + squared_norms[None, :] - 2.0 * (x @ x.T)
    squared = torch.clamp(squared, min=0.0)
    eye = torch.eye(x.shape[0], dtype=x.dtype, device=x.device)
    return torch.sqrt(squared + eye) * (1.0 - eye)


def double_center(d: torch.Tensor) -> torch.Tensor:
    """Subtract row and column means and add back the grand mean."""
    return d - d.mean(dim=1, keepdim=True) - d.mean(dim=0, keepdim=True) + d.mean()


def distance_correlation(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Distance correlation between two equal-length samples, in [0, 1].

    Degenerate (near-constant) samples yield exactly 0. The squared
    covariance is clamped at zero first since the finite-sample estimate
    can dip slightly negative.
    """
    if x.shape[0] != y.shape[0]:
        raise DataError(
            f"sample sizes differ: {x.shape[0]} vs {y.shape[0]}"
        )
    a = double_center(pairwise_distances(x))
    b = double_center(pairwise_distances(y))
    dcov_sq = torch.clamp((a * b).mean(), min=0.0)
    dvar_x = (a * a).mean()
    dvar_y = (b * b).mean()
    if float(dvar_x.detach()) <= DCOR_EPS or float(dvar_y.detach()) <= DCOR_EPS:
        return x.new_zeros(())
    return torch.sqrt(dcov_sq) / torch.sqrt(torch.sqrt(dvar_x * dvar_y) + DCOR_EPS)


def independence_loss(chunks: list[torch.Tensor]) -> torch.Tensor:
    """Sum of distance correlations over all unordered chunk pairs."""
    if not chunks:
        raise DataError("need at least one chunk sample")
    n = chunks[0].shape[0]
    for c in chunks:
        if c.shape[0] != n:
            raise DataError("all chunk samples must share the row count")
    total = chunks[0].new_zeros(())
    for i in range(len(chunks)):
        for j in range(i + 1, len(chunks)):
            total = total + distance_correlation(chunks[i], chunks[j])
    return total


def measure_table_dcor(final_values: torch.Tensor, sample_ids) -> float:
    """Mean pairwise distance correlation over the sampled table rows.

    The diagnostic counterpart of the loss: averaged instead of summed, and
    computed in double precision. A single-intent table has no pairs and
    reports 0 with a warning.
    """
    sample = torch.as_tensor(sample_ids, dtype=torch.long)
    if sample.numel() == 0:
        raise DataError("empty node sample")
    num_intents = final_values.shape[1]
    if num_intents < 2:
        log.warning("single-intent table has no chunk pairs; reporting 0")
        return 0.0
    rows = final_values.detach()[sample].to(torch.float64)
    total = 0.0
    pairs = 0
    for i in range(num_intents):
        for j in range(i + 1, num_intents):
            total += float(distance_correlation(rows[:, i, :], rows[:, j, :]))
            pairs += 1
    return total / pairs
