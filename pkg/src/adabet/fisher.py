"""Gradient-based layer importance, the baseline the loop scorer competes
against.

The importance of a layer is the empirical second moment of the per-sample
inner product between its activations and the loss gradient at those
activations: delta = (1/2N) * sum_n (sum_elems a_n * g_n)^2.  Requires a
backward pass per batch, which is exactly what the loop scorer avoids.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .selection import SelectionManifest, rank_and_select


@dataclass(frozen=True)
class FisherScore:
    """Importance of one unit, normalized by its trainable parameter count."""

    layer_index: int
    group_id: str | None
    delta: float
    param_count: int
    normalized: float

    @classmethod
    def from_delta(cls, layer_index, delta, param_count, group_id=None):
        if param_count < 1:
            raise DataError(
                "layer %d: param_count must be >= 1 to normalize an importance score"
                % layer_index
            )
        if delta < 0.0:
            raise DataError("layer %d: importance must be >= 0, got %r" % (layer_index, delta))
        return cls(layer_index, group_id, float(delta), int(param_count),
                   delta / param_count)

    def sort_key(self):
        return (-self.normalized, self.layer_index)

    def to_row(self):
        return {
            "layer": self.layer_index,
            "group": self.group_id,
            "delta": float(self.delta),
            "param_count": self.param_count,
            "normalized": float(self.normalized),
        }


def fisher_delta(acts, grads):
    """Empirical importance of a layer from activations and their gradients.

    Both arguments are (N, ...) arrays of identical shape; axis 0 indexes
    samples.  The per-sample inner product is taken before squaring, so
    cancellation inside one sample matters and the result is >= 0.
    """
    a = np.asarray(acts, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if a.shape != g.shape:
        raise DataError(
            "activation shape %s does not match gradient shape %s" % (a.shape, g.shape)
        )
    if a.ndim < 1 or a.shape[0] < 1:
        raise DataError("need at least one sample to compute importance")
    n = a.shape[0]
    per_sample = (a.reshape(n, -1) * g.reshape(n, -1)).sum(axis=1)
    return float((per_sample ** 2).sum() / (2.0 * n))


def fisher_rank(scores, config, units=None):
    """Rank units by normalized importance and spend the budget.

    Same budget rule, ordering scheme, and manifest as the loop-count
    ranking; ties in normalized importance fall back to ascending layer
    index.
    """
    manifest = rank_and_select(scores, config, units=units, scorer="fisher")
    assert isinstance(manifest, SelectionManifest)
    return manifest
