"""Per-item missing ratios over geometrically widening intervals of relative time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..synthdata import ICU_HORIZON, LAB_HISTORY, MULTICLASS, CohortDataset


def geometric_edges(span: float, n_intervals: int, growth: float = 2.0) -> np.ndarray:
    """``n_intervals + 1`` edges from 0 to ``span``; each width is ``growth`` times the last."""
    if n_intervals < 1:
        raise ConfigError(f"need at least one interval, got {n_intervals}")
    if growth <= 1.0 or span <= 0:
        raise ConfigError("growth must exceed 1 and span must be positive")
    k = np.arange(n_intervals + 1)
    edges = span * (growth ** k - 1.0) / (growth ** n_intervals - 1.0)
    edges[-1] = span
    return edges


@dataclass
class MissingnessProfile:
    items: tuple[str, ...]
    edges: np.ndarray
    ratio: np.ndarray  # (items, intervals)

    def rows(self):
        for i, it in enumerate(self.items):
            for k in range(len(self.edges) - 1):
                yield it, float(self.edges[k]), float(self.edges[k + 1]), float(self.ratio[i, k])


def missingness_profile(ds: CohortDataset, n_intervals: int = 8,
                        growth: float = 2.0) -> MissingnessProfile:
    """Ratio = 1 - (subjects with an observation in the interval) / (all subjects).

    Relative time runs away from the anchor: backwards from the latest ECG in
    the long-horizon task, forwards from admission otherwise.
    """
    backwards = ds.config.task == MULTICLASS
    span = LAB_HISTORY if backwards else ICU_HORIZON
    edges = geometric_edges(span, n_intervals, growth)
    items = list(ds.config.lab_items)
    if ds.config.has_vitals:
        items += list(ds.config.vital_items)
    row = {it: i for i, it in enumerate(items)}
    seen = np.zeros((len(items), n_intervals))
    for s in ds.subjects:
        hit = np.zeros((len(items), n_intervals), dtype=bool)
        for o in s.labs:
            d = s.t_anchor - o.timestamp if backwards else o.timestamp - s.t_anchor
            k = np.searchsorted(edges, d, side="right") - 1
            if 0 <= k < n_intervals:
                hit[row[o.item_id], k] = True
        if s.vitals is not None:
            # vitals times are already relative to admission
            ks = np.searchsorted(edges, s.vitals.times, side="right") - 1
            for i, it in enumerate(s.vitals.items):
                obs = ks[s.vitals.mask[i] & (ks >= 0) & (ks < n_intervals)]
                hit[row[it], obs] = True
        seen += hit
    n = max(len(ds), 1)
    return MissingnessProfile(tuple(items), edges, 1.0 - seen / n)
