"""Budgeted layer selection from loop-count scores.

Each trainable unit (a singleton layer, or a named group of layers that is
frozen or unfrozen as one block) is scored by the number of robust loops in
its pooled activation cloud, normalized by the activation width so wide and
narrow layers compete fairly.  The top ceil(rho * units) units win the
retraining budget.  Manifests serialize canonically so identical inputs
produce identical bytes.
"""

import math
from dataclasses import dataclass

from . import __version__ as _VERSION
from .errors import DataError
from .homology import count_b1, pairwise_distances, rips_persistence
from .jsonutil import dumps_canonical

VALID_METRICS = ("euclidean",)


@dataclass(frozen=True)
class SelectionConfig:
    """Knobs that determine a selection run; recorded in every manifest."""

    rho: float = 0.1
    pool_cap: int = 64
    tau: float = 0.0
    seed: int = 42
    metric: str = "euclidean"

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise DataError("rho must lie in [0, 1], got %r" % (self.rho,))
        if not 0.0 <= self.tau <= 1.0:
            raise DataError("tau must lie in [0, 1], got %r" % (self.tau,))
        if self.pool_cap < 1:
            raise DataError("pool_cap must be >= 1, got %r" % (self.pool_cap,))
        if self.metric not in VALID_METRICS:
            raise DataError("unsupported metric %r" % (self.metric,))

    def to_dict(self):
        return {
            "rho": float(self.rho),
            "pool_cap": int(self.pool_cap),
            "tau": float(self.tau),
            "seed": int(self.seed),
            "metric": self.metric,
        }


@dataclass(frozen=True)
class LayerScore:
    """Loop-count score of one unit, attributed to its scored layer."""

    layer_index: int
    group_id: str | None
    raw_b1: int
    act_elems: int
    normalized: float

    @classmethod
    def from_raw(cls, layer_index, raw_b1, act_elems, group_id=None):
        if act_elems < 1:
            raise DataError("act_elems must be >= 1 to normalize a score")
        if raw_b1 < 0:
            raise DataError("raw_b1 must be non-negative")
        return cls(layer_index, group_id, int(raw_b1), int(act_elems),
                   raw_b1 / act_elems)

    def sort_key(self):
        return (-self.normalized, -self.raw_b1, self.layer_index)

    def to_row(self):
        return {
            "layer": self.layer_index,
            "group": self.group_id,
            "raw_b1": self.raw_b1,
            "act_elems": self.act_elems,
            "normalized": float(self.normalized),
        }


@dataclass(frozen=True)
class SelectionUnit:
    """One selectable unit: its trainable member indices and the member
    whose activations represent the unit (the last one, i.e. the block's
    output)."""

    members: tuple
    scored_index: int
    group_id: str | None


def build_units(metas):
    """Group trainable layers into selectable units.

    Layers sharing a group_id form one unit represented by its highest-index
    member; ungrouped trainable layers are singletons.  Non-trainable layers
    never participate.  Units come back ordered by scored layer index.
    """
    groups = {}
    units = []
    for meta in sorted(metas, key=lambda m: m.index):
        if not meta.trainable:
            continue
        if meta.group_id is None:
            units.append(SelectionUnit((meta.index,), meta.index, None))
        else:
            groups.setdefault(meta.group_id, []).append(meta.index)
    for gid, members in groups.items():
        members = tuple(sorted(members))
        units.append(SelectionUnit(members, members[-1], gid))
    units.sort(key=lambda u: u.scored_index)
    return units


def budget(rho, n_units):
    """Number of units a budget fraction buys: ceil(rho * units)."""
    if n_units < 0:
        raise DataError("unit count must be non-negative")
    if rho == 0.0:
        return 0
    return min(n_units, math.ceil(rho * n_units))


def score_layer(pool, meta, config=SelectionConfig()):
    """Score one unit from its pooled activations.

    raw_b1 counts the loops of the pool's Rips filtration that clear the
    config's tau cut; normalized divides by the layer's activation width.
    """
    if pool.matrix.shape[1] != meta.act_elems_per_sample:
        raise DataError(
            "pool for layer %d has %d columns, meta says %d"
            % (meta.index, pool.matrix.shape[1], meta.act_elems_per_sample)
        )
    dm = pairwise_distances(pool.matrix, metric=config.metric)
    diagram = rips_persistence(dm)
    raw = count_b1(diagram, tau=config.tau)
    return LayerScore.from_raw(meta.index, raw, meta.act_elems_per_sample,
                               group_id=meta.group_id)


@dataclass(frozen=True)
class SelectionManifest:
    """Full record of one ranking run: config, every unit's score ordered by
    rank, and the expanded list of selected layer indices."""

    version: str
    scorer: str
    config: SelectionConfig
    scores: tuple
    selected: tuple

    def to_json(self):
        payload = {
            "version": self.version,
            "scorer": self.scorer,
            "config": self.config.to_dict(),
            "scores": [s.to_row() for s in self.scores],
            "selected": list(self.selected),
        }
        return dumps_canonical(payload)

    @classmethod
    def from_json(cls, text):
        import json

        from .fisher import FisherScore

        try:
            payload = json.loads(text)
            config = SelectionConfig(**payload["config"])
            scores = []
            for row in payload["scores"]:
                if payload["scorer"] == "fisher":
                    scores.append(FisherScore(row["layer"], row["group"],
                                              float(row["delta"]), int(row["param_count"]),
                                              float(row["normalized"])))
                else:
                    scores.append(LayerScore(row["layer"], row["group"],
                                             int(row["raw_b1"]), int(row["act_elems"]),
                                             float(row["normalized"])))
            return cls(payload["version"], payload["scorer"], config,
                       tuple(scores), tuple(int(i) for i in payload["selected"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError("malformed selection manifest JSON: %s" % exc) from exc


def rank_and_select(scores, config, units=None, scorer="betti"):
    """Rank scored units and spend the budget on the best of them.

    Scores are ordered by (normalized desc, raw desc, index asc); the first
    ceil(rho * units) units are selected and expanded to their member layer
    indices.  With units omitted every score is its own singleton unit.
    """
    if not scores:
        raise DataError("cannot rank an empty score list")
    if units is None:
        units = [SelectionUnit((s.layer_index,), s.layer_index, s.group_id)
                 for s in scores]
    by_scored = {u.scored_index: u for u in units}
    if len(by_scored) != len(units):
        raise DataError("duplicate scored layer index among units")
    for s in scores:
        if s.layer_index not in by_scored:
            raise DataError("score for layer %d has no matching unit" % s.layer_index)
    if len(scores) != len(units):
        raise DataError(
            "expected one score per unit (%d units, %d scores)" % (len(units), len(scores))
        )
    ordered = sorted(scores, key=lambda s: s.sort_key())
    k = budget(config.rho, len(ordered))
    selected = []
    for s in ordered[:k]:
        selected.extend(by_scored[s.layer_index].members)
    return SelectionManifest(_VERSION, scorer, config, tuple(ordered),
                             tuple(sorted(selected)))
