"""Shared function-class machinery: feature maps, kernels, and weight models.

A WeightModel is the one representation used for every learned function in
the package: the supervised ratio beta, the off-environment correction w,
the Q-surrogate q, and the DICE ratio tau.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import MDPValidationError


@dataclass(frozen=True)
class FeatureMap:
    """Maps a flat state-action index to a real feature vector."""

    kind: str                   # "one_hot" | "custom_table"
    table: np.ndarray           # (S*A, dim)

    def __post_init__(self):
        object.__setattr__(self, "table", np.asarray(self.table, dtype=float))
        if self.table.ndim != 2:
            raise MDPValidationError(f"feature table must be 2-D, got shape {self.table.shape}")
        if self.kind == "one_hot":
            n, d = self.table.shape
            ok = (
                n == d
                and np.all((self.table == 0) | (self.table == 1))
                and np.all(self.table.sum(axis=1) == 1)
            )
            if not ok:
                raise MDPValidationError("one_hot feature table must be a (S*A, S*A) unit-row matrix")
        elif self.kind != "custom_table":
            raise MDPValidationError(f"unknown feature map kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @property
    def n_cells(self) -> int:
        return self.table.shape[0]

    @staticmethod
    def one_hot(n_states: int, n_actions: int) -> "FeatureMap":
        return FeatureMap("one_hot", np.eye(n_states * n_actions))

    @staticmethod
    def from_table(table: np.ndarray) -> "FeatureMap":
        return FeatureMap("custom_table", np.asarray(table, dtype=float))

    def is_one_hot_identity(self) -> bool:
        return self.kind == "one_hot" and np.array_equal(self.table, np.eye(self.n_cells))


@dataclass(frozen=True)
class Kernel:
    """Gaussian kernel over embedded state-action pairs.

    K(x, y) = exp(-||e(x) - e(y)||^2 / (2 h^2)) with e given by `embedding`.
    """

    embedding: FeatureMap
    bandwidth: float
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise MDPValidationError(f"unknown kernel kind {self.kind!r}")
        if self.bandwidth <= 0:
            raise MDPValidationError(f"bandwidth must be positive, got {self.bandwidth}")

    def gram(self, idx_a: np.ndarray, idx_b: np.ndarray) -> np.ndarray:
        ea = self.embedding.table[np.asarray(idx_a, dtype=int)]
        eb = self.embedding.table[np.asarray(idx_b, dtype=int)]
        sq = ((ea[:, None, :] - eb[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-sq / (2.0 * self.bandwidth**2))

    def full_gram(self) -> np.ndarray:
        idx = np.arange(self.embedding.n_cells)
        return self.gram(idx, idx)


def median_bandwidth(embedding: FeatureMap) -> float:
    """Median pairwise distance over the embedded cells (the usual heuristic)."""
    e = embedding.table
    sq = ((e[:, None, :] - e[None, :, :]) ** 2).sum(axis=2)
    dists = np.sqrt(sq[np.triu_indices(len(e), k=1)])
    med = float(np.median(dists))
    if med <= 0:
        raise MDPValidationError("embedded cells are not distinct; median distance is 0")
    return med


_KINDS = ("tabular", "linear", "rkhs_coeffs", "tabular_exp", "linear_exp")


@dataclass
class WeightModel:
    """A parameterized function over (s, a) cells, clamped to [lo, hi] at evaluation.

    Kinds:
      tabular      value = params[cell]
      linear       value = features(cell) . params
      rkhs_coeffs  value = sum_i params[i] K(anchors[i], cell)
      tabular_exp  value = exp(params[cell])            (positive classes)
      linear_exp   value = exp(features(cell) . params)
    """

    kind: str
    params: np.ndarray
    n_states: int
    n_actions: int
    features: FeatureMap | None = None
    kernel: Kernel | None = None
    anchors: np.ndarray | None = None
    lo: float = 0.0
    hi: float = math.inf
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.kind not in _KINDS:
            raise MDPValidationError(f"unknown weight model kind {self.kind!r}")
        if self.kind in ("linear", "linear_exp") and self.features is None:
            raise MDPValidationError(f"{self.kind} model requires a feature map")
        if self.kind == "rkhs_coeffs" and (self.kernel is None or self.anchors is None):
            raise MDPValidationError("rkhs_coeffs model requires a kernel and anchor cells")
        if not (self.lo <= self.hi):
            raise MDPValidationError(f"clamp range [{self.lo}, {self.hi}] is empty")

    @property
    def n_cells(self) -> int:
        return self.n_states * self.n_actions

    def raw_values(self) -> np.ndarray:
        """Unclamped evaluations on all cells, flat (S*A,)."""
        if self.kind == "tabular":
            return self.params.copy()
        if self.kind == "linear":
            return self.features.table @ self.params
        if self.kind == "rkhs_coeffs":
            cells = np.arange(self.n_cells)
            return self.kernel.gram(cells, self.anchors) @ self.params
        if self.kind == "tabular_exp":
            return np.exp(self.params)
        # linear_exp; cap the exponent so degenerate fits stay finite
        return np.exp(np.minimum(self.features.table @ self.params, 700.0))

    def values(self) -> np.ndarray:
        return np.clip(self.raw_values(), self.lo, self.hi)

    def values_table(self) -> np.ndarray:
        return self.values().reshape(self.n_states, self.n_actions)

    def clamp_fraction(self, mask: np.ndarray | None = None) -> float:
        """Fraction of (masked) cells where the clamp binds."""
        raw = self.raw_values()
        if mask is not None:
            raw = raw[np.asarray(mask, dtype=bool).reshape(-1)]
        if raw.size == 0:
            return 0.0
        return float(np.mean((raw < self.lo) | (raw > self.hi)))

    @staticmethod
    def tabular(values: np.ndarray, lo: float = 0.0, hi: float = math.inf) -> "WeightModel":
        values = np.asarray(values, dtype=float)
        s, a = values.shape
        return WeightModel("tabular", values.reshape(-1), s, a, lo=lo, hi=hi)

    @staticmethod
    def constant(n_states: int, n_actions: int, value: float = 1.0,
                 lo: float = 0.0, hi: float = math.inf) -> "WeightModel":
        return WeightModel("tabular", np.full(n_states * n_actions, value), n_states, n_actions, lo=lo, hi=hi)

    def to_dict(self) -> dict:
        doc = {
            "kind": self.kind,
            "params": self.params.tolist(),
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "c_min": self.lo,
            "c_max": None if math.isinf(self.hi) else self.hi,
            "feature_ref": None,
        }
        if self.features is not None:
            doc["feature_ref"] = {"kind": self.features.kind, "dim": self.features.dim,
                                  "table": self.features.table.tolist()}
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "WeightModel":
        features = None
        if doc.get("feature_ref"):
            ref = doc["feature_ref"]
            features = FeatureMap(ref["kind"], np.asarray(ref["table"], dtype=float))
        hi = doc.get("c_max")
        return WeightModel(
            kind=doc["kind"],
            params=np.asarray(doc["params"], dtype=float),
            n_states=int(doc["n_states"]),
            n_actions=int(doc["n_actions"]),
            features=features,
            lo=float(doc.get("c_min", 0.0)),
            hi=math.inf if hi is None else float(hi),
        )

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @staticmethod
    def load(path: str) -> "WeightModel":
        with open(path) as fh:
            return WeightModel.from_dict(json.load(fh))


@dataclass(frozen=True)
class WeightClass:
    """Descriptor for the search class of a minimax fit (tabular or linear)."""

    kind: str                       # "tabular" | "linear"
    features: FeatureMap | None = None
    c_w: float = math.inf           # value clamp [0, c_w]
    init_value: float | np.ndarray = 1.0

    def __post_init__(self):
        if self.kind not in ("tabular", "linear"):
            raise MDPValidationError(f"weight class kind must be tabular or linear, got {self.kind!r}")
        if self.kind == "linear" and self.features is None:
            raise MDPValidationError("linear weight class requires a feature map")

    def initial_model(self, n_states: int, n_actions: int) -> WeightModel:
        n_cells = n_states * n_actions
        if self.kind == "tabular":
            if np.ndim(self.init_value) == 0:
                params = np.full(n_cells, float(self.init_value))
            else:
                params = np.asarray(self.init_value, dtype=float).reshape(-1).copy()
            return WeightModel("tabular", params, n_states, n_actions, lo=0.0, hi=self.c_w)
        if np.ndim(self.init_value) == 0:
            # least-squares projection of the constant function onto the span
            target = np.full(n_cells, float(self.init_value))
            params = np.linalg.lstsq(self.features.table, target, rcond=None)[0]
        else:
            params = np.asarray(self.init_value, dtype=float).copy()
        return WeightModel("linear", params, n_states, n_actions,
                           features=self.features, lo=0.0, hi=self.c_w)


def as_flat_values(obj, n_states: int, n_actions: int) -> np.ndarray:
    """Accept a WeightModel or a raw (S, A) / flat table and return flat values."""
    if isinstance(obj, WeightModel):
        if (obj.n_states, obj.n_actions) != (n_states, n_actions):
            raise MDPValidationError(
                f"model shape ({obj.n_states}, {obj.n_actions}) does not match ({n_states}, {n_actions})"
            )
        return obj.values()
    arr = np.asarray(obj, dtype=float)
    if arr.shape == (n_states, n_actions):
        return arr.reshape(-1)
    if arr.shape == (n_states * n_actions,):
        return arr.copy()
    raise MDPValidationError(f"expected ({n_states}, {n_actions}) table, got shape {arr.shape}")
