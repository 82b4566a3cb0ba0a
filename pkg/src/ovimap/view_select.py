"""Per-instance view selection: spherical coverage plus the two baselines.

Each instance keeps a 180x240 bitmap over viewing directions (polar angle x
azimuth) anchored at a fixed centroid. A view is worth a feature-extraction
query when the fraction of direction bins it would newly cover exceeds a
novelty threshold; committed bins are never cleared. The baselines select by
visible-pixel count (online top-B with displacement) or at random up to a
fixed budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COV_ROWS = 180
COV_COLS = 240

STRATEGIES = ("coverage", "pixel_count", "random")


def new_coverage() -> np.ndarray:
    return np.zeros((COV_ROWS, COV_COLS), bool)


@dataclass
class SelectionDecision:
    instance_id: int
    frame_index: int
    selected: bool
    novelty: float | None
    strategy: str


def maybe_init_centroid(sp, obs, min_init_area: int = 400) -> None:
    """Fix the coverage anchor at the box center once the instance is seen large."""
    if sp.centroid is None and obs.pixel_count >= min_init_area:
        sp.centroid = sp.aabb_center()


def direction_bins(points: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    """Distinct (row, col) spherical bins of the directions centroid -> points.

    Rows bin the polar angle arccos(d_z) over [0, pi), columns the azimuth
    atan2(d_y, d_x) over [0, 2*pi). Points coincident with the centroid are
    skipped. Returns an (M, 2) int array of unique bins.
    """
    d = np.asarray(points, np.float64) - np.asarray(centroid, np.float64)
    norm = np.linalg.norm(d, axis=1)
    ok = norm > 0
    if not ok.any():
        return np.zeros((0, 2), np.int64)
    d = d[ok] / norm[ok, None]
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2.0 * np.pi)
    rows = np.minimum((theta / np.pi * COV_ROWS).astype(np.int64), COV_ROWS - 1)
    cols = np.minimum((phi / (2.0 * np.pi) * COV_COLS).astype(np.int64), COV_COLS - 1)
    return np.unique(np.stack([rows, cols], axis=1), axis=0)


def novelty(bins: np.ndarray, coverage: np.ndarray) -> float:
    """Fraction of the view's bins not yet covered. ``bins`` must be nonempty."""
    fresh = ~coverage[bins[:, 0], bins[:, 1]]
    return float(fresh.sum()) / len(bins)


def commit_bins(coverage: np.ndarray, bins: np.ndarray) -> None:
    coverage[bins[:, 0], bins[:, 1]] = True


class ViewSelector:
    """Per-run selection state for one strategy."""

    def __init__(
        self,
        strategy: str = "coverage",
        theta_novel: float = 0.2,
        budget: int = 8,
        min_init_area: int = 400,
        seed: int = 0,
        random_accept: float = 0.5,
    ):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy: {strategy}")
        self.strategy = strategy
        self.theta_novel = theta_novel
        self.budget = budget
        self.min_init_area = min_init_area
        self.rng = np.random.default_rng(seed)
        self.random_accept = random_accept
        self._top_counts: dict[int, list[int]] = {}  # pixel_count: selected counts per instance
        self._num_selected: dict[int, int] = {}
        self.decisions: list[SelectionDecision] = []

    def _record(self, inst_id, frame_index, selected, nov=None) -> SelectionDecision:
        dec = SelectionDecision(inst_id, frame_index, selected, nov, self.strategy)
        self.decisions.append(dec)
        return dec

    def decide(self, sp, obs) -> SelectionDecision:
        """Whether to spend feature extraction on this observation of ``sp``."""
        if obs.pixel_count == 0:
            return self._record(sp.id, obs.frame_index, False)
        if self.strategy == "coverage":
            maybe_init_centroid(sp, obs, self.min_init_area)
            if sp.centroid is None:
                return self._record(sp.id, obs.frame_index, False)
            bins = direction_bins(obs.visible_points, sp.centroid)
            if len(bins) == 0:
                return self._record(sp.id, obs.frame_index, False)
            if sp.coverage is None:
                sp.coverage = new_coverage()
            eta = novelty(bins, sp.coverage)
            selected = eta > self.theta_novel
            if selected:
                commit_bins(sp.coverage, bins)
            return self._record(sp.id, obs.frame_index, selected, eta)
        if self.strategy == "pixel_count":
            top = self._top_counts.setdefault(sp.id, [])
            if len(top) < self.budget:
                top.append(obs.pixel_count)
                top.sort()
                return self._record(sp.id, obs.frame_index, True)
            if obs.pixel_count > top[0]:
                top[0] = obs.pixel_count
                top.sort()
                return self._record(sp.id, obs.frame_index, True)
            return self._record(sp.id, obs.frame_index, False)
        # random: accept until the budget is exhausted
        chosen = self._num_selected.get(sp.id, 0)
        selected = chosen < self.budget and bool(self.rng.random() < self.random_accept)
        if selected:
            self._num_selected[sp.id] = chosen + 1
        return self._record(sp.id, obs.frame_index, selected)

    def on_merge(self, mapping: dict[int, int]) -> None:
        """Fold per-instance selection state onto the surviving ids."""
        for dead, surv in mapping.items():
            if dead in self._top_counts:
                merged = sorted(self._top_counts.pop(dead) + self._top_counts.get(surv, []))
                self._top_counts[surv] = merged[-self.budget :]
            if dead in self._num_selected:
                self._num_selected[surv] = min(
                    self.budget, self._num_selected.get(surv, 0) + self._num_selected.pop(dead)
                )
