"""Knockoff filter: data-dependent threshold, selection, and scoring.

The threshold candidates are the unique absolute values of the nonzero
statistics; the FDP-hat ratio is piecewise constant between them, so
scanning that set is an exact minimization over (0, 1).  Selection uses
>= at the threshold so the achieved ratio equals the computed one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class KnockoffResult:
    w_bar: np.ndarray
    q: float
    t_star: float | None
    selected: np.ndarray
    offset: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "q": self.q,
                "offset": self.offset,
                "t_star": self.t_star,
                "selected": self.selected.tolist(),
                "w_bar": self.w_bar.tolist(),
            }
        )


def threshold(w: np.ndarray, q: float, offset: int = 1) -> float | None:
    """Smallest t with (offset + #{w <= -t}) / (#{w >= t} v 1) <= q."""
    if not 0 < q < 1:
        raise DataError("q must be in (0, 1)")
    if offset not in (0, 1):
        raise DataError("offset must be 0 (knockoff) or 1 (knockoff+)")
    w = np.asarray(w, dtype=float).ravel()
    candidates = np.unique(np.abs(w[w != 0]))
    if candidates.size == 0:
        return None
    neg = np.sort(-w)  # #{w <= -t} = count of sorted(-w) >= t
    pos = np.sort(w)
    best = None
    for t in candidates:
        n_neg = neg.size - np.searchsorted(neg, t, side="left")
        n_pos = pos.size - np.searchsorted(pos, t, side="left")
        if (offset + n_neg) / max(n_pos, 1) <= q:
            best = float(t)
            break
    return best


def select(w: np.ndarray, q: float, offset: int = 1) -> KnockoffResult:
    """Apply the knockoff filter; membership at the boundary is included."""
    w = np.asarray(w, dtype=float).ravel()
    t_star = threshold(w, q, offset)
    if t_star is None:
        selected = np.empty(0, dtype=np.int64)
    else:
        selected = np.flatnonzero(w >= t_star).astype(np.int64)
    return KnockoffResult(w_bar=w, q=q, t_star=t_star, selected=selected, offset=offset)


def evaluate(selected, truth, n_relevant: int) -> tuple[float, float]:
    """(false discovery proportion, true positive proportion)."""
    selected = set(int(i) for i in np.asarray(selected).ravel())
    truth = set(int(i) for i in np.asarray(truth).ravel())
    fdp = len(selected - truth) / max(len(selected), 1)
    tpp = len(selected & truth) / n_relevant
    return fdp, tpp


def bh_select(pvalues: np.ndarray, q: float) -> np.ndarray:
    """Benjamini-Hochberg baseline used by the simulation bench scorer."""
    p = np.asarray(pvalues, dtype=float).ravel()
    m = p.size
    order = np.argsort(p)
    thresh = q * (np.arange(1, m + 1)) / m
    below = p[order] <= thresh
    if not below.any():
        return np.empty(0, dtype=np.int64)
    k = int(np.max(np.flatnonzero(below)))
    return np.sort(order[: k + 1]).astype(np.int64)
