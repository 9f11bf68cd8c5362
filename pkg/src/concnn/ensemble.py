"""Fusion of the three branch outputs and per-section statistical revision.

Per patch position, the three branch distributions are weighted and
averaged into one concatenated distribution (default weights 0.4 PPL,
0.4 XPL, 0.2 CI) and the class is read off by maximum likelihood. Per
section, the mode over its patch predictions then overwrites every
position: a thin section is one rock, so the most common type wins.

All ties (argmax and mode) break to the lowest class index, i.e. the
alphabetically first rock type; outputs document that rule.

Two voting populations are supported: the default ``concat108`` runs the
mode over the per-position post-concatenation predictions, while
``branch324`` votes over the three-per-position pre-concatenation branch
predictions instead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import Tensor

VOTE_CONCAT = "concat108"
VOTE_BRANCH = "branch324"
VOTE_MODES = (VOTE_CONCAT, VOTE_BRANCH)


def validate_distribution(dist: Tensor, name: str = "distribution") -> Tensor:
    """Check a probability vector: entries in [0,1], total 1 within 1e-6."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 1 or dist.size < 2:
        raise ValueError(f"{name} must be a probability vector, got shape {dist.shape}")
    if not np.all(np.isfinite(dist)):
        raise ValueError(f"{name} contains non-finite entries")
    if dist.min() < -1e-9 or dist.max() > 1.0 + 1e-9:
        raise ValueError(f"{name} entries must lie in [0, 1]")
    total = float(dist.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"{name} sums to {total}, not 1")
    return dist


@dataclass
class BranchWeights:
    """Fusion weights for the PPL, XPL and CI branches.

    Must be non-negative; a tuple not summing to 1 is renormalized with a
    warning, so callers can pass e.g. (1, 0, 0) for a PPL-only run.
    """

    w_ppl: float = 0.4
    w_xpl: float = 0.4
    w_ci: float = 0.2

    def __post_init__(self) -> None:
        if self.w_ppl < 0 or self.w_xpl < 0 or self.w_ci < 0:
            raise ValueError(f"branch weights must be non-negative, got {self.as_tuple()}")
        total = self.w_ppl + self.w_xpl + self.w_ci
        if total == 0:
            raise ValueError("branch weights sum to zero")
        if abs(total - 1.0) > 1e-9:
            warnings.warn(
                f"branch weights {self.as_tuple()} sum to {total}; renormalizing",
                stacklevel=2,
            )
            self.w_ppl /= total
            self.w_xpl /= total
            self.w_ci /= total

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_ppl, self.w_xpl, self.w_ci)


def concatenate(
    p_ppl: Tensor, p_xpl: Tensor, p_ci: Tensor, weights: BranchWeights | None = None
) -> Tensor:
    """Weighted average of the three branch distributions for one patch."""
    if weights is None:
        weights = BranchWeights()
    p_ppl = validate_distribution(p_ppl, "PPL distribution")
    p_xpl = validate_distribution(p_xpl, "XPL distribution")
    p_ci = validate_distribution(p_ci, "CI distribution")
    if not p_ppl.shape == p_xpl.shape == p_ci.shape:
        raise ValueError(
            f"distribution lengths differ: {p_ppl.shape}, {p_xpl.shape}, {p_ci.shape}"
        )
    return weights.w_ppl * p_ppl + weights.w_xpl * p_xpl + weights.w_ci * p_ci


def maximum_likelihood(dist: Tensor) -> int:
    """Index of the most probable class; ties break to the lowest index.

    Accepts any non-negative score vector so a rescaled distribution maps
    to the same class.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 1 or dist.size < 1:
        raise ValueError(f"expected a score vector, got shape {dist.shape}")
    if not np.all(np.isfinite(dist)) or dist.min() < -1e-9:
        raise ValueError("scores must be finite and non-negative")
    return int(np.argmax(dist))


def statistical_revision(patch_classes: list[int] | Tensor) -> tuple[int, list[int]]:
    """Mode over patch predictions; every position is revised to it.

    Returns (section class, revised per-position list). Ties break to the
    lowest class index.
    """
    votes = np.asarray(patch_classes, dtype=np.intp)
    if votes.size == 0:
        raise ValueError("cannot revise an empty prediction list")
    if votes.min() < 0:
        raise ValueError("class indices must be non-negative")
    counts = np.bincount(votes)
    section_class = int(np.argmax(counts))
    return section_class, [section_class] * votes.size


@dataclass
class SectionPrediction:
    """Classification outcome for one section's patch grid.

    ``distributions`` holds the concatenated per-position distributions in
    row-major order, ``pre_revision`` their argmax classes, ``votes`` the
    population the mode ran over (equal to ``pre_revision`` for the default
    voting mode), and ``revised_class`` that mode.
    """

    section_id: str
    rows: int
    cols: int
    distributions: np.ndarray = field(repr=False)
    pre_revision: list[int]
    votes: list[int]
    revised_class: int

    def __post_init__(self) -> None:
        count = self.rows * self.cols
        if self.distributions.ndim != 2 or self.distributions.shape[0] != count:
            raise ValueError(
                f"expected {count} distributions, got shape {self.distributions.shape}"
            )
        if len(self.pre_revision) != count:
            raise ValueError(f"expected {count} pre-revision classes, got {len(self.pre_revision)}")
        mode, _ = statistical_revision(self.votes)
        if mode != self.revised_class:
            raise ValueError(
                f"revised class {self.revised_class} is not the mode ({mode}) of the votes"
            )


def _validate_batch(probs: Tensor, name: str) -> Tensor:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"{name} must be (patches, classes), got shape {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise ValueError(f"{name} contains non-finite entries")
    if probs.min() < -1e-9 or probs.max() > 1.0 + 1e-9:
        raise ValueError(f"{name} entries must lie in [0, 1]")
    sums = probs.sum(axis=1)
    bad = np.abs(sums - 1.0) > 1e-6
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValueError(f"{name} row {i} sums to {sums[i]}, not 1")
    return probs


def fuse_section(
    section_id: str,
    rows: int,
    cols: int,
    probs_ppl: Tensor,
    probs_xpl: Tensor,
    probs_ci: Tensor,
    weights: BranchWeights | None = None,
    vote: str = VOTE_CONCAT,
) -> SectionPrediction:
    """Concatenate per-position branch outputs and revise one section.

    The branch probability arrays are (rows*cols, classes) in row-major
    patch order. ``vote`` picks the mode's population: per-position fused
    predictions, or every branch's own prediction (three per position).
    """
    if weights is None:
        weights = BranchWeights()
    if vote not in VOTE_MODES:
        raise ValueError(f"vote must be one of {VOTE_MODES}, got {vote!r}")
    probs_ppl = _validate_batch(probs_ppl, "PPL probabilities")
    probs_xpl = _validate_batch(probs_xpl, "XPL probabilities")
    probs_ci = _validate_batch(probs_ci, "CI probabilities")
    if not probs_ppl.shape == probs_xpl.shape == probs_ci.shape:
        raise ValueError("branch probability arrays disagree in shape")
    if probs_ppl.shape[0] != rows * cols:
        raise ValueError(
            f"expected {rows * cols} patch rows, got {probs_ppl.shape[0]}"
        )
    fused = weights.w_ppl * probs_ppl + weights.w_xpl * probs_xpl + weights.w_ci * probs_ci
    pre = [int(i) for i in fused.argmax(axis=1)]
    if vote == VOTE_CONCAT:
        votes = list(pre)
    else:
        votes = [
            int(i)
            for branch in (probs_ppl, probs_xpl, probs_ci)
            for i in branch.argmax(axis=1)
        ]
    revised_class, _ = statistical_revision(votes)
    return SectionPrediction(section_id, rows, cols, fused, pre, votes, revised_class)


def write_prediction_report(
    predictions: list[SectionPrediction], path: str | Path, class_names: tuple[str, ...]
) -> None:
    """Delimited per-patch report: position, fused probabilities, classes.

    Ties in argmax and mode break to the alphabetically first rock type;
    the header records that so downstream readers need not guess.
    """
    lines = [
        "# ties break to the alphabetically first rock type",
        "section_id,row,col," + ",".join(f"p_{name}" for name in class_names)
        + ",pre_class,revised_class",
    ]
    for pred in predictions:
        if pred.distributions.shape[1] != len(class_names):
            raise ValueError(
                f"{len(class_names)} class names for {pred.distributions.shape[1]} classes"
            )
        for i in range(pred.rows * pred.cols):
            r, c = divmod(i, pred.cols)
            probs = ",".join(f"{p:.9f}" for p in pred.distributions[i])
            lines.append(
                f"{pred.section_id},{r},{c},{probs},"
                f"{class_names[pred.pre_revision[i]]},{class_names[pred.revised_class]}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
