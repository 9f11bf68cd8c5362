"""k-fold cross-validation and the metric suite.

Fold planning splits at thin-section granularity by default so that no
patch of a validation section ever appears in training; a patch-level
split exists behind a flag for comparison. Metrics cover the confusion
matrix, overall accuracy, Cohen's kappa and one-vs-rest ROC curves with
trapezoidal AUC, emitted as delimited text plus a standalone SVG whose
embedded data points match the text output byte for byte.
"""

from __future__ import annotations

import dataclasses
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import CLASS_NAMES, SectionRecord
from .ensemble import (
    VOTE_CONCAT,
    VOTE_MODES,
    BranchWeights,
    SectionPrediction,
    fuse_section,
    statistical_revision,
    write_prediction_report,
)
from .model import (
    BRANCH_ROLES,
    BranchConfig,
    BranchModel,
    TrainConfig,
    TrainLog,
    batch_forward,
    build_branch,
    train_branch,
)
from .patching import aligned_triples
from .preprocess import load_raster, preprocess_pair

SPLIT_SECTION = "section"
SPLIT_PATCH = "patch"
SPLIT_MODES = (SPLIT_SECTION, SPLIT_PATCH)


# ---------------------------------------------------------------------------
# Fold planning.
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    """Assignment of every section to exactly one of k folds."""

    k: int
    seed: int
    assignment: dict[str, int]

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError(f"need at least 2 folds, got {self.k}")
        sizes = np.bincount(list(self.assignment.values()), minlength=self.k)
        if len(sizes) > self.k:
            raise ValueError("assignment names a fold outside 0..k-1")
        if sizes.max() - sizes.min() > 1:
            raise ValueError(f"fold sizes {sizes.tolist()} differ by more than 1")

    def fold_of(self, section_id: str) -> int:
        return self.assignment[section_id]

    def members(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignment.items() if f == fold]


def _assign_folds(items: list[tuple[str, int]], k: int, rng: np.random.Generator) -> dict[str, int]:
    """Balanced fold assignment for (key, class) items.

    When every present class has at least k items, assignment is
    stratified: classes are walked in label order, each shuffled, and a
    running round-robin offset carries across classes so global fold sizes
    still differ by at most one.
    """
    by_class: dict[int, list[str]] = {}
    for key, label in items:
        by_class.setdefault(label, []).append(key)
    assignment: dict[str, int] = {}
    if all(len(keys) >= k for keys in by_class.values()):
        offset = 0
        for label in sorted(by_class):
            keys = by_class[label]
            order = rng.permutation(len(keys))
            for i, j in enumerate(order):
                assignment[keys[j]] = (offset + i) % k
            offset = (offset + len(keys)) % k
    else:
        keys = [key for key, _ in items]
        order = rng.permutation(len(keys))
        for i, j in enumerate(order):
            assignment[keys[j]] = i % k
    return assignment


def make_folds(sections: list[SectionRecord], k: int, seed: int) -> FoldPlan:
    """Seeded balanced fold plan over sections, stratified when possible."""
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if len(sections) < k:
        raise ValueError(f"only {len(sections)} sections for {k} folds")
    ids = [record.section_id for record in sections]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate section ids")
    rng = np.random.default_rng(seed)
    items = [(record.section_id, record.label) for record in sections]
    return FoldPlan(k, seed, _assign_folds(items, k, rng))


# ---------------------------------------------------------------------------
# Confusion matrix, accuracy, kappa.
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Square count matrix; rows are true classes, columns predictions."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ValueError(f"counts shape {self.counts.shape} for {k} classes")
        if self.counts.dtype.kind not in "iu" or self.counts.min() < 0:
            raise ValueError("counts must be non-negative integers")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_normalized(self) -> np.ndarray:
        """Rows rescaled to sum to 1; empty rows stay zero."""
        out = self.counts.astype(np.float64)
        sums = out.sum(axis=1, keepdims=True)
        np.divide(out, sums, out=out, where=sums > 0)
        return out


def confusion_matrix(
    pairs: list[tuple[int, int]], class_names: tuple[str, ...] = CLASS_NAMES
) -> ConfusionMatrix:
    """Count matrix from (true, predicted) pairs."""
    k = len(class_names)
    counts = np.zeros((k, k), dtype=np.int64)
    for true, predicted in pairs:
        if not (0 <= true < k and 0 <= predicted < k):
            raise ValueError(f"label pair ({true}, {predicted}) outside 0..{k - 1}")
        counts[true, predicted] += 1
    return ConfusionMatrix(counts, class_names)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """Trace over total."""
    if cm.total == 0:
        raise ValueError("cannot compute accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def cohen_kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement (p_o - p_e) / (1 - p_e).

    When chance agreement p_e is 1 (all mass in a single row/column cell)
    kappa is undefined; it is reported as 0 with a warning.
    """
    total = cm.total
    if total == 0:
        raise ValueError("cannot compute kappa of an empty confusion matrix")
    p_o = overall_accuracy(cm)
    rows = cm.counts.sum(axis=1).astype(np.float64)
    cols = cm.counts.sum(axis=0).astype(np.float64)
    p_e = float((rows * cols).sum()) / (total * total)
    if abs(1.0 - p_e) < 1e-15:
        warnings.warn("chance agreement is 1; kappa undefined, reporting 0", stacklevel=2)
        return 0.0
    return (p_o - p_e) / (1.0 - p_e)


# ---------------------------------------------------------------------------
# ROC / AUC.
# ---------------------------------------------------------------------------


@dataclass
class RocCurve:
    """One-vs-rest ROC for a class: operating points and trapezoidal AUC."""

    class_index: int
    points: list[tuple[float, float]]
    thresholds: list[float]
    auc: float

    def __post_init__(self) -> None:
        if len(self.points) != len(self.thresholds):
            raise ValueError("each operating point needs a threshold")
        if self.points[0] != (0.0, 0.0) or self.points[-1] != (1.0, 1.0):
            raise ValueError("ROC must start at (0,0) and end at (1,1)")
        fpr = [p[0] for p in self.points]
        tpr = [p[1] for p in self.points]
        if np.any(np.diff(fpr) < 0) or np.any(np.diff(tpr) < 0):
            raise ValueError("ROC coordinates must be non-decreasing")
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"AUC {self.auc} outside [0, 1]")


def roc_auc(
    scores: list[tuple[np.ndarray, int]], class_names: tuple[str, ...] = CLASS_NAMES
) -> list[RocCurve]:
    """Per-class one-vs-rest ROC curves with AUC by the trapezoidal rule.

    Operating points are computed at every distinct score threshold.
    Classes with no positives or no negatives are omitted with a warning.
    """
    if not scores:
        raise ValueError("no scores to evaluate")
    k = len(class_names)
    dists = np.stack([np.asarray(dist, dtype=np.float64) for dist, _ in scores])
    labels = np.array([true for _, true in scores])
    if dists.shape[1] != k:
        raise ValueError(f"distributions have {dists.shape[1]} classes, expected {k}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("true class outside range")
    curves = []
    for c in range(k):
        positive = labels == c
        n_pos = int(positive.sum())
        n_neg = len(labels) - n_pos
        if n_pos == 0 or n_neg == 0:
            which = "positives" if n_pos == 0 else "negatives"
            warnings.warn(f"ROC for class {class_names[c]} omitted: no {which}", stacklevel=2)
            continue
        s = dists[:, c]
        order = np.argsort(-s, kind="stable")
        s_sorted = s[order]
        pos_sorted = positive[order]
        cum_tp = np.cumsum(pos_sorted)
        cum_fp = np.cumsum(~pos_sorted)
        group_ends = np.append(np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1)
        fpr = cum_fp[group_ends] / n_neg
        tpr = cum_tp[group_ends] / n_pos
        points = [(0.0, 0.0)] + [(float(f), float(t)) for f, t in zip(fpr, tpr)]
        thresholds = [np.inf] + [float(t) for t in s_sorted[group_ends]]
        auc = float(np.trapezoid([p[1] for p in points], [p[0] for p in points]))
        curves.append(RocCurve(c, points, thresholds, min(max(auc, 0.0), 1.0)))
    return curves


def macro_auc(curves: list[RocCurve]) -> float:
    """Unweighted mean AUC over the classes that produced a curve."""
    if not curves:
        raise ValueError("no ROC curves to average")
    return float(np.mean([curve.auc for curve in curves]))


# ---------------------------------------------------------------------------
# Cross-validation driver.
# ---------------------------------------------------------------------------


@dataclass
class CrossvalConfig:
    """Everything a cross-validation run depends on."""

    branch: BranchConfig = field(default_factory=BranchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: BranchWeights = field(default_factory=BranchWeights)
    folds: int = 5
    seed: int = 0
    split: str = SPLIT_SECTION
    vote: str = VOTE_CONCAT
    threads: int = 1

    def __post_init__(self) -> None:
        if self.split not in SPLIT_MODES:
            raise ValueError(f"split must be one of {SPLIT_MODES}, got {self.split!r}")
        if self.vote not in VOTE_MODES:
            raise ValueError(f"vote must be one of {VOTE_MODES}, got {self.vote!r}")
        if self.threads < 1:
            raise ValueError(f"threads must be positive, got {self.threads}")
        if self.folds < 2:
            raise ValueError(f"need at least 2 folds, got {self.folds}")

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASS_NAMES[: self.branch.num_classes]


@dataclass
class PairPatches:
    """Patch tensors of one (section, angle) capture, one array per role."""

    rows: int
    cols: int
    arrays: dict[str, np.ndarray]

    @property
    def count(self) -> int:
        return self.rows * self.cols


@dataclass
class FoldResult:
    """Everything measured on one fold's held-out data."""

    fold: int
    train_sections: list[str]
    validation_sections: list[str]
    patch_pre_accuracy: float
    patch_post_accuracy: float
    section_accuracy: float
    section_kappa: float
    patch_pairs_pre: list[tuple[int, int]]
    patch_pairs_post: list[tuple[int, int]]
    section_pairs: list[tuple[int, int]]
    verdicts: list[tuple[str, int, int]]  # (section, true, verdict)
    predictions: list[SectionPrediction] = field(repr=False)
    roc_scores: list[tuple[np.ndarray, int]] = field(repr=False)
    final_losses: dict[str, float] = field(default_factory=dict)


@dataclass
class CrossvalReport:
    """Per-fold results plus pooled and fold-averaged aggregates."""

    config: CrossvalConfig
    folds: list[FoldResult]
    section_confusion: ConfusionMatrix
    patch_confusion_pre: ConfusionMatrix
    section_accuracy: float
    section_kappa: float
    patch_pre_accuracy: float
    patch_post_accuracy: float
    mean_patch_pre_accuracy: float
    mean_patch_post_accuracy: float
    mean_section_accuracy: float
    roc: list[RocCurve]
    macro_auc: float


def derived_seed(*parts: int) -> int:
    """Deterministic child seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def build_patch_cache(
    records: list[SectionRecord], patch_size: int
) -> dict[str, list[PairPatches]]:
    """Preprocess every capture once: equalize, fuse, normalize, slice.

    Returns per section a list of PairPatches in angle order, with float32
    (count, 3, patch, patch) arrays per role, ready for the network.
    """
    cache: dict[str, list[PairPatches]] = {}
    for record in records:
        pairs = []
        for pair in record.images:
            ppl = load_raster(pair.ppl_path)
            xpl = load_raster(pair.xpl_path)
            ci = load_raster(pair.ci_path) if pair.ci_path is not None else None
            ppl, xpl, ci = preprocess_pair(ppl, xpl, ci)
            grids = aligned_triples(ppl, xpl, ci, patch_size)
            arrays = {
                role: grid.patches.transpose(0, 3, 1, 2).astype(np.float32)
                for role, grid in zip(BRANCH_ROLES, grids)
            }
            pairs.append(PairPatches(grids[0].rows, grids[0].cols, arrays))
        cache[record.section_id] = pairs
    return cache


def train_three_branches(
    records: list[SectionRecord],
    cache: dict[str, list[PairPatches]],
    branch_cfg: BranchConfig,
    train_cfg: TrainConfig,
    seed_stream: tuple[int, ...],
    patch_mask: dict[str, list[np.ndarray]] | None = None,
) -> tuple[dict[str, BranchModel], dict[str, TrainLog]]:
    """Train one branch per role on the given sections' cached patches.

    ``patch_mask`` optionally restricts each capture to a boolean subset of
    its positions (used by the patch-level split). Each branch draws its
    init and shuffle seed from (seed_stream..., branch index). Returns the
    models and each branch's training log.
    """
    models: dict[str, BranchModel] = {}
    logs: dict[str, TrainLog] = {}
    for branch_index, role in enumerate(BRANCH_ROLES):
        chunks = []
        labels = []
        for record in records:
            for pair_index, pair in enumerate(cache[record.section_id]):
                array = pair.arrays[role]
                if patch_mask is not None:
                    array = array[patch_mask[record.section_id][pair_index]]
                if array.shape[0]:
                    chunks.append(array)
                    labels.append(np.full(array.shape[0], record.label, dtype=np.intp))
        if not chunks:
            raise ValueError("no training patches; check the fold plan")
        x = np.concatenate(chunks)
        y = np.concatenate(labels)
        seed = derived_seed(*seed_stream, branch_index)
        model = build_branch(branch_cfg, role, seed)
        samples = list(zip(x, y.tolist()))
        logs[role] = train_branch(model, samples, dataclasses.replace(train_cfg, seed=seed))
        models[role] = model
    return models, logs


def _predict_pair(
    models: dict[str, BranchModel],
    pair: PairPatches,
    section_id: str,
    config: CrossvalConfig,
    subset: np.ndarray | None = None,
) -> tuple[SectionPrediction, dict[str, np.ndarray]]:
    """Fused prediction for one capture (optionally a subset of positions)."""
    probs = {}
    for role in BRANCH_ROLES:
        array = pair.arrays[role] if subset is None else pair.arrays[role][subset]
        probs[role] = batch_forward(models[role], array)
    count = next(iter(probs.values())).shape[0]
    rows, cols = (pair.rows, pair.cols) if subset is None else (1, count)
    prediction = fuse_section(
        section_id,
        rows,
        cols,
        probs["ppl"],
        probs["xpl"],
        probs["ci"],
        config.weights,
        vote=config.vote,
    )
    return prediction, probs


def _evaluate_sections(
    models: dict[str, BranchModel],
    records: list[SectionRecord],
    cache: dict[str, list[PairPatches]],
    config: CrossvalConfig,
    patch_mask: dict[str, list[np.ndarray]] | None = None,
) -> tuple[list, list, list, list, list]:
    """Run held-out sections through fusion and pooled per-section revision."""
    patch_pre: list[tuple[int, int]] = []
    patch_post: list[tuple[int, int]] = []
    section_pairs: list[tuple[int, int]] = []
    verdicts: list[tuple[str, int, int]] = []
    predictions: list[SectionPrediction] = []
    roc_scores: list[tuple[np.ndarray, int]] = []
    for record in records:
        votes: list[int] = []
        pre_classes: list[int] = []
        for pair_index, pair in enumerate(cache[record.section_id]):
            subset = None
            if patch_mask is not None:
                subset = patch_mask[record.section_id][pair_index]
                if not subset.any():
                    continue
            prediction, _ = _predict_pair(models, pair, record.section_id, config, subset)
            predictions.append(prediction)
            votes.extend(prediction.votes)
            pre_classes.extend(prediction.pre_revision)
            for dist in prediction.distributions:
                roc_scores.append((dist, record.label))
        if not votes:
            continue
        verdict, _ = statistical_revision(votes)
        patch_pre.extend((record.label, pre) for pre in pre_classes)
        patch_post.extend((record.label, verdict) for _ in pre_classes)
        section_pairs.append((record.label, verdict))
        verdicts.append((record.section_id, record.label, verdict))
    return patch_pre, patch_post, section_pairs, verdicts, (predictions, roc_scores)


def _accuracy(pairs: list[tuple[int, int]]) -> float:
    if not pairs:
        return 0.0
    return sum(1 for t, p in pairs if t == p) / len(pairs)


def _patch_split_masks(
    records: list[SectionRecord],
    cache: dict[str, list[PairPatches]],
    k: int,
    seed: int,
) -> list[dict[str, list[np.ndarray]]]:
    """Per-fold boolean masks over every capture's positions (patch split)."""
    items = []
    for record in records:
        for pair_index, pair in enumerate(cache[record.section_id]):
            for position in range(pair.count):
                key = f"{record.section_id}\x00{pair_index}\x00{position}"
                items.append((key, record.label))
    if len(items) < k:
        raise ValueError(f"only {len(items)} patches for {k} folds")
    assignment = _assign_folds(items, k, np.random.default_rng(seed))
    masks = []
    for fold in range(k):
        mask: dict[str, list[np.ndarray]] = {}
        for record in records:
            mask[record.section_id] = [
                np.array(
                    [
                        assignment[f"{record.section_id}\x00{pair_index}\x00{position}"] == fold
                        for position in range(pair.count)
                    ]
                )
                for pair_index, pair in enumerate(cache[record.section_id])
            ]
        masks.append(mask)
    return masks


def run_crossval(records: list[SectionRecord], config: CrossvalConfig) -> CrossvalReport:
    """Full k-fold evaluation of the three-branch pipeline.

    Each fold trains fresh branches on the other folds and pushes its
    held-out sections through fusion and revision. Folds run independently
    (optionally in parallel) and merge in fold order, so the report depends
    only on the config and corpus.
    """
    if not records:
        raise ValueError("no sections to evaluate")
    k_classes = config.branch.num_classes
    for record in records:
        if record.label >= k_classes:
            raise ValueError(
                f"section {record.section_id!r} has class index {record.label}, "
                f"but the branch config allows {k_classes} classes"
            )
    cache = build_patch_cache(records, config.branch.patch_size)

    if config.split == SPLIT_SECTION:
        plan = make_folds(records, config.folds, config.seed)
        fold_masks = None
    else:
        plan = None
        fold_masks = _patch_split_masks(records, cache, config.folds, config.seed)

    def run_fold(fold: int) -> FoldResult:
        if plan is not None:
            train_records = [r for r in records if plan.fold_of(r.section_id) != fold]
            val_records = [r for r in records if plan.fold_of(r.section_id) == fold]
            train_mask = None
            val_mask = None
        else:
            train_records = records
            val_records = records
            val_mask = fold_masks[fold]
            train_mask = {
                sid: [~m for m in masks] for sid, masks in val_mask.items()
            }
        models, logs = train_three_branches(
            train_records, cache, config.branch, config.train, (config.seed, fold), train_mask
        )
        patch_pre, patch_post, section_pairs, verdicts, extras = _evaluate_sections(
            models, val_records, cache, config, val_mask
        )
        predictions, roc_scores = extras
        section_cm = confusion_matrix(section_pairs, config.class_names)
        return FoldResult(
            fold=fold,
            train_sections=sorted(r.section_id for r in train_records),
            validation_sections=sorted(r.section_id for r in val_records),
            patch_pre_accuracy=_accuracy(patch_pre),
            patch_post_accuracy=_accuracy(patch_post),
            section_accuracy=_accuracy(section_pairs),
            section_kappa=cohen_kappa(section_cm),
            patch_pairs_pre=patch_pre,
            patch_pairs_post=patch_post,
            section_pairs=section_pairs,
            verdicts=verdicts,
            predictions=predictions,
            roc_scores=roc_scores,
            final_losses={role: log.losses[-1] for role, log in logs.items()},
        )

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            fold_results = list(pool.map(run_fold, range(config.folds)))
    else:
        fold_results = [run_fold(fold) for fold in range(config.folds)]

    all_sections: list[tuple[int, int]] = []
    all_patch_pre: list[tuple[int, int]] = []
    all_patch_post: list[tuple[int, int]] = []
    all_scores: list[tuple[np.ndarray, int]] = []
    for result in fold_results:
        all_sections.extend(result.section_pairs)
        all_patch_pre.extend(result.patch_pairs_pre)
        all_patch_post.extend(result.patch_pairs_post)
        all_scores.extend(result.roc_scores)

    section_cm = confusion_matrix(all_sections, config.class_names)
    patch_cm = confusion_matrix(all_patch_pre, config.class_names)
    curves = roc_auc(all_scores, config.class_names)
    return CrossvalReport(
        config=config,
        folds=fold_results,
        section_confusion=section_cm,
        patch_confusion_pre=patch_cm,
        section_accuracy=overall_accuracy(section_cm),
        section_kappa=cohen_kappa(section_cm),
        patch_pre_accuracy=_accuracy(all_patch_pre),
        patch_post_accuracy=_accuracy(all_patch_post),
        mean_patch_pre_accuracy=float(np.mean([r.patch_pre_accuracy for r in fold_results])),
        mean_patch_post_accuracy=float(np.mean([r.patch_post_accuracy for r in fold_results])),
        mean_section_accuracy=float(np.mean([r.section_accuracy for r in fold_results])),
        roc=curves,
        macro_auc=macro_auc(curves) if curves else float("nan"),
    )


# ---------------------------------------------------------------------------
# Report emission.
# ---------------------------------------------------------------------------

_SVG_COLORS = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
    "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a",
)


def _fmt(value: float) -> str:
    return f"{value:.9f}"


def write_confusion_csv(cm: ConfusionMatrix, path: Path, normalized: bool) -> None:
    """Counts, or the Table-1-style row-normalized view at 2 decimals."""
    header = "true\\predicted," + ",".join(cm.class_names)
    lines = [header]
    data = cm.row_normalized() if normalized else cm.counts
    for i, name in enumerate(cm.class_names):
        if normalized:
            cells = ",".join(f"{v:.2f}" for v in data[i])
        else:
            cells = ",".join(str(int(v)) for v in data[i])
        lines.append(f"{name},{cells}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_roc_points(curves: list[RocCurve], path: Path, class_names: tuple[str, ...]) -> None:
    lines = ["class,fpr,tpr,threshold"]
    for curve in curves:
        name = class_names[curve.class_index]
        for (fpr, tpr), threshold in zip(curve.points, curve.thresholds):
            lines.append(f"{name},{_fmt(fpr)},{_fmt(tpr)},{_fmt(threshold)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_roc_svg(curves: list[RocCurve], path: Path, class_names: tuple[str, ...]) -> None:
    """Standalone SVG of the ROC curves.

    The polyline coordinates are the very same nine-decimal strings the
    delimited output uses; a group transform maps the unit square onto the
    canvas so the data stays embedded verbatim.
    """
    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 640 640" '
        'font-family="monospace" font-size="12">',
        '<rect x="0" y="0" width="640" height="640" fill="white"/>',
        '<rect x="70" y="70" width="500" height="500" fill="none" stroke="black"/>',
        '<line x1="70" y1="570" x2="570" y2="70" stroke="#cccccc" stroke-dasharray="4 4"/>',
        '<text x="290" y="604" >false positive rate</text>',
        '<text x="30" y="330" transform="rotate(-90 30 330)">true positive rate</text>',
        '<text x="70" y="40">receiver operating characteristic (one vs rest)</text>',
    ]
    for i in range(6):
        v = i / 5
        x = 70 + 500 * v
        y = 570 - 500 * v
        parts.append(f'<text x="{x - 10:.0f}" y="586">{v:.1f}</text>')
        parts.append(f'<text x="42" y="{y + 4:.0f}">{v:.1f}</text>')
    parts.append('<g transform="translate(70 570) scale(500 -500)">')
    for curve in curves:
        color = _SVG_COLORS[curve.class_index % len(_SVG_COLORS)]
        points = " ".join(f"{_fmt(fpr)},{_fmt(tpr)}" for fpr, tpr in curve.points)
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'vector-effect="non-scaling-stroke" points="{points}"/>'
        )
    parts.append("</g>")
    for slot, curve in enumerate(curves):
        color = _SVG_COLORS[curve.class_index % len(_SVG_COLORS)]
        y = 88 + 16 * slot
        parts.append(f'<rect x="580" y="{y - 9}" width="10" height="10" fill="{color}"/>')
        parts.append(
            f'<text x="594" y="{y}">{class_names[curve.class_index]} '
            f"AUC={_fmt(curve.auc)}</text>"
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")


def write_metrics_csv(report: CrossvalReport, path: Path) -> None:
    lines = ["scope,metric,value"]

    def add(scope: str, metric: str, value: float) -> None:
        lines.append(f"{scope},{metric},{_fmt(value)}")

    for result in report.folds:
        scope = f"fold{result.fold}"
        add(scope, "patch_accuracy_pre_revision", result.patch_pre_accuracy)
        add(scope, "patch_accuracy_post_revision", result.patch_post_accuracy)
        add(scope, "section_accuracy", result.section_accuracy)
        add(scope, "section_kappa", result.section_kappa)
    add("mean", "patch_accuracy_pre_revision", report.mean_patch_pre_accuracy)
    add("mean", "patch_accuracy_post_revision", report.mean_patch_post_accuracy)
    add("mean", "section_accuracy", report.mean_section_accuracy)
    add("pooled", "patch_accuracy_pre_revision", report.patch_pre_accuracy)
    add("pooled", "patch_accuracy_post_revision", report.patch_post_accuracy)
    add("pooled", "section_accuracy", report.section_accuracy)
    add("pooled", "section_kappa", report.section_kappa)
    add("pooled", "macro_auc", report.macro_auc)
    for curve in report.roc:
        add("pooled", f"auc_{report.config.class_names[curve.class_index]}", curve.auc)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report_text(report: CrossvalReport, path: Path) -> None:
    config = report.config
    lines = [
        "cross-validation report",
        "=======================",
        f"folds: {config.folds}  split: {config.split}  vote: {config.vote}  "
        f"seed: {config.seed}",
        f"weights: ppl={config.weights.w_ppl:.6f} xpl={config.weights.w_xpl:.6f} "
        f"ci={config.weights.w_ci:.6f}",
        f"branch: patch={config.branch.patch_size} "
        f"widths={list(config.branch.channel_widths)} fc={list(config.branch.fc_widths)} "
        f"classes={config.branch.num_classes} padding={config.branch.conv_padding}",
        f"training: lr={config.train.learning_rate} batch={config.train.batch_size} "
        f"iterations={config.train.max_iterations}",
        "ties break to the alphabetically first rock type",
        "",
    ]
    for result in report.folds:
        lines += [
            f"fold {result.fold}",
            "-" * len(f"fold {result.fold}"),
            f"validation sections: {' '.join(result.validation_sections)}",
            f"final training loss: "
            + " ".join(f"{role}={result.final_losses[role]:.6f}" for role in BRANCH_ROLES),
            f"patch accuracy pre-revision:  {_fmt(result.patch_pre_accuracy)}",
            f"patch accuracy post-revision: {_fmt(result.patch_post_accuracy)}",
            f"section accuracy: {_fmt(result.section_accuracy)}",
            f"section kappa:    {_fmt(result.section_kappa)}",
            "verdicts: "
            + " ".join(
                f"{sid}:{config.class_names[v]}{'' if t == v else '(!)'}"
                for sid, t, v in result.verdicts
            ),
            "",
        ]
    lines += [
        "average over folds",
        "------------------",
        f"patch accuracy pre-revision:  {_fmt(report.mean_patch_pre_accuracy)}",
        f"patch accuracy post-revision: {_fmt(report.mean_patch_post_accuracy)}",
        f"section accuracy: {_fmt(report.mean_section_accuracy)}",
        "",
        "pooled over all held-out data",
        "-----------------------------",
        f"patch accuracy pre-revision:  {_fmt(report.patch_pre_accuracy)}",
        f"patch accuracy post-revision: {_fmt(report.patch_post_accuracy)}",
        f"section accuracy: {_fmt(report.section_accuracy)}",
        f"section kappa:    {_fmt(report.section_kappa)}",
        f"macro AUC:        {_fmt(report.macro_auc)}",
        "",
        "section confusion (counts, true rows / predicted columns):",
    ]
    names = report.config.class_names
    width = max(len(n) for n in names)
    header = " " * (width + 1) + " ".join(f"{n[:6]:>6}" for n in names)
    lines.append(header)
    for i, name in enumerate(names):
        row = " ".join(f"{int(v):>6}" for v in report.section_confusion.counts[i])
        lines.append(f"{name:<{width}} {row}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report_files(report: CrossvalReport, out_dir: str | Path) -> list[Path]:
    """Write the full report family into a directory; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = report.config.class_names
    predictions = [p for result in report.folds for p in result.predictions]
    paths = {
        "report.txt": lambda p: write_report_text(report, p),
        "metrics.csv": lambda p: write_metrics_csv(report, p),
        "confusion_counts.csv": lambda p: write_confusion_csv(report.section_confusion, p, False),
        "confusion_rownorm.csv": lambda p: write_confusion_csv(report.section_confusion, p, True),
        "roc_points.csv": lambda p: write_roc_points(report.roc, p, names),
        "roc_curves.svg": lambda p: write_roc_svg(report.roc, p, names),
        "predictions.csv": lambda p: write_prediction_report(predictions, p, names),
    }
    written = []
    for name, writer in paths.items():
        path = out_dir / name
        writer(path)
        written.append(path)
    return written
