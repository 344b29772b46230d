"""ROC-AUC evaluation over taxonomy nodes.

Per-node one-vs-rest AUC (Mann-Whitney rank form with average ranks for
ties), sample-count-weighted mean AUC per head, and the leaf-level mean.
Scores are the model's unconditional node probabilities; by default every
test sample is in every node's evaluation population ("all"); the
"applicable" population restricts a node's population to samples whose
true path includes the node's parent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .strategies import Model
from .taxonomy import Taxonomy, derive_heads, head_display_name, leaves, path_to_root


class UndefinedAucError(ValueError):
    """AUC is undefined when one class is absent."""


def auc(scores, positive) -> float:
    """Mann-Whitney AUC with average ranks for ties.

    Equals (#{pos > neg} + 0.5 * #{pos == neg}) / (n_pos * n_neg); raises
    UndefinedAucError on single-class input rather than imputing 0.5.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    if scores.shape != positive.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and aligned")
    if not np.isfinite(scores).all():
        raise ValueError("non-finite score")
    n_pos = int(positive.sum())
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(
            f"AUC undefined: {n_pos} positives, {n_neg} negatives"
        )
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    rank_sum = ranks[positive].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores, positive):
    """ROC staircase as (fpr, tpr, threshold) rows, thresholds descending.

    The first row is (0, 0, inf); each following row uses score >= threshold
    as the positive decision."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("ROC undefined for single-class input")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = positive[order]
    rows = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        tp += int(p[i : j + 1].sum())
        fp += (j - i + 1) - int(p[i : j + 1].sum())
        rows.append((fp / n_neg, tp / n_pos, float(s[i])))
        i = j + 1
    return rows


@dataclass
class Report:
    """Evaluation result for one model on one test population."""

    strategy: str
    population: str
    node_auc: dict[str, float]
    node_pos: dict[str, int]
    node_total: dict[str, int]
    head_mauc: dict[str, float]
    leaf_mauc: float | None
    head_order: list[str]
    taxonomy: Taxonomy = field(repr=False)
    skipped_nodes: list[str] = field(default_factory=list)

    def as_csv(self) -> str:
        lines = ["node,auc,n_pos,n_total"]
        for tag in self.taxonomy.order:
            if tag == self.taxonomy.root:
                continue
            if tag in self.node_auc:
                lines.append(
                    "%s,%.17g,%d,%d"
                    % (tag, self.node_auc[tag], self.node_pos[tag], self.node_total[tag])
                )
            else:
                lines.append("%s,,%d,%d" % (tag, self.node_pos.get(tag, 0),
                                            self.node_total.get(tag, 0)))
        lines.append("")
        lines.append("head,mauc")
        for head_id in self.head_order:
            if head_id in self.head_mauc:
                lines.append("%s,%.17g" % (self._head_name(head_id), self.head_mauc[head_id]))
            else:
                lines.append("%s," % self._head_name(head_id))
        lines.append("")
        if self.leaf_mauc is not None:
            lines.append("mAUC@L,%.17g" % self.leaf_mauc)
        else:
            lines.append("mAUC@L,")
        return "\n".join(lines) + "\n"

    def _head_name(self, head_id: str) -> str:
        return head_display_name(self.taxonomy, head_id)

    def summary_row(self) -> dict[str, float | None]:
        """Head mAUCs (by display name) plus mAUC@L, for comparison tables."""
        row: dict[str, float | None] = {}
        for head_id in self.head_order:
            row["mAUC@" + self._head_name(head_id)] = self.head_mauc.get(head_id)
        row["mAUC@L"] = self.leaf_mauc
        return row


def evaluate(model: Model, d: Dataset, population: str = "all",
             test_subset: int = 4, renormalize_leaky: bool = False) -> Report:
    """Per-node AUC over the test subset; weighted means per head and leaf.

    Positives for node n are test samples whose true path contains n; the
    score is the model's unconditional P(n).  Nodes with no positives (or
    no negatives) in their population have no AUC and are excluded from
    the weighted means with a warning.
    """
    if population not in ("all", "applicable"):
        raise ValueError(f"unknown auc population {population!r}")
    t = model.taxonomy
    test = d.subset({test_subset})
    if len(test) == 0:
        raise ValueError(f"test subset {test_subset} is empty")
    X = test.features_matrix()
    node_probs, _ = model.predict(X, renormalize_leaky=renormalize_leaky)

    on_path: dict[str, np.ndarray] = {tag: np.zeros(len(test), dtype=bool) for tag in t.nodes}
    for i, s in enumerate(test.samples):
        for tag in path_to_root(t, s.leaf):
            on_path[tag][i] = True

    node_auc: dict[str, float] = {}
    node_pos: dict[str, int] = {}
    node_total: dict[str, int] = {}
    skipped = []
    for tag in t.order:
        if tag == t.root:
            continue
        parent = t.nodes[tag].parent
        mask = on_path[parent] if population == "applicable" else np.ones(len(test), bool)
        pos = on_path[tag][mask]
        scores = node_probs[tag][mask]
        node_pos[tag] = int(pos.sum())
        node_total[tag] = int(mask.sum())
        try:
            node_auc[tag] = auc(scores, pos)
        except UndefinedAucError:
            skipped.append(tag)
            warnings.warn(
                f"node {tag}: AUC undefined on {population} population "
                f"({int(pos.sum())} positives of {int(mask.sum())}); excluded from means",
                stacklevel=2,
            )

    # per-head mAUC is a taxonomy property, reported for every strategy
    # (leaf_node included, whose single softmax is not a taxonomy head)
    head_ids = [h.parent_tag for h in derive_heads(t, leaky=False)]
    head_mauc: dict[str, float] = {}
    for head_id in head_ids:
        children = t.nodes[head_id].children
        m = _weighted_mean_auc(node_auc, children, _test_counts(on_path, children))
        if m is not None:
            head_mauc[head_id] = m

    leaf_order = leaves(t)
    leaf_mauc = _weighted_mean_auc(node_auc, leaf_order, _test_counts(on_path, leaf_order))

    return Report(
        strategy=model.kind.value,
        population=population,
        node_auc=node_auc,
        node_pos=node_pos,
        node_total=node_total,
        head_mauc=head_mauc,
        leaf_mauc=leaf_mauc,
        head_order=head_ids,
        taxonomy=t,
        skipped_nodes=skipped,
    )


def _test_counts(on_path, tags):
    return {tag: int(on_path[tag].sum()) for tag in tags}


def _weighted_mean_auc(node_auc, tags, counts):
    num = 0.0
    den = 0.0
    for tag in tags:
        if tag in node_auc and counts[tag] > 0:
            num += counts[tag] * node_auc[tag]
            den += counts[tag]
    return num / den if den > 0 else None


def head_mauc(report: Report, head_id: str) -> float:
    """Sample-count-weighted mean AUC of one head's child classes."""
    if head_id not in report.head_mauc:
        raise UndefinedAucError(f"head {head_id} has no defined class AUCs")
    return report.head_mauc[head_id]


def leaf_mauc(report: Report) -> float:
    if report.leaf_mauc is None:
        raise UndefinedAucError("no leaf has a defined AUC")
    return report.leaf_mauc


def format_comparison_tables(reports: list[Report]) -> tuple[str, str]:
    """Aligned text tables: strategy x head-mAUC summary, strategy x node AUC.

    Values are percentages with one decimal; blank cells mark undefined
    AUCs."""
    if not reports:
        raise ValueError("no reports to format")
    t = reports[0].taxonomy
    display = {
        "leaf_node": "Leaf-Node",
        "flattened": "Flattened Hierarchy",
        "leaky_flattened": "Leaky Flattened Hierarchy",
        "dense": "Dense Hierarchy",
        "leaky_dense": "Leaky Dense Hierarchy",
    }

    def fmt(v):
        return "" if v is None else "%.1f" % (100.0 * v)

    head_cols = ["mAUC@" + head_display_name(t, h) for h in reports[0].head_order]
    cols = ["strategy"] + head_cols + ["mAUC@L"]
    rows = []
    for r in reports:
        row = [display.get(r.strategy, r.strategy)]
        row += [fmt(r.head_mauc.get(h)) for h in r.head_order]
        row.append(fmt(r.leaf_mauc))
        rows.append(row)
    table2 = _align(cols, rows)

    node_cols = [tag for tag in t.order if tag != t.root]
    cols3 = ["strategy"] + node_cols
    rows3 = []
    for r in reports:
        rows3.append([display.get(r.strategy, r.strategy)]
                     + [fmt(r.node_auc.get(tag)) for tag in node_cols])
    table3 = _align(cols3, rows3)
    return table2, table3


def _align(cols, rows) -> str:
    widths = [len(c) for c in cols]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    out = []
    for row in [cols] + rows:
        out.append("  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i])
                             for i, cell in enumerate(row)).rstrip())
    return "\n".join(out) + "\n"
