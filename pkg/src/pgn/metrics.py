"""Scoring, transition counting, the FGSM baseline and curve export."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from pgn import diffcore as dc
from pgn.models import WHITE_BOX, AccessPolicyError, classify, perturb

CSV_HEADER = ("epoch", "L_d", "L_g", "L_r", "top1", "mAP", "pos", "neg")


@dataclass
class MetricsRow:
    epoch: int
    L_d: float
    L_g: float
    L_r: float
    top1: float
    mAP: float
    pos_transitions: int
    neg_transitions: int

    def values(self):
        return (
            self.epoch,
            self.L_d,
            self.L_g,
            self.L_r,
            self.top1,
            self.mAP,
            self.pos_transitions,
            self.neg_transitions,
        )

    def same_as(self, other):
        """Equality that treats two NaN fields (unavailable mAP) as equal."""
        for a, b in zip(self.values(), other.values()):
            if isinstance(a, float) and math.isnan(a):
                if not (isinstance(b, float) and math.isnan(b)):
                    return False
            elif a != b:
                return False
        return True


def top1_accuracy(r, l):
    r, l = np.asarray(r), np.asarray(l)
    if r.shape != l.shape:
        raise ValueError(f"top1_accuracy: {r.shape} predictions vs {l.shape} labels")
    if r.size == 0:
        raise ValueError("top1_accuracy: empty input")
    return float(np.mean(r == l))


def average_precision(scores, positives):
    """AP of one ranking: mean of precision@k over the ranks k of positives.

    Ties in score are ordered by sample index (stable sort).
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(positives, dtype=bool)[order]
    if not hits.any():
        raise ValueError("average_precision: no positives")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def mean_average_precision(scores, l):
    """One-vs-rest AP per class, averaged over classes that have positives."""
    scores = np.asarray(scores)
    l = np.asarray(l)
    if scores.ndim != 2 or scores.shape[0] != l.shape[0]:
        raise ValueError(f"mean_average_precision: scores {scores.shape} vs labels {l.shape}")
    aps = [average_precision(scores[:, k], l == k) for k in range(scores.shape[1]) if np.any(l == k)]
    if not aps:
        raise ValueError("mean_average_precision: no class has a positive sample")
    return float(np.mean(aps))


def count_transitions(r_vanilla, r_perturbed, l):
    """(false -> correct, correct -> false) counts between two prediction sets."""
    a, b, l = np.asarray(r_vanilla), np.asarray(r_perturbed), np.asarray(l)
    if not (a.shape == b.shape == l.shape):
        raise ValueError(f"count_transitions: shapes {a.shape}, {b.shape}, {l.shape} differ")
    was, now = a == l, b == l
    return int(np.sum(~was & now)), int(np.sum(was & ~now))


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def generate_perturbations(G, images, batch=256):
    return np.concatenate(
        [G(dc.Tensor(images[i : i + batch])).data for i in range(0, len(images), batch)], axis=0
    )


def evaluate_perturbation(G, f, images, labels, lam, vanilla=None):
    """Scores of ``f`` on ``images + lam * G(images)``.

    mAP is NaN when the classifier only exposes labels.
    """
    images = np.asarray(images, dtype=dc.DTYPE)
    M = generate_perturbations(G, images)
    J = perturb(images, M, lam).data
    if f.access_policy == WHITE_BOX:
        r, z = classify(f, J, return_logits=True)
        m_ap = mean_average_precision(_softmax(z), labels)
    else:
        r, m_ap = classify(f, J), float("nan")
    if vanilla is None:
        vanilla = classify(f, images)
    pos, neg = count_transitions(vanilla, r, labels)
    return {
        "top1": top1_accuracy(r, labels),
        "mAP": m_ap,
        "pos": pos,
        "neg": neg,
        "vanilla_top1": top1_accuracy(vanilla, labels),
        "predictions": r,
        "mean_l1": float(np.abs(M).reshape(len(M), -1).sum(axis=1).mean()),
    }


def vanilla_scores(f, images, labels):
    if f.access_policy == WHITE_BOX:
        r, z = classify(f, images, return_logits=True)
        return top1_accuracy(r, labels), mean_average_precision(_softmax(z), labels)
    return top1_accuracy(classify(f, images), labels), float("nan")


def fgsm_perturb(f, images, labels, epsilon, batch=256):
    """``I + epsilon * sign(grad_I CE(f(I), l))`` (needs white-box access)."""
    if f.access_policy != WHITE_BOX:
        raise AccessPolicyError("FGSM needs classifier gradients; policy is label-only")
    images = np.asarray(images, dtype=dc.DTYPE)
    if epsilon == 0:
        return images.copy()
    out = np.empty_like(images)
    for i in range(0, len(images), batch):
        x = dc.Tensor(images[i : i + batch], requires_grad=True)
        n = x.shape[0]
        # sum (not mean) keeps gradients away from float32 underflow; sign is unchanged
        loss = dc.mul(dc.softmax_cross_entropy(f.logits_tensor(x), labels[i : i + batch]), float(n))
        dc.backward(loss)
        out[i : i + n] = images[i : i + n] + np.float32(epsilon) * np.sign(x.grad)
    return out


def fgsm_baseline(f, images, labels, epsilon=0.03):
    """Top-1 accuracy after a one-step gradient-sign attack."""
    J = fgsm_perturb(f, images, labels, epsilon)
    return top1_accuracy(classify(f, J), labels)


# ---------------------------------------------------------------- output


def export_curves(rows, path):
    if not rows:
        raise ValueError("export_curves: no rows")
    try:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(CSV_HEADER) + "\n")
            for row in rows:
                fh.write(
                    f"{row.epoch:d},{row.L_d:.6f},{row.L_g:.6f},{row.L_r:.6f},"
                    f"{row.top1:.6f},{row.mAP:.6f},{row.pos_transitions:d},{row.neg_transitions:d}\n"
                )
    except OSError as exc:
        raise OSError(f"cannot write curves to {path}: {exc.strerror or exc}") from exc


def read_curves(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [
            MetricsRow(int(e), float(a), float(b), float(c), float(d), float(m), int(p), int(q))
            for e, a, b, c, d, m, p, q in reader
        ]


def _cell(acc, m_ap):
    if acc is None:
        return "-"
    if m_ap is None or math.isnan(m_ap):
        return f"{100 * acc:.1f}% / n/a"
    return f"{100 * acc:.1f}% / {m_ap:.3f}"


def summary_table(entries, columns=("Vanilla", "Proposed", "EHA")):
    """Plain-text table, one row per (dataset, classifier).

    ``entries`` holds dicts with ``dataset``, ``classifier`` and, per column
    name, an ``(accuracy, mAP)`` pair (either may be None).
    """
    head = ["Dataset", "Classifier"] + list(columns)
    body = []
    for e in entries:
        cells = [str(e["dataset"]), str(e["classifier"])]
        for col in columns:
            acc, m_ap = e.get(col, (None, None))
            cells.append(_cell(acc, m_ap))
        body.append(cells)
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    lines = [fmt(head), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"
