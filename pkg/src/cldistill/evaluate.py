"""Cosine-retrieval evaluation: gallery indexing, Recall@K, forgetting curves.

Protocol: each test image queries the remaining test images (leave-one-out
by id); a query is a hit at K if any of the K nearest gallery items shares
its label. Distance is cosine: d(a, b) = 1 - a.b / (|a||b|). Ties break
toward the lower gallery index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegenerateSplit, EmptyGallery, KTooLarge, ZeroVector


@dataclass(frozen=True)
class GalleryIndex:
    features: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,)
    ids: np.ndarray  # (N,) source ids

    def __len__(self):
        return len(self.labels)


def index_gallery(features, labels, ids=None) -> GalleryIndex:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(features) == 0:
        raise EmptyGallery("gallery has no samples")
    if not np.isfinite(features).all():
        raise ValueError("gallery features contain non-finite entries")
    norms = np.linalg.norm(features, axis=1)
    if (norms == 0).any():
        bad = np.flatnonzero(norms == 0)
        raise ZeroVector(f"zero feature vectors at rows {bad[:10].tolist()}")
    if ids is None:
        ids = np.arange(len(labels))
    return GalleryIndex(features=features, labels=labels, ids=np.asarray(ids))


def _cosine_distances(index: GalleryIndex, query: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    qn = np.linalg.norm(q)
    if qn == 0:
        raise ZeroVector("query feature vector is zero")
    g = index.features
    sims = (g @ q) / (np.linalg.norm(g, axis=1) * qn)
    return 1.0 - sims


def nearest(index: GalleryIndex, query, k: int, exclude_id=None):
    """Top-k gallery entries by ascending cosine distance.

    Returns a list of (gallery id, label, distance) tuples.
    """
    d = _cosine_distances(index, query)
    keep = np.ones(len(index), dtype=bool)
    if exclude_id is not None:
        keep &= index.ids != exclude_id
    avail = np.flatnonzero(keep)
    if k > len(avail):
        raise KTooLarge(f"k={k} exceeds gallery size {len(avail)}")
    order = avail[np.argsort(d[avail], kind="stable")][:k]
    return [(int(index.ids[i]), int(index.labels[i]), float(d[i])) for i in order]


def recall_at_k(features, labels, ks) -> dict[int, float]:
    """Leave-one-out Recall@K over one feature set.

    Queries whose class appears only once have no retrievable positive and
    are excluded (flagged); if every class is a singleton the split is
    degenerate.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    index = index_gallery(features, labels)
    _, counts = np.unique(labels, return_counts=True)
    if (counts < 2).all():
        raise DegenerateSplit("all classes have a single test sample")
    class_count = dict(zip(*np.unique(labels, return_counts=True)))
    ks = sorted(int(k) for k in ks)
    hits = {k: 0 for k in ks}
    n_queries = 0
    for q in range(len(labels)):
        if class_count[labels[q]] < 2:
            continue  # flagged: no same-class gallery item exists
        n_queries += 1
        ranked = nearest(index, features[q], min(max(ks), len(labels) - 1),
                         exclude_id=q)
        ranked_labels = [lab for _, lab, _ in ranked]
        for k in ks:
            if labels[q] in ranked_labels[:k]:
                hits[k] += 1
    return {k: hits[k] / n_queries for k in ks}


def evaluate_split(model, split, ks) -> dict[int, float]:
    """Extract features for a test split and run leave-one-out Recall@K."""
    x = torch.as_tensor(split.inputs, dtype=torch.float64)
    feats = model.features(x).detach().numpy()
    return recall_at_k(feats, split.labels, ks)


@dataclass
class CheckpointEval:
    checkpoint: int  # 0 = after pretrain (or first task), then one per task
    label: str
    per_task: dict  # task index -> {k: recall}
    num_queries: dict  # task index -> query count

    def average(self, k: int) -> float:
        vals = [r[k] for r in self.per_task.values()]
        return float(np.mean(vals))


@dataclass
class RetrievalReport:
    ks: tuple
    checkpoints: list = field(default_factory=list)

    def add(self, entry: CheckpointEval):
        self.checkpoints.append(entry)

    def curve(self, task_index: int, k: int) -> list[float]:
        """Recall@k of one task's test split across checkpoints, in order."""
        return [
            c.per_task[task_index][k]
            for c in self.checkpoints
            if task_index in c.per_task
        ]

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "checkpoints": [
                {
                    "checkpoint": c.checkpoint,
                    "label": c.label,
                    "per_task": {
                        str(t): {str(k): v for k, v in r.items()}
                        for t, r in c.per_task.items()
                    },
                    "num_queries": {
                        str(t): n for t, n in c.num_queries.items()
                    },
                }
                for c in self.checkpoints
            ],
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "RetrievalReport":
        report = cls(ks=tuple(blob["ks"]))
        for c in blob["checkpoints"]:
            report.add(
                CheckpointEval(
                    checkpoint=c["checkpoint"],
                    label=c["label"],
                    per_task={
                        int(t): {int(k): v for k, v in r.items()}
                        for t, r in c["per_task"].items()
                    },
                    num_queries={
                        int(t): n for t, n in c["num_queries"].items()
                    },
                )
            )
        return report

    def summary_rows(self) -> list[dict]:
        """Final-checkpoint summary: first task, last task, unweighted mean."""
        if not self.checkpoints:
            return []
        last = self.checkpoints[-1]
        tasks = sorted(last.per_task)
        rows = []
        for k in self.ks:
            rows.append(
                {
                    "k": k,
                    "first_task": last.per_task[tasks[0]][k],
                    "last_task": last.per_task[tasks[-1]][k],
                    "average": last.average(k),
                }
            )
        return rows

    def format_text(self) -> str:
        lines = []
        for c in self.checkpoints:
            lines.append(f"checkpoint {c.checkpoint} ({c.label})")
            lines.append(f"{'task':>6} {'K':>4} {'recall':>8}")
            for t in sorted(c.per_task):
                for k in self.ks:
                    lines.append(f"{t:>6} {k:>4} {c.per_task[t][k]:8.4f}")
            lines.append("")
        for row in self.summary_rows():
            lines.append(
                "summary Recall@{k}: first {first_task:.4f} "
                "last {last_task:.4f} average {average:.4f}".format(**row)
            )
        return "\n".join(lines) + "\n"


def evaluate_checkpoint(model, seq, ks, checkpoint: int, label: str
                        ) -> CheckpointEval:
    """Recall@K of every task's test split under the current model."""
    per_task, nq = {}, {}
    for i, task in enumerate(seq.tasks):
        per_task[i + 1] = evaluate_split(model, task.test, ks)
        nq[i + 1] = len(task.test)
    return CheckpointEval(checkpoint=checkpoint, label=label,
                          per_task=per_task, num_queries=nq)


def forgetting_curve(report: RetrievalReport, k: int = 1,
                     task_index: int = 1) -> list[float]:
    """Evolution of one task's Recall@k across checkpoints."""
    if not report.checkpoints:
        raise ValueError("report has no checkpoints")
    return report.curve(task_index, k)
