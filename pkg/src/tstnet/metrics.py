"""Temporal IoU, R@n at IoU thresholds, mIoU and throughput."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

Segment = tuple[float, float]

RECALL_NS = (1, 5)
THRESHOLDS = (0.3, 0.5, 0.7)


class MetricError(ValueError):
    pass


def tiou(a: Segment, b: Segment) -> float:
    (a0, a1), (b0, b1) = a, b
    if not a0 < a1 or not b0 < b1:
        raise MetricError(f"degenerate segment in tiou({a}, {b})")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    return inter / union


def _pairs(predictions: Mapping[str, Sequence[Segment]], gts: Mapping[str, Segment]):
    for ep, preds in predictions.items():
        if ep not in gts:
            raise MetricError(f"no ground truth for episode {ep!r}")
        if not preds:
            raise MetricError(f"episode {ep!r} has no predictions")
        yield ep, preds, gts[ep]


def recall_at(predictions: Mapping[str, Sequence[Segment]], gts: Mapping[str, Segment],
              n: int, mu: float) -> float:
    """Fraction of episodes whose top-n contains a prediction with tIoU strictly above mu."""
    hits = total = 0
    for _, preds, gt in _pairs(predictions, gts):
        total += 1
        hits += max(tiou(p, gt) for p in preds[:n]) > mu
    return hits / total if total else 0.0


def mean_iou(predictions: Mapping[str, Sequence[Segment]], gts: Mapping[str, Segment]) -> float:
    vals = [tiou(preds[0], gt) for _, preds, gt in _pairs(predictions, gts)]
    return sum(vals) / len(vals) if vals else 0.0


@dataclass
class EvalReport:
    recall: dict[int, dict[float, float]]
    miou: float
    episodes: int
    extra: dict = field(default_factory=dict)

    def r(self, n: int, mu: float) -> float:
        return self.recall[n][mu]

    def to_dict(self) -> dict:
        return {
            "recall": {str(n): {f"{mu:g}": v for mu, v in row.items()} for n, row in self.recall.items()},
            "miou": self.miou,
            "episodes": self.episodes,
            **self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        recall = {int(n): {float(mu): v for mu, v in row.items()} for n, row in d["recall"].items()}
        extra = {k: v for k, v in d.items() if k not in ("recall", "miou", "episodes")}
        return cls(recall, d["miou"], d["episodes"], extra)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    def table(self, label: str = "model") -> str:
        """Aligned text table: R@1 at each threshold, then mIoU, in percent."""
        head = ["Method"] + [f"R@1,IoU={mu:g}" for mu in THRESHOLDS] + ["mIoU"]
        row = [label] + [f"{100 * self.recall[1][mu]:.2f}" for mu in THRESHOLDS] + [f"{100 * self.miou:.2f}"]
        widths = [max(len(h), len(c)) for h, c in zip(head, row)]
        fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                      for i, (c, w) in enumerate(zip(cells, widths)))
        rule = "-" * len(fmt(head))
        return "\n".join([rule, fmt(head), rule, fmt(row), rule])


def evaluate(predictions: Mapping[str, Sequence[Segment]], gts: Mapping[str, Segment],
             ns: Sequence[int] = RECALL_NS, thresholds: Sequence[float] = THRESHOLDS) -> EvalReport:
    recall = {n: {mu: recall_at(predictions, gts, n, mu) for mu in thresholds} for n in ns}
    return EvalReport(recall, mean_iou(predictions, gts), len(predictions))


def throughput(run: Callable[[], int], clock: Callable[[], float] = time.perf_counter) -> float:
    """Video-query pairs per second; ``run`` performs the forward passes and
    returns how many episodes it processed."""
    t0 = clock()
    n = run()
    elapsed = clock() - t0
    return n / elapsed if elapsed > 0 else float("inf")
