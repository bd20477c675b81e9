"""Episodic validation with simulated clicks, and the metrics.

An episode fixes a class, s support images and q query images. For twenty
rounds, each unconverged support image receives one simulated click at the
center of its largest mislabeled region, one forward pass updates every
mask, and the foreground IoU of every image is recorded at its original
resolution. Query images never receive clicks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _exact_column_means(rows: np.ndarray) -> list:
    """Column means via exactly-rounded summation, so the result does not
    depend on row order."""
    n = rows.shape[0]
    return [math.fsum(rows[:, t]) / n for t in range(rows.shape[1])]

from . import clicks as ck
from .data import CorpusIndex, EpisodeSpec, FoldSpec
from .engine import MaskPredictor, QueryItem, SupportItem

CLICK_BUDGET = 20


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Foreground intersection-over-union.

    Both masks empty counts as 1.0; exactly one empty counts as 0.0.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def noc(iou_trace, threshold: float, cap: int = CLICK_BUDGET) -> int:
    """First 1-based click count whose IoU reaches the threshold, else the cap."""
    for t, value in enumerate(iou_trace, start=1):
        if value >= threshold:
            return t
    return cap


@dataclass
class EpisodeResult:
    spec: EpisodeSpec
    support_iou: np.ndarray  # (s, budget)
    query_iou: np.ndarray  # (q, budget)
    click_log: dict = field(default_factory=dict)  # image id -> list[Click]

    def to_record(self) -> dict:
        return {
            "class_chosen": self.spec.class_chosen,
            "support_ids": list(self.spec.support_ids),
            "query_ids": list(self.spec.query_ids),
            "seed": self.spec.seed,
            "support_iou": self.support_iou.tolist(),
            "query_iou": self.query_iou.tolist(),
            "click_log": {
                rid: [c.to_record() for c in clicks]
                for rid, clicks in self.click_log.items()
            },
        }

    @classmethod
    def from_record(cls, d: dict) -> "EpisodeResult":
        return cls(
            spec=EpisodeSpec(
                class_chosen=d["class_chosen"],
                support_ids=tuple(d["support_ids"]),
                query_ids=tuple(d["query_ids"]),
                seed=d["seed"],
            ),
            support_iou=np.asarray(d["support_iou"], dtype=float),
            query_iou=np.asarray(d["query_iou"], dtype=float),
            click_log={
                rid: [ck.Click.from_record(r) for r in records]
                for rid, records in d["click_log"].items()
            },
        )


def make_episode_spec(
    dataset: CorpusIndex, class_chosen: int, s: int, q: int, rng, seed: int = 0
) -> EpisodeSpec:
    pool = dataset.records_with_class(class_chosen)
    if len(pool) < s + q:
        raise ValueError(
            f"class {class_chosen} has {len(pool)} records, need {s + q}"
        )
    idx = rng.choice(len(pool), size=s + q, replace=False)
    ids = [pool[int(i)].id for i in idx]
    return EpisodeSpec(
        class_chosen=class_chosen,
        support_ids=tuple(ids[:s]),
        query_ids=tuple(ids[s:]),
        seed=seed,
    )


def run_episode(
    spec: EpisodeSpec,
    predictor: MaskPredictor,
    dataset: CorpusIndex,
    budget: int = CLICK_BUDGET,
) -> EpisodeResult:
    """Run one fully deterministic episode for a trained checkpoint."""
    cls = spec.class_chosen
    s_records = [dataset.get(rid) for rid in spec.support_ids]
    q_records = [dataset.get(rid) for rid in spec.query_ids]
    s_images = [dataset.load_image(r) for r in s_records]
    q_images = [dataset.load_image(r) for r in q_records]
    s_gt = [dataset.binarize_mask(r, cls) for r in s_records]
    q_gt = [dataset.binarize_mask(r, cls) for r in q_records]

    supports = [SupportItem(image=im) for im in s_images]
    queries = [QueryItem(image=im) for im in q_images]
    converged = [False] * len(supports)
    support_iou = np.zeros((len(supports), budget))
    query_iou = np.zeros((len(queries), budget))
    click_log = {rid: [] for rid in spec.support_ids + spec.query_ids}

    for t in range(budget):
        for i, item in enumerate(supports):
            if converged[i]:
                continue
            pred = item.prev_mask if item.prev_mask is not None \
                else np.zeros_like(s_gt[i])
            try:
                click = ck.sample_validation_click(s_gt[i], pred, order=len(item.clicks))
            except ck.Converged:
                converged[i] = True
                continue
            item.clicks.append(click)
            click_log[spec.support_ids[i]].append(click)

        s_masks, q_masks = predictor.predict(supports, queries)
        for i in range(len(supports)):
            if converged[i]:
                support_iou[i, t] = support_iou[i, t - 1] if t > 0 else 1.0
                continue
            supports[i].prev_mask = s_masks[i]
            support_iou[i, t] = iou(s_masks[i], s_gt[i])
        for j in range(len(queries)):
            queries[j].prev_mask = q_masks[j]
            query_iou[j, t] = iou(q_masks[j], q_gt[j])
    return EpisodeResult(
        spec=spec, support_iou=support_iou, query_iou=query_iou, click_log=click_log
    )


@dataclass
class MetricReport:
    fold: int
    shots: int
    queries: int
    budget: int
    episodes_per_class: dict  # class id -> episode count
    class_miou_curve: dict  # class id -> list[budget] mean query IoU
    mean_class_miou_curve: list  # mean over classes, per click count
    interactive_miou_curve: list  # mean support IoU per click count
    noc85: float
    noc90: float
    class_miou: float  # mean over classes at the full budget

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "shots": self.shots,
            "queries": self.queries,
            "budget": self.budget,
            "episodes_per_class": {str(k): v for k, v in self.episodes_per_class.items()},
            "class_miou_curve": {str(k): v for k, v in self.class_miou_curve.items()},
            "mean_class_miou_curve": self.mean_class_miou_curve,
            "interactive_miou_curve": self.interactive_miou_curve,
            "noc85": self.noc85,
            "noc90": self.noc90,
            "class_miou": self.class_miou,
        }


def aggregate_report(
    results: list[EpisodeResult], fold: int, shots: int, queries: int,
    budget: int = CLICK_BUDGET,
) -> MetricReport:
    """Reduce stored episode results into the validation report.

    Class mIoU averages per-class mean query IoU over the classes present;
    the interactive curve and NoC averages pool every support trace
    regardless of class. The reduction is invariant to episode order.
    """
    if not results:
        raise ValueError("no episode results to aggregate")
    by_class: dict[int, list[np.ndarray]] = {}
    support_traces = []
    for r in results:
        by_class.setdefault(r.spec.class_chosen, []).append(r.query_iou)
        support_traces.extend(np.asarray(r.support_iou))
    class_curves = {
        c: _exact_column_means(np.concatenate(chunks, axis=0))
        for c, chunks in sorted(by_class.items())
    }
    mean_curve = _exact_column_means(np.array([class_curves[c] for c in sorted(class_curves)]))
    traces = np.stack(support_traces)
    return MetricReport(
        fold=fold,
        shots=shots,
        queries=queries,
        budget=budget,
        episodes_per_class={c: len(v) for c, v in sorted(by_class.items())},
        class_miou_curve=class_curves,
        mean_class_miou_curve=mean_curve,
        interactive_miou_curve=_exact_column_means(traces),
        noc85=math.fsum(noc(tr, 0.85, budget) for tr in traces) / len(traces),
        noc90=math.fsum(noc(tr, 0.90, budget) for tr in traces) / len(traces),
        class_miou=float(mean_curve[-1]),
    )


def run_validation(
    predictor: MaskPredictor,
    dataset: CorpusIndex,
    fold: FoldSpec,
    s: int,
    q: int,
    episodes_per_class: int = 100,
    seed: int = 0,
    budget: int = CLICK_BUDGET,
    out_dir=None,
) -> tuple[MetricReport, list[EpisodeResult]]:
    """Episodic validation over every validation class of the fold.

    Episodes resample supports and queries independently with a random
    stream derived from (seed, class, episode index), so any subset can be
    reproduced in isolation.
    """
    results = []
    for cls in fold.val_classes:
        if not dataset.records_with_class(cls):
            continue  # class not available in this corpus
        for e in range(episodes_per_class):
            rng = np.random.default_rng([seed, cls, e])
            spec = make_episode_spec(dataset, cls, s, q, rng, seed=seed)
            results.append(run_episode(spec, predictor, dataset, budget=budget))
    report = aggregate_report(results, fold.fold, s, q, budget)
    if out_dir is not None:
        write_outputs(Path(out_dir), report, results)
    return report, results


def write_outputs(out_dir: Path, report: MetricReport, results: list[EpisodeResult]):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    with (out_dir / "episodes.jsonl").open("w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_record()) + "\n")
    with (out_dir / "curves.csv").open("w") as fh:
        fh.write("clicks,mean_class_miou_query,interactive_miou_support\n")
        for t in range(report.budget):
            fh.write(
                f"{t + 1},{report.mean_class_miou_curve[t]:.6f},"
                f"{report.interactive_miou_curve[t]:.6f}\n"
            )
    for r in results:
        for rid, history in r.click_log.items():
            if history:
                ck.save_click_log(
                    out_dir / "click_logs" /
                    f"cls{r.spec.class_chosen}_seed{r.spec.seed}_{rid}.jsonl",
                    history,
                )


def load_episode_results(path) -> list[EpisodeResult]:
    return [
        EpisodeResult.from_record(json.loads(line))
        for line in Path(path).read_text().splitlines()
        if line.strip()
    ]
