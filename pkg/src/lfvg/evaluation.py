"""Metrics, split evaluation and the ablation harness.

Recall counts predictions whose temporal IoU is strictly greater than the
threshold; ties at the threshold do not count. All reported values are
percentages in [0, 100].
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .data import Dataset, Interval, video_fingerprint
from .errors import EvaluationError, InvalidInputError
from .rng import derive_rng
from .training import TrainConfig, TrainResult, config_hash, train

THRESHOLDS = (0.3, 0.5, 0.7)


def _as_pair(interval) -> tuple[float, float]:
    if isinstance(interval, Interval):
        return interval.start, interval.end
    start, end = float(interval[0]), float(interval[1])
    return start, end


def tiou(pred, gt) -> float:
    """Temporal intersection over union of two (start, end) intervals."""
    ps, pe = _as_pair(pred)
    gs, ge = _as_pair(gt)
    for name, (s, e) in (("pred", (ps, pe)), ("gt", (gs, ge))):
        if not (math.isfinite(s) and math.isfinite(e)) or s > e:
            raise InvalidInputError(f"{name} interval ({s}, {e}) is invalid")
    inter = min(pe, ge) - max(ps, gs)
    if inter <= 0:
        # disjoint or touching: the union is the two lengths side by side
        union = (pe - ps) + (ge - gs)
        inter = max(inter, 0.0)
    else:
        union = max(pe, ge) - min(ps, gs)
    return inter / union if union > 0 else 0.0


def recall_at(tious, threshold: float) -> float:
    """Percentage of tIoU values strictly above ``threshold``."""
    if not 0 < threshold < 1:
        raise InvalidInputError(f"threshold must be in (0, 1), got {threshold}")
    values = list(tious)
    if not values:
        raise InvalidInputError("recall_at needs at least one tIoU value")
    return 100.0 * sum(1 for v in values if v > threshold) / len(values)


def mean_iou(tious) -> float:
    values = list(tious)
    if not values:
        raise InvalidInputError("mean_iou needs at least one tIoU value")
    return 100.0 * float(np.mean(values))


@dataclass
class EvalResult:
    recall_at: dict
    miou: float
    n_queries: int

    def to_dict(self):
        return {
            "recall": {f"{t:.1f}": self.recall_at[t] for t in sorted(self.recall_at)},
            "miou": self.miou,
            "n_queries": self.n_queries,
        }


def evaluate(model, dataset: Dataset) -> EvalResult:
    """Forward every query against its video and aggregate the metrics.

    Queries of the same video share one encoding pass and are fused as a
    batch; the result is deterministic and identical in semantics to
    per-query forwards.
    """
    if not dataset.queries:
        raise InvalidInputError("evaluation needs a dataset with queries")
    by_id = {v.id: v for v in dataset.videos}
    missing = sorted({q.video_id for q in dataset.queries if q.video_id not in by_id})
    if missing:
        raise EvaluationError(f"queries reference missing videos: {missing}")

    grouped: dict[str, list] = {}
    for i, q in enumerate(dataset.queries):
        grouped.setdefault(q.video_id, []).append(i)

    scores = [0.0] * len(dataset.queries)
    with torch.no_grad():
        for video_id, indices in grouped.items():
            video = by_id[video_id]
            features = torch.from_numpy(np.asarray(video.segment_features, dtype=np.float64))
            queries = torch.from_numpy(
                np.stack([dataset.queries[i].feature for i in indices]).astype(np.float64)
            )
            if hasattr(model, "encode_video"):
                encoded = model.encode_video(features)
                encoded = encoded.unsqueeze(0).expand(len(indices), *encoded.shape)
                fused, attention = model.fuse(encoded, queries)
                predictions = model.predict_interval(fused, attention)
            else:  # plain forward-only test doubles
                predictions = torch.stack(
                    [model.forward(features, queries[j]).prediction for j in range(len(indices))]
                )
            for j, i in enumerate(indices):
                pred = predictions[j].detach().numpy()
                scores[i] = tiou((float(pred[0]), float(pred[1])), dataset.queries[i].gt_interval)
    return EvalResult(
        recall_at={t: recall_at(scores, t) for t in THRESHOLDS},
        miou=mean_iou(scores),
        n_queries=len(scores),
    )


def random_prediction_baseline(dataset: Dataset, draws: int = 10000, seed: int = 0) -> float:
    """Monte Carlo mIoU of uniformly random interval predictions.

    Cycles through the query split, scoring each ground-truth interval
    against a sorted pair of uniform draws. Returns a percentage.
    """
    if not dataset.queries:
        raise InvalidInputError("baseline needs a dataset with queries")
    rng = derive_rng(seed, "random-baseline")
    scores = []
    for i in range(draws):
        q = dataset.queries[i % len(dataset.queries)]
        a, b = sorted(rng.uniform(size=2))
        scores.append(tiou((a, b), q.gt_interval))
    return mean_iou(scores)


# ---------------------------------------------------------------------------
# ablation harness


SUITES = ("losses", "selection", "n_frames")

_VARIED_FIELDS = {
    "losses": ("att_loss_weight", "reg_loss_weight"),
    "selection": ("selection",),
    "n_frames": ("candidates",),
}


@dataclass
class VariantResult:
    name: str
    seeds: list
    results: list
    miou_mean: float
    miou_sd: float

    def to_dict(self):
        return {
            "name": self.name,
            "seeds": list(self.seeds),
            "results": [r.to_dict() for r in self.results],
            "miou_mean": self.miou_mean,
            "miou_sd": self.miou_sd,
        }


@dataclass
class AblationReport:
    suite: str
    variants: list
    orderings: dict
    shared_config_hash: str

    def to_dict(self):
        return {
            "suite": self.suite,
            "variants": [v.to_dict() for v in self.variants],
            "orderings": dict(self.orderings),
            "shared_config_hash": self.shared_config_hash,
        }

    def variant(self, name: str) -> VariantResult:
        for v in self.variants:
            if v.name == name:
                return v
        raise KeyError(name)


def _suite_variants(suite: str, base: TrainConfig):
    if suite == "losses":
        return [
            ("both", replace(base)),
            ("reg_only", replace(base, att_loss_weight=0.0)),
            ("att_only", replace(base, reg_loss_weight=0.0)),
        ]
    if suite == "selection":
        return [
            ("st", replace(base, selection="st")),
            ("random", replace(base, selection="random")),
        ]
    if suite == "n_frames":
        return [(f"n{n}", replace(base, candidates=n)) for n in (1, 2, 4, 8, 9, 16)]
    raise InvalidInputError(f"unknown ablation suite {suite!r}; pick one of {SUITES}")


def train_and_evaluate(dataset: Dataset, cfg: TrainConfig, cache: dict | None = None):
    """Train with ``cfg`` and evaluate on the dataset's query split.

    ``cache`` maps (video fingerprint, config hash) to a finished
    TrainResult, so suites whose variants coincide, and datasets differing
    only in their query split, share training runs. Evaluation always runs
    against the dataset passed in.
    """
    result: TrainResult | None = None
    key = None
    if cache is not None:
        key = (video_fingerprint(dataset), config_hash(cfg))
        result = cache.get(key)
    if result is None:
        result = train(dataset, cfg)
        if cache is not None:
            cache[key] = result
    return evaluate(result.grounding, dataset), result


def run_ablation(
    suite: str,
    dataset: Dataset,
    base_cfg: TrainConfig,
    seeds,
    cache: dict | None = None,
) -> AblationReport:
    """Train and evaluate every variant of ``suite`` under identical seeds."""
    seeds = list(seeds)
    if len(seeds) < 3:
        raise InvalidInputError("ablations need at least 3 seeds")
    variants = _suite_variants(suite, base_cfg)

    # apart from the varied fields (and the seed), all variants must share
    # the exact same configuration
    varied = _VARIED_FIELDS[suite] + ("seed",)
    hashes = {config_hash(cfg, exclude=varied) for _, cfg in variants}
    if len(hashes) != 1:
        raise InvalidInputError("ablation variants diverge beyond the varied field")
    shared_hash = next(iter(hashes))

    results = []
    for name, cfg in variants:
        per_seed = []
        for seed in seeds:
            eval_result, _ = train_and_evaluate(dataset, replace(cfg, seed=seed), cache)
            per_seed.append(eval_result)
        mious = [r.miou for r in per_seed]
        results.append(
            VariantResult(
                name=name,
                seeds=seeds,
                results=per_seed,
                miou_mean=float(np.mean(mious)),
                miou_sd=float(np.std(mious)),
            )
        )

    by_name = {v.name: v.miou_mean for v in results}
    if suite == "losses":
        orderings = {
            "both>reg_only": by_name["both"] > by_name["reg_only"],
            "reg_only>att_only": by_name["reg_only"] > by_name["att_only"],
        }
    elif suite == "selection":
        orderings = {"st>random": by_name["st"] > by_name["random"]}
    else:
        orderings = {}
    return AblationReport(suite, results, orderings, shared_hash)


def format_eval_table(result: EvalResult) -> str:
    """Plain-text metrics table."""
    lines = [f"{'metric':<12}{'value':>8}"]
    for t in sorted(result.recall_at):
        lines.append(f"R@{t:<10}{result.recall_at[t]:>8.2f}")
    lines.append(f"{'mIoU':<12}{result.miou:>8.2f}")
    lines.append(f"{'queries':<12}{result.n_queries:>8d}")
    return "\n".join(lines)


def format_ablation_table(report: AblationReport) -> str:
    lines = [f"suite: {report.suite}"]
    lines.append(f"{'variant':<12}{'mIoU':>8}{'sd':>8}{'R@0.3':>8}{'R@0.5':>8}{'R@0.7':>8}")
    for v in report.variants:
        r = {t: float(np.mean([x.recall_at[t] for x in v.results])) for t in THRESHOLDS}
        lines.append(
            f"{v.name:<12}{v.miou_mean:>8.2f}{v.miou_sd:>8.2f}"
            f"{r[0.3]:>8.2f}{r[0.5]:>8.2f}{r[0.7]:>8.2f}"
        )
    for name, ok in report.orderings.items():
        lines.append(f"ordering {name}: {'holds' if ok else 'VIOLATED'}")
    return "\n".join(lines)


def report_json(report: AblationReport) -> str:
    return json.dumps(report.to_dict(), indent=1, sort_keys=True)


def sweep_csv(report: AblationReport) -> str:
    """CSV of the candidate-count sweep (one row per N), for plotting."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["n_candidates", "miou_mean", "miou_sd", "recall_0.3", "recall_0.5", "recall_0.7"])
    for v in report.variants:
        n = int(v.name.lstrip("n")) if v.name.startswith("n") else v.name
        r3 = float(np.mean([r.recall_at[0.3] for r in v.results]))
        r5 = float(np.mean([r.recall_at[0.5] for r in v.results]))
        r7 = float(np.mean([r.recall_at[0.7] for r in v.results]))
        writer.writerow([n, v.miou_mean, v.miou_sd, r3, r5, r7])
    return buf.getvalue()
