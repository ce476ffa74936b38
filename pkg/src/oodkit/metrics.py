"""Class-weighted open-set metrics over scored samples.

All metrics share one threshold sweep: the sorted set of observed scores
plus -inf (accept everything) and +inf (reject everything) sentinels, with
acceptance rule ``score >= threshold``.  At each threshold the sweep holds
the weighted ID true-positive rate, the weighted OOD false-positive rate,
and the confusion-aware ID error rate (rejected OR accepted-but-
misclassified).

FPR95 uses the step convention: the largest threshold whose TPR still
meets the target.  EER and EERc locate the crossing of the false-positive
curve with the respective ID error curve by linear interpolation between
the two adjacent sweep points that bracket the sign change; an exact
crossing at a point is returned directly.  All rates are invariant under
strictly increasing transformations of the scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scoring import ScoreMethod, ScoredSample, format_method


@dataclass(frozen=True)
class SweepPoint:
    """Operating rates at one acceptance threshold."""

    threshold: float
    tpr_id: float
    fpr_ood: float
    fnr_conf: float


@dataclass(frozen=True)
class WeightedMetricReport:
    """The four open-set metrics under one score method."""

    id_acc: float
    fpr95: float
    eer: float
    eerc: float
    n_id: int
    n_ood: int
    method: str


def with_unit_weights(samples: Sequence[ScoredSample]) -> list[ScoredSample]:
    """Copies of ``samples`` with weight 1 (for unweighted metric variants)."""
    from dataclasses import replace

    return [replace(s, weight=1.0) for s in samples]


def _correct_mask(
    id_samples: Sequence[ScoredSample], class_names: Sequence[str] | None
) -> np.ndarray:
    """Whether each ID sample's predicted class matches its true class."""
    if class_names is None:
        return np.ones(len(id_samples), dtype=bool)
    index = {name: i for i, name in enumerate(class_names)}
    out = np.empty(len(id_samples), dtype=bool)
    for j, s in enumerate(id_samples):
        if s.model_name not in index:
            raise ValueError(
                f"ID sample {s.sample_id!r}: model_name {s.model_name!r} "
                "is not an ID class"
            )
        out[j] = s.predicted_class == index[s.model_name]
    return out


def _split_groups(samples: Sequence[ScoredSample]):
    id_samples = [s for s in samples if not s.is_ood]
    ood_samples = [s for s in samples if s.is_ood]
    return id_samples, ood_samples


def _suffix_weight(scores: np.ndarray, weights: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Total weight of samples with score >= t, for each ascending threshold."""
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    csum = np.concatenate([[0.0], np.cumsum(weights[order])])
    below = np.searchsorted(s, thresholds, side="left")
    return csum[-1] - csum[below]


class _Sweep:
    """Shared rate curves over the ascending threshold grid."""

    def __init__(self, samples: Sequence[ScoredSample], class_names: Sequence[str] | None):
        id_samples, ood_samples = _split_groups(samples)
        if not id_samples or not ood_samples:
            raise ValueError(
                "metrics require at least one ID and one OOD sample "
                f"(got {len(id_samples)} ID, {len(ood_samples)} OOD)"
            )
        id_s = np.array([s.score for s in id_samples])
        id_w = np.array([s.weight for s in id_samples])
        ood_s = np.array([s.score for s in ood_samples])
        ood_w = np.array([s.weight for s in ood_samples])
        if not (np.all(np.isfinite(id_s)) and np.all(np.isfinite(ood_s))):
            raise ValueError("scores must be finite")
        correct = _correct_mask(id_samples, class_names)

        uniq = np.unique(np.concatenate([id_s, ood_s]))
        self.thresholds = np.concatenate([[-np.inf], uniq, [np.inf]])

        s_all = _suffix_weight(id_s, id_w, self.thresholds)
        s_corr = _suffix_weight(id_s[correct], id_w[correct], self.thresholds)
        s_ood = _suffix_weight(ood_s, ood_w, self.thresholds)
        w_id = s_all[0]
        self.tpr = s_all / w_id
        self.fnr = (w_id - s_all) / w_id
        # Clamp undoes at most one ulp of rounding: the real value of the
        # confusion-aware error rate can never sit below the plain one.
        self.fnr_conf = np.maximum((w_id - s_corr) / w_id, self.fnr)
        self.fpr = s_ood / s_ood[0]
        self.n_id = len(id_samples)
        self.n_ood = len(ood_samples)

    def points(self) -> list[SweepPoint]:
        return [
            SweepPoint(float(t), float(tp), float(fp), float(fc))
            for t, tp, fp, fc in zip(self.thresholds, self.tpr, self.fpr, self.fnr_conf)
        ]

    def fpr_at_tpr(self, tpr_target: float) -> float:
        if not 0.0 < tpr_target <= 1.0:
            raise ValueError(f"tpr_target must be in (0, 1], got {tpr_target}")
        # Largest threshold still meeting the TPR target; tpr is
        # non-increasing, so that is the last qualifying grid index.
        qualifying = np.nonzero(self.tpr >= tpr_target)[0]
        return float(self.fpr[qualifying[-1]])

    def crossing(self, id_error: np.ndarray) -> float:
        """Value where the FPR curve meets a non-decreasing ID error curve."""
        diff = self.fpr - id_error
        i = int(np.nonzero(diff >= 0.0)[0][-1])
        d0, d1 = diff[i], diff[i + 1]
        if d0 == 0.0:
            return float(self.fpr[i])
        t = d0 / (d0 - d1)
        return float(id_error[i] + t * (id_error[i + 1] - id_error[i]))


def sweep_table(
    samples: Sequence[ScoredSample], class_names: Sequence[str] | None = None
) -> list[SweepPoint]:
    """The full sweep as serializable rows (thresholds ascending).

    Without ``class_names`` the confusion term treats every prediction as
    correct, so ``fnr_conf`` reduces to the plain rejection rate.
    """
    return _Sweep(samples, class_names).points()


def id_accuracy(samples: Sequence[ScoredSample], class_names: Sequence[str]) -> float:
    """Weighted classification accuracy over the ID samples."""
    id_samples, _ = _split_groups(samples)
    if not id_samples:
        raise ValueError("id_accuracy: no ID samples")
    correct = _correct_mask(id_samples, class_names)
    w = np.array([s.weight for s in id_samples])
    return float(w[correct].sum() / w.sum())


def fpr95(samples: Sequence[ScoredSample], tpr_target: float = 0.95) -> float:
    """Weighted OOD false-positive rate at the ID TPR target (default 95%)."""
    return _Sweep(samples, None).fpr_at_tpr(tpr_target)


def eer(samples: Sequence[ScoredSample]) -> float:
    """Equal error rate: where weighted FPR_OOD meets weighted FNR_ID.

    The value is returned as computed by the sweep; no EER <= 0.5
    convention is imposed.
    """
    sw = _Sweep(samples, None)
    return sw.crossing(sw.fnr)


def eerc(samples: Sequence[ScoredSample], class_names: Sequence[str]) -> float:
    """EER with confusion: an accepted ID sample still counts as an error
    when it is misclassified (rejected samples count once)."""
    sw = _Sweep(samples, class_names)
    return sw.crossing(sw.fnr_conf)


def full_report(
    samples: Sequence[ScoredSample],
    method: ScoreMethod | str,
    class_names: Sequence[str],
) -> WeightedMetricReport:
    """All four metrics from one pass of the shared sweep machinery."""
    sw = _Sweep(samples, class_names)
    return WeightedMetricReport(
        id_acc=id_accuracy(samples, class_names),
        fpr95=sw.fpr_at_tpr(0.95),
        eer=sw.crossing(sw.fnr),
        eerc=sw.crossing(sw.fnr_conf),
        n_id=sw.n_id,
        n_ood=sw.n_ood,
        method=method if isinstance(method, str) else format_method(method),
    )


def report_to_dict(
    report: WeightedMetricReport, sweep: Sequence[SweepPoint] | None = None
) -> dict:
    """JSON-ready dict of a report, optionally with the sweep table rows."""
    out = {
        "method": report.method,
        "id_acc": report.id_acc,
        "fpr95": report.fpr95,
        "eer": report.eer,
        "eerc": report.eerc,
        "n_id": report.n_id,
        "n_ood": report.n_ood,
    }
    if sweep is not None:
        out["sweep_table"] = [
            {
                "threshold": p.threshold,
                "tpr_id": p.tpr_id,
                "fpr_ood": p.fpr_ood,
                "fnr_conf": p.fnr_conf,
            }
            for p in sweep
        ]
    return out
