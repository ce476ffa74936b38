"""Pure score functions mapping a logit vector to an ID-ness score.

Three methods are provided: maximum softmax probability (``msp``), the
log-sum-exp energy score (``energy``), and softmax energy (``sme``), which
applies the softmax to temperature-scaled logits before taking the energy.
Pushing the logits through the softmax first accentuates their skew, so the
top class dominates the sum even when the raw logits are bounded (e.g.
cosine similarities), and the normalization penalizes samples that match
many classes at once.

`id_score` puts all three on a uniform "higher = more ID-like" convention
by negating the two energies.  Everything here is deterministic and
pure; log-sum-exp and softmax use max-subtraction throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ClassWeights, LogitRecord

SCORE_KINDS = ("msp", "energy", "sme")


@dataclass(frozen=True)
class ScoreMethod:
    """A score function identifier plus its temperature.

    ``msp`` ignores the temperature (kept for a uniform interface); for
    ``energy`` and ``sme`` the logits are divided by it before
    exponentiation.
    """

    kind: str
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}; expected one of {SCORE_KINDS}")
        t = self.temperature
        if not (isinstance(t, (int, float)) and math.isfinite(t) and t > 0):
            raise ValueError(f"temperature must be a positive finite real, got {t!r}")


def format_method(method: ScoreMethod) -> str:
    """Render a method as ``name`` or ``name:T`` (parse/format round-trips)."""
    if method.temperature == 1.0:
        return method.kind
    return f"{method.kind}:{method.temperature!r}"


def parse_method(spec: str) -> ScoreMethod:
    """Parse the ``name[:T]`` grammar, e.g. ``energy:0.0625``."""
    name, sep, t = spec.partition(":")
    name = name.strip()
    if not sep:
        return ScoreMethod(name)
    try:
        temperature = float(t)
    except ValueError:
        raise ValueError(f"bad temperature in method spec {spec!r}") from None
    return ScoreMethod(name, temperature)


@dataclass(frozen=True)
class ScoredSample:
    """A sample's ID-ness score under one method, plus its predicted class."""

    sample_id: str
    score: float
    predicted_class: int
    is_ood: bool
    model_name: str
    weight: float


def _check_logits(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 2:
        raise ValueError(f"logits must be a vector of length >= 2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("logits must be finite")
    return x


def _check_temperature(t: float) -> float:
    if not (math.isfinite(t) and t > 0):
        raise ValueError(f"temperature must be a positive finite real, got {t!r}")
    return float(t)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax (max-subtraction)."""
    x = np.asarray(logits, dtype=np.float64)
    z = np.exp(x - x.max())
    return z / z.sum()


def msp(logits) -> float:
    """Maximum softmax probability; lies in (1/k, 1]."""
    x = _check_logits(logits)
    return float(softmax(x).max())


def energy(logits, temperature: float = 1.0) -> float:
    """Energy score ``-T * log(sum_i exp(logit_i / T))``; finite for finite input."""
    x = _check_logits(logits)
    t = _check_temperature(temperature)
    z = x / t
    m = z.max()
    return float(-t * (m + math.log(np.exp(z - m).sum())))


def sme(logits, temperature: float = 1.0) -> float:
    """Softmax energy ``-T * log(sum_i exp(sigma_i(logits / T)))``.

    Always strictly negative; for k classes the value lies in the closed
    interval ``[-T*log(e + k - 1), -T*log(k * e^(1/k))]`` (the softmax
    output is on the simplex, and the sum of its exponentials is maximal
    for a one-hot vector and minimal for the uniform one).
    """
    x = _check_logits(logits)
    t = _check_temperature(temperature)
    sigma = softmax(x / t)
    return float(-t * math.log(np.exp(sigma).sum()))


def sme_bounds(k: int, temperature: float = 1.0) -> tuple[float, float]:
    """Closed-form (lower, upper) bounds of `sme` for k classes."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    t = _check_temperature(temperature)
    lo = -t * math.log(math.e + k - 1)
    hi = -t * (math.log(k) + 1.0 / k)
    return lo, hi


def id_score(logits, method: ScoreMethod) -> float:
    """Uniform "higher = more ID-like" score under ``method``.

    ID samples typically exhibit greater-magnitude (more negative) energy,
    so both energies are negated; msp passes through.
    """
    if method.kind == "msp":
        return msp(logits)
    if method.kind == "energy":
        return -energy(logits, method.temperature)
    return -sme(logits, method.temperature)


def score_dataset(
    records: Sequence[LogitRecord], method: ScoreMethod, weights: ClassWeights
) -> list[ScoredSample]:
    """Score each record, preserving order.

    The predicted class is the argmax of the raw logits with lowest-index
    tie-break; the weight is looked up by model name.
    """
    out = []
    k: int | None = None
    for r in records:
        if not r.has_logits:
            raise ValueError(f"record {r.sample_id!r} has no logits to score")
        if k is None:
            k = len(r.logits)
        elif len(r.logits) != k:
            raise ValueError(
                f"record {r.sample_id!r}: mixed logit lengths ({len(r.logits)} vs {k})"
            )
        x = _check_logits(r.logits)
        out.append(
            ScoredSample(
                sample_id=r.sample_id,
                score=id_score(x, method),
                predicted_class=int(np.argmax(x)),
                is_ood=r.is_ood,
                model_name=r.model_name,
                weight=weights[r.model_name],
            )
        )
    return out


def top_k_logit_profile(
    records: Sequence[LogitRecord], k_top: int, weights: ClassWeights
) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Class-weighted mean of the descending-sorted logits per group.

    Returns ``(id_profile, ood_profile)``, each of length ``k_top`` and
    non-increasing, or ``None`` for a group with no records.
    """
    if k_top < 1:
        raise ValueError(f"k_top must be >= 1, got {k_top}")

    def group_profile(group: list[LogitRecord]) -> np.ndarray | None:
        if not group:
            return None
        k = len(group[0].logits)
        if k_top > k:
            raise ValueError(f"k_top={k_top} exceeds logit length {k}")
        total = 0.0
        acc = np.zeros(k_top)
        for r in group:
            x = _check_logits(r.logits)
            w = weights[r.model_name]
            acc += w * np.sort(x)[::-1][:k_top]
            total += w
        return acc / total

    id_profile = group_profile([r for r in records if not r.is_ood])
    ood_profile = group_profile([r for r in records if r.is_ood])
    return id_profile, ood_profile


SCORED_CSV_COLUMNS = ("sample_id", "model_name", "is_ood", "weight", "score", "predicted_class")


def write_scored_csv(samples: Sequence[ScoredSample], path):
    """Write scored samples as the flat interchange CSV."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SCORED_CSV_COLUMNS)
        for s in samples:
            writer.writerow(
                [
                    s.sample_id,
                    s.model_name,
                    "1" if s.is_ood else "0",
                    repr(s.weight),
                    repr(s.score),
                    s.predicted_class,
                ]
            )


def read_scored_csv(path) -> list[ScoredSample]:
    """Inverse of `write_scored_csv`."""
    import csv

    out = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != SCORED_CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected scored CSV header {header}")
        for row in reader:
            out.append(
                ScoredSample(
                    sample_id=row[0],
                    model_name=row[1],
                    is_ood=row[2] == "1",
                    weight=float(row[3]),
                    score=float(row[4]),
                    predicted_class=int(row[5]),
                )
            )
    return out
