"""Differentiable training objectives with analytic gradients.

Three losses: softmax cross-entropy, large-margin cosine loss (scaled
cosine logits with an additive margin on the target class), and a squared
hinge on the softmax-energy score that pushes ID scores below ``m_in`` and
auxiliary-OOD scores above ``m_out``.  Each returns its loss together with
analytic gradients; `numeric_gradient` and `run_gradient_checks` provide
the central finite-difference oracle used to verify them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .scoring import softmax


@dataclass(frozen=True)
class LmclHead:
    """Cosine classification head: row-normalized weights, scale and margin.

    Logits are cosines between the normalized embedding and normalized
    weight rows, so every raw cosine lies in [-1, 1]; the margin is
    subtracted from the target class's cosine only.
    """

    weights: np.ndarray  # (k, d)
    scale_s: float = 16.0
    margin_m: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2 or w.shape[0] < 2:
            raise ValueError(f"head weights must be (k>=2, d), got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("head weights must be finite")
        if np.any(np.linalg.norm(w, axis=1) == 0.0):
            raise ValueError("head weight rows must be non-zero")
        if not self.scale_s > 0:
            raise ValueError(f"scale_s must be positive, got {self.scale_s}")
        if not 0.0 <= self.margin_m < 1.0:
            raise ValueError(f"margin_m must be in [0, 1), got {self.margin_m}")


@dataclass(frozen=True)
class MarginSchedule:
    """Linear margin ramp: 0 at epoch 0, ``end_margin`` from ``ramp_epochs`` on."""

    start_margin: float = 0.0
    end_margin: float = 0.5
    ramp_epochs: int = 40

    def __post_init__(self):
        if self.ramp_epochs < 1:
            raise ValueError(f"ramp_epochs must be positive, got {self.ramp_epochs}")
        if self.end_margin < self.start_margin:
            raise ValueError("end_margin must be >= start_margin")

    def margin(self, epoch: int) -> float:
        frac = min(epoch / self.ramp_epochs, 1.0)
        return self.start_margin + (self.end_margin - self.start_margin) * frac


@dataclass(frozen=True)
class SmeLossConfig:
    """Hyper-parameters of the softmax-energy hinge loss.

    ``m_in`` and ``m_out`` may come in either order (a calibrated pair
    typically differs by a few 1e-5).  ``lam`` scales the hinge term in the
    combined objective; 0 disables it.
    """

    lam: float
    m_in: float
    m_out: float
    temperature: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lam must be a finite non-negative real, got {self.lam}")
        if not (math.isfinite(self.m_in) and math.isfinite(self.m_out)):
            raise ValueError("hinge margins must be finite")
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def ce_loss(logits, target: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy: ``(-log softmax_target, softmax - onehot)``."""
    x = np.asarray(logits, dtype=np.float64)
    k = x.shape[0]
    if not 0 <= target < k:
        raise IndexError(f"target {target} out of range for {k} classes")
    shifted = x - x.max()
    logz = math.log(np.exp(shifted).sum())
    loss = logz - shifted[target]
    grad = np.exp(shifted - logz)
    grad[target] -= 1.0
    return float(loss), grad


def _normalize(v: np.ndarray) -> tuple[np.ndarray, float]:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("zero embedding has no direction")
    return v / n, n


def lmcl_logits(embedding, head: LmclHead, target: int | None = None) -> np.ndarray:
    """Cosine logits of the head.

    With ``target`` given (training), returns ``s * (cos_i - m * [i == target])``.
    With ``target`` absent (inference), returns the raw cosines with no
    scale and no margin, so downstream scores are invariant to s and m.
    """
    e = np.asarray(embedding, dtype=np.float64)
    u, _ = _normalize(e)
    v = head.weights / np.linalg.norm(head.weights, axis=1, keepdims=True)
    cos = v @ u
    if target is None:
        return cos
    k = head.weights.shape[0]
    if not 0 <= target < k:
        raise IndexError(f"target {target} out of range for {k} classes")
    out = head.scale_s * cos
    out[target] = head.scale_s * (cos[target] - head.margin_m)
    return out


def cosine_backward(
    embedding, weights, grad_cos: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Chain a gradient wrt the cosines back through both normalizations.

    Returns ``(grad_embedding, grad_weights)`` for
    ``cos_i = (w_i / |w_i|) . (e / |e|)``.
    """
    e = np.asarray(embedding, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    u, e_norm = _normalize(e)
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    v = w / norms
    cos = v @ u
    g_u = grad_cos @ v
    grad_e = (g_u - (g_u @ u) * u) / e_norm
    grad_w = (grad_cos[:, None] * u[None, :] - (grad_cos * cos)[:, None] * v) / norms
    return grad_e, grad_w


def lmcl_loss(
    embedding,
    head: LmclHead,
    target: int,
    epoch: int,
    schedule: MarginSchedule,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy over the margin-scaled cosine logits at this epoch.

    Gradients flow through both normalizations (full quotient rule), so the
    loss is invariant to positive rescaling of the input embedding.
    Returns ``(loss, grad_embedding, grad_weights)``.
    """
    m = schedule.margin(epoch)
    h = replace(head, margin_m=m)
    z = lmcl_logits(embedding, h, target)
    loss, dz = ce_loss(z, target)
    grad_e, grad_w = cosine_backward(embedding, head.weights, head.scale_s * dz)
    return loss, grad_e, grad_w


def sme_value_and_grad(logits, temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Softmax energy of one logit vector and its gradient wrt the logits.

    With ``q_j = exp(sigma_j) / sum_l exp(sigma_l)`` the gradient is
    ``-sigma_j * (q_j - sum_l q_l sigma_l)``; it sums to zero, which is the
    shift invariance of the score.
    """
    x = np.asarray(logits, dtype=np.float64)
    t = float(temperature)
    sigma = softmax(x / t)
    expo = np.exp(sigma)
    total = expo.sum()
    value = -t * math.log(total)
    q = expo / total
    grad = -sigma * (q - float(q @ sigma))
    return float(value), grad


def sme_hinge_loss(
    in_logits: Sequence[np.ndarray],
    out_logits: Sequence[np.ndarray],
    cfg: SmeLossConfig,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Two-sided squared hinge on softmax energy.

    ``mean_in max(0, E(x) - m_in)^2 + mean_out max(0, m_out - E(x))^2``;
    an empty side contributes nothing.  The subgradient at a hinge kink is
    0.  Returns ``(loss, grads_in, grads_out)`` with one gradient per input
    vector.
    """
    if not in_logits and not out_logits:
        raise ValueError("sme_hinge_loss: both input lists are empty")
    loss = 0.0
    grads_in: list[np.ndarray] = []
    grads_out: list[np.ndarray] = []
    if in_logits:
        n = len(in_logits)
        for x in in_logits:
            value, dvalue = sme_value_and_grad(x, cfg.temperature)
            slack = value - cfg.m_in
            if slack > 0.0:
                loss += slack * slack / n
                grads_in.append((2.0 * slack / n) * dvalue)
            else:
                grads_in.append(np.zeros_like(dvalue))
    if out_logits:
        n = len(out_logits)
        for x in out_logits:
            value, dvalue = sme_value_and_grad(x, cfg.temperature)
            slack = cfg.m_out - value
            if slack > 0.0:
                loss += slack * slack / n
                grads_out.append((-2.0 * slack / n) * dvalue)
            else:
                grads_out.append(np.zeros_like(dvalue))
    return float(loss), grads_in, grads_out


def combined_objective(
    in_logits: Sequence[np.ndarray],
    in_targets: Sequence[int],
    out_logits: Sequence[np.ndarray],
    cfg: SmeLossConfig | None,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean classification loss plus ``lam`` times the hinge loss.

    Operates at the logit level; callers chain the per-vector gradients
    through their own model parameters.  With ``cfg`` absent or
    ``lam == 0`` this reduces to plain classification training, and an
    empty ``out_logits`` simply omits the OOD hinge term.
    """
    if not in_logits:
        raise ValueError("combined_objective: in_logits must be non-empty")
    if len(in_logits) != len(in_targets):
        raise ValueError("combined_objective: one target per ID logit vector required")
    n = len(in_logits)
    loss = 0.0
    grads_in = []
    for x, t in zip(in_logits, in_targets):
        li, gi = ce_loss(x, t)
        loss += li / n
        grads_in.append(gi / n)
    grads_out = [np.zeros_like(np.asarray(x, dtype=np.float64)) for x in out_logits]
    if cfg is not None and cfg.lam != 0.0:
        hinge, h_in, h_out = sme_hinge_loss(in_logits, out_logits, cfg)
        loss += cfg.lam * hinge
        for g, h in zip(grads_in, h_in):
            g += cfg.lam * h
        for g, h in zip(grads_out, h_out):
            g += cfg.lam * h
    return float(loss), grads_in, grads_out


def calibrate_hinge_margins(
    dev_in_sme: Sequence[float],
    dev_out_sme: Sequence[float],
    eps: float = 2e-5,
) -> tuple[float, float]:
    """Margins straddling the score where the two dev distributions intersect.

    Scans the observed values for the threshold t* that best balances the
    ID mass above it against the OOD mass below it (lowest value wins
    ties), and returns ``(t* - eps, t* + eps)``.
    """
    if not len(dev_in_sme) or not len(dev_out_sme):
        raise ValueError("calibrate_hinge_margins: both score lists must be non-empty")
    in_s = np.asarray(dev_in_sme, dtype=np.float64)
    out_s = np.asarray(dev_out_sme, dtype=np.float64)
    best_t = None
    best_gap = np.inf
    for t in np.unique(np.concatenate([in_s, out_s])):
        gap = abs(np.mean(in_s > t) - np.mean(out_s < t))
        if gap < best_gap:
            best_gap = gap
            best_t = float(t)
    return best_t - eps, best_t + eps


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.shape[0]):
        orig = xf[i]
        xf[i] = orig + step
        up = f(x)
        xf[i] = orig - step
        down = f(x)
        xf[i] = orig
        flat[i] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Worst-case relative disagreement, with small components compared
    against ``floor`` so that near-zero gradients are judged absolutely."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@dataclass(frozen=True)
class GradCheckResult:
    loss_name: str
    trials: int
    max_rel_err: float
    passed: bool
    first_failure: tuple[int, float] | None = None


# Margins from a calibrated 24-class configuration; with k=6 random logits
# they keep the ID hinge active and the OOD hinge inactive, exercising both
# branches away from the kink.
_CHECK_CFG = SmeLossConfig(lam=1.0, m_in=-3.21980, m_out=-3.21976, temperature=1.0)


def run_gradient_checks(
    trials: int = 100,
    seed: int = 0,
    step: float = 1e-5,
    tol: float = 1e-4,
    perturb: str | None = None,
) -> list[GradCheckResult]:
    """Verify every analytic gradient against central finite differences.

    Runs ``trials`` seeded random instances per loss and reports the worst
    relative error (absolute floor 1e-8 via the ``tol`` denominator floor).
    ``perturb`` names a loss whose analytic gradient is deliberately
    corrupted -- a negative control proving the harness can fail.
    """
    rng = np.random.default_rng(seed)
    results = []

    def check(name: str, instances) -> GradCheckResult:
        worst = 0.0
        first_failure = None
        for trial, (analytic, numeric) in enumerate(instances):
            if perturb == name:
                analytic = analytic.copy()
                analytic.reshape(-1)[0] += 1e-2
            err = max_relative_error(analytic, numeric)
            worst = max(worst, err)
            if err > tol and first_failure is None:
                first_failure = (trial, err)
        return GradCheckResult(name, trials, worst, first_failure is None, first_failure)

    def ce_instances():
        for _ in range(trials):
            k = int(rng.integers(2, 9))
            x = rng.normal(0.0, 3.0, k)
            t = int(rng.integers(0, k))
            _, grad = ce_loss(x, t)
            numeric = numeric_gradient(lambda v: ce_loss(v, t)[0], x, step)
            yield grad, numeric

    def lmcl_instances():
        d, k = 8, 5
        schedule = MarginSchedule()
        for _ in range(trials):
            head = LmclHead(weights=rng.normal(0.0, 1.0, (k, d)), scale_s=16.0)
            e = rng.normal(0.0, 1.0, d)
            t = int(rng.integers(0, k))
            epoch = int(rng.integers(0, 60))
            _, grad_e, grad_w = lmcl_loss(e, head, t, epoch, schedule)
            num_e = numeric_gradient(
                lambda v: lmcl_loss(v, head, t, epoch, schedule)[0], e, step
            )
            num_w = numeric_gradient(
                lambda w: lmcl_loss(e, replace(head, weights=w), t, epoch, schedule)[0],
                head.weights.copy(),
                step,
            )
            yield np.concatenate([grad_e, grad_w.reshape(-1)]), np.concatenate(
                [num_e, num_w.reshape(-1)]
            )

    def hinge_instances():
        k = 6
        for _ in range(trials):
            n_in = int(rng.integers(1, 4))
            n_out = int(rng.integers(1, 4))
            xs_in = [rng.normal(0.0, 2.0, k) for _ in range(n_in)]
            xs_out = [rng.normal(0.0, 2.0, k) for _ in range(n_out)]
            _, g_in, g_out = sme_hinge_loss(xs_in, xs_out, _CHECK_CFG)
            flat = np.concatenate(g_in + g_out)

            def loss_of(stacked: np.ndarray) -> float:
                vecs = [stacked[i * k : (i + 1) * k] for i in range(n_in + n_out)]
                return sme_hinge_loss(vecs[:n_in], vecs[n_in:], _CHECK_CFG)[0]

            stacked = np.concatenate(xs_in + xs_out)
            numeric = numeric_gradient(loss_of, stacked, step)
            yield flat, numeric

    results.append(check("ce_loss", ce_instances()))
    results.append(check("lmcl_loss", lmcl_instances()))
    results.append(check("sme_hinge_loss", hinge_instances()))
    return results
