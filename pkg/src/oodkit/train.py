"""Desk-scale training loop for a linear-embedding open-set classifier.

The model is a linear projection into an embedding space with either a
plain linear head (unbounded logits) or a cosine head (bounded logits in
[-1, 1] at inference).  Training is plain mini-batch SGD with a cosine
annealing learning rate, optional weight decay, a linear margin ramp for
the cosine head, and an optional softmax-energy hinge term fed by
auxiliary OOD features.

Runs are bit-reproducible: shuffling, initialization and OOD batch
sampling each use their own child stream of ``SeedSequence(cfg.seed)``,
and gradients are reduced sequentially.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LogitRecord, compute_class_weights, split_view
from .losses import (
    LmclHead,
    MarginSchedule,
    SmeLossConfig,
    ce_loss,
    cosine_backward,
    lmcl_loss,
    sme_hinge_loss,
)
from .metrics import WeightedMetricReport, eerc, fpr95, full_report
from .scoring import ScoreMethod, score_dataset
from .synth import SynthDataset

CHECKPOINT_METRICS = ("eerc_sme", "eerc_energy", "eerc_msp")
HEAD_KINDS = ("plain", "lmcl")


class TrainingDivergedError(RuntimeError):
    """Raised when an epoch produces a non-finite loss."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class ToyModel:
    """Linear projection plus a plain or cosine classification head."""

    projection: np.ndarray  # (dim, d_embed)
    proj_bias: np.ndarray  # (d_embed,)
    head_kind: str
    head_weights: np.ndarray  # (k, d_embed)
    head_bias: np.ndarray | None = None  # (k,), plain head only
    scale_s: float = 16.0

    def embed(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.projection + self.proj_bias

    def inference_logits(self, x: np.ndarray) -> np.ndarray:
        """Per-sample logits used for scoring: raw cosines for the cosine
        head (no scale, no margin), plain linear logits otherwise."""
        emb = self.embed(x)
        if self.head_kind == "plain":
            return emb @ self.head_weights.T + self.head_bias
        u = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        v = self.head_weights / np.linalg.norm(self.head_weights, axis=1, keepdims=True)
        return u @ v.T

    def copy(self) -> "ToyModel":
        return ToyModel(
            projection=self.projection.copy(),
            proj_bias=self.proj_bias.copy(),
            head_kind=self.head_kind,
            head_weights=self.head_weights.copy(),
            head_bias=None if self.head_bias is None else self.head_bias.copy(),
            scale_s=self.scale_s,
        )


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule, architecture and hinge-loss settings."""

    epochs: int = 50
    batch_size: int = 40
    lr: float = 1e-3
    lr_floor: float = 0.0
    weight_decay: float = 1e-4
    margin: MarginSchedule = field(default_factory=MarginSchedule)
    sme_loss: SmeLossConfig | None = None
    ood_batch_ratio: float = 1.0
    seed: int = 0
    checkpoint_metric: str = "eerc_sme"
    head: str = "lmcl"
    d_embed: int = 16
    scale_s: float = 16.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.checkpoint_metric not in CHECKPOINT_METRICS:
            raise ValueError(
                f"unknown checkpoint_metric {self.checkpoint_metric!r}; "
                f"expected one of {CHECKPOINT_METRICS}"
            )
        if self.head not in HEAD_KINDS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEAD_KINDS}")
        if not self.ood_batch_ratio > 0:
            raise ValueError("ood_batch_ratio must be positive")

    def to_dict(self) -> dict:
        d = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lr_floor": self.lr_floor,
            "weight_decay": self.weight_decay,
            "margin": {
                "start_margin": self.margin.start_margin,
                "end_margin": self.margin.end_margin,
                "ramp_epochs": self.margin.ramp_epochs,
            },
            "sme_loss": None,
            "ood_batch_ratio": self.ood_batch_ratio,
            "seed": self.seed,
            "checkpoint_metric": self.checkpoint_metric,
            "head": self.head,
            "d_embed": self.d_embed,
            "scale_s": self.scale_s,
        }
        if self.sme_loss is not None:
            d["sme_loss"] = {
                "lam": self.sme_loss.lam,
                "m_in": self.sme_loss.m_in,
                "m_out": self.sme_loss.m_out,
                "temperature": self.sme_loss.temperature,
            }
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "margin" in d and isinstance(d["margin"], dict):
            d["margin"] = MarginSchedule(**d["margin"])
        if d.get("sme_loss") is not None and isinstance(d["sme_loss"], dict):
            d["sme_loss"] = SmeLossConfig(**d["sme_loss"])
        return TrainConfig(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    cls_loss: float
    sme_loss: float
    dev_eerc: float
    dev_fpr95: float
    margin: float
    lr: float


@dataclass
class TrainLog:
    """Per-epoch training records plus the selected checkpoint epoch."""

    entries: list[EpochRecord]
    selected_epoch: int

    def to_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(json.dumps(vars(e)) + "\n")
            f.write(json.dumps({"selected_epoch": self.selected_epoch}) + "\n")

    @staticmethod
    def from_jsonl(path) -> "TrainLog":
        entries = []
        selected = -1
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            obj = json.loads(line)
            if "selected_epoch" in obj:
                selected = obj["selected_epoch"]
            else:
                entries.append(EpochRecord(**obj))
        return TrainLog(entries=entries, selected_epoch=selected)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``cfg.lr`` at epoch 0 to ``cfg.lr_floor`` at the
    final epoch; monotone non-increasing."""
    if cfg.epochs == 1:
        return cfg.lr
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + math.cos(math.pi * frac))


def _checkpoint_method(cfg: TrainConfig) -> ScoreMethod:
    kind = cfg.checkpoint_metric.removeprefix("eerc_")
    return ScoreMethod(kind, 1.0)


def _records_with_logits(
    records: Sequence[LogitRecord], logits: np.ndarray
) -> list[LogitRecord]:
    return [replace(r, logits=tuple(row)) for r, row in zip(records, logits)]


def _dev_metrics(model: ToyModel, data: SynthDataset, method: ScoreMethod):
    dev = split_view(data.dataset, "dev", "all")
    logits = model.inference_logits(data.features_for(dev))
    scored = score_dataset(_records_with_logits(dev, logits), method, compute_class_weights(dev))
    return (
        eerc(scored, data.dataset.class_names),
        fpr95(scored),
    )


def _init_model(
    cfg: TrainConfig, x_train: np.ndarray, k: int, rng: np.random.Generator
) -> ToyModel:
    # Scale the projection so initial embeddings have unit-ish norm; the
    # cosine gradients shrink with the embedding norm, so this keeps the
    # fixed learning rate effective regardless of the feature scale.
    dim = x_train.shape[1]
    x_rms = float(np.sqrt(np.mean(x_train**2) * dim))
    projection = rng.normal(0.0, 1.0 / (math.sqrt(cfg.d_embed) * max(x_rms, 1e-12)), (dim, cfg.d_embed))
    head_weights = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_embed), (k, cfg.d_embed))
    return ToyModel(
        projection=projection,
        proj_bias=np.zeros(cfg.d_embed),
        head_kind=cfg.head,
        head_weights=head_weights,
        head_bias=np.zeros(k) if cfg.head == "plain" else None,
        scale_s=cfg.scale_s,
    )


def train(
    data: SynthDataset, aux_ood: np.ndarray | None, cfg: TrainConfig
) -> tuple[ToyModel, TrainLog]:
    """Mini-batch SGD on the configured objective; returns the parameters
    from the epoch with the best dev metric.

    ``aux_ood`` is a feature matrix of auxiliary OOD samples, required when
    ``cfg.sme_loss`` is set; each step draws
    ``ceil(ood_batch_ratio * batch_size)`` of them with replacement for the
    OOD hinge term.  Fully deterministic under ``cfg.seed``.
    """
    if cfg.sme_loss is not None and aux_ood is None:
        raise ValueError("cfg.sme_loss is set but no auxiliary OOD features were given")
    train_records = split_view(data.dataset, "train", "id_only")
    if not train_records:
        raise ValueError("dataset has no train split")
    class_names = data.dataset.class_names
    x_train = data.features_for(train_records)
    y_train = np.array([data.dataset.class_index(r.model_name) for r in train_records])
    n_train, dim = x_train.shape
    k = len(class_names)

    init_ss, shuffle_ss, ood_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng = np.random.Generator(np.random.PCG64(init_ss))
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_ss))
    ood_rng = np.random.Generator(np.random.PCG64(ood_ss))

    model = _init_model(cfg, x_train, k, init_rng)
    method = _checkpoint_method(cfg)
    hinge_on = cfg.sme_loss is not None and cfg.sme_loss.lam != 0.0
    n_ood_batch = math.ceil(cfg.ood_batch_ratio * cfg.batch_size)

    entries: list[EpochRecord] = []
    best_metric = math.inf
    best_epoch = -1
    best_params: ToyModel | None = None

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        margin_e = cfg.margin.margin(epoch)
        perm = shuffle_rng.permutation(n_train)
        cls_total = 0.0
        hinge_total = 0.0
        n_steps = 0
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            b = len(idx)
            emb = model.embed(xb)
            grad_emb = np.zeros_like(emb)
            grad_head = np.zeros_like(model.head_weights)
            grad_head_bias = (
                np.zeros_like(model.head_bias) if model.head_bias is not None else None
            )

            if cfg.head == "lmcl":
                head = LmclHead(model.head_weights, model.scale_s, 0.0)
                for i in range(b):
                    loss_i, g_e, g_w = lmcl_loss(emb[i], head, int(yb[i]), epoch, cfg.margin)
                    cls_total += loss_i
                    grad_emb[i] += g_e / b
                    grad_head += g_w / b
            else:
                z = emb @ model.head_weights.T + model.head_bias
                for i in range(b):
                    loss_i, dz = ce_loss(z[i], int(yb[i]))
                    cls_total += loss_i
                    dz = dz / b
                    grad_head += np.outer(dz, emb[i])
                    grad_head_bias += dz
                    grad_emb[i] += model.head_weights.T @ dz

            grad_proj = np.zeros_like(model.projection)
            grad_proj_bias = np.zeros_like(model.proj_bias)

            if hinge_on:
                ood_idx = ood_rng.integers(0, aux_ood.shape[0], size=n_ood_batch)
                xo = aux_ood[ood_idx]
                emb_o = model.embed(xo)
                in_logits = list(model.inference_logits(xb))
                out_logits = list(model.inference_logits(xo))
                hinge, g_in, g_out = sme_hinge_loss(in_logits, out_logits, cfg.sme_loss)
                hinge_total += hinge
                lam = cfg.sme_loss.lam
                grad_emb_o = np.zeros_like(emb_o)
                if cfg.head == "lmcl":
                    for i in range(b):
                        g_e, g_w = cosine_backward(emb[i], model.head_weights, lam * g_in[i])
                        grad_emb[i] += g_e
                        grad_head += g_w
                    for j in range(n_ood_batch):
                        g_e, g_w = cosine_backward(emb_o[j], model.head_weights, lam * g_out[j])
                        grad_emb_o[j] += g_e
                        grad_head += g_w
                else:
                    for i in range(b):
                        dz = lam * g_in[i]
                        grad_head += np.outer(dz, emb[i])
                        grad_head_bias += dz
                        grad_emb[i] += model.head_weights.T @ dz
                    for j in range(n_ood_batch):
                        dz = lam * g_out[j]
                        grad_head += np.outer(dz, emb_o[j])
                        grad_head_bias += dz
                        grad_emb_o[j] += model.head_weights.T @ dz
                grad_proj += xo.T @ grad_emb_o
                grad_proj_bias += grad_emb_o.sum(axis=0)

            grad_proj += xb.T @ grad_emb
            grad_proj_bias += grad_emb.sum(axis=0)

            if cfg.weight_decay:
                grad_proj += cfg.weight_decay * model.projection
                grad_head += cfg.weight_decay * model.head_weights

            model.projection -= lr * grad_proj
            model.proj_bias -= lr * grad_proj_bias
            model.head_weights -= lr * grad_head
            if grad_head_bias is not None:
                model.head_bias -= lr * grad_head_bias
            n_steps += 1

        cls_loss = cls_total / n_train
        sme_loss = hinge_total / n_steps if hinge_on else 0.0
        if not (math.isfinite(cls_loss) and math.isfinite(sme_loss)):
            raise TrainingDivergedError(epoch)
        dev_eerc, dev_fpr95 = _dev_metrics(model, data, method)
        entries.append(
            EpochRecord(epoch, cls_loss, sme_loss, dev_eerc, dev_fpr95, margin_e, lr)
        )
        if dev_eerc < best_metric:
            best_metric = dev_eerc
            best_epoch = epoch
            best_params = model.copy()

    return best_params, TrainLog(entries=entries, selected_epoch=best_epoch)


def evaluate(
    model: ToyModel, data: SynthDataset, methods: Sequence[ScoreMethod], split: str = "eval"
) -> list[WeightedMetricReport]:
    """One weighted report per score method over the given split."""
    records = split_view(data.dataset, split, "all")
    if not records:
        raise ValueError(f"dataset has no {split} split")
    logits = model.inference_logits(data.features_for(records))
    with_logits = _records_with_logits(records, logits)
    weights = compute_class_weights(records)
    return [
        full_report(score_dataset(with_logits, m, weights), m, data.dataset.class_names)
        for m in methods
    ]


def sweep_temperature(
    model: ToyModel, data: SynthDataset, kind: str, grid: Sequence[float]
) -> tuple[float, list[tuple[float, float]]]:
    """Dev EERc for each temperature in the grid.

    Returns the best temperature (argmin, lowest temperature wins ties)
    and the full ``(T, dev_eerc)`` table in ascending-T order.
    """
    if not grid:
        raise ValueError("sweep_temperature: empty grid")
    dev = split_view(data.dataset, "dev", "all")
    if not dev:
        raise ValueError("sweep_temperature: dataset has no dev split")
    logits = model.inference_logits(data.features_for(dev))
    with_logits = _records_with_logits(dev, logits)
    weights = compute_class_weights(dev)
    table = []
    best_t = None
    best_val = math.inf
    for t in sorted(grid):
        value = eerc(
            score_dataset(with_logits, ScoreMethod(kind, t), weights),
            data.dataset.class_names,
        )
        table.append((float(t), value))
        if value < best_val:
            best_val = value
            best_t = float(t)
    return best_t, table


MODEL_MAGIC = "oodkit-model-v1"


def save_model(model: ToyModel, path):
    """Write parameters as a JSON header line plus little-endian float64 data."""
    arrays = [("projection", model.projection), ("proj_bias", model.proj_bias), ("head_weights", model.head_weights)]
    if model.head_bias is not None:
        arrays.append(("head_bias", model.head_bias))
    header = {
        "format": MODEL_MAGIC,
        "head_kind": model.head_kind,
        "scale_s": model.scale_s,
        "endianness": "little",
        "dtype": "float64",
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> ToyModel:
    """Inverse of `save_model`."""
    blob = Path(path).read_bytes()
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl].decode("utf-8"))
    if header.get("format") != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (missing {MODEL_MAGIC!r} header)")
    offset = nl + 1
    parts = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        parts[entry["name"]] = a.astype(np.float64)
        offset += count * 8
    return ToyModel(
        projection=parts["projection"],
        proj_bias=parts["proj_bias"],
        head_kind=header["head_kind"],
        head_weights=parts["head_weights"],
        head_bias=parts.get("head_bias"),
        scale_s=header["scale_s"],
    )
