"""In-memory and on-disk protocol for logit datasets.

A dataset is an ordered list of records, each carrying a logit vector
(possibly absent for raw rows that have not been scored yet) plus identity
metadata: the generating model's name, the split it belongs to, and whether
it is out-of-distribution with respect to the label space.

Two interchange formats are supported: CSV (canonical) and JSONL (for
streaming producers).  An optional class-names sidecar file (one name per
line) pins the mapping from logit index to class name; without it, names
default to ``class_0 .. class_{k-1}``.

Datasets and the views produced by `split_view` are immutable after
construction and safe to read from many threads concurrently.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

SPLITS = ("train", "dev", "eval")
OOD_FILTERS = ("id_only", "ood_only", "all")
FORMATS = ("csv", "jsonl")

_BASE_COLUMNS = ("sample_id", "model_name", "split", "is_ood")


class DataFormatError(ValueError):
    """A dataset file or record violates the format contract."""


@dataclass(frozen=True)
class LogitRecord:
    """One sample's logit vector plus identity metadata.

    ``logits`` is an empty tuple for raw dataset rows that have not been
    scored yet; every stored logit must be finite.
    """

    sample_id: str
    model_name: str
    split: str
    is_ood: bool
    logits: tuple[float, ...] = ()

    @property
    def has_logits(self) -> bool:
        return len(self.logits) > 0


@dataclass(frozen=True)
class Dataset:
    """An ordered, validated collection of records plus the ID label space.

    ``class_names[i]`` names logit index ``i``.  Record order is preserved
    across load/save round trips.
    """

    records: tuple[LogitRecord, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        _validate_dataset(self.records, self.class_names)

    @property
    def k(self) -> int:
        """Size of the ID label space."""
        return len(self.class_names)

    def class_index(self, model_name: str) -> int:
        try:
            return self.class_names.index(model_name)
        except ValueError:
            raise KeyError(f"model_name {model_name!r} is not an ID class") from None


@dataclass(frozen=True)
class ClassWeights:
    """Per-sample weights of 1/N_class, keyed by model name.

    Each class (including each OOD model name) contributes total mass 1 to
    the subset the weights were computed over, so every model counts
    equally in all weighted rates.
    """

    weight_of: Mapping[str, float]

    def __getitem__(self, model_name: str) -> float:
        try:
            return self.weight_of[model_name]
        except KeyError:
            raise KeyError(
                f"no weight for model_name {model_name!r}; weights must cover "
                "every model present in the evaluated subset"
            ) from None


def _validate_dataset(records: Sequence[LogitRecord], class_names: Sequence[str]):
    if len(set(class_names)) != len(class_names):
        raise DataFormatError("class_names must be unique")
    k = len(class_names)
    seen_len: int | None = None
    has_id = any(not r.is_ood for r in records)
    for r in records:
        if r.split not in SPLITS:
            raise DataFormatError(f"record {r.sample_id!r}: unknown split {r.split!r}")
        if not r.is_ood and r.model_name not in class_names:
            raise DataFormatError(
                f"record {r.sample_id!r}: ID model_name {r.model_name!r} "
                "is not in class_names"
            )
        if r.is_ood and r.split == "train" and has_id:
            raise DataFormatError(
                f"record {r.sample_id!r}: OOD records are not allowed in the "
                "train split of an ID dataset (auxiliary OOD train data is a "
                "separate dataset)"
            )
        if r.has_logits:
            n = len(r.logits)
            if seen_len is None:
                seen_len = n
            elif n != seen_len:
                raise DataFormatError(
                    f"record {r.sample_id!r}: inconsistent logit length "
                    f"(expected {seen_len}, got {n})"
                )
            if not all(math.isfinite(v) for v in r.logits):
                raise DataFormatError(f"record {r.sample_id!r}: non-finite logit")
    if seen_len is not None:
        if seen_len < 2:
            raise DataFormatError(f"logit length must be >= 2, got {seen_len}")
        if k != seen_len:
            raise DataFormatError(
                f"class_names has length {k} but logit vectors have length {seen_len}"
            )


def _read_class_names(path) -> tuple[str, ...]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return tuple(name for name in (ln.strip() for ln in lines) if name)


def load_dataset(path, format: str, class_names_file=None) -> Dataset:
    """Load a dataset from ``path`` in the given format (``csv``/``jsonl``).

    ``k`` is inferred from the header (CSV) or the first record carrying
    logits (JSONL).  Errors report the offending line number.  If
    ``class_names_file`` is given, it overrides the default
    ``class_0..class_{k-1}`` names.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    if format == "csv":
        records, k = _load_csv(path)
    else:
        records, k = _load_jsonl(path)
    if class_names_file is not None:
        class_names = _read_class_names(class_names_file)
    else:
        class_names = tuple(f"class_{i}" for i in range(k))
    return Dataset(records=tuple(records), class_names=class_names)


def _parse_is_ood(token, path, line_num):
    if token in ("0", "1"):
        return token == "1"
    if isinstance(token, bool):
        return token
    if token in (0, 1):
        return bool(token)
    raise DataFormatError(f"{path}, line {line_num}: is_ood must be 0 or 1, got {token!r}")


def _parse_split(token, path, line_num) -> str:
    if token not in SPLITS:
        raise DataFormatError(f"{path}, line {line_num}: unknown split token {token!r}")
    return token


def _parse_logit(cell, path, line_num) -> float:
    try:
        v = float(cell)
    except (TypeError, ValueError):
        raise DataFormatError(
            f"{path}, line {line_num}: malformed logit value {cell!r}"
        ) from None
    if not math.isfinite(v):
        raise DataFormatError(f"{path}, line {line_num}: non-finite logit {cell!r}")
    return v


def _load_csv(path):
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if tuple(header[:4]) != _BASE_COLUMNS:
            raise DataFormatError(
                f"{path}, line 1: header must start with {','.join(_BASE_COLUMNS)}"
            )
        logit_cols = header[4:]
        for i, name in enumerate(logit_cols):
            if name != f"logit_{i}":
                raise DataFormatError(
                    f"{path}, line 1: expected logit column 'logit_{i}', got {name!r}"
                )
        k = len(logit_cols)
        for row in reader:
            line_num = reader.line_num
            if len(row) != 4 + k:
                raise DataFormatError(
                    f"{path}, line {line_num}: malformed row, expected "
                    f"{4 + k} fields, got {len(row)}"
                )
            sample_id, model_name = row[0], row[1]
            split = _parse_split(row[2], path, line_num)
            is_ood = _parse_is_ood(row[3], path, line_num)
            cells = row[4:]
            if k > 0 and all(c == "" for c in cells):
                logits = ()
            else:
                logits = tuple(_parse_logit(c, path, line_num) for c in cells)
            records.append(LogitRecord(sample_id, model_name, split, is_ood, logits))
    return records, k


def _load_jsonl(path):
    records = []
    k: int | None = None
    with open(path, encoding="utf-8") as f:
        for line_num, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(
                    f"{path}, line {line_num}: malformed JSON ({e.msg})"
                ) from None
            missing = [c for c in _BASE_COLUMNS if c not in obj]
            if missing:
                raise DataFormatError(
                    f"{path}, line {line_num}: malformed row, missing fields {missing}"
                )
            split = _parse_split(obj["split"], path, line_num)
            is_ood = _parse_is_ood(obj["is_ood"], path, line_num)
            raw = obj.get("logits") or []
            logits = tuple(_parse_logit(v, path, line_num) for v in raw)
            if logits:
                if k is None:
                    k = len(logits)
                elif len(logits) != k:
                    raise DataFormatError(
                        f"{path}, line {line_num}: inconsistent logit length "
                        f"(expected {k}, got {len(logits)})"
                    )
            records.append(
                LogitRecord(str(obj["sample_id"]), str(obj["model_name"]), split, is_ood, logits)
            )
    return records, (k or 0)


def save_dataset(dataset: Dataset, path, format: str, class_names_file=None):
    """Write ``dataset`` to ``path``; the inverse of `load_dataset`.

    Floats are written with ``repr`` so values round-trip exactly.  If
    ``class_names_file`` is given, the class names are written there, one
    per line.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    k = len(dataset.class_names) if any(r.has_logits for r in dataset.records) else 0
    if format == "csv":
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(list(_BASE_COLUMNS) + [f"logit_{i}" for i in range(k)])
            for r in dataset.records:
                cells = [repr(v) for v in r.logits] if r.has_logits else [""] * k
                writer.writerow(
                    [r.sample_id, r.model_name, r.split, "1" if r.is_ood else "0"] + cells
                )
    else:
        with open(path, "w", encoding="utf-8") as f:
            for r in dataset.records:
                f.write(
                    json.dumps(
                        {
                            "sample_id": r.sample_id,
                            "model_name": r.model_name,
                            "split": r.split,
                            "is_ood": r.is_ood,
                            "logits": list(r.logits),
                        }
                    )
                    + "\n"
                )
    if class_names_file is not None:
        Path(class_names_file).write_text(
            "".join(name + "\n" for name in dataset.class_names), encoding="utf-8"
        )


def compute_class_weights(records: Sequence[LogitRecord]) -> ClassWeights:
    """Weights of 1/N_c per model name over ``records``.

    Every class present in the input (including OOD model names) gets a
    weight such that its samples sum to total mass exactly 1.
    """
    if not records:
        raise ValueError("compute_class_weights: empty input")
    counts: dict[str, int] = {}
    for r in records:
        counts[r.model_name] = counts.get(r.model_name, 0) + 1
    return ClassWeights({name: 1.0 / n for name, n in counts.items()})


def split_view(
    dataset: Dataset, split: str, ood_filter: str = "all"
) -> list[LogitRecord]:
    """Stable-order filtered view of a dataset.

    Records are shared, not copied.  The ``id_only`` and ``ood_only``
    views partition the ``all`` view for any split.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    if ood_filter not in OOD_FILTERS:
        raise ValueError(f"unknown ood_filter {ood_filter!r}; expected one of {OOD_FILTERS}")
    out = []
    for r in dataset.records:
        if r.split != split:
            continue
        if ood_filter == "id_only" and r.is_ood:
            continue
        if ood_filter == "ood_only" and not r.is_ood:
            continue
        out.append(r)
    return out
