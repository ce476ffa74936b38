"""Command-line pipeline: generate, train, score, evaluate, sweep, profile.

Structured results go to ``--out``; a short human-readable summary goes to
stdout.  All randomness is controlled by seeds (``--seed`` overrides the
one in a spec or config file), outputs carry no timestamps, and re-running
a subcommand with identical flags reproduces its outputs byte for byte.

Exit codes: 0 success, 1 data/validation errors, 2 usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import synth as synthmod
from .data import DataFormatError, compute_class_weights, load_dataset, save_dataset
from .losses import run_gradient_checks
from .metrics import full_report, report_to_dict, sweep_table
from .scoring import (
    format_method,
    parse_method,
    score_dataset,
    top_k_logit_profile,
    write_scored_csv,
)
from .train import TrainConfig, evaluate, load_model, save_model, sweep_temperature, train


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _parse_methods(spec: str):
    methods = [parse_method(tok) for tok in spec.split(",") if tok.strip()]
    if not methods:
        raise ValueError(f"no methods given in {spec!r}")
    return methods


def _load_logit_dataset(args):
    fmt = getattr(args, "format", None) or ("jsonl" if str(args.logits).endswith(".jsonl") else "csv")
    return load_dataset(args.logits, fmt, class_names_file=getattr(args, "classes", None))


def _cmd_gen(args) -> int:
    if args.spec is not None:
        spec = synthmod.SynthSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    else:
        spec = synthmod.SynthSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    data = synthmod.generate(spec)
    synthmod.save_synth(data, args.out, spec)
    n = len(data.dataset.records)
    n_ood = sum(r.is_ood for r in data.dataset.records)
    print(f"generated {n} samples ({n - n_ood} ID, {n_ood} OOD) into {args.out}")
    return 0


def _cmd_train(args) -> int:
    data = synthmod.load_synth(args.data)
    if args.config is not None:
        cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
    else:
        cfg = TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    aux = None
    if args.aux is not None:
        aux = synthmod.load_synth(args.aux).features
    model, log = train(data, aux, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.bin")
    log.to_jsonl(out / "trainlog.jsonl")
    _write_json(out / "config.json", cfg.to_dict())
    best = log.entries[log.selected_epoch]
    print(
        f"trained {cfg.epochs} epochs; checkpoint at epoch {log.selected_epoch} "
        f"(dev EERc {best.dev_eerc:.4f}, dev FPR95 {best.dev_fpr95:.4f}); wrote {out}"
    )
    return 0


def _cmd_score(args) -> int:
    dataset = _load_logit_dataset(args)
    method = parse_method(args.method)
    weights = compute_class_weights(dataset.records)
    scored = score_dataset(dataset.records, method, weights)
    write_scored_csv(scored, args.out)
    print(f"scored {len(scored)} samples with {format_method(method)} into {args.out}")
    return 0


def _eval_records(args):
    if args.logits is not None:
        dataset = _load_logit_dataset(args)
        records = list(dataset.records)
        logit_records = records
        class_names = dataset.class_names
    else:
        data = synthmod.load_synth(args.data)
        model = load_model(args.model)
        from .data import split_view
        from .train import _records_with_logits

        records = split_view(data.dataset, args.split, "all")
        if not records:
            raise ValueError(f"dataset has no {args.split} split")
        logits = model.inference_logits(data.features_for(records))
        logit_records = _records_with_logits(records, logits)
        class_names = data.dataset.class_names
    return logit_records, class_names


def _cmd_eval(args) -> int:
    logit_records, class_names = _eval_records(args)
    if args.dump_logits is not None:
        from .data import Dataset

        save_dataset(
            Dataset(records=tuple(logit_records), class_names=class_names),
            args.dump_logits,
            "csv",
        )
    methods = _parse_methods(args.methods)
    weights = compute_class_weights(logit_records)
    reports = []
    for method in methods:
        scored = score_dataset(logit_records, method, weights)
        report = full_report(scored, method, class_names)
        rows = sweep_table(scored, class_names) if args.emit_sweep_table else None
        reports.append(report_to_dict(report, rows))
    _write_json(args.out, {"reports": reports})
    for r in reports:
        print(
            f"{r['method']}: id_acc {r['id_acc']:.4f}  fpr95 {r['fpr95']:.4f}  "
            f"eer {r['eer']:.4f}  eerc {r['eerc']:.4f}"
        )
    print(f"wrote {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    data = synthmod.load_synth(args.data)
    model = load_model(args.model)
    if ":" in args.method:
        raise ValueError(f"sweep takes a bare method kind, got {args.method!r}")
    grid = [float(tok) for tok in args.sweep_grid.split(",") if tok.strip()]
    best_t, table = sweep_temperature(model, data, args.method, grid)
    payload = {
        "method": args.method,
        "grid": [t for t, _ in table],
        "dev_eerc": [v for _, v in table],
        "best_temperature": best_t,
    }
    _write_json(args.out, payload)
    for t, v in table:
        marker = "  <- best" if t == best_t else ""
        print(f"T={t:g}: dev EERc {v:.4f}{marker}")
    print(f"wrote {args.out}")
    return 0


def _cmd_profile(args) -> int:
    dataset = _load_logit_dataset(args)
    weights = compute_class_weights(dataset.records)
    id_profile, ood_profile = top_k_logit_profile(dataset.records, args.top, weights)
    payload = {
        "k_top": args.top,
        "id_profile": None if id_profile is None else list(id_profile),
        "ood_profile": None if ood_profile is None else list(ood_profile),
    }
    _write_json(args.out, payload)
    for name, profile in (("ID", id_profile), ("OOD", ood_profile)):
        if profile is None:
            print(f"{name}: no samples")
        else:
            print(f"{name}: " + " ".join(f"{v:.4f}" for v in profile))
    print(f"wrote {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradient_checks(trials=args.trials, seed=args.seed, perturb=args.perturb_loss)
    failed = False
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.loss_name}: max relative error {r.max_rel_err:.3e} over {r.trials} trials [{status}]")
        if not r.passed and not failed:
            trial, err = r.first_failure
            print(
                f"gradient check failed: ({r.loss_name}, instance {trial}, error {err:.3e})",
                file=sys.stderr,
            )
            failed = True
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodkit",
        description="Softmax-energy OOD scoring, open-set metrics, and desk-scale training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic benchmark directory")
    p.add_argument("--spec", help="SynthSpec JSON file (defaults used when absent)")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a toy model on a generated benchmark")
    p.add_argument("--data", required=True, help="benchmark directory from gen")
    p.add_argument("--config", help="TrainConfig JSON file (defaults used when absent)")
    p.add_argument("--aux", help="benchmark directory whose features serve as auxiliary OOD data")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory (model.bin, trainlog.jsonl)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("score", help="score an external logits file")
    p.add_argument("--logits", required=True, help="dataformat CSV/JSONL with logit columns")
    p.add_argument("--format", choices=("csv", "jsonl"), help="input format (default: by extension)")
    p.add_argument("--classes", help="class-names sidecar file")
    p.add_argument("--method", required=True, help="score method as name[:T], e.g. sme:1")
    p.add_argument("--out", required=True, help="scored CSV path")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("eval", help="evaluate score methods and emit a report")
    p.add_argument("--model", help="model.bin from train (with --data)")
    p.add_argument("--data", help="benchmark directory from gen")
    p.add_argument("--split", default="eval", choices=("train", "dev", "eval"))
    p.add_argument("--logits", help="external logits file instead of --model/--data")
    p.add_argument("--format", choices=("csv", "jsonl"))
    p.add_argument("--classes", help="class-names sidecar for --logits")
    p.add_argument("--methods", required=True, help="comma list of name[:T]")
    p.add_argument("--emit-sweep-table", action="store_true", help="include SweepPoint rows")
    p.add_argument("--dump-logits", help="also write the evaluated logits as a dataformat CSV")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="sweep the temperature of one method on the dev split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, help="bare method kind (msp, energy, sme)")
    p.add_argument("--sweep-grid", required=True, help="comma list of temperatures")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("profile", help="class-weighted top-k logit profile (ID vs OOD)")
    p.add_argument("--logits", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"))
    p.add_argument("--classes")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all analytic gradients")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--perturb-loss",
        help="self-test hook: corrupt the named loss's gradient so the check must fail",
    )
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval":
        if args.logits is None and (args.model is None or args.data is None):
            parser.error("eval requires either --logits or both --model and --data")
    if args.command == "train" and args.config is not None:
        cfg_dict = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if cfg_dict.get("sme_loss") and args.aux is None:
            parser.error("--aux is required when the config enables sme_loss")
    try:
        return args.func(args)
    except (DataFormatError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
