"""Command-line entry points.

Exit status: 0 on success, 1 on a runtime failure, 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import ConfigError, load_config
from .data import Dataset, TensorFormatError, generate_synthetic, read_tensor, write_tensor
from .losses import ScoreReport
from .numerics import NumericError

log = logging.getLogger("dmf2mel")


class UsageError(Exception):
    pass


def _snr(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def cmd_gen_data(args) -> int:
    if args.subjects < 1 or args.heldout_subjects < 1 or args.len_s <= 0 or args.channels < 1 or args.bands < 1:
        raise UsageError("subject counts, length, channels and bands must be positive")
    manifest = generate_synthetic(
        args.out,
        seed=args.seed,
        n_subjects=args.subjects,
        n_heldout_subjects=args.heldout_subjects,
        recording_len_s=args.len_s,
        snr_db=args.snr_db,
        C=args.channels,
        M=args.bands,
    )
    print(Path(manifest.root) / "manifest.json")
    return 0


def cmd_train(args) -> int:
    from .training import train

    model_cfg, train_cfg = load_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    data = Dataset.load(args.data)
    res = train(data, model_cfg, train_cfg, out_dir=args.out, resume=args.resume, max_steps=args.max_steps)
    print(json.dumps({"step": res.checkpoint.step, "last": str(Path(args.out) / "last")}))
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate, load_predictor

    predict, ck = load_predictor(args.ckpt)
    data = Dataset.load(args.data)
    if data.C != ck.model_cfg.C or data.M != ck.model_cfg.M:
        raise UsageError(f"checkpoint expects C={ck.model_cfg.C}, M={ck.model_cfg.M}; data has C={data.C}, M={data.M}")
    report = evaluate(predict, data, T=ck.model_cfg.T, label=args.label or Path(args.ckpt).name)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "report.csv").write_text(report.to_csv())
    sys.stdout.write(report.to_json())
    return 0


def cmd_infer(args) -> int:
    from .training import Checkpoint, model_predict

    ck = Checkpoint.load(args.ckpt)
    if ck.kind != "model":
        raise UsageError(f"checkpoint kind {ck.kind!r} cannot run inference")
    eeg = read_tensor(args.inp)
    if eeg.ndim != 2 or eeg.shape[1] != ck.model_cfg.C:
        raise UsageError(f"expected a (T, {ck.model_cfg.C}) EEG tensor, got shape {eeg.shape}")
    model = ck.build_model()
    mel = model_predict(model, eeg.astype(np.float32), args.subject, allow_unknown=True, T=min(ck.model_cfg.T, eeg.shape[0]))
    write_tensor(args.out, mel.astype(np.float32))
    print(f"{args.out} {mel.shape[0]}x{mel.shape[1]}")
    return 0


def cmd_gradcheck(args) -> int:
    names = gradcheck.MODULES if args.module == "all" else (args.module,)
    failed = False
    for name in names:
        worst, errs = gradcheck.check_module(name)
        ok = worst < gradcheck.TOLERANCE
        print(f"{name}: max_rel_err {worst:.3e} {'<' if ok else '>='} {gradcheck.TOLERANCE:g} ({len(errs)} parameters)")
        if not ok:
            failed = True
            for p, e in sorted(errs.items()):
                if e >= gradcheck.TOLERANCE:
                    print(f"  FAIL {name}.{p}: rel_err {e:.3e}")
    return 1 if failed else 0


def cmd_report(args) -> int:
    from .plotting import violin_svg

    if not args.reports:
        raise UsageError("at least one report is required")
    labels = args.labels or []
    if labels and len(labels) != len(args.reports):
        raise UsageError("--labels must match the number of reports")
    runs = []
    for i, p in enumerate(args.reports):
        rep = ScoreReport.from_json(Path(p).read_text())
        runs.append((labels[i] if labels else (rep.label or Path(p).parent.name or f"run{i}"), rep))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "subject_id", "split", "pearson_r"])
        for label, rep in runs:
            for s, split, r in rep.rows():
                w.writerow([label, s, split, repr(r)])
    groups = [(label, list(rep.stories.values())) for label, rep in runs]
    violin_svg(groups, out / "violin.svg", title="held-out stories")
    for label, rep in runs:
        print(f"{label}: score {rep.score:.4f}")
    print(out / "scores.csv")
    print(out / "violin.svg")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dmf2mel", description="EEG to mel-spectrogram decoding toolkit")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--subjects", type=int, default=8)
    g.add_argument("--heldout-subjects", type=int, default=2)
    g.add_argument("--len-s", type=float, default=120.0)
    g.add_argument("--snr-db", type=_snr, default=0.0)
    g.add_argument("--channels", type=int, default=64)
    g.add_argument("--bands", type=int, default=10)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the held-out splits")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--label")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="reconstruct mel bands for one EEG tensor")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--subject", type=int, required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check")
    c.add_argument("--module", required=True, choices=(*gradcheck.MODULES, "all"))
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="per-subject CSV and violin plot")
    r.add_argument("reports", nargs="*")
    r.add_argument("--labels", nargs="*")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(asctime)s %(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"{ap.prog} {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, TensorFormatError, NumericError, ValueError, KeyError) as e:
        print(f"{ap.prog} {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
