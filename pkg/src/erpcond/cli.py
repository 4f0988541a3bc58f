"""Command-line entry point: synth, run, explain, search."""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import config as C
from . import explain as X
from . import models as M
from . import protocol as P
from . import search as S
from . import synth
from .dsp import Scaler, apply_scaler, fit_scaler
from .errors import ConfigurationError, DataError, ErpCondError

log = logging.getLogger("erpcond")


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    tmp.replace(path)


def _provenance(out: Path, argv) -> None:
    # timestamps live here only, so every other JSON output stays byte-stable
    _dump(out / "provenance.json", {
        "argv": list(argv),
        "utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
    })


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigurationError("--seeds is empty")
    return seeds


def _jobs(value) -> int:
    if value is not None:
        return value
    env = os.environ.get("ERPCOND_JOBS")
    if env is None:
        return 1
    try:
        return max(int(env), 1)
    except ValueError:
        raise ConfigurationError(f"ERPCOND_JOBS must be an integer, got {env!r}") from None


def _load_data(path) -> "P.EpochSet":
    recs = synth.read_dataset(path)
    return P.prepare_dataset(recs)


# --- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigurationError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    cohort = synth.generate_cohort(args.subjects, args.sessions, args.seed, args.difficulty)
    params = {"subjects": args.subjects, "sessions": args.sessions, "seed": args.seed,
              "difficulty": args.difficulty}
    out.parent.mkdir(parents=True, exist_ok=True)
    # build next to the target and rename, so a crash never leaves half a dataset
    tmp = Path(tempfile.mkdtemp(prefix=".synth-", dir=out.parent))
    try:
        synth.write_cohort(tmp, cohort, params)
        if out.exists():
            out.rmdir()
        tmp.rename(out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    n_epochs = sum(len(r.event_samples) for r in cohort.recordings)
    print(f"wrote {len(cohort.profiles)} subjects, {len(cohort.recordings)} recordings, "
          f"{n_epochs} epochs to {out}")
    return 0


def cmd_run(args) -> int:
    exp, doc = C.load_config(args.config, args.set or [])
    if args.name:
        exp.name = args.name
    seeds = _seeds(args.seeds) if args.seeds else [exp.train.seed]
    es = _load_data(args.data)
    out = Path(args.out)
    root = out / exp.name
    root.mkdir(parents=True, exist_ok=True)
    _dump(root / "manifest.json", {"config": doc, "dataset": str(args.data), "command": "run",
                                   "stage": args.stage, "seeds": seeds})
    summary, _ = P.run_experiment(exp, es, seeds, out, jobs=_jobs(args.jobs), resume=args.resume,
                                  plan_seed=doc.get("plan_seed", 0), stage=args.stage)
    _provenance(root, sys.argv)
    row = summary["rows"][0]
    cols = " ".join(f"{k}={v['mcc']['mean']:.4f}" for k, v in row["stages"].items())
    print(f"{row['model']} ({row['conditioning']}), {row['n_folds']} folds x {len(seeds)} seeds: {cols}")
    return 0


def _fold_scaler(ckpt_path: Path) -> Scaler | None:
    p = ckpt_path.parent / "scaler.json"
    if not p.exists():
        return None
    d = json.loads(p.read_text())
    return Scaler(d["kind"], np.asarray(d["location"]), np.asarray(d["scale"]), d["fold_id"])


def cmd_explain(args) -> int:
    ckpt = Path(args.checkpoint)
    model, _ = M.load_model(ckpt)
    es = _load_data(args.data)
    scaler = _fold_scaler(ckpt)
    if scaler is None:
        log.warning("no scaler next to checkpoint; fitting a standard scaler on the whole dataset")
        scaler = fit_scaler("standard", es)
    es = apply_scaler(Scaler(scaler.kind, scaler.location, scaler.scale, None), es)
    ci = X.channel_importance(model, checkpoint_id=ckpt.name)
    tf = X.filter_tf_difference(model, es, X.DEFAULT_FREQS, args.cycles)
    proj = None
    if model.table is not None:
        k = min(args.clusters, len(model.table.rows))
        proj = X.embedding_projection(model.table, k, args.seed)
    written = X.export(args.out, ci, tf, proj, svg=not args.no_svg)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_search(args) -> int:
    if args.budget < 1:
        raise ConfigurationError(f"--budget must be >= 1, got {args.budget}")
    space = S.load_space(args.space) if args.space else S.DEFAULT_SPACE
    S.validate_space(space)
    if args.config:
        exp, doc = C.load_config(args.config, args.set or [])
    else:
        exp, doc = P.ExperimentConfig(), {}
    es = _load_data(args.data)
    plans = P.make_fold_plans(es, doc.get("plan_seed", 0))
    sampler = S.RandomSampler(args.seed)

    def objective_for(plan):
        def objective(params):
            e = S.apply_params(exp, params)
            data = P.fold_data(es, plan, e.arch, e.train.scaler)
            subjects = sorted(set(es.subject_ids[plan.train].tolist()))
            model = M.build(e.arch, seed=args.seed, conditioning=e.train.conditioning, subjects=subjects)
            return P.pretrain(model, plan, e.train, data).best_val_mcc
        return objective

    # LOSO pre-pass: the same first trials on every fold, to find the median subject
    per_subject = {}
    for plan in plans:
        pre = S.hyper_search(space, args.prepass_trials, objective_for(plan), args.seed, sampler)
        per_subject[plan.held_out] = [t["value"] for t in pre.trials]
    median = P.median_subject(per_subject)
    plan = next(p for p in plans if p.held_out == median)
    res = S.hyper_search(space, args.budget, objective_for(plan), args.seed, sampler)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "prepass.json", {"per_subject_val_mcc": per_subject, "median_subject": median})
    S.write_trials_csv(out / "trials.csv", res.trials)
    best = C.dump_config(S.apply_params(exp, res.best_params), doc.get("plan_seed", 0))
    _dump(out / "best_config.json", {"config": best, "params": res.best_params,
                                     "value": res.best_value, "trial": res.best_trial,
                                     "median_subject": median})
    _provenance(out, sys.argv)
    print(f"median subject {median}; best trial {res.best_trial} val MCC {res.best_value:.4f}")
    return 0


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="erpcond", description="Subject-conditioned ERP classification")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--subjects", type=int, default=10)
    s.add_argument("--sessions", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--difficulty", type=float, default=0.4)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="LOSO pre-training and incremental fine-tuning")
    r.add_argument("--config", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", default="runs")
    r.add_argument("--stage", choices=("pretrain", "finetune", "full"), default="full")
    r.add_argument("--seeds", help="comma-separated seeds, e.g. 1,2,3")
    r.add_argument("--name", help="experiment name (defaults to the config's)")
    r.add_argument("--jobs", type=int, help="parallel folds (default $ERPCOND_JOBS or 1)")
    r.add_argument("--resume", action="store_true", help="skip folds already completed")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("explain", help="explainability exports for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default="explain")
    e.add_argument("--clusters", type=int, default=3)
    e.add_argument("--cycles", type=float, default=X.DEFAULT_CYCLES)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--no-svg", action="store_true")
    e.set_defaults(func=cmd_explain)

    q = sub.add_parser("search", help="median-subject hyperparameter search")
    q.add_argument("--data", required=True)
    q.add_argument("--budget", type=int, required=True)
    q.add_argument("--space", help="search space JSON (default: built-in space)")
    q.add_argument("--config", help="base experiment config")
    q.add_argument("--set", action="append", metavar="KEY=VALUE")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--prepass-trials", type=int, default=1)
    q.add_argument("--out", default="search")
    q.set_defaults(func=cmd_search)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ErpCondError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
