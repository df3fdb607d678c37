"""Command-line entry point: ``diffkt3d {gen,train,eval,score}``.

Exit codes: 0 success, 2 validation error, 3 runtime or data error. Errors
are summarized on stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
RUN_MANIFEST = "run_manifest.json"


class ValidationError(ValueError):
    pass


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_run_manifest(out, command, config, seed, outputs, started):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "git_describe": _git_describe(),
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outputs": sorted(outputs),
    }
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / RUN_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("DIFFKT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"DIFFKT_SEED must be an integer, got {env!r}") from None


def _shape(text):
    parts = [p for p in text.lower().replace(",", "x").split("x") if p]
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ValidationError(f"--shape must be N or DxHxW, got {text!r}") from None
    if len(dims) == 1:
        dims = dims * 3
    if len(dims) != 3:
        raise ValidationError(f"--shape must be N or DxHxW, got {text!r}")
    return dims


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args):
    from .phantom import SITES, PhantomConfig, generate_dataset, save_dataset

    started = time.time()
    seed = _seed(args)
    shape = _shape(args.shape)
    if any(s % args.patch_size for s in shape):
        raise ValidationError(f"--shape {shape} must be divisible by the patch size {args.patch_size}")
    if args.n < 1:
        raise ValidationError("--n must be >= 1")
    sites = SITES if args.site == "all" else (args.site,)
    cfg = PhantomConfig(shape=shape, n_oars=args.n_oars, n_beams=args.n_beams, patch_size=args.patch_size)
    cases = generate_dataset(args.n, seed, cfg, sites)
    out = Path(args.out)
    save_dataset(cases, out)
    config = {"n": args.n, "shape": list(shape), "site": args.site, "n_oars": args.n_oars,
              "n_beams": args.n_beams, "patch_size": args.patch_size}
    write_run_manifest(out, "gen", config, seed, [c.id for c in cases] + ["dataset.json"], started)
    print(json.dumps({"cases": len(cases), "out": str(out)}))


def _split(cases, name):
    from .phantom import split_dataset

    if name == "all":
        return cases
    tr, va, te = split_dataset(cases)
    chosen = {"train": tr, "val": va, "test": te}[name]
    if not chosen:
        raise ValidationError(f"split {name!r} of {len(cases)} cases is empty")
    return chosen


def _read_config(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except OSError as err:
        raise OSError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ValidationError(f"config {path} is not valid JSON: {err}") from None


def cmd_train(args):
    from .any2any import Any2AnyDiT, DitConfig, load_checkpoint
    from .phantom import load_dataset
    from .pipeline import TrainConfig, train

    started = time.time()
    seed = _seed(args)
    overrides = _read_config(args.config)
    model_overrides = overrides.pop("model", {})
    if args.stage == "C" and not args.ckpt_in:
        raise ValidationError("stage C (post-training) requires --ckpt-in")
    try:
        cfg = TrainConfig(**{**overrides, "stage": args.stage, "seed": seed})
    except TypeError as err:
        raise ValidationError(f"unknown training option: {err}") from None
    cases = _split(load_dataset(args.data), args.split)
    if args.ckpt_in:
        model, _, _, _ = load_checkpoint(args.ckpt_in)
    else:
        dit = DitConfig(**{"volume_shape": cases[0].shape, **model_overrides})
        model = Any2AnyDiT(dit, seed=seed)
    if model.cfg.volume_shape != tuple(cases[0].shape):
        raise ValidationError(f"checkpoint volume shape {model.cfg.volume_shape} does not match data "
                              f"shape {cases[0].shape}")
    out = Path(args.out)
    res = train(model, cases, cfg, out_dir=out, resume=not args.no_resume)
    config = {"train": cfg.to_dict(), "model": model.cfg.to_dict(), "data": str(args.data),
              "split": args.split, "ckpt_in": args.ckpt_in, "threads": args.threads}
    outputs = ["checkpoint", "nft_rounds.csv" if args.stage == "C" else "loss.csv"]
    write_run_manifest(out, "train", config, seed, outputs, started)
    print(json.dumps({"stage": args.stage, "steps": res.step, "seconds": round(res.seconds, 3),
                      "out": str(out)}))


def _spec_loader(arg):
    from .scorecard import default_spec, load_spec

    if arg is None:
        return lambda case: default_spec(case.site)
    spec = load_spec(arg)
    return lambda case: spec


def cmd_eval(args):
    from .any2any import load_checkpoint
    from .phantom import load_dataset
    from .pipeline import compare_reports, evaluate

    started = time.time()
    seed = _seed(args)
    if args.steps < 1 or args.best_of < 1:
        raise ValidationError("--steps and --best-of must be >= 1")
    compare = tuple(int(s) for s in args.compare_steps.split(",")) if args.compare_steps else None
    model, _, _, _ = load_checkpoint(args.ckpt)
    xpred = load_checkpoint(args.xpred_ckpt)[0] if args.xpred_ckpt else None
    cases = _split(load_dataset(args.data), args.split)
    spec_for = _spec_loader(args.scorecard)
    rep = evaluate(model, cases, args.steps, args.best_of, spec_for, seed=seed,
                   compare_steps=compare, xpred_model=xpred, select=args.select)
    if args.ckpt_b:
        model_b = load_checkpoint(args.ckpt_b)[0]
        rep_b = evaluate(model_b, cases, args.steps, args.best_of, spec_for, seed=seed, select=args.select)
        rep.summary["ckpt_b"] = {"mean_mae_gy": rep_b.summary["mean_mae_gy"],
                                 "mean_score": rep_b.summary["mean_score"]}
        rep.summary["paired_t_test"] = {"mae_gy": compare_reports(rep, rep_b, "mae_gy"),
                                        "score": compare_reports(rep, rep_b, "score")}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "eval.csv")
    rep.write_json(out / "summary.json")
    config = {"ckpt": args.ckpt, "ckpt_b": args.ckpt_b, "xpred_ckpt": args.xpred_ckpt,
              "data": args.data, "split": args.split, "steps": args.steps, "best_of": args.best_of,
              "scorecard": args.scorecard, "compare_steps": compare, "select": args.select,
              "threads": args.threads}
    write_run_manifest(out, "eval", config, seed, ["eval.csv", "summary.json"], started)
    print(json.dumps({k: rep.summary[k] for k in ("n_cases", "mean_mae_gy", "mean_score")}))


def cmd_score(args):
    from .io import read_raster
    from .phantom import load_case
    from .scorecard import raw_reward, rescale_prescription

    case = load_case(args.case)
    dose = read_raster(args.dose)
    if dose.shape != case.shape:
        raise ValidationError(f"dose shape {dose.shape} does not match case shape {case.shape}")
    spec = rescale_prescription(_spec_loader(args.scorecard)(case), case.prescription_gy)
    rep = raw_reward(dose, case, spec, reference=case.volumes["dose"].values)
    payload = {"case_id": case.id, "site": case.site, "prescription_gy": case.prescription_gy,
               **rep.to_dict()}
    text = json.dumps(payload, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if rep.missing:
        print(json.dumps({"missing_structures": rep.missing}), file=sys.stderr)


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="diffkt3d", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate phantom cases")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--shape", default="16")
    g.add_argument("--site", default="all", choices=["all", "han", "lung", "prostate"])
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--n-oars", type=int, default=4)
    g.add_argument("--n-beams", type=int, default=5)
    g.add_argument("--patch-size", type=int, default=4)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=["A", "B", "C"])
    t.add_argument("--data", required=True)
    t.add_argument("--ckpt-in", default=None)
    t.add_argument("--config", default=None, help="JSON file of training overrides")
    t.add_argument("--split", default="train", choices=["all", "train", "val", "test"])
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--no-resume", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--ckpt-b", default=None, help="second checkpoint for a paired comparison")
    e.add_argument("--xpred-ckpt", default=None, help="x0-regression checkpoint for single-step rows")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["all", "train", "val", "test"])
    e.add_argument("--steps", type=int, default=10)
    e.add_argument("--best-of", type=int, default=1)
    e.add_argument("--compare-steps", default=None, help="comma-separated extra step counts")
    e.add_argument("--select", default="scorecard", choices=["scorecard", "mae"])
    e.add_argument("--scorecard", default=None)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="score a dose raster against a case")
    s.add_argument("--dose", required=True)
    s.add_argument("--case", required=True)
    s.add_argument("--scorecard", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_score)
    return p


def _fail(kind, err):
    msg = {"error": kind, "type": type(err).__name__, "message": str(err)}
    print(json.dumps(msg), file=sys.stderr)
    return EXIT_VALIDATION if kind == "validation" else EXIT_RUNTIME


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            return _fail("validation", ValidationError("--threads must be >= 1"))
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from .any2any import CheckpointError
    from .io import RasterFormatError

    try:
        args.func(args)
    except (OSError, RasterFormatError, CheckpointError, RuntimeError, FloatingPointError,
            KeyError) as err:
        return _fail("runtime", err)
    except (ValidationError, ValueError, TypeError) as err:
        return _fail("validation", err)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
