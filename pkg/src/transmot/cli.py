"""Command-line entry point: ``transmot {track,train,eval,synth,gradcheck}``.

Settings resolve as built-in defaults, then the ``--config`` file
(``key = value`` lines), then explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .cascade import TrackerConfig, track_sequence
from .data import FormatError, MotRecord, coerce, parse_mot, read_key_values, read_sequence, records_to_gt, \
    write_results, write_sequence
from .gradcheck import TOLERANCE, gradcheck_model
from .metrics import evaluate
from .model import ModelConfig, TransMOTModel
from .synth import ScenarioConfig, synth_generate
from .training import TrainingDivergedError, build_samples, train, write_loss_csv

log = logging.getLogger("transmot")


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


EXIT_CODES = {"missing-file": 3, "format": 4, "invalid-input": 5, "diverged": 6, "gradcheck-failed": 1}


def fail(category: str, message: str) -> CliError:
    return CliError(category, message, EXIT_CODES[category])


@dataclass
class TrainSettings:
    steps: int = 2000
    epochs: int = 0
    lr: float = 0.0015
    lam: float = 1.0
    d_model: int = 32
    heads: int = 4
    history: int = 5
    score_path: bool = False
    seed: int = 0

    @classmethod
    def resolve(cls, path, **flags) -> "TrainSettings":
        base = cls()
        values = read_key_values(path) if path else {}
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        base = replace(base, **{k: coerce(v, getattr(base, k)) for k, v in values.items()})
        return replace(base, **{k: v for k, v in flags.items() if v is not None})


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise fail("missing-file", f"{what} {p} not found")
    return p


def _sequence_dirs(root: Path) -> list[Path]:
    if (root / "seqinfo.ini").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "seqinfo.ini").exists())
    if not dirs:
        raise fail("missing-file", f"no sequence directories (with seqinfo.ini) under {root}")
    return dirs


# ----------------------------------------------------------------------
# track
# ----------------------------------------------------------------------
def _track_one(seq: str, det: str | None, features: str | None, config: TrackerConfig, output: str):
    bundle = read_sequence(seq, det_path=det, features_path=features)
    model = None
    if config.checkpoint:
        model = TransMOTModel.load(config.checkpoint)
        if model.config.feature_dim != bundle.feature_dim:
            raise ValueError(f"checkpoint expects feature dimension {model.config.feature_dim}, "
                             f"sequence {bundle.name} has {bundle.feature_dim}")
        if model.config.history != config.history:
            config = replace(config, history=model.config.history)
    config = replace(config, img_w=bundle.img_w, img_h=bundle.img_h)
    t0 = time.perf_counter()
    frames = track_sequence(bundle, config, model)
    seconds = time.perf_counter() - t0
    write_results([MotRecord(r.frame, i, b) for r in frames for i, b in r.tracks], output)
    return bundle.name, bundle.num_frames, seconds


def cmd_track(args) -> int:
    seqs = [_require(s, "sequence directory") for s in args.seq]
    for p in (args.det, args.features, args.checkpoint, args.config):
        if p:
            _require(p, "file")
    if len(seqs) > 1 and (args.det or args.features):
        raise fail("invalid-input", "--det/--features apply to a single sequence only")
    config = TrackerConfig.from_file(args.config, tau_m=args.tau_m, k_r=args.k_r, k_p=args.k_p,
                                     tau_det=args.tau_det, tau_a=args.tau_a, tau_ltoh=args.tau_ltoh,
                                     tau_dup=args.tau_dup, history=args.history, checkpoint=args.checkpoint)
    if config.checkpoint:
        _require(config.checkpoint, "checkpoint")
    for s in seqs:
        det = Path(args.det) if args.det else s / "det" / "det.txt"
        _require(det, "detection file")
    out = Path(args.output)
    if len(seqs) == 1:
        outputs = [out]
        out.parent.mkdir(parents=True, exist_ok=True)
    else:
        out.mkdir(parents=True, exist_ok=True)
        outputs = [out / f"{s.name}.txt" for s in seqs]
    jobs = [(str(s), args.det, args.features, config, str(o)) for s, o in zip(seqs, outputs)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            stats = list(pool.map(_track_one, *zip(*jobs)))
    else:
        stats = [_track_one(*j) for j in jobs]
    for (name, n, secs), o in zip(stats, outputs):
        fps = n / secs if secs > 0 else float("inf")
        print(f"{name}: {n} frames in {secs:.3f} s ({fps:.1f} fps) -> {o}")
    return 0


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------
def cmd_train(args) -> int:
    root = _require(args.data, "dataset directory")
    if args.config:
        _require(args.config, "config file")
    s = TrainSettings.resolve(args.config, steps=args.steps, epochs=args.epochs, lr=args.lr, lam=args.lam,
                              d_model=args.d_model, heads=args.heads, history=args.history,
                              score_path=args.score_path, seed=args.seed)
    bundles = [read_sequence(p) for p in _sequence_dirs(root)]
    missing = [b.name for b in bundles if b.gt is None]
    if missing:
        raise fail("missing-file", f"sequences without ground truth: {missing}")
    dims = {b.feature_dim for b in bundles}
    if len(dims) != 1:
        raise fail("invalid-input", f"sequences disagree on feature dimension: {sorted(dims)}")
    samples = [x for b in bundles for x in build_samples(b, s.history)]
    if not samples:
        raise fail("invalid-input", "no training windows found")
    model = TransMOTModel(ModelConfig(feature_dim=dims.pop(), d_model=s.d_model, heads=s.heads,
                                      history=s.history, score_path=s.score_path, seed=s.seed))
    result = train(model, samples, epochs=s.epochs or None, max_steps=s.steps or None, lr=s.lr, lam=s.lam,
                   seed=s.seed)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    write_loss_csv(result.losses, loss_csv)
    tail = result.losses[-min(100, len(result.losses)):]
    mean_tail = sum(b.total for b in tail) / len(tail)
    print(f"trained {result.steps} steps on {len(samples)} windows in {result.seconds:.1f} s; "
          f"mean loss (last {len(tail)}) {mean_tail:.5f}; checkpoint {out}; losses {loss_csv}")
    return 0


# ----------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------
def cmd_eval(args) -> int:
    gt = records_to_gt(parse_mot(_require(args.gt, "ground-truth file")))
    pred = parse_mot(_require(args.results, "results file"))
    report = evaluate(gt, pred, args.iou)
    if args.format == "csv":
        sys.stdout.write(report.to_csv())
    elif args.format == "json":
        print(json.dumps(report.as_dict(), sort_keys=True))
    else:
        print(report.to_table())
    return 0


# ----------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = ScenarioConfig.from_file(_require(args.scenario, "scenario file")) if args.scenario else ScenarioConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.output)
    if args.count == 1:
        write_sequence(synth_generate(cfg), out)
        print(f"wrote {cfg.name} ({cfg.num_frames} frames, {cfg.num_targets} targets) to {out}")
        return 0
    for k in range(args.count):
        c = replace(cfg, seed=cfg.seed + k, name=f"{cfg.name}-{k:03d}")
        write_sequence(synth_generate(c), out / c.name)
    print(f"wrote {args.count} sequences to {out}")
    return 0


# ----------------------------------------------------------------------
# gradcheck
# ----------------------------------------------------------------------
def cmd_gradcheck(args) -> int:
    try:
        results, seconds = gradcheck_model(seed=args.seed, n=args.n, m=args.m, t=args.t, d_model=args.d_model,
                                           heads=args.heads, feature_dim=args.feature_dim, corrupt=args.corrupt)
    except KeyError as e:
        raise fail("invalid-input", str(e.args[0]))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} {list(r.shape)} max_rel_err={r.max_error:.3e}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} tensors within {TOLERANCE:g} ({seconds:.1f} s)")
    if failed:
        raise fail("gradcheck-failed", f"{len(failed)} tensor(s) failed: {', '.join(failed)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transmot", description="Graph-transformer multi-object tracker.",
                                epilog="Settings: defaults < --config file < command-line flags.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", help="track one or more sequences")
    t.add_argument("seq", nargs="+", help="sequence directory (seqinfo.ini, det/det.txt, det/features.txt)")
    t.add_argument("-o", "--output", required=True,
                   help="results file (one sequence) or directory (several)")
    t.add_argument("--det", help="detection file, overrides SEQ/det/det.txt")
    t.add_argument("--features", help="feature file, overrides SEQ/det/features.txt")
    t.add_argument("--checkpoint", help="trained model; without one stage 2 is skipped")
    t.add_argument("--config", help="tracker key=value file")
    t.add_argument("--jobs", type=int, default=1, help="sequences tracked in parallel")
    t.add_argument("--history", type=int)
    for name in ("tau_m", "tau_det", "tau_a", "tau_ltoh", "tau_dup"):
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=float)
    t.add_argument("--k-r", dest="k_r", type=int)
    t.add_argument("--k-p", dest="k_p", type=int)
    t.set_defaults(func=cmd_track)

    r = sub.add_parser("train", help="train the association model")
    r.add_argument("data", help="sequence directory or a directory of sequence directories")
    r.add_argument("-o", "--output", required=True, help="checkpoint path (.npz)")
    r.add_argument("--loss-csv", help="per-step losses (default: next to the checkpoint)")
    r.add_argument("--config", help="training key=value file")
    r.add_argument("--steps", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--lam", type=float)
    r.add_argument("--d-model", dest="d_model", type=int)
    r.add_argument("--heads", type=int)
    r.add_argument("--history", type=int)
    r.add_argument("--score-path", dest="score_path", action=argparse.BooleanOptionalAction, default=None)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score results against ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--results", required=True)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--format", choices=("table", "csv", "json"), default="table")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic sequence")
    s.add_argument("-o", "--output", required=True, help="sequence directory (or parent, with --count)")
    s.add_argument("--scenario", help="scenario key=value file")
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int, default=1, help="write COUNT sequences with consecutive seeds")
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=4, help="tracklets")
    g.add_argument("--m", type=int, default=5, help="candidates")
    g.add_argument("--t", type=int, default=3, help="history length")
    g.add_argument("--d-model", dest="d_model", type=int, default=16)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--feature-dim", dest="feature_dim", type=int, default=6)
    g.add_argument("--corrupt", metavar="PARAM", help="perturb this parameter's gradient (negative control)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as e:
        category, msg, code = e.category, str(e), e.code
    except FileNotFoundError as e:
        category, msg, code = "missing-file", str(e), EXIT_CODES["missing-file"]
    except FormatError as e:
        category, msg, code = "format", str(e), EXIT_CODES["format"]
    except TrainingDivergedError as e:
        category, msg, code = "diverged", str(e), EXIT_CODES["diverged"]
    except ValueError as e:
        category, msg, code = "invalid-input", str(e), EXIT_CODES["invalid-input"]
    print(f"error: {category}: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
