"""``mpvad`` command line: simulate, train, eval, infer, enhance, bench, gradcheck.

Artifacts live under ``--out`` as::

    corpus/<name>/        simulated corpora
    checkpoints/          trained models
    reports/              eval / leakage / bench reports, resolved run configs
    enhanced/<name>/      masked audio
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import N_CHANNELS, __version__

log = logging.getLogger("mpvad")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _error_line(code, message):
    print(json.dumps({"error": code, "message": str(message)}), file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _error_line("usage", message)
        sys.exit(2)


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  Values are parsed as JSON
    when possible, else kept as strings."""
    out = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError("config", f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                out[key.replace("-", "_")] = json.loads(value)
            except json.JSONDecodeError:
                out[key.replace("-", "_")] = value
    return out


def _dirs(out):
    root = Path(out)
    d = {k: root / k for k in ("corpus", "checkpoints", "reports", "enhanced")}
    for p in d.values():
        p.mkdir(parents=True, exist_ok=True)
    return d


def _write_run_config(args, dirs):
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    with open(dirs["reports"] / f"{args.command}_config.json", "w") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)


def _need_file(path, what):
    if path is None or not Path(path).exists():
        raise CliError("missing_file", f"{what} not found: {path}")
    return Path(path)


def _load_models(paths):
    from .models import load_checkpoint

    models = {}
    for p in paths:
        ck = load_checkpoint(_need_file(p, "checkpoint"))
        models[ck.kind] = ck.inference_model
    return models


def _pipeline(models, alpha):
    from .models import FusionConfig
    from .streaming import VadPipeline

    return VadPipeline(models.get("sc"), models.get("mc"), FusionConfig(alpha=alpha))


# --------------------------------------------------------------------------- commands


def cmd_simulate(args, dirs):
    from .simulator import condition_preset, generate_corpus

    cfg = condition_preset(args.condition)
    if args.source_dir:
        cfg.source_mode, cfg.source_dir = "corpus", str(_need_file(args.source_dir, "source directory"))
    name = args.name or args.condition
    m = generate_corpus(cfg, args.segments, dirs["corpus"] / name, args.seed)
    total = len(m) * cfg.segment_s
    print(json.dumps({"corpus": str(m.root), "segments": len(m), "hours": round(total / 3600, 4)}))


def cmd_train(args, dirs):
    from .simulator import load_manifest

    manifest = load_manifest(_need_file(args.corpus, "corpus"))
    if len(manifest) == 0:
        raise CliError("empty_manifest", "corpus has no segments")
    out = dirs["checkpoints"] / f"{args.model}.ckpt"
    if args.model == "energy":
        from .baselines import SvmConfig, train_energy_vad
        from .models import Checkpoint, save_checkpoint

        vad = train_energy_vad(manifest, SvmConfig(seed=args.seed))
        save_checkpoint(Checkpoint("energy", vad, meta={"seed": args.seed, "manifest_hash": manifest.digest()}), out)
    else:
        from .models import TrainConfig, save_checkpoint, train

        tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr)
        ck = train(args.model, manifest, tc, args.seed, log_path=dirs["reports"] / f"train_{args.model}.jsonl")
        save_checkpoint(ck, out)
        for r in ck.log:
            print(json.dumps(r))
    print(json.dumps({"checkpoint": str(out)}))


def _predict_corpus(manifest, models, alpha, oracle=False):
    """Yield (entry, audio, truth (4, W), pred (4, W)) per segment."""
    from .audio_io import read_wav
    from .simulator import read_labels

    pipe = None
    if not oracle and ("sc" in models or "mc" in models):
        pipe = _pipeline(models, alpha)
    for e in manifest.entries:
        audio = read_wav(manifest.path(e, "wav_path")).samples
        truth = read_labels(manifest.path(e, "labels_path"))
        if oracle:
            pred = truth.copy()
        elif pipe is not None:
            pred = np.stack([d.decisions for d in pipe.infer_offline(audio)], axis=1)
        else:
            pred = models["energy"].predict_segment(audio).T
        yield e, audio, truth[:, : pred.shape[1]], pred


def cmd_eval(args, dirs):
    from .evaluation import EvalReport
    from .simulator import load_manifest

    manifest = load_manifest(_need_file(args.corpus, "corpus"))
    models = {} if args.oracle else _load_models(args.model or [])
    if not args.oracle and not models:
        raise CliError("usage", "eval needs --model or --oracle")
    truths, preds = [], []
    for _, _, truth, pred in _predict_corpus(manifest, models, args.fusion_alpha, args.oracle):
        truths.append(truth)
        preds.append(pred)
    condition = manifest.entries[0]["condition_name"] if manifest.entries else ""
    rep = EvalReport.build(np.concatenate(preds, axis=1), np.concatenate(truths, axis=1), condition)
    tag = args.tag or condition
    rep.write(dirs["reports"] / f"eval_{tag}.json", dirs["reports"] / f"confusion_{tag}.csv")
    print(rep.to_json())


def cmd_infer(args, dirs):
    from .audio_io import read_wav
    from .streaming import StreamSession

    buf = read_wav(_need_file(args.stream, "wav file"))
    if buf.channels != N_CHANNELS:
        raise CliError("bad_input", f"expected {N_CHANNELS} channels, got {buf.channels}")
    session = StreamSession(_pipeline(_load_models(args.model), args.fusion_alpha))
    x = buf.samples
    for start in range(0, x.shape[1], args.chunk):
        for d in session.push_samples(x[:, start : start + args.chunk]):
            print(json.dumps(d.to_dict()), flush=True)


def cmd_enhance(args, dirs):
    from .audio_io import AudioBuffer, write_wav
    from .evaluation import LeakageReport, leakage_metrics, mask_enhance
    from .simulator import load_manifest, load_sim_config, read_plan

    manifest = load_manifest(_need_file(args.corpus, "corpus"))
    sim_cfg = load_sim_config(manifest.root)
    models = {} if args.oracle else _load_models(args.model or [])
    if not args.oracle and not models:
        raise CliError("usage", "enhance needs --model or --oracle")
    name = Path(manifest.root).name
    out_dir = dirs["enhanced"] / name
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for e, audio, _, pred in _predict_corpus(manifest, models, args.fusion_alpha, args.oracle):
        masked = mask_enhance(audio, pred, fade_ms=args.fade_ms)
        write_wav(out_dir / f"{e['segment_id']}.wav", AudioBuffer(masked, 16000), "float32")
        plan = read_plan(manifest.path(e, "plan_path"))
        reports.append(leakage_metrics(pred, plan, config=sim_cfg, fade_ms=args.fade_ms))
    summary = LeakageReport.pooled(reports)
    with open(dirs["reports"] / f"leakage_{name}.json", "w") as f:
        json.dump({"pooled": summary, "segments": [r.__dict__ for r in reports]}, f, indent=1)
    print(json.dumps(summary))


def cmd_bench(args, dirs):
    from .evaluation import rtf_benchmark

    pipe = _pipeline(_load_models(args.model), args.fusion_alpha)
    res = rtf_benchmark(_streaming_infer(pipe), args.seconds, args.runs, seed=args.seed)
    with open(dirs["reports"] / "bench.json", "w") as f:
        json.dump(res, f, indent=1)
    print(json.dumps(res))


def _streaming_infer(pipe):
    from .streaming import StreamSession

    def run(audio):
        StreamSession(pipe).push_samples(audio)

    return run


def cmd_gradcheck(args, dirs):
    from .verification import check_all

    results = check_all(seed=args.seed)
    worst = 0.0
    for name, r in results.items():
        worst = max(worst, r.max_rel_error)
        print(json.dumps({"check": name, "max_rel_error": r.max_rel_error, "worst": r.worst_param,
                          "n_checked": r.n_checked}))
    if worst >= args.tol:
        raise CliError("gradcheck_failed", f"max relative error {worst:.3e} >= {args.tol}")


# --------------------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="mpvad", description="Multi-party VAD with cross-talk rejection")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads")
    common.add_argument("--config", help="key = value file supplying flag defaults")
    common.add_argument("--out", default="runs", help="artifact root directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a labelled corpus")
    s.add_argument("--segments", type=int, default=1000)
    s.add_argument("--condition", default="set_a", choices=["set_a", "set_b", "set_c"])
    s.add_argument("--name", help="corpus directory name (default: condition)")
    s.add_argument("--source-dir", help="directory of source utterance WAVs (default: synthetic)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train sc / mc / energy")
    s.add_argument("--model", required=True, choices=["sc", "mc", "energy"])
    s.add_argument("--corpus", required=True)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=1e-3)
    s.set_defaults(func=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "accuracy / counting report"),
                          ("enhance", cmd_enhance, "mask audio and report leakage")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--corpus", required=True)
        s.add_argument("--model", nargs="+", help="one or two checkpoints (sc and mc fuse)")
        s.add_argument("--fusion-alpha", type=float, default=0.75)
        s.add_argument("--oracle", action="store_true", help="use ground-truth labels as predictions")
        if name == "eval":
            s.add_argument("--tag", help="report name suffix (default: condition)")
        else:
            s.add_argument("--fade-ms", type=float, default=10.0)
        s.set_defaults(func=fn)

    s = sub.add_parser("infer", parents=[common], help="stream a 4-channel WAV, decisions to stdout")
    s.add_argument("--stream", required=True)
    s.add_argument("--model", nargs="+", required=True)
    s.add_argument("--fusion-alpha", type=float, default=0.75)
    s.add_argument("--chunk", type=int, default=1600, help="samples per pushed chunk")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("bench", parents=[common], help="real-time factor")
    s.add_argument("--model", nargs="+", required=True)
    s.add_argument("--fusion-alpha", type=float, default=0.75)
    s.add_argument("--seconds", type=float, default=60.0)
    s.add_argument("--runs", type=int, default=30)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every backward pass")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = read_config_file(args.config)
        except OSError as exc:
            _error_line("missing_file", exc)
            return 1
        except CliError as exc:
            _error_line(exc.code, exc)
            return 2
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(defaults) - known
        if unknown:
            _error_line("config", f"unknown config keys: {sorted(unknown)}")
            return 2
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from threadpoolctl import threadpool_limits

    try:
        dirs = _dirs(args.out)
        _write_run_config(args, dirs)
        with threadpool_limits(limits=args.threads):
            args.func(args, dirs)
    except CliError as exc:
        _error_line(exc.code, exc)
        return 2 if exc.code == "usage" else 1
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        _error_line(type(exc).__name__, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
