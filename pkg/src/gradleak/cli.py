"""Command line: ``gradleak <group> <verb> [options]``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import imageio, serialization
from .attack import AttackConfig, ChecksumMismatch, run_attack
from .experiment import ConfigError, run_experiment
from .metrics import match_batch
from .models import ModelSpec, WeightInit, init_weights
from .patterns import builtin_patterns, one_hot
from .tensor import NonFiniteError, ShapeError
from .text import SingularMatrixError, Vocabulary, run_text_attack, text_label
from .victim import GradientSnapshot, capture, load_weights, save_weights, train

log = logging.getLogger("gradleak")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


class UsageError(ValueError):
    pass


class RuntimeAbort(RuntimeError):
    pass


def resolve_threads(value) -> int:
    """``--threads`` wins, then ``GRADLEAK_THREADS``, then 1."""
    raw = value if value is not None else os.environ.get("GRADLEAK_THREADS")
    if raw is None or raw == "":
        return 1
    try:
        n = int(raw)
    except (TypeError, ValueError):
        raise UsageError(f"threads must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("threads must be >= 1")
    return n


def _model_spec(arg: str, input_shape, num_classes: int) -> ModelSpec:
    """A JSON file, inline JSON object, or an architecture name with default sizes."""
    path = Path(arg)
    if path.suffix == ".json" or path.is_file():
        if not path.is_file():
            raise UsageError(f"model file not found: {arg}")
        return ModelSpec.from_dict(json.loads(path.read_text()))
    if arg.lstrip().startswith("{"):
        return ModelSpec.from_dict(json.loads(arg))
    extra = {"hidden": (16,)} if arg == "mlp" else {}
    return ModelSpec(arg, tuple(input_shape), num_classes, **extra)


def _load_data(arg: str, size: int, channels: int, per_class: int, seed: int):
    """``builtin[:kind]`` or a directory of PGM/PPM files (labels = index mod 4)."""
    if arg.startswith("builtin"):
        kind = arg.split(":", 1)[1] if ":" in arg else "mixed"
        return builtin_patterns(kind, size, seed=seed, per_class=per_class, channels=channels)
    if not Path(arg).is_dir():
        raise UsageError(f"data directory not found: {arg}")
    X = imageio.load_directory(arg)
    return X, np.arange(len(X)) % 4


def _attack_config(args) -> AttackConfig:
    return AttackConfig(distance=args.distance, optimizer=args.optimizer, max_iters=args.iters, lr=args.lr,
                        dummy_init=args.dummy_init, q_schedule=args.q_schedule, sigma_mode=args.sigma_mode,
                        reduction=args.reduction, label_init=args.label_init, seed=args.seed,
                        log_every=args.log_every)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _ext(spec: ModelSpec) -> str:
    return "pgm" if spec.input_shape[0] == 1 else "ppm"


# -- verbs ----------------------------------------------------------------

def cmd_victim_capture(args) -> int:
    X_all, labels = _load_data(args.data, args.size, args.channels, args.per_class, args.seed)
    spec = _model_spec(args.model, X_all.shape[1:], args.num_classes)
    Y_all = one_hot(labels % spec.num_classes, spec.num_classes)
    weights = init_weights(spec, WeightInit(args.init, seed=args.seed))
    if args.epochs:
        weights, history = train(spec, weights, (X_all, Y_all), args.epochs, args.lr,
                                 label_scale=args.label_scale, seed=args.seed)
        log.info("training loss by epoch: %s", ", ".join(f"{h:.4f}" for h in history))
    idx = list(range(args.index, args.index + args.batch_size))
    if idx[-1] >= len(X_all):
        raise UsageError(f"items {idx[0]}..{idx[-1]} out of range for {len(X_all)} data items")
    snap = capture(spec, weights, X_all[idx], Y_all[idx], label_scale=args.label_scale,
                   epochs=args.epochs, seed=args.seed)
    out = Path(args.out or "snapshot.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    snap.save(out)
    weights_path = Path(args.weights_out) if args.weights_out else out.with_suffix(".weights.bin")
    save_weights(weights_path, spec, weights)
    if args.truth_out:
        imageio.save_image(args.truth_out, imageio.tile(X_all[idx]))
    print(f"snapshot {out} weights {weights_path} checksum {snap.checksum}")
    return EXIT_OK


def cmd_attack_run(args) -> int:
    snap = GradientSnapshot.load(args.snapshot)
    spec, weights = load_weights(args.weights)
    cfg = _attack_config(args)
    result = run_attack(spec, weights, snap, cfg)
    out = Path(args.out or "attack_out")
    out.mkdir(parents=True, exist_ok=True)
    trace = "iter,distance,mse_vs_truth\n" + "".join(f"{i},{d!r},\n" for i, d in enumerate(result.loss_trace))
    (out / "trace.csv").write_text(trace)
    if spec.is_image:
        imageio.save_image(out / f"recon.{_ext(spec)}", imageio.tile(result.X_recon))
    manifest = {"config": cfg.to_dict(), "snapshot": snap.meta, "iters_run": result.iters_run,
                "best_iter": result.best_iter, "best_loss": result.best_loss,
                "predicted_labels": result.predicted_label.tolist(), "aborted": result.aborted,
                "error": result.error, "timing": {"wall_seconds": result.wall_seconds}}
    _write_json(out / "result.json", manifest)
    print(f"best distance {result.best_loss:.6e} at iteration {result.best_iter}; labels {manifest['predicted_labels']}")
    if result.aborted:
        raise RuntimeAbort(result.error)
    return EXIT_OK


def cmd_text_attack(args) -> int:
    if args.vocab:
        vocab = Vocabulary.from_file(args.vocab, args.dim, seed=args.seed)
    else:
        vocab = Vocabulary.random([f"tok{i}" for i in range(args.vocab_size)], args.dim, seed=args.seed)
    if args.tokens:
        ids = vocab.ids(args.tokens.split())
    else:
        ids = [int(i) for i in np.random.default_rng(args.seed).integers(0, len(vocab), args.seq_len)]
    spec = ModelSpec(args.model, (len(ids), vocab.dim), args.num_classes)
    weights = init_weights(spec, WeightInit("uniform", seed=args.seed))
    snap = capture(spec, weights, vocab.embed(ids)[None], text_label(ids, spec.num_classes), seed=args.seed)
    cfg = AttackConfig(distance=args.distance, optimizer=args.optimizer, max_iters=args.iters, lr=args.lr,
                       dummy_init="constant", constant=0.0, label_init="bias", seed=args.seed,
                       log_every=args.log_every)
    rec = run_text_attack(spec, weights, vocab, snap, cfg, truth_ids=ids)
    out = Path(args.out or "text_out")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "text.json", rec.to_dict())
    (out / "text.txt").write_text(rec.render() + "\n")
    print(rec.render())
    if rec.attack.aborted:
        raise RuntimeAbort(rec.attack.error)
    return EXIT_OK


def _load_images(path: str) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        return imageio.load_directory(p)
    return imageio.load_image(p)[None]


def cmd_metrics_eval(args) -> int:
    recon, truth = _load_images(args.recon), _load_images(args.truth)
    if recon.shape != truth.shape:
        raise UsageError(f"shape mismatch: recon {recon.shape} vs truth {truth.shape}")
    report = match_batch(recon, truth).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_experiment_run(args) -> int:
    report = run_experiment(args.config, seed=args.seed_given, out=args.out, threads=args.threads)
    print(f"{len(report.rows)} runs written to {report.out_dir}")
    if report.aborted:
        print(f"aborted runs: {', '.join(report.aborted)}", file=sys.stderr)
    return report.exit_code


# -- parser ---------------------------------------------------------------

def _globals(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="master seed (default 0)")
    parser.add_argument("--out", default=default, help="output file or directory")
    parser.add_argument("--threads", default=default, help="worker processes (env GRADLEAK_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _attack_args(p, default_iters=None):
    p.add_argument("--distance", default="sapag", choices=["sapag", "dlg", "euclidean"])
    p.add_argument("--optimizer", default="lbfgs_lite", choices=["lbfgs_lite", "adamw", "adam"])
    p.add_argument("--iters", type=int, default=default_iters)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--log-every", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradleak", description="Gradient inversion attacks (SAPAG and DLG).")
    _globals(parser, suppress=False)
    groups = parser.add_subparsers(dest="group", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _globals(common, suppress=True)

    victim = groups.add_parser("victim").add_subparsers(dest="verb", required=True)
    p = victim.add_parser("capture", parents=[common], help="train a victim and save its gradient snapshot")
    p.add_argument("--model", default="lenet_lite", help="architecture name, model JSON file or inline JSON")
    p.add_argument("--data", default="builtin", help="builtin[:kind] or an image directory")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--per-class", type=int, default=4)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--init", default="uniform", choices=["uniform", "xavier_normal"])
    p.add_argument("--epochs", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--label-scale", type=float, default=1.0)
    p.add_argument("--index", type=int, default=0, help="first data item shared")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--weights-out", default=None)
    p.add_argument("--truth-out", default=None)
    p.set_defaults(func=cmd_victim_capture)

    attack = groups.add_parser("attack").add_subparsers(dest="verb", required=True)
    p = attack.add_parser("run", parents=[common], help="reconstruct data from a snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--weights", required=True)
    _attack_args(p)
    p.add_argument("--dummy-init", default="normal", choices=["normal", "constant"])
    p.add_argument("--q-schedule", default="harmonic", choices=["constant", "harmonic", "geometric"])
    p.add_argument("--sigma-mode", default="per_layer", choices=["per_layer", "global"])
    p.add_argument("--reduction", default="elementwise", choices=["elementwise", "layer"])
    p.add_argument("--label-init", default="normal", choices=["normal", "bias"])
    p.set_defaults(func=cmd_attack_run)

    text = groups.add_parser("text").add_subparsers(dest="verb", required=True)
    p = text.add_parser("attack", parents=[common], help="recover tokens from a text-model snapshot")
    p.add_argument("--vocab", default=None, help="vocabulary file, one token per line")
    p.add_argument("--vocab-size", type=int, default=100)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--tokens", default=None, help="space-separated private tokens")
    p.add_argument("--seq-len", type=int, default=8)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--model", default="embedding_head", choices=["embedding_head", "transformer_lite"])
    _attack_args(p, default_iters=500)
    p.set_defaults(func=cmd_text_attack)

    metrics = groups.add_parser("metrics").add_subparsers(dest="verb", required=True)
    p = metrics.add_parser("eval", parents=[common], help="MSE, PSNR and SSIM between image files or directories")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_metrics_eval)

    exp = groups.add_parser("experiment").add_subparsers(dest="verb", required=True)
    p = exp.add_parser("run", parents=[common], help="run a JSON experiment grid")
    p.add_argument("config")
    p.set_defaults(func=cmd_experiment_run)
    return parser


CONFIG_ERRORS = (UsageError, ConfigError, ChecksumMismatch, ShapeError, FileNotFoundError, KeyError,
                 json.JSONDecodeError, imageio.ImageFormatError, serialization.ContainerError,
                 SingularMatrixError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.seed_given = args.seed
        args.seed = args.seed if args.seed is not None else 0
        args.threads = resolve_threads(args.threads)
        return args.func(args)
    except (RuntimeAbort, NonFiniteError) as exc:
        print(f"error: run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
