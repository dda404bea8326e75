"""Command-line driver.

Exit codes: 0 success, 1 invalid arguments, 2 runtime or data errors.
Results go to stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, frontend, network, training
from .errors import S1dcnnError
from .numerics import make_rng
from .streaming import DEFAULT_SUPPRESSION_MS, Stream, TriggerLogic

CONFIGS = {
    "paper": dict(feature_dim=13, context=5, depth=7, filters=32, memory=9, classes=2),
    "tiny": dict(feature_dim=13, context=2, depth=2, filters=8, memory=4, classes=2),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- equivalence check --------------------------------------------------------------

@dataclass
class EquivalenceReport:
    seeds: int
    max_deviation: float
    control_deviation: float | None

    def text(self) -> str:
        lines = [f"seeds={self.seeds}", f"max_abs_deviation={self.max_deviation:.9g}"]
        if self.control_deviation is not None:
            lines.append(f"control_max_abs_deviation={self.control_deviation:.9g}")
        return "\n".join(lines)


def _randomise_batchnorm(model: network.Model, rng) -> None:
    for blk in model.blocks:
        n = blk.bn.gamma.shape[0]
        blk.bn.gamma[:] = rng.uniform(0.5, 1.5, n)
        blk.bn.beta_shift[:] = rng.normal(0, 0.5, n)
        blk.bn.running_mean[:] = rng.normal(0, 0.5, n)
        blk.bn.running_var[:] = rng.uniform(0.5, 2.0, n)


def verify_equivalence(seeds: int = 100, config: network.ModelConfig | None = None,
                       control: bool = True) -> EquivalenceReport:
    """Random SVDF networks against their reduced S1DCNN form.

    Per seed: random weights and batch-norm statistics, a random input of
    50-300 frames, logits from both forms compared. The control run gives the
    reduced model random non-zero biases, which must break the equality.
    """
    if seeds < 1:
        raise ValueError("need at least one seed")
    cfg = config or network.ModelConfig(**CONFIGS["paper"], arch="svdf")
    worst, worst_ctl = 0.0, 0.0
    for seed in range(seeds):
        rng = make_rng(seed)
        svdf = network.build(cfg, rng)
        _randomise_batchnorm(svdf, rng)
        x = rng.normal(size=(cfg.input_dim, int(rng.integers(50, 301)))).astype(np.float32)
        reduced = network.to_s1dcnn(svdf)
        ref = network.logits(svdf, x)
        worst = max(worst, float(np.abs(network.logits(reduced, x) - ref).max()))
        if control:
            ctl = network.to_s1dcnn(svdf.astype(np.float32))
            for blk in ctl.blocks:
                n = blk.layer.filters
                blk.layer.feature_bias[:] = rng.normal(0, 0.5, n)
                blk.layer.time_bias[:] = rng.normal(0, 0.5, n)
            worst_ctl = max(worst_ctl, float(np.abs(network.logits(ctl, x) - ref).max()))
    return EquivalenceReport(seeds, worst, worst_ctl if control else None)


# --- commands ----------------------------------------------------------------------

def _config_from(args) -> network.ModelConfig:
    try:
        return network.ModelConfig(**CONFIGS[args.config], lookahead=args.lookahead, arch=args.arch)
    except S1dcnnError as exc:
        raise UsageError(str(exc)) from exc


def _load_model(path: str) -> network.Model:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"model file not found: {p}")
    return network.load(p)


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, utt in enumerate(training.synth_dataset(args.seed, args.n_pos, args.n_neg)):
        name = f"utt{i:05d}.wav"
        frontend.write_wav(out / name, utt.audio)
        records.append((name, utt))
    training.write_manifest(out / "manifest.txt", records)
    print(f"wrote {len(records)} utterances to {out / 'manifest.txt'}")
    return 0


def cmd_features(args) -> int:
    feats = frontend.extract_mfcc(frontend.read_wav(args.wav))
    if args.context:
        feats = frontend.concat_context(feats, args.context, pad=args.pad)
    frontend.save_features(args.out, feats)
    print(f"F={feats.shape[0]} T={feats.shape[1]}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    if args.manifest:
        dataset = training.read_manifest(args.manifest)
    else:
        dataset = training.synth_dataset(args.seed, args.synth_pos, args.synth_neg)
    hyper = training.TrainHyper(seed=args.seed, batch_size=args.batch_size, max_epochs=args.max_epochs)
    model, log = training.train(cfg, dataset, hyper, on_epoch=lambda r: print(r.line(), flush=True))
    network.save(model, args.out)
    if args.log:
        Path(args.log).write_text(log.text())
    print(f"best_cv_loss={log.best_cv_loss:.9g} cv_accuracy={log.best_cv_accuracy:.9g} model={args.out}")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    positives = [u for u in training.read_manifest(args.manifest) if u.is_positive]
    if args.neg_manifest:
        negatives = [u.audio for u in training.read_manifest(args.neg_manifest)]
    else:
        negatives = training.synth_negative_stream(args.seed, args.neg_synth_hours)
    if not positives:
        raise S1dcnnError(f"{args.manifest}: no positive utterances")
    report = evaluation.evaluate(model, positives, negatives, args.suppression_ms)
    if args.det:
        evaluation.emit_det(report, args.det)
    print(report.summary())
    return 0


def _pcm_chunks(args, chunk: int = 3200):
    if args.stdin:
        src = sys.stdin.buffer
        while data := src.read(chunk):
            yield frontend.pcm16_to_float(data)
    else:
        samples = frontend.read_wav(args.wav).samples
        for i in range(0, len(samples), chunk // 2):
            yield samples[i:i + chunk // 2]


def cmd_detect(args) -> int:
    model = _load_model(args.model)
    if not args.stdin:
        frontend.read_wav(args.wav)  # fail early on a bad file
    fe = frontend.StreamingFrontend()
    stream = Stream(model)
    hop = model.config.hop_ms
    logic = TriggerLogic(args.threshold, int(round(args.suppression_ms / hop)))

    def report(results):
        for idx, score in results:
            if logic.update(idx, score):
                print(f"frame={idx} time_ms={idx * hop} score={score:.6f}", flush=True)

    for samples in _pcm_chunks(args):
        for frame in fe.push(samples).T:
            r = stream.push(frame)
            if r is not None:
                report([r])
    report(stream.flush())
    return 0


def cmd_info(args) -> int:
    target = _load_model(args.model) if args.model else _config_from(args)
    print(network.format_info(network.info(target), as_json=args.json))
    return 0


def cmd_grad_check(args) -> int:
    model, x, labels = training.grad_check_case(args.seed)
    err = training.grad_check(model, x, labels, eps=args.eps, kink_guard=args.kink_guard)
    print(f"max_rel_error={err:.3e}")
    if args.tol is not None and err >= args.tol:
        print(f"gradient check failed: {err:.3e} >= {args.tol:g}", file=sys.stderr)
        return 2
    return 0


def cmd_verify_equivalence(args) -> int:
    rep = verify_equivalence(args.seeds, control=not args.no_control)
    print(rep.text())
    ok = rep.max_deviation < 1e-5 and (rep.control_deviation is None or rep.control_deviation > 1e-3)
    if not ok:
        print("equivalence check failed", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s1dcnn", description="Streaming keyword spotting with SVDF / stacked 1D CNN models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_flags(sp):
        sp.add_argument("--config", choices=sorted(CONFIGS), default="paper")
        sp.add_argument("--lookahead", type=int, default=0)
        sp.add_argument("--arch", choices=network.ARCHS, default="s1dcnn")

    sp = sub.add_parser("synth-data", help="write a synthetic keyword dataset")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-pos", type=int, default=100)
    sp.add_argument("--n-neg", type=int, default=100)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("features", help="extract MFCC features from a WAV file")
    sp.add_argument("--wav", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--context", type=int, default=0)
    sp.add_argument("--pad", choices=("edge", "zero"), default="edge")
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("train", help="train a model")
    model_flags(sp)
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--manifest")
    src.add_argument("--synth-pos", type=int, default=500)
    sp.add_argument("--synth-neg", type=int, default=500)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--max-epochs", type=int, default=60)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="DET curve and FRR at 1 false alarm per hour")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True, help="positives are taken from this manifest")
    neg = sp.add_mutually_exclusive_group()
    neg.add_argument("--neg-manifest")
    neg.add_argument("--neg-synth-hours", type=float, default=2.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--suppression-ms", type=float, default=DEFAULT_SUPPRESSION_MS)
    sp.add_argument("--det")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("detect", help="stream audio through a model and print trigger events")
    sp.add_argument("--model", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav")
    src.add_argument("--stdin", action="store_true", help="raw 16-bit LE mono 16 kHz PCM on stdin")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--suppression-ms", type=float, default=DEFAULT_SUPPRESSION_MS)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("info", help="parameters, MACs, receptive field and delay")
    model_flags(sp)
    sp.add_argument("--model")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_info)

    sp = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--kink-guard", type=float, default=0.0)
    sp.add_argument("--tol", type=float)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("verify-equivalence", help="SVDF vs reduced S1DCNN outputs")
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--no-control", action="store_true")
    sp.set_defaults(func=cmd_verify_equivalence)
    return p


def _validate(args) -> None:
    if getattr(args, "threshold", 0.0) < 0:
        raise UsageError("--threshold must be >= 0")
    for name in ("seeds", "n_pos", "n_neg", "synth_pos", "synth_neg", "batch_size", "max_epochs"):
        v = getattr(args, name, None)
        if v is not None and v < (1 if name in ("seeds", "batch_size", "max_epochs") else 0):
            raise UsageError(f"--{name.replace('_', '-')} out of range: {v}")


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _validate(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (S1dcnnError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
