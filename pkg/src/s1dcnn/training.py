"""End-to-end training on a desk-scale synthetic keyword task.

Labels mark the 30 frames before the keyword end as target. Positives are
turned into negatives with probability 0.5 by cutting the keyword out. Adam
drives the updates and a two-stage schedule controls the learning rate: during
warm-up it grows x1.4 on every cross-validation improvement until 8 epochs pass
without one, then training rolls back to the best model and enters the main
stage, halving the rate after 4 flat epochs and stopping after 8.
"""
from __future__ import annotations

import copy
import enum
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError, TrainingDivergedError
from .frontend import (SAMPLE_RATE, AudioBuffer, apply_gain, concat_context, extract_mfcc,
                       num_frames, DEFAULT_SPEC)
from .layers import Activation, SvdfLayer
from .network import Model, ModelConfig, backward, build, forward_train, to_s1dcnn
from .numerics import Rng, log_softmax, make_rng, softmax

log = logging.getLogger(__name__)

LABEL_FRAMES = 30
GAINS_DB = (-32.0, -20.0, 0.0)
KEYWORD_TONES_HZ = (440.0, 880.0, 660.0)
TONE_S = 0.2
TONE_AMP = 0.5


# --- data ----------------------------------------------------------------------

@dataclass
class Utterance:
    """``keyword_span`` is the keyword's ``[start, end)`` sample range; it is
    needed to cut the keyword out and to place the labels."""

    audio: AudioBuffer
    is_positive: bool
    keyword_end_frame: int | None = None
    keyword_span: tuple[int, int] | None = None

    def __post_init__(self):
        if self.is_positive != (self.keyword_end_frame is not None):
            raise DataError("keyword_end_frame must be given exactly for positive utterances")


def sample_to_frame(sample: int, n_samples: int) -> int:
    """Index of the first frame whose window centre is at or after ``sample``."""
    win = DEFAULT_SPEC.window_samples()
    hop = DEFAULT_SPEC.hop_samples()
    t = math.ceil((sample - win / 2) / hop)
    return int(min(max(t, 0), num_frames(n_samples)))


def make_labels(utt: Utterance, n_frames: int, label_frames: int = LABEL_FRAMES,
                offset: int = 0) -> np.ndarray:
    """Per-frame class: 1 on ``[end - offset - label_frames, end - offset)``,
    clipped at 0, and 0 elsewhere."""
    labels = np.zeros(n_frames, dtype=np.int64)
    if not utt.is_positive:
        return labels
    end = utt.keyword_end_frame
    if end is None or not 0 <= end <= n_frames:
        raise DataError(f"keyword end frame {end} outside [0, {n_frames}]")
    hi = max(end - offset, 0)
    labels[max(hi - label_frames, 0):hi] = 1
    return labels


def drop_keyword(utt: Utterance, rng: Rng, p: float = 0.5) -> Utterance:
    """With probability ``p`` cut the keyword samples out and relabel negative."""
    if not utt.is_positive or utt.keyword_span is None:
        raise DataError("drop_keyword needs a positive utterance with a known keyword span")
    if rng.random() >= p:
        return utt
    s, e = utt.keyword_span
    samples = np.concatenate([utt.audio.samples[:s], utt.audio.samples[e:]])
    return Utterance(AudioBuffer(samples, utt.audio.sample_rate), is_positive=False)


def _tone(freq: float, rng: Rng | None = None, dur: float = TONE_S, amp: float = TONE_AMP) -> np.ndarray:
    n = int(round(dur * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    ramp = int(0.01 * SAMPLE_RATE)
    env = np.ones(n)
    env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[-ramp:] = env[:ramp][::-1]
    phase = 0.0 if rng is None else rng.uniform(0, 2 * np.pi)
    return amp * env * np.sin(2 * np.pi * freq * t + phase)


def keyword_waveform() -> np.ndarray:
    """The clean keyword: the three tones back to back, zero phase."""
    return np.concatenate([_tone(f) for f in KEYWORD_TONES_HZ]).astype(np.float32)


def _noise_std(rng: Rng) -> float:
    snr_db = rng.uniform(5.0, 20.0)
    return math.sqrt(TONE_AMP ** 2 / 2 / 10 ** (snr_db / 10))


def synth_utterance(seed: int, index: int, positive: bool) -> Utterance:
    """One synthetic utterance, a pure function of ``(seed, index, positive)``.

    Positive: noise lead-in, the tones 440, 880, 660 Hz (200 ms each), then a
    0.5-2 s noise "query". Negative: same layout with either no tones or the
    tones in a shuffled order. White noise at 5-20 dB SNR throughout and a
    per-utterance gain of -32, -20 or 0 dB.
    """
    rng = make_rng(np.random.SeedSequence([seed, index, int(positive)]).generate_state(1)[0])
    lead = int(rng.uniform(0.1, 1.0) * SAMPLE_RATE)
    kw_len = int(round(len(KEYWORD_TONES_HZ) * TONE_S * SAMPLE_RATE))
    tail = int(rng.uniform(0.5, 2.0) * SAMPLE_RATE)
    n = lead + kw_len + tail
    samples = rng.normal(0.0, _noise_std(rng), n)
    if positive:
        order = KEYWORD_TONES_HZ
    elif rng.random() < 0.5:
        order = ()
    else:
        perms = [(0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
        order = tuple(KEYWORD_TONES_HZ[i] for i in perms[rng.integers(len(perms))])
    if order:
        samples[lead:lead + kw_len] += np.concatenate([_tone(f, rng) for f in order])
    gain = GAINS_DB[rng.integers(len(GAINS_DB))]
    audio = apply_gain(AudioBuffer(samples.astype(np.float32)), gain)
    if not positive:
        return Utterance(audio, is_positive=False)
    span = (lead, lead + kw_len)
    return Utterance(audio, True, sample_to_frame(span[1], n), span)


def synth_dataset(seed: int, n_pos: int, n_neg: int) -> list[Utterance]:
    """``n_pos`` positives followed by ``n_neg`` negatives."""
    if n_pos < 0 or n_neg < 0:
        raise ValueError("counts must be non-negative")
    return ([synth_utterance(seed, i, True) for i in range(n_pos)]
            + [synth_utterance(seed, n_pos + i, False) for i in range(n_neg)])


def synth_negative_stream(seed: int, hours: float, clip_s: float = 60.0) -> list[AudioBuffer]:
    """Keyword-free audio cut into clips: noise at a random level and gain with
    a distractor (shuffled tone triple or a single tone) every 2-6 s."""
    rng = make_rng(np.random.SeedSequence([seed, 0x4E47]).generate_state(1)[0])
    n_clips = max(1, int(math.ceil(hours * 3600 / clip_s)))
    n = int(clip_s * SAMPLE_RATE)
    perms = [(0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    clips = []
    for _ in range(n_clips):
        samples = rng.normal(0.0, _noise_std(rng), n)
        pos = int(rng.uniform(0.5, 3.0) * SAMPLE_RATE)
        while True:
            if rng.random() < 0.5:
                order = [KEYWORD_TONES_HZ[i] for i in perms[rng.integers(len(perms))]]
            else:
                order = [KEYWORD_TONES_HZ[rng.integers(3)]]
            ev = np.concatenate([_tone(f, rng) for f in order])
            if pos + len(ev) > n:
                break
            samples[pos:pos + len(ev)] += ev
            pos += len(ev) + int(rng.uniform(2.0, 6.0) * SAMPLE_RATE)
        gain = GAINS_DB[rng.integers(len(GAINS_DB))]
        clips.append(apply_gain(AudioBuffer(samples.astype(np.float32)), gain))
    return clips


def features(audio: AudioBuffer, context: int) -> np.ndarray:
    """MFCCs context-stacked with zero padding, matching what a stream sees."""
    return concat_context(extract_mfcc(audio), context, pad="zero")


# --- manifests -----------------------------------------------------------------

def write_manifest(path: str | Path, records: list[tuple[str, Utterance]]) -> None:
    """One line per utterance: ``<wav> <label> <end_frame|-> <kw_start|-> <kw_end|->``."""
    lines = []
    for wav, utt in records:
        end = "-" if utt.keyword_end_frame is None else str(utt.keyword_end_frame)
        s, e = ("-", "-") if utt.keyword_span is None else map(str, utt.keyword_span)
        lines.append(f"{wav} {int(utt.is_positive)} {end} {s} {e}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> list[Utterance]:
    from .frontend import read_wav

    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 5):
            raise DataError(f"{path}:{lineno}: expected 3 or 5 fields, got {len(parts)}")
        wav = Path(parts[0])
        if not wav.is_absolute():
            wav = path.parent / wav
        positive = parts[1] == "1"
        end = None if parts[2] == "-" else int(parts[2])
        span = None
        if len(parts) == 5 and parts[3] != "-":
            span = (int(parts[3]), int(parts[4]))
        out.append(Utterance(read_wav(wav), positive, end, span))
    return out


# --- loss and optimiser ---------------------------------------------------------------

def cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None):
    """Mean per-frame cross-entropy over real frames and its gradient w.r.t.
    ``logits`` ``(..., classes, T)``: ``(softmax - onehot) / n_frames``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[:-2] + logits.shape[-1:] != labels.shape:
        raise ShapeError(f"logits {logits.shape} do not match labels {labels.shape}")
    w = np.ones(labels.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    n = w.sum()
    logp = log_softmax(logits, axis=-2)
    picked = np.take_along_axis(logp, labels[..., None, :], axis=-2)[..., 0, :]
    loss = float(-(picked * w).sum() / n)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, labels[..., None, :], 1, axis=-2)
    grad = (softmax(logits, axis=-2) - onehot) * (w[..., None, :] / n).astype(logits.dtype)
    return loss, grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def reset_moments(self) -> None:
        self.step = 0
        self.m, self.v = [], []


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Bias-corrected Adam update, in place."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


# --- schedule -----------------------------------------------------------------------

class Action(str, enum.Enum):
    CONTINUE = "continue"
    ROLLBACK_TO_BEST = "rollback_to_best"
    DECAY_LR = "decay_lr"
    STOP = "stop"


@dataclass
class ScheduleState:
    lr: float = 1e-3
    stage: str = "warmup"
    best_cv_loss: float = math.inf
    epochs_since_improve: int = 0
    best_model_snapshot: Model | None = None
    growth: float = 1.4
    decay: float = 0.5
    warmup_patience: int = 8
    decay_patience: int = 4
    stop_patience: int = 8


def schedule_epoch(state: ScheduleState, cv_loss: float, model: Model | None = None) -> Action:
    """Update the schedule with this epoch's CV loss and say what to do next.

    ``ROLLBACK_TO_BEST`` ends the warm-up: the caller restores
    ``best_model_snapshot`` and training continues in the main stage.
    ``model``, when given, is snapshotted on improvement.
    """
    if not math.isfinite(cv_loss):
        raise TrainingDivergedError(f"non-finite cross-validation loss {cv_loss}")
    if cv_loss < state.best_cv_loss:
        state.best_cv_loss = cv_loss
        state.epochs_since_improve = 0
        if model is not None:
            state.best_model_snapshot = copy.deepcopy(model)
        if state.stage == "warmup":
            state.lr *= state.growth
        return Action.CONTINUE

    state.epochs_since_improve += 1
    if state.stage == "warmup":
        if state.epochs_since_improve >= state.warmup_patience:
            state.stage = "main"
            state.epochs_since_improve = 0
            return Action.ROLLBACK_TO_BEST
        return Action.CONTINUE
    if state.epochs_since_improve >= state.stop_patience:
        return Action.STOP
    if state.epochs_since_improve == state.decay_patience:
        state.lr *= state.decay
        return Action.DECAY_LR
    return Action.CONTINUE


def restore(model: Model, snapshot: Model) -> None:
    """Copy every array of ``snapshot`` into ``model`` in place."""
    for dst, src in zip(model.tensors(), snapshot.tensors()):
        dst[...] = src


# --- training loop ---------------------------------------------------------------------

@dataclass
class TrainHyper:
    seed: int = 0
    batch_size: int = 32
    lr: float = 1e-3
    max_epochs: int = 60
    cv_fraction: float = 0.1
    keyword_drop: float = 0.5
    label_frames: int = LABEL_FRAMES
    label_offset: int = 0


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    lr: float
    train_loss: float
    cv_loss: float
    cv_accuracy: float
    action: str

    def line(self) -> str:
        return (f"epoch={self.epoch} stage={self.stage} lr={self.lr:.9g} "
                f"train_loss={self.train_loss:.9g} cv_loss={self.cv_loss:.9g} action={self.action}")


@dataclass
class TrainLog:
    header: list[str]
    epochs: list[EpochRecord]
    initial_cv_loss: float
    best_cv_loss: float
    best_cv_accuracy: float

    def text(self) -> str:
        return "\n".join([f"# {h}" for h in self.header] + [e.line() for e in self.epochs]) + "\n"


def is_cv(index: int, fraction: float) -> bool:
    """Seed-independent split: CRC32 of the utterance index."""
    return (zlib.crc32(str(index).encode()) % 1000) < fraction * 1000


@dataclass
class _Example:
    x: np.ndarray
    y: np.ndarray


def _batches(examples: list[_Example], size: int):
    for i in range(0, len(examples), size):
        chunk = examples[i:i + size]
        t = max(e.x.shape[1] for e in chunk)
        f = chunk[0].x.shape[0]
        x = np.zeros((len(chunk), f, t), dtype=np.float32)
        y = np.zeros((len(chunk), t), dtype=np.int64)
        mask = np.zeros((len(chunk), t), dtype=np.float32)
        for j, e in enumerate(chunk):
            n = e.x.shape[1]
            x[j, :, :n] = e.x
            y[j, :n] = e.y
            mask[j, :n] = 1
        yield x, y, mask


def evaluate_cv(model: Model, examples: list[_Example], batch_size: int = 64) -> tuple[float, float]:
    """Frame-pooled cross-entropy and frame accuracy in inference mode."""
    total, correct, frames = 0.0, 0, 0
    for x, y, mask in _batches(examples, batch_size):
        out, _ = forward_train(model, x, mask, bn_mode="infer")
        loss, _ = cross_entropy(out, y, mask)
        n = mask.sum()
        total += loss * n
        correct += int(((out.argmax(axis=1) == y) * mask).sum())
        frames += int(n)
    return total / frames, correct / frames


def _prepare(utts: list[Utterance], cfg: ModelConfig, hyper: TrainHyper) -> list[_Example]:
    out = []
    for u in utts:
        x = features(u.audio, cfg.context)
        out.append(_Example(x, make_labels(u, x.shape[1], hyper.label_frames, hyper.label_offset)))
    return out


def train(config: ModelConfig, dataset: list[Utterance], hyper: TrainHyper | None = None,
          on_epoch=None) -> tuple[Model, TrainLog]:
    """Train from scratch and return the model with the best CV loss."""
    hyper = hyper or TrainHyper()
    init_seed, data_seed = np.random.SeedSequence(hyper.seed).spawn(2)
    model = build(config, make_rng(init_seed))
    rng = make_rng(data_seed)

    train_utts = [u for i, u in enumerate(dataset) if not is_cv(i, hyper.cv_fraction)]
    cv_utts = [u for i, u in enumerate(dataset) if is_cv(i, hyper.cv_fraction)]
    if not train_utts or not cv_utts:
        raise DataError("need non-empty train and cross-validation splits")

    train_ex = _prepare(train_utts, config, hyper)
    # keyword-dropped variants, precomputed so each epoch only flips a coin
    dropped = {}
    for i, u in enumerate(train_utts):
        if u.is_positive and u.keyword_span is not None and hyper.keyword_drop > 0:
            cut = drop_keyword(u, make_rng(0), p=1.0)
            dropped[i] = _prepare([cut], config, hyper)[0]
    cv_ex = _prepare(cv_utts, config, hyper)

    header = [
        f"config {config}",
        f"desk scale: minibatch={hyper.batch_size} utterances, epoch=full training split "
        f"({len(train_utts)} utterances), cv={len(cv_utts)} utterances, max_epochs={hyper.max_epochs}",
        f"seed={hyper.seed} keyword_drop={hyper.keyword_drop} label_frames={hyper.label_frames}",
    ]
    init_cv, init_acc = evaluate_cv(model, cv_ex)
    sched = ScheduleState(lr=hyper.lr, best_cv_loss=init_cv, best_model_snapshot=copy.deepcopy(model))
    best_acc = init_acc
    adam = AdamState(lr=hyper.lr)
    names = [n for n, _ in model.named_parameters()]
    params = [p for _, p in model.named_parameters()]
    records = []

    for epoch in range(1, hyper.max_epochs + 1):
        stage, lr = sched.stage, sched.lr
        adam.lr = lr
        epoch_ex = [dropped[i] if i in dropped and rng.random() < hyper.keyword_drop else e
                    for i, e in enumerate(train_ex)]
        order = rng.permutation(len(epoch_ex))
        epoch_ex = [epoch_ex[i] for i in order]
        tot, frames = 0.0, 0.0
        for x, y, mask in _batches(epoch_ex, hyper.batch_size):
            out, cache = forward_train(model, x, mask)
            loss, dlogits = cross_entropy(out, y, mask)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"epoch {epoch}: loss became {loss} at lr={lr:g}")
            grads = backward(model, cache, dlogits)
            adam_step(params, [grads[n] for n in names], adam)
            tot += loss * mask.sum()
            frames += mask.sum()
        train_loss = tot / frames
        cv_loss, cv_acc = evaluate_cv(model, cv_ex)
        improved = cv_loss < sched.best_cv_loss
        action = schedule_epoch(sched, cv_loss, model)
        if improved:
            best_acc = cv_acc
        if action is Action.ROLLBACK_TO_BEST:
            restore(model, sched.best_model_snapshot)
            adam.reset_moments()
        rec = EpochRecord(epoch, stage, lr, train_loss, cv_loss, cv_acc, action.value)
        records.append(rec)
        log.info(rec.line())
        if on_epoch is not None:
            on_epoch(rec)
        if action is Action.STOP:
            break

    restore(model, sched.best_model_snapshot)
    return model, TrainLog(header, records, init_cv, sched.best_cv_loss, best_acc)


# --- gradient check --------------------------------------------------------------------

def _nudge_relu_preactivations(model: Model, x: np.ndarray, margin: float) -> None:
    """Shift second-stage biases so no ReLU pre-activation sits within ``margin`` of 0."""
    for i, blk in enumerate(model.blocks):
        if blk.layer.g2 != Activation.RELU:
            continue
        _, cache = forward_train(model, x)
        z = cache["blocks"][i][0]["second"]["z2"]
        z = np.moveaxis(z, -2, 0).reshape(z.shape[-2], -1)
        for n in range(z.shape[0]):
            for delta in sorted(np.linspace(-1, 1, 401), key=abs):
                if np.abs(z[n] + delta).min() >= margin:
                    blk.layer.time_bias[n] += delta
                    break


def grad_check(model: Model, feats: np.ndarray, labels: np.ndarray | None = None, eps: float = 1e-4,
               kink_guard: float = 0.0, seed: int = 0) -> float:
    """Worst relative error between analytic gradients and 64-bit central
    differences of the training loss, over every parameter element.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``. ``kink_guard > 0``
    first nudges ReLU pre-activations at least that far from zero; SVDF models
    are then checked through their equivalent S1DCNN form, since the nudge
    needs biases.
    """
    m = model.astype(np.float64)
    x = np.asarray(feats, dtype=np.float64)
    if labels is None:
        rng = make_rng(seed)
        labels = rng.integers(0, m.config.classes, size=x.shape[:-2] + x.shape[-1:])
    if kink_guard > 0:
        if any(isinstance(b.layer, SvdfLayer) for b in m.blocks):
            m = to_s1dcnn(m)
        _nudge_relu_preactivations(m, x, kink_guard)

    def loss_at():
        out, _ = forward_train(m, x)
        return cross_entropy(out, labels)[0]

    out, cache = forward_train(m, x)
    _, dlogits = cross_entropy(out, labels)
    grads = backward(m, cache, dlogits)
    worst = 0.0
    for name, p in m.named_parameters():
        g = grads[name]
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_at()
            flat[j] = orig - eps
            down = loss_at()
            flat[j] = orig
            num = (up - down) / (2 * eps)
            ana = g.reshape(-1)[j]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return worst


def grad_check_case(seed: int = 0, lookahead: int = 1):
    """Tiny full stack (D=2, N=3, K=3) with random batch-norm parameters, a
    two-sequence input batch and random labels."""
    rng = make_rng(seed)
    cfg = ModelConfig(feature_dim=4, context=1, depth=2, filters=3, memory=3, lookahead=lookahead)
    model = build(cfg, rng)
    for blk in model.blocks:
        blk.layer.feature_bias[:] = rng.normal(0, 0.3, 3)
        blk.layer.time_bias[:] = rng.normal(0, 0.3, 3)
        blk.bn.gamma[:] = rng.uniform(0.5, 1.5, 3)
        blk.bn.beta_shift[:] = rng.normal(0, 0.3, 3)
    model.head.bias[:] = rng.normal(0, 0.3, 2)
    x = rng.normal(size=(2, cfg.input_dim, 8))
    labels = rng.integers(0, 2, size=(2, 8))
    return model, x, labels
