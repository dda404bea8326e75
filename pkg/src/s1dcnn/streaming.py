"""Frame-synchronous inference with fixed-size ring buffers.

A :class:`Stream` accepts one 13-dim MFCC frame per call. Internally it keeps

* the last ``2C+1`` MFCC frames (for context stacking),
* per block, the last ``K`` first-stage outputs,
* the last 30 target posteriors (for score averaging).

Frame ``t`` is scored once frame ``t + C + L*D`` has been pushed. Buffers start
zero-filled, and :meth:`Stream.flush` feeds zero padding through the pipeline,
so the scores equal :func:`batch_scores` (zero-padded context, batch forward,
trailing 30-frame mean) up to float32 summation order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import ShapeError, StateError
from .frontend import concat_context
from .network import Model, forward
from .numerics import softmax

SCORE_WINDOW = 30
TARGET_CLASS = 1
DEFAULT_SUPPRESSION_MS = 1000


class FrameRing:
    """Ring of ``capacity`` column vectors.

    Every column is written twice, ``capacity`` slots apart, so the ordered
    window is always one contiguous slice.
    """

    def __init__(self, dim: int, capacity: int, dtype=np.float32):
        self.capacity = capacity
        self.data = np.zeros((dim, 2 * capacity), dtype=dtype)
        self.pos = 0

    def push(self, column) -> None:
        self.data[:, self.pos] = column
        self.data[:, self.pos + self.capacity] = column
        self.pos = (self.pos + 1) % self.capacity

    def window(self) -> np.ndarray:
        """``(dim, capacity)`` view, oldest column first."""
        return self.data[:, self.pos:self.pos + self.capacity]


@dataclass
class TriggerEvent:
    frame_index: int
    time_ms: float
    score: float


class TriggerLogic:
    """Fires when the score is at or above ``threshold`` outside the
    suppression window, then suppresses for ``suppression_frames``.

    Level-triggered so that raising the threshold can never add events.
    """

    def __init__(self, threshold: float, suppression_frames: int):
        self.threshold = threshold
        self.suppression_frames = suppression_frames
        self.suppression_until = 0

    def update(self, frame_index: int, score: float) -> bool:
        if score >= self.threshold and frame_index >= self.suppression_until:
            self.suppression_until = frame_index + self.suppression_frames
            return True
        return False


def trigger_frames(scores: np.ndarray, threshold: float, suppression_frames: int) -> np.ndarray:
    """Indices where :class:`TriggerLogic` would fire on ``scores``."""
    above = np.flatnonzero(np.asarray(scores) >= threshold)
    fired = []
    i = 0
    while i < len(above):
        t = above[i]
        fired.append(t)
        i = np.searchsorted(above, t + suppression_frames, side="left")
    return np.asarray(fired, dtype=np.int64)


class _BlockState:
    def __init__(self, block, dtype):
        u = block.as_unit()
        self.w, self.b = u.feature_weights, u.feature_bias
        self.wt, self.bt = u.time_weights, u.time_bias
        self.g1, self.g2 = u.g1, u.g2
        self.lookahead = u.lookahead
        bn = block.bn
        self.bn_mean = bn.running_mean
        self.bn_inv_std = 1 / np.sqrt(bn.running_var + bn.eps)
        self.bn_gamma, self.bn_beta = bn.gamma, bn.beta_shift
        self.ring = FrameRing(u.filters, u.memory, dtype)
        self.zero = np.zeros(u.filters, dtype)
        self.count = 0

    def step(self, x):
        """Consume one input frame (``None`` = padding past the end).

        Returns ``(t, out)``: the block's output frame index, ``-1`` during
        warm-up, and the output vector or ``None`` for padding frames."""
        self.ring.push(self.zero if x is None else self.g1(self.w @ x + self.b))
        self.count += 1
        return self.count - 1 - self.lookahead

    def output(self):
        z = (self.ring.window() * self.wt).sum(axis=1) + self.bt
        a = self.g2(z)
        return self.bn_gamma * ((a - self.bn_mean) * self.bn_inv_std) + self.bn_beta


class Stream:
    """Stateful scorer for one audio stream. Not safe for concurrent use;
    independent streams may share one model."""

    def __init__(self, model: Model):
        cfg = model.config
        self.model = model
        self.config = cfg
        dtype = model.head.weights.dtype
        self.dtype = dtype
        self.context = FrameRing(cfg.feature_dim, 2 * cfg.context + 1, dtype)
        self.blocks = [_BlockState(b, dtype) for b in model.blocks]
        self.scores = FrameRing(1, SCORE_WINDOW, np.float64)
        self.n_scores = 0
        self.frames_seen = 0
        self.context_count = 0
        self._n_real: float = np.inf
        self.finished = False
        self._zero_frame = np.zeros(cfg.feature_dim, dtype)

    def __repr__(self) -> str:
        return f"Stream(frames_seen={self.frames_seen}, scores={self.n_scores})"

    def buffer_sizes(self) -> dict[str, int]:
        """Element counts of every buffer; constant for the life of the stream."""
        return {"context": self.context.data.size,
                "blocks": sum(b.ring.data.size for b in self.blocks),
                "scores": self.scores.data.size}

    def _advance(self, frame) -> tuple[int, float] | None:
        cfg = self.config
        self.context.push(self._zero_frame if frame is None else frame)
        self.context_count += 1
        t = self.context_count - 1 - cfg.context
        if t < 0:
            return None
        x = None if t >= self._n_real else self.context.window().T.reshape(-1)
        for blk in self.blocks:
            t = blk.step(x)
            if t < 0:
                return None
            x = None if t >= self._n_real else blk.output()
        if x is None:
            return None
        logits = self.model.head.weights @ x + self.model.head.bias
        p = float(softmax(logits)[TARGET_CLASS])
        self.scores.push(p)
        self.n_scores += 1
        n = min(self.n_scores, SCORE_WINDOW)
        return t, float(self.scores.window()[0, -n:].mean())

    def push(self, frame: np.ndarray) -> tuple[int, float] | None:
        """Add one MFCC frame; returns ``(frame_index, smoothed_score)`` once
        the warm-up of ``C + L*D`` frames has passed."""
        if self.finished:
            raise StateError("stream already flushed")
        frame = np.asarray(frame, dtype=self.dtype)
        if frame.shape != (self.config.feature_dim,):
            raise ShapeError(f"expected a {self.config.feature_dim}-dim frame, got {frame.shape}")
        self.frames_seen += 1
        return self._advance(frame)

    def flush(self) -> list[tuple[int, float]]:
        """Pad the end of the stream and return the outstanding scores."""
        if self.finished:
            return []
        self.finished = True
        self._n_real = self.frames_seen
        out = []
        for _ in range(self.config.latency_frames):
            r = self._advance(None)
            if r is not None:
                out.append(r)
        return out

    def run(self, frames: np.ndarray) -> np.ndarray:
        """Push every column of ``frames`` ``(F0, T)`` and flush; returns ``T`` scores."""
        out = [r for f in np.asarray(frames).T if (r := self.push(f)) is not None]
        out += self.flush()
        return np.array([s for _, s in out], dtype=np.float64)

    def detect(self, frames: Iterable[np.ndarray], threshold: float,
               suppression_ms: float = DEFAULT_SUPPRESSION_MS, flush: bool = True) -> Iterator[TriggerEvent]:
        """Push ``frames`` and yield trigger events as they happen."""
        hop = self.config.hop_ms
        logic = TriggerLogic(threshold, int(round(suppression_ms / hop)))

        def emit(results):
            for idx, score in results:
                if logic.update(idx, score):
                    yield TriggerEvent(idx, idx * hop, score)

        for f in frames:
            r = self.push(f)
            if r is not None:
                yield from emit([r])
        if flush:
            yield from emit(self.flush())


def new_stream(model: Model) -> Stream:
    return Stream(model)


def smooth_scores(posteriors: np.ndarray, window: int = SCORE_WINDOW) -> np.ndarray:
    """Trailing mean over the last ``min(window, t+1)`` values."""
    p = np.asarray(posteriors, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(p)])
    t = np.arange(1, len(p) + 1)
    lo = np.maximum(0, t - window)
    return (csum[t] - csum[lo]) / (t - lo)


def batch_scores(model: Model, mfcc_feats: np.ndarray) -> np.ndarray:
    """Scores for a whole ``(F0, T)`` MFCC sequence under the streaming
    conventions: zero-padded context, zero time padding, 30-frame trailing mean."""
    cfg = model.config
    x = concat_context(np.asarray(mfcc_feats, dtype=model.head.weights.dtype), cfg.context, pad="zero")
    post = forward(model, x)[TARGET_CLASS]
    return smooth_scores(post)
