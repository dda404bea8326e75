"""Train a small model on the synthetic tone keyword and draw its DET curve.

Takes a minute or two on one core.
"""
import logging

import numpy as np

from s1dcnn.evaluation import evaluate
from s1dcnn.frontend import AudioBuffer, extract_mfcc
from s1dcnn.streaming import Stream
from s1dcnn.network import ModelConfig
from s1dcnn.training import TrainHyper, keyword_waveform, synth_dataset, synth_negative_stream, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = ModelConfig(feature_dim=13, context=5, depth=3, filters=16, memory=9, lookahead=1)
data = synth_dataset(seed=7, n_pos=200, n_neg=200)
model, log = train(cfg, data, TrainHyper(seed=0, max_epochs=10))
print(f"\nbest cv loss {log.best_cv_loss:.4f}, frame accuracy {log.best_cv_accuracy:.4f}")

positives = synth_dataset(seed=1007, n_pos=100, n_neg=0)
negatives = synth_negative_stream(seed=2007, hours=0.5)
report = evaluate(model, positives, negatives)
print(report.summary())

print("\n threshold    frr  fa/hour")
for p in report.det[::100]:
    print(f"{p.threshold:10.3f} {p.frr:6.3f} {p.fa_per_hour:8.1f}")

# two keywords 3 s apart in 6 s of noise
audio = np.random.default_rng(1).normal(0, 0.02, 6 * 16000)
keyword = keyword_waveform()
for start in (16000, 4 * 16000):
    audio[start:start + len(keyword)] += keyword
frames = extract_mfcc(AudioBuffer(audio.astype(np.float32))).T
print("\nevents on a 6 s clip with keywords at 1 s and 4 s:")
for e in Stream(model).detect(frames, threshold=0.5, suppression_ms=1000):
    print(f"  frame={e.frame_index} time_ms={e.time_ms} score={e.score:.4f}")
