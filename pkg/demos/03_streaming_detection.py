"""Frame-by-frame scoring with ring buffers gives the same scores as whole-sequence inference."""
import numpy as np

from s1dcnn.frontend import extract_mfcc
from s1dcnn.network import build, paper_config
from s1dcnn.numerics import make_rng
from s1dcnn.streaming import Stream, batch_scores
from s1dcnn.training import synth_utterance

model = build(paper_config(lookahead=1), make_rng(0))
utt = synth_utterance(seed=3, index=0, positive=True)
mfcc = extract_mfcc(utt.audio)
print("utterance:", f"{utt.audio.duration_s:.2f} s,", mfcc.shape[1], "MFCC frames")

stream = Stream(model)
print("latency: a frame is scored", model.config.latency_frames, "pushes after it arrives")
emitted = []
for n, frame in enumerate(mfcc.T, 1):
    r = stream.push(frame)
    if r is not None:
        if not emitted:
            print("first score arrives on push", n, "for frame", r[0])
        emitted.append(r)
emitted += stream.flush()
print("scores after flush:", len(emitted))
print("buffer sizes:", stream.buffer_sizes())

streamed = np.array([s for _, s in emitted])
batch = batch_scores(model, mfcc)
print("\nmax |stream - batch| =", np.abs(streamed - batch).max())
