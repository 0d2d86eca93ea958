"""Inspect the 39-dimensional MFCC features.

Static cepstra (C0 replaced by log energy), deltas, and delta-deltas at
100 frames per second; these are the inputs of stage-1 unit discovery.
"""

import numpy as np

from wavunits import AudioClip, mfcc39

rate = 16000
t = np.arange(rate) / rate
clip = AudioClip(samples=0.5 * np.sin(2 * np.pi * 1000.0 * t), sample_rate=rate,
                 source_id="demo-1khz")

feats = mfcc39(clip)
print(f"1 s @ 16 kHz -> {feats.n_frames} frames x {feats.dim} dims "
      f"at {feats.frame_rate} fps")
print(f"frame 10, static coefficients (C0 = log energy): "
      f"{np.round(feats.data[10, :5], 3)} ...")
print(f"frame 10, deltas: {np.round(feats.data[10, 13:18], 5)} ... "
      "(steady tone -> near zero)")

silence = AudioClip(samples=np.zeros(rate), sample_rate=rate, source_id="silence")
sfeats = mfcc39(silence)
print(f"\nsilence: all delta columns exactly zero -> "
      f"{bool(np.all(sfeats.data[:, 13:] == 0.0))}")

loud = AudioClip(samples=2.0 * clip.samples, sample_rate=rate)
a, b = mfcc39(clip).data, mfcc39(loud).data
print(f"doubling amplitude moves C0 by {np.mean(b[:, 0] - a[:, 0]):.4f} "
      f"(2*ln 2 = {2 * np.log(2):.4f}) while C1..C12 shift by "
      f"{np.max(np.abs(b[:, 1:13] - a[:, 1:13])):.2e}")
