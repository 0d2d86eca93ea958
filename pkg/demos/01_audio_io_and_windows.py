"""Decode, resample, and window audio.

Synthesizes a 44.1 kHz tone, resamples it to the model rate (16 kHz) with the
band-limited polyphase resampler, verifies the tone survives via an FFT peek,
and cuts a longer clip into overlapping analysis windows.
"""

import numpy as np

from wavunits import AudioClip, resample, window

rate_in = 44100
t = np.arange(rate_in) / rate_in
clip = AudioClip(samples=0.5 * np.sin(2 * np.pi * 440.0 * t),
                 sample_rate=rate_in, source_id="demo-tone")
print(f"input: {len(clip)} samples at {clip.sample_rate} Hz "
      f"({clip.duration_s:.2f} s)")

clip16 = resample(clip, 16000)
print(f"resampled: {len(clip16)} samples at {clip16.sample_rate} Hz")

spectrum = np.abs(np.fft.rfft(clip16.samples))
freqs = np.fft.rfftfreq(len(clip16), 1.0 / clip16.sample_rate)
print(f"dominant frequency after resampling: {freqs[np.argmax(spectrum)]:.1f} Hz "
      "(expected 440.0)")

long_clip = AudioClip(samples=np.tile(clip16.samples, 10), sample_rate=16000,
                      source_id="demo-long")
segments = window(long_clip, win_s=2.0, hop_s=1.0)
print(f"\n{long_clip.duration_s:.0f} s recording, 2 s windows with 1 s hop "
      f"-> {len(segments)} segments")
for seg in segments[:3]:
    print(f"  segment [{seg.onset_s:5.2f}, {seg.offset_s:5.2f}] s, "
          f"{len(seg.clip)} samples")
print("  ...")
tail = segments[-1]
print(f"  tail    [{tail.onset_s:5.2f}, {tail.offset_s:5.2f}] s "
      "(zero-padded to the full window)")
