"""Walk through the feature pipeline one stage at a time on a synthetic vowel.

Shows the intermediate shapes: frames -> power spectrum -> log-mel -> MFCC,
the 2-dimensional pitch block, and the assembled 55-dimensional embedding.
"""

import numpy as np

from openlid import FrameConfig, MelConfig
from openlid.corpus import AudioClip
from openlid.features import (
    assemble_embedding, extract_embedding, log_mel, mel_filterbank, mfcc,
    pitch_features, power_spectrum, preemphasize_and_frame, FeatureMatrix,
)

sr = 16000
t = np.arange(2 * sr) / sr
# a vowel-ish signal: 120 Hz fundamental with two formant partials
x = 0.5 * np.sin(2 * np.pi * 120 * t) + 0.25 * np.sin(2 * np.pi * 720 * t) \
    + 0.12 * np.sin(2 * np.pi * 2280 * t)
clip = AudioClip(0.9 * x / np.max(np.abs(x)), sr)

frame_cfg = FrameConfig()   # 25 ms frames, 10 ms shift, Hamming, preemphasis 0.97
mel_cfg = MelConfig()       # 40 mel filters, 13 cepstra

frames = preemphasize_and_frame(clip, frame_cfg)
print(f"frames:         {frames.shape}  (T x {frame_cfg.frame_samples(sr)} samples)")

power = power_spectrum(frames, frame_cfg.nfft)
print(f"power spectrum: {power.shape}  (T x nfft/2+1)")

bank = mel_filterbank(mel_cfg, frame_cfg.nfft, sr)
logmel = log_mel(power, bank)
print(f"log-mel:        {logmel.shape}")

ceps = mfcc(logmel, mel_cfg.n_ceps)
print(f"mfcc:           {ceps.shape}")

pitch = pitch_features(clip, frame_cfg)
voiced = pitch[pitch[:, 0] >= 0.5]
print(f"pitch:          {pitch.shape}; {len(voiced)}/{len(pitch)} voiced frames, "
      f"median f0 {np.exp(np.median(voiced[:, 1])):.1f} Hz")

parts = [
    FeatureMatrix(ceps, frame_cfg.frame_shift_ms, (("mfcc", 13),)),
    FeatureMatrix(logmel, frame_cfg.frame_shift_ms, (("logmel", 40),)),
    FeatureMatrix(pitch, frame_cfg.frame_shift_ms, (("pitch", 2),)),
]
embedding = assemble_embedding(parts, cmvn=True)
print(f"\nassembled:      {embedding.data.shape}, layout {embedding.block_layout}")
print(f"after CMVN, per-column |mean| max = {np.max(np.abs(embedding.data.mean(axis=0))):.2e}")

# the one-call equivalent
same = extract_embedding(clip, frame_cfg, mel_cfg, cmvn=True)
print(f"extract_embedding matches: {np.allclose(same.data, embedding.data)}")
