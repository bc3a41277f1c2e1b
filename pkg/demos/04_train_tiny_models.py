"""Train desk-scale TDNN and CRNN classifiers on tiny separable data.

Both models consume the same (T, D) frame embeddings and emit class
probabilities for the whole utterance; training is deterministic momentum SGD
over mean cross-entropy on fixed-length chunks.
"""

import numpy as np

from openlid import (
    CrnnConfig, TdnnConfig, TrainConfig, build_crnn, build_tdnn,
    make_batches, predict_utterance, train,
)
from openlid.corpus import LanguageLabel, Manifest, UtteranceRecord
from openlid.features import FeatureMatrix

rng = np.random.default_rng(0)
n_classes, dim, frames_per_utt = 3, 6, 60

features, records = {}, []
for c in range(n_classes):
    center = np.zeros(dim)
    center[c] = 2.5
    for i in range(8):
        uid = f"lang{c:02d}_u{i}"
        features[uid] = FeatureMatrix(center + 0.5 * rng.standard_normal((frames_per_utt, dim)))
        records.append(UtteranceRecord(uid, f"{uid}.wav", LanguageLabel(f"lang{c:02d}"),
                                       duration=1.0))
manifest = Manifest(records)

tdnn = build_tdnn(TdnnConfig(layer_dims=(16, 16, 16, 16, 32, n_classes)), dim, seed=0)
crnn = build_crnn(CrnnConfig(conv_channels=(2, 4), lstm_hidden=8, attention_dim=8,
                             n_classes=n_classes), dim, seed=0)

tc = TrainConfig(epochs=8, learning_rate=0.02, batch_size=8, seed=0, chunk_frames=60)
for model, name in ((tdnn, "tdnn"), (crnn, "crnn")):
    plan = make_batches(features, manifest, tc.chunk_frames, tc.batch_size, tc.seed,
                        min_frames=model.min_frames)
    history = train(model, plan, tc)
    print(f"{name}: loss {history[0]:.3f} -> {history[-1]:.3f} over {tc.epochs} epochs "
          f"({len(plan)} chunks, min input {model.min_frames} frames)")

probe = features["lang01_u0"]
for model, name in ((tdnn, "tdnn"), (crnn, "crnn")):
    probs = predict_utterance(model, probe)
    print(f"{name} probabilities for a lang01 utterance: {np.round(probs, 3)}")
    if name == "crnn":
        print(f"crnn attention weights sum to {crnn.last_alpha.sum():.6f} "
              f"over {crnn.last_alpha.size} time steps")
