"""Open-set spoken language identification toolkit.

Corpus preparation, MFCC/mel/pitch feature extraction, LDA reduction, TDNN
and CRNN+attention classifiers with a from-scratch differentiable core, and
max-softmax threshold rejection with accuracy-vs-threshold reporting.
"""

__version__ = "0.1.0"

from .corpus import (
    AudioClip, LanguageLabel, Manifest, UtteranceRecord,
    equalize_duration, emit_kaldi_dir, emit_lexicon, parse_wav, read_wav,
    scan_corpus, split_by_duration, top_words, write_wav_pcm16,
)
from .features import (
    FeatureMatrix, FrameConfig, MelConfig,
    assemble_embedding, extract_embedding, log_mel, log_spectrum,
    mel_filterbank, mfcc, pitch_features, power_spectrum, preemphasize_and_frame,
)
from .archive import read_archive, write_archive
from .lda import LdaTransform, apply_lda, fit_lda, load_lda, save_lda
from .models import (
    CrnnConfig, CrnnModel, TdnnConfig, TdnnModel, TrainConfig,
    build_crnn, build_named, build_tdnn, load_checkpoint, make_batches,
    predict_utterance, save_checkpoint, train,
)
from .openset import (
    Decision, EvalReport, classify_open, evaluate, render_reports, threshold_sweep,
)
from .synth import SynthSpec, synth_corpus
