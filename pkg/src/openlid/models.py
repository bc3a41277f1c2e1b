"""The two rival classifiers: CRNN with attention pooling and TDNN.

Both consume a (T, D) per-frame embedding for one utterance and emit
``n_classes`` logits. Training is plain momentum SGD over mean cross-entropy
on fixed-length chunks, deterministic for a given seed. Checkpoints are a
self-contained binary format (magic ``LIDM``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Manifest
from .errors import CorruptFileError, FormatError, NumericError
from .features import FeatureMatrix
from .neural import (
    AttentionPool, BiLstm, Conv2d2x2, ReLU, TdnnLayer, TdnnLayerSpec,
    softmax, softmax_cross_entropy, sgd_step,
)


@dataclass(frozen=True)
class CrnnConfig:
    conv_channels: tuple[int, int] = (4, 8)
    lstm_hidden: int = 256
    lstm_layers: int = 2
    attention_dim: int = 128
    n_classes: int = 7

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if len(self.conv_channels) != 2:
            raise ValueError("exactly two convolution layers are supported")
        if self.lstm_layers < 1 or self.lstm_hidden < 1 or self.attention_dim < 1:
            raise ValueError("lstm_layers, lstm_hidden, and attention_dim must be >= 1")
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")


@dataclass(frozen=True)
class TdnnConfig:
    layer_dims: tuple[int, ...] = (512, 512, 512, 512, 1500, 7)
    contexts: tuple[int, ...] = (5, 3, 3, 1, 1, 1)
    dilations: tuple[int, ...] = (1, 2, 3, 1, 1, 1)
    strides: tuple[int, ...] = (1, 1, 1, 1, 1, 1)

    def __post_init__(self):
        for name in ("layer_dims", "contexts", "dilations", "strides"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n = len(self.layer_dims)
        if n != 6:
            raise ValueError(f"the TDNN stack has six layers, got {n}")
        if not len(self.contexts) == len(self.dilations) == len(self.strides) == n:
            raise ValueError("layer_dims, contexts, dilations, and strides must have equal length")

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def layer_specs(self) -> list[TdnnLayerSpec]:
        specs = []
        for i in range(len(self.layer_dims)):
            act = "relu" if i < len(self.layer_dims) - 1 else "none"
            specs.append(TdnnLayerSpec(self.contexts[i], self.dilations[i], self.strides[i], act))
        return specs


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    chunk_frames: int = 300

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.chunk_frames < 1:
            raise ValueError("epochs, batch_size, and chunk_frames must be >= 1")
        if self.learning_rate < 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("need learning_rate >= 0 and momentum in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


NAMED_CONFIGS = {
    "crnn-paper": CrnnConfig(),
    "crnn-desk": CrnnConfig(conv_channels=(2, 4), lstm_hidden=32, attention_dim=16),
    "tdnn-paper": TdnnConfig(),
    "tdnn-desk": TdnnConfig(layer_dims=(64, 64, 64, 64, 128, 7)),
}


class CrnnModel:
    """Two stacked 2x2 convs, conv features concatenated back onto the input
    rows (time-aligned by trimming the first/last row), two BiLSTM layers,
    additive attention pooling to class logits."""

    kind = "crnn"

    def __init__(self, cfg: CrnnConfig, input_dim: int, seed: int = 0, dtype=np.float32):
        if input_dim < 3:
            raise ValueError(f"two 2x2 convolutions need input_dim >= 3, got {input_dim}")
        self.cfg = cfg
        self.input_dim = input_dim
        self.dtype = dtype
        self.min_frames = 3
        rng = np.random.default_rng(seed)
        c1, c2 = cfg.conv_channels
        self.conv1 = Conv2d2x2(1, c1, rng, dtype, name="conv1")
        self.act1 = ReLU()
        self.conv2 = Conv2d2x2(c1, c2, rng, dtype, name="conv2")
        self.act2 = ReLU()
        self.conv_flat_dim = c2 * (input_dim - 2)
        self.lstm_input_dim = self.conv_flat_dim + input_dim
        self.lstms = []
        in_dim = self.lstm_input_dim
        for i in range(cfg.lstm_layers):
            self.lstms.append(BiLstm(in_dim, cfg.lstm_hidden, rng, dtype, name=f"bilstm{i + 1}"))
            in_dim = 2 * cfg.lstm_hidden
        self.attn = AttentionPool(in_dim, cfg.attention_dim, cfg.n_classes, rng, dtype, name="attn")
        self._shape = None

    def params(self):
        out = self.conv1.params() + self.conv2.params()
        for lstm in self.lstms:
            out += lstm.params()
        return out + self.attn.params()

    @property
    def last_alpha(self):
        return self.attn.last_alpha

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=self.dtype)
        t, d = x.shape
        if d != self.input_dim:
            raise ValueError(f"input has {d} features, model expects {self.input_dim}")
        if t < self.min_frames:
            raise ValueError(f"CRNN requires at least {self.min_frames} frames, got {t}")
        conv = self.act2.forward(self.conv2.forward(self.act1.forward(self.conv1.forward(x[None]))))
        flat = np.ascontiguousarray(np.transpose(conv, (1, 0, 2))).reshape(t - 2, self.conv_flat_dim)
        h = np.concatenate([flat, x[1:t - 1]], axis=1)
        for lstm in self.lstms:
            h = lstm.forward(h)
        self._shape = (t, d)
        return self.attn.forward(h)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        t, d = self._shape
        dh = self.attn.backward(dlogits)
        for lstm in reversed(self.lstms):
            dh = lstm.backward(dh)
        dflat = dh[:, :self.conv_flat_dim]
        dconv = np.ascontiguousarray(
            np.transpose(dflat.reshape(t - 2, self.cfg.conv_channels[1], d - 2), (1, 0, 2))
        )
        dx = self.conv1.backward(self.act1.backward(self.conv2.backward(self.act2.backward(dconv))))[0]
        dx[1:t - 1] += dh[:, self.conv_flat_dim:]
        return dx


class TdnnModel:
    """Six time-delay layers; per-frame logits are mean-pooled over time."""

    kind = "tdnn"

    def __init__(self, cfg: TdnnConfig, input_dim: int, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.input_dim = input_dim
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        specs = cfg.layer_specs()
        dims = (input_dim,) + cfg.layer_dims
        self.layers = [
            TdnnLayer(spec, dims[i], dims[i + 1], rng, dtype, name=f"tdnn{i + 1}")
            for i, spec in enumerate(specs)
        ]
        t = 1  # receptive field: frames needed for a single output frame
        for spec in reversed(specs):
            t = (t - 1) * spec.stride + spec.span
        self.min_frames = t
        self.last_frame_logits = None

    def params(self):
        out = []
        for layer in self.layers:
            out += layer.params()
        return out

    def output_frame_count(self, t: int) -> int:
        for spec in (layer.spec for layer in self.layers):
            t = spec.out_frames(t)
        return t

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=self.dtype)
        t, d = x.shape
        if d != self.input_dim:
            raise ValueError(f"input has {d} features, model expects {self.input_dim}")
        if t < self.min_frames:
            raise ValueError(f"TDNN requires at least {self.min_frames} frames, got {t}")
        h = x
        for layer in self.layers:
            h = layer.forward(h)
        self.last_frame_logits = h
        return h.mean(axis=0)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        t_out = self.last_frame_logits.shape[0]
        dh = np.tile(np.asarray(dlogits, dtype=self.dtype) / t_out, (t_out, 1))
        for layer in reversed(self.layers):
            dh = layer.backward(dh)
        return dh


def build_crnn(cfg: CrnnConfig, input_dim: int, seed: int = 0, dtype=np.float32) -> CrnnModel:
    return CrnnModel(cfg, input_dim, seed, dtype)


def build_tdnn(cfg: TdnnConfig, input_dim: int, seed: int = 0, dtype=np.float32) -> TdnnModel:
    return TdnnModel(cfg, input_dim, seed, dtype)


def build_named(name: str, input_dim: int, seed: int = 0, dtype=np.float32):
    if name not in NAMED_CONFIGS:
        raise ValueError(f"unknown model config {name!r}; have {sorted(NAMED_CONFIGS)}")
    cfg = NAMED_CONFIGS[name]
    builder = build_crnn if isinstance(cfg, CrnnConfig) else build_tdnn
    return builder(cfg, input_dim, seed, dtype)


# --- Batching and training ---------------------------------------------------


class BatchPlan:
    """Chunked utterances plus a per-epoch seeded shuffle."""

    def __init__(self, chunks, arrays, batch_size, seed, class_names, skipped):
        self.chunks = chunks              # (utt_id, start, end, label) tuples
        self.arrays = arrays
        self.batch_size = batch_size
        self.seed = seed
        self.class_names = class_names
        self.skipped = skipped

    def __len__(self):
        return len(self.chunks)

    def epoch(self, epoch_index: int):
        """Yield shuffled batches of (chunk_matrix, label) for one epoch."""
        rng = np.random.default_rng([self.seed, epoch_index])
        order = rng.permutation(len(self.chunks))
        for lo in range(0, len(order), self.batch_size):
            batch = []
            for j in order[lo:lo + self.batch_size]:
                uid, start, end, label = self.chunks[j]
                batch.append((self.arrays[uid][start:end], label))
            yield batch


def make_batches(features: Mapping[str, FeatureMatrix | np.ndarray], manifest: Manifest,
                 chunk_frames: int, batch_size: int, seed: int,
                 min_frames: int = 1, class_names: Sequence[str] | None = None) -> BatchPlan:
    """Cut utterances into non-overlapping chunks and plan seeded shuffles.

    A tail shorter than ``chunk_frames`` is kept when it still meets the model
    minimum; utterances below the minimum are skipped (counted on the plan).
    Labels are indices into the sorted language names.
    """
    if chunk_frames < min_frames:
        raise ValueError(f"chunk_frames={chunk_frames} is below the model minimum {min_frames}")
    if class_names is None:
        class_names = sorted({r.language.name for r in manifest})
    name_to_label = {name: i for i, name in enumerate(class_names)}
    arrays = {}
    chunks = []
    skipped = 0
    for record in manifest:
        mat = features[record.id]
        data = mat.data if isinstance(mat, FeatureMatrix) else np.asarray(mat)
        if record.language.name not in name_to_label:
            raise ValueError(f"utterance {record.id}: language {record.language.name!r} not in class set")
        label = name_to_label[record.language.name]
        t = data.shape[0]
        if t < min_frames:
            skipped += 1
            continue
        arrays[record.id] = data
        for start in range(0, t, chunk_frames):
            end = min(start + chunk_frames, t)
            if end - start >= min_frames:
                chunks.append((record.id, start, end, label))
    return BatchPlan(chunks, arrays, batch_size, seed, tuple(class_names), skipped)


def train(model, plan: BatchPlan, tc: TrainConfig) -> list[float]:
    """SGD over mean cross-entropy; returns per-epoch mean loss history.

    The learning rate halves every 4 epochs. Fully deterministic for a given
    seed; a non-finite loss aborts with its epoch/batch coordinates.
    """
    if len(plan) == 0:
        raise ValueError("batch plan is empty; nothing to train on")
    params = model.params()
    history = []
    for epoch in range(tc.epochs):
        lr = tc.learning_rate * (0.5 ** (epoch // 4))
        total, count = 0.0, 0
        for batch_index, batch in enumerate(plan.epoch(epoch)):
            inv = 1.0 / len(batch)
            batch_loss = 0.0
            for x, label in batch:
                logits = model.forward(x)
                loss, dlogits = softmax_cross_entropy(logits, label)
                model.backward(dlogits * np.asarray(inv, dtype=dlogits.dtype))
                batch_loss += loss
            batch_loss *= inv
            if not np.isfinite(batch_loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch_index}")
            sgd_step(params, lr, tc.momentum)
            total += batch_loss
            count += 1
        history.append(total / count)
    return history


def predict_utterance(model, features: FeatureMatrix | np.ndarray) -> np.ndarray:
    """Class probabilities for one utterance (softmax over utterance logits)."""
    x = features.data if isinstance(features, FeatureMatrix) else np.asarray(features)
    if x.shape[0] < model.min_frames:
        raise ValueError(
            f"utterance has {x.shape[0]} frames; {model.kind} requires at least {model.min_frames}"
        )
    return softmax(model.forward(x).astype(np.float64))


# --- Checkpoints --------------------------------------------------------------


CHECKPOINT_MAGIC = b"LIDM"
CHECKPOINT_VERSION = 1
_KIND_BYTE = {"crnn": 0, "tdnn": 1}
_BYTE_KIND = {v: k for k, v in _KIND_BYTE.items()}


def save_checkpoint(model, path, train_meta: dict | None = None) -> Path:
    """Write magic, version, kind byte, canonical JSON header, then f32 blobs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "model_kind": model.kind,
        "config": asdict(model.cfg),
        "input_dim": model.input_dim,
        "train_meta": train_meta or {},
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IB", CHECKPOINT_VERSION, _KIND_BYTE[model.kind]))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for p in model.params():
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    return path


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, header dict)."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 13 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version, kind_byte = struct.unpack_from("<IB", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if kind_byte not in _BYTE_KIND:
        raise FormatError(f"{path}: unknown model kind byte {kind_byte}")
    (json_len,) = struct.unpack_from("<I", blob, 9)
    if 13 + json_len > len(blob):
        raise CorruptFileError(f"{path}: checkpoint header truncated")
    try:
        header = json.loads(blob[13:13 + json_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable checkpoint header: {exc}") from exc
    kind = _BYTE_KIND[kind_byte]
    if header.get("model_kind") != kind:
        raise FormatError(f"{path}: kind byte {kind!r} disagrees with header {header.get('model_kind')!r}")
    if kind == "crnn":
        cfg = CrnnConfig(**header["config"])
        model = CrnnModel(cfg, header["input_dim"])
    else:
        cfg = TdnnConfig(**header["config"])
        model = TdnnModel(cfg, header["input_dim"])
    pos = 13 + json_len
    values = []
    for p in model.params():
        nbytes = 4 * p.value.size
        if pos + nbytes > len(blob):
            raise CorruptFileError(f"{path}: parameter blob for {p.name} truncated")
        values.append(np.frombuffer(blob, dtype="<f4", count=p.value.size, offset=pos)
                      .reshape(p.value.shape))
        pos += nbytes
    if pos != len(blob):
        raise CorruptFileError(f"{path}: {len(blob) - pos} unexpected trailing bytes")
    for p, value in zip(model.params(), values):
        p.value[...] = value
    return model, header
