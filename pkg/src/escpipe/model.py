"""Classification head: two 512-unit ReLU dense layers and a softmax output,
trained from scratch with plain mini-batch SGD.

Parameters are stored as float32; forward/backward math runs in float64 and
loss/metric sums accumulate in float64. Training standardizes inputs with
train-set statistics and folds the affine transform back into the first
layer before returning, so saved heads consume raw feature vectors.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumError, ContainerError, ContainerVersionError, DivergenceError
from .features import FeatureVector

MODEL_MAGIC = b"ESCM"
MODEL_VERSION = 1

DEFAULT_HIDDEN = (512, 512)


@dataclass
class MlpHead:
    """Dense ReLU stack with softmax output.

    ``weights[i]`` has shape (layer_dims[i], layer_dims[i+1]); biases match
    the output side. All parameters are float32.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ValueError("need at least an input and an output layer")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("parameter count inconsistent with layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ValueError(f"layer {i} parameter shapes {w.shape}/{b.shape} != {expect}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "MlpHead":
        return MlpHead(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    shuffle_each_epoch: bool = True
    standardize_inputs: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainHistory:
    """Per-epoch metrics plus the snapshot of the best-validation head."""

    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_head: MlpHead | None = None

    @property
    def highest_validation_accuracy(self) -> float:
        if not self.epochs:
            raise ValueError("history is empty")
        return max(e.val_acc for e in self.epochs)

    def to_json(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "epochs": [
                {"train_loss": e.train_loss, "train_acc": e.train_acc, "val_acc": e.val_acc}
                for e in self.epochs
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrainHistory":
        return cls(
            epochs=[EpochRecord(**e) for e in doc["epochs"]],
            best_epoch=int(doc["best_epoch"]),
        )


@dataclass
class Metrics:
    classification_accuracy: float
    confusion: np.ndarray  # (n_classes, n_classes) counts, rows = true class
    highest_validation_accuracy: float | None = None

    def to_json(self) -> dict:
        return {
            "classification_accuracy": self.classification_accuracy,
            "highest_validation_accuracy": self.highest_validation_accuracy,
            "confusion": self.confusion.tolist(),
        }


def init_head(
    input_dim: int,
    n_classes: int,
    seed: int,
    hidden_dims: tuple[int, ...] = DEFAULT_HIDDEN,
) -> MlpHead:
    """Glorot-uniform weights (every layer), zero biases, seeded."""
    if input_dim < 1 or n_classes < 1:
        raise ValueError("dimensions must be >= 1")
    dims = [input_dim, *hidden_dims, n_classes]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)).astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return MlpHead(layer_dims=dims, weights=weights, biases=biases)


def _forward_batch(head: MlpHead, x: np.ndarray):
    """Returns (activations, pre_activations, probabilities); float64 math."""
    a = [np.asarray(x, dtype=np.float64)]
    zs = []
    last = len(head.weights) - 1
    # divergence shows up as inf/nan and is detected downstream; no need for
    # numpy to warn about it mid-flight
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (w, b) in enumerate(zip(head.weights, head.biases)):
            z = a[-1] @ w.astype(np.float64) + b.astype(np.float64)
            zs.append(z)
            a.append(np.maximum(z, 0.0) if i < last else z)
        logits = a[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
    return a, zs, probs


def forward(head: MlpHead, features) -> np.ndarray:
    """Class probabilities for one feature vector (sums to 1)."""
    x = features.values if isinstance(features, FeatureVector) else np.asarray(features)
    if x.ndim != 1:
        raise ValueError("forward takes a single 1-D feature vector")
    if x.shape[0] != head.input_dim:
        raise ValueError(f"feature length {x.shape[0]} != input_dim {head.input_dim}")
    _, _, probs = _forward_batch(head, x[None, :])
    return probs[0]


def predict_batch(head: MlpHead, x: np.ndarray) -> np.ndarray:
    """Probabilities for a (batch, input_dim) matrix."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != head.input_dim:
        raise ValueError(f"expected (n, {head.input_dim}) inputs, got {x.shape}")
    _, _, probs = _forward_batch(head, x)
    return probs


def loss_and_grad(head: MlpHead, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch and its parameter gradients.

    Backpropagation through softmax cross-entropy and ReLU; gradients come
    back as (weight_grads, bias_grads) lists in float64.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-D array")
    if np.any(y < 0) or np.any(y >= head.n_classes):
        raise ValueError("labels outside [0, n_classes)")
    n = x.shape[0]
    a, zs, probs = _forward_batch(head, x)
    eps = np.finfo(np.float64).tiny
    loss = float(-np.log(np.maximum(probs[np.arange(n), y], eps)).sum() / n)

    dz = probs.copy()
    dz[np.arange(n), y] -= 1.0
    dz /= n
    w_grads = [None] * len(head.weights)
    b_grads = [None] * len(head.biases)
    for layer in range(len(head.weights) - 1, -1, -1):
        w_grads[layer] = a[layer].T @ dz
        b_grads[layer] = dz.sum(axis=0)
        if layer > 0:
            dz = (dz @ head.weights[layer].astype(np.float64).T) * (zs[layer - 1] > 0.0)
    return loss, (w_grads, b_grads)


def _standardizer(x: np.ndarray):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return mu, sd


def _fold_standardizer(head: MlpHead, mu: np.ndarray, sd: np.ndarray) -> MlpHead:
    """Absorb x -> (x - mu)/sd into the first layer so the head takes raw
    inputs: W0' = W0/sd, b0' = b0 - (mu/sd) @ W0."""
    out = head.copy()
    w0 = out.weights[0].astype(np.float64)
    out.weights[0] = (w0 / sd[:, None]).astype(np.float32)
    out.biases[0] = (out.biases[0].astype(np.float64) - (mu / sd) @ w0).astype(np.float32)
    return out


def _accuracy(head: MlpHead, x: np.ndarray, y: np.ndarray) -> float:
    probs = predict_batch(head, x)
    return float((probs.argmax(axis=1) == y).mean())


def train(
    head: MlpHead,
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
) -> tuple[MlpHead, TrainHistory]:
    """Seeded mini-batch SGD (w <- w - lr * g, no momentum).

    Returns the final-epoch head; the best-validation-epoch snapshot is kept
    on the history for dispatch. Raises DivergenceError when the loss stops
    being finite.
    """
    x_train = np.asarray(train_set[0], dtype=np.float64)
    y_train = np.asarray(train_set[1], dtype=np.int64)
    x_val = np.asarray(val_set[0], dtype=np.float64)
    y_val = np.asarray(val_set[1], dtype=np.int64)
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise ValueError("train and validation sets must be non-empty")

    if cfg.standardize_inputs:
        mu, sd = _standardizer(x_train)
    else:
        mu = np.zeros(x_train.shape[1])
        sd = np.ones(x_train.shape[1])
    xt = (x_train - mu) / sd
    xv = (x_val - mu) / sd

    work = head.copy()
    rng = np.random.default_rng(cfg.seed)
    n = xt.shape[0]
    history = TrainHistory()
    best_val = -1.0
    lr = cfg.learning_rate

    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle_each_epoch else np.arange(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, (gw, gb) = loss_and_grad(work, xt[idx], y_train[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
            loss_sum += loss * len(idx)
            with np.errstate(over="ignore", invalid="ignore"):
                for layer in range(len(work.weights)):
                    work.weights[layer] = (
                        work.weights[layer].astype(np.float64) - lr * gw[layer]
                    ).astype(np.float32)
                    work.biases[layer] = (
                        work.biases[layer].astype(np.float64) - lr * gb[layer]
                    ).astype(np.float32)
        if not all(
            np.all(np.isfinite(w)) and np.all(np.isfinite(b))
            for w, b in zip(work.weights, work.biases)
        ):
            raise DivergenceError(f"parameters became non-finite at epoch {epoch}")
        record = EpochRecord(
            train_loss=loss_sum / n,
            train_acc=_accuracy(work, xt, y_train),
            val_acc=_accuracy(work, xv, y_val),
        )
        history.epochs.append(record)
        if record.val_acc > best_val:
            best_val = record.val_acc
            history.best_epoch = epoch
            history.best_head = _fold_standardizer(work, mu, sd)

    final = _fold_standardizer(work, mu, sd)
    return final, history


def evaluate(
    head: MlpHead,
    x: np.ndarray,
    y: np.ndarray,
    history: TrainHistory | None = None,
) -> Metrics:
    """Argmax predictions, accuracy and confusion counts (rows = true class).

    Ties break toward the lowest class index. When a training history is
    supplied its best validation accuracy is carried into the metrics.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("evaluation set must be non-empty")
    probs = predict_batch(head, x)
    pred = probs.argmax(axis=1)
    n_classes = head.n_classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    acc = float(np.trace(confusion) / confusion.sum())
    hva = history.highest_validation_accuracy if history is not None else None
    return Metrics(
        classification_accuracy=acc,
        confusion=confusion,
        highest_validation_accuracy=hva,
    )


def save_model(head: MlpHead) -> bytes:
    """Versioned container: magic, u16 version, u8 layer count, u32 dims,
    float32 little-endian parameters (W then b per layer), trailing CRC32."""
    body = MODEL_MAGIC + struct.pack("<HB", MODEL_VERSION, len(head.layer_dims))
    body += struct.pack(f"<{len(head.layer_dims)}I", *head.layer_dims)
    for w, b in zip(head.weights, head.biases):
        body += np.ascontiguousarray(w, dtype="<f4").tobytes()
        body += np.ascontiguousarray(b, dtype="<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def load_model(data: bytes) -> MlpHead:
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise ContainerError("not a model container (bad magic)")
    if len(data) < 6:
        raise ContainerError("model container truncated before version field")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != MODEL_VERSION:
        raise ContainerVersionError(f"unsupported model container version {version}")
    if len(data) < 11:
        raise ChecksumError("model container truncated")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumError("model container checksum mismatch")
    (n_layers,) = struct.unpack_from("<B", data, 6)
    off = 7
    dims = list(struct.unpack_from(f"<{n_layers}I", data, off))
    off += 4 * n_layers
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w_bytes = 4 * fan_in * fan_out
        weights.append(
            np.frombuffer(data, dtype="<f4", count=fan_in * fan_out, offset=off)
            .reshape(fan_in, fan_out)
            .copy()
        )
        off += w_bytes
        biases.append(np.frombuffer(data, dtype="<f4", count=fan_out, offset=off).copy())
        off += 4 * fan_out
    if off != len(data) - 4:
        raise ContainerError("model container has trailing bytes")
    return MlpHead(layer_dims=dims, weights=weights, biases=biases)
