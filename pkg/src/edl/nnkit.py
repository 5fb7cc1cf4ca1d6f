"""Small feed-forward classifiers with hand-written gradients.

Everything here is plain float64 numpy: tanh hidden layers, a linear logit
layer, the tempered softmax, the combined hard+soft distillation loss, and
plain SGD. Models, gradients and datasets are passed around as immutable
values; nothing in this module touches the network or the filesystem except
the model file round-trip at the bottom.

Model file format (also used for student checkpoints), version 1:

    bytes 0..3   magic b"EDLD"
    u32  BE      format version (1)
    u64  BE      iteration counter
    u32  BE      number of layer dims (hidden + input + output)
    u32  BE * n  layer dims
    f64  LE      per layer: weight matrix row-major (out x in), then bias

Round-trips are byte-exact; loaders reject bad magic, short files and
trailing bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Model/batch dimensions do not line up."""


class NumericError(ArithmeticError):
    """A loss or parameter became non-finite."""


class ModelFileError(ValueError):
    """Model file is corrupt, truncated, or not ours."""


MODEL_MAGIC = b"EDLD"
MODEL_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Value types


@dataclass(frozen=True)
class Model:
    """Feed-forward net: tanh hidden layers, linear output logits.

    weights[l] has shape (layer_dims[l+1], layer_dims[l]); biases[l] has
    length layer_dims[l+1]. All parameters are float64 and finite.
    """

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ShapeError(f"need >=2 positive layer dims, got {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("one weight matrix and bias vector per layer required")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ShapeError(
                    f"layer {l}: weight {w.shape} / bias {b.shape} do not match dims {dims}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"layer {l} has non-finite parameters")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class Gradients:
    """Same shapes as the Model parameters they were taken against."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray        # B x D
    hard_labels: np.ndarray   # B ints in [0, K)

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ShapeError(f"inputs must be a non-empty B x D matrix, got {self.inputs.shape}")
        if self.hard_labels.shape != (self.inputs.shape[0],):
            raise ShapeError("one hard label per input row required")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class SoftLabelBatch:
    """Teacher-produced tempered class distributions, one row per sample."""

    probs: np.ndarray         # B x K, rows sum to 1
    temperature: float

    def __post_init__(self):
        if self.temperature <= 0 or not np.isfinite(self.temperature):
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.probs.ndim != 2:
            raise ShapeError(f"probs must be B x K, got shape {self.probs.shape}")
        if not np.isfinite(self.probs).all():
            raise NumericError("soft labels contain non-finite entries")
        if ((self.probs <= 0) | (self.probs >= 1)).any():
            raise ValueError("soft-label entries must lie strictly in (0, 1)")
        sums = self.probs.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-9:
            raise ValueError("each soft-label row must sum to 1 within 1e-9")

    @property
    def size(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.05
    alpha: float = 1.0
    beta: float = 0.0
    temperature: float = 2.0
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("need alpha, beta >= 0 and alpha + beta > 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray   # N x D
    labels: np.ndarray    # N ints
    id: str = field(default="")

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ValueError(f"samples must be a non-empty N x D matrix, got {self.samples.shape}")
        if self.labels.shape != (self.samples.shape[0],):
            raise ValueError("one label per sample required")
        if not self.id:
            object.__setattr__(self, "id", _content_hash(self.samples, self.labels))

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def _content_hash(samples: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(samples.shape).encode())
    h.update(np.ascontiguousarray(samples, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(labels, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Core math


def tempered_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Class distribution from logits divided by a temperature.

    Accepts a length-K vector or a B x K matrix (applied row-wise). Uses
    max-subtraction so large logits cannot overflow. Higher temperatures
    flatten the distribution; the argmax never moves.
    """
    if not np.isfinite(temperature) or temperature <= 0:
        raise ValueError(f"temperature must be a positive finite real, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("logits must be finite")
    scaled = z / temperature
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def init_model(layer_dims: list[int] | tuple[int, ...], seed: int) -> Model:
    """Seeded uniform init on (-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    dims = tuple(int(d) for d in layer_dims)
    weights, biases = [], []
    for l in range(len(dims) - 1):
        a = np.sqrt(6.0 / (dims[l] + dims[l + 1]))
        weights.append(rng.uniform(-a, a, size=(dims[l + 1], dims[l])))
        biases.append(np.zeros(dims[l + 1]))
    return Model(dims, tuple(weights), tuple(biases))


def forward(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Logits for a B x D input batch. Deterministic for a fixed model."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(
            f"inputs must be B x {model.input_dim}, got {x.shape}")
    h = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        h = z if l == last else np.tanh(z)
    return h


def _forward_activations(model: Model, x: np.ndarray) -> list[np.ndarray]:
    """Layer inputs [x, h1, ..., h_{L-1}] plus final logits appended."""
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        h = z if l == last else np.tanh(z)
        acts.append(h)
    return acts


def _log_softmax(scaled_logits: np.ndarray) -> np.ndarray:
    shifted = scaled_logits - scaled_logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def kd_loss(model: Model, batch: Batch, soft: SoftLabelBatch | None,
            cfg: TrainConfig) -> tuple[float, Gradients]:
    """Combined distillation loss and its exact analytic gradients.

    loss = alpha * CE(one-hot labels, softmax(logits))
         + beta  * T^2 * CE(soft labels, softmax(logits / T)),
    averaged over the batch. The T^2 factor keeps the soft-gradient
    magnitude roughly temperature-invariant. ``soft`` may be omitted only
    when beta == 0, in which case the arithmetic is exactly the plain
    hard-label objective.
    """
    if cfg.beta > 0:
        if soft is None:
            raise ShapeError("beta > 0 requires soft labels")
        if soft.size != batch.size:
            raise ShapeError(f"soft batch {soft.size} != input batch {batch.size}")
        if soft.probs.shape[1] != model.num_classes:
            raise ShapeError("soft-label class count does not match model")
        if soft.temperature != cfg.temperature:
            raise ValueError(
                f"soft labels tempered at {soft.temperature}, config says {cfg.temperature}")
    if (batch.hard_labels < 0).any() or (batch.hard_labels >= model.num_classes).any():
        raise ShapeError("hard label out of class range")

    b = batch.size
    acts = _forward_activations(model, np.asarray(batch.inputs, dtype=np.float64))
    logits = acts[-1]
    rows = np.arange(b)

    loss = 0.0
    dlogits = np.zeros_like(logits)
    if cfg.alpha > 0:
        logp = _log_softmax(logits)
        loss += cfg.alpha * float(-logp[rows, batch.hard_labels].mean())
        p = np.exp(logp)
        p[rows, batch.hard_labels] -= 1.0
        dlogits += (cfg.alpha / b) * p
    if cfg.beta > 0:
        t = cfg.temperature
        logp_t = _log_softmax(logits / t)
        loss += cfg.beta * t * t * float(-(soft.probs * logp_t).sum(axis=1).mean())
        dlogits += (cfg.beta * t / b) * (np.exp(logp_t) - soft.probs)
    if not np.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss}")

    # Backprop through the tanh stack; activations after the last layer are
    # the raw logits, before it tanh outputs.
    grads_w: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * len(model.biases)   # type: ignore[list-item]
    delta = dlogits
    for l in range(len(model.weights) - 1, -1, -1):
        grads_w[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l]) * (1.0 - acts[l] ** 2)
    return loss, Gradients(tuple(grads_w), tuple(grads_b))


def sgd_step(model: Model, grads: Gradients, eta: float) -> Model:
    """p <- p - eta * g for every parameter; returns a new Model."""
    if len(grads.weights) != len(model.weights):
        raise ShapeError("gradient layer count does not match model")
    weights, biases = [], []
    for w, b, gw, gb in zip(model.weights, model.biases, grads.weights, grads.biases):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError(f"gradient shape {gw.shape}/{gb.shape} does not match model")
        weights.append(w - eta * gw)
        biases.append(b - eta * gb)
    return Model(model.layer_dims, tuple(weights), tuple(biases))


def evaluate(model: Model, data: Dataset, k: int = 1) -> float:
    """Top-k accuracy; ties broken toward the lower class index."""
    if data.size < 1:
        raise ValueError("cannot evaluate on an empty dataset")
    if k < 1 or k > model.num_classes:
        raise ValueError(f"k must be in [1, {model.num_classes}], got {k}")
    logits = forward(model, data.samples)
    # stable argsort on -logits puts equal logits in class-index order
    order = np.argsort(-logits, axis=1, kind="stable")
    hits = (order[:, :k] == data.labels[:, None]).any(axis=1)
    return float(hits.mean())


# ---------------------------------------------------------------------------
# Parameter flattening (for the all-reduce collective)


def flatten_grads(grads: Gradients) -> np.ndarray:
    parts = []
    for w, b in zip(grads.weights, grads.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten_grads(flat: np.ndarray, model: Model) -> Gradients:
    weights, biases = [], []
    off = 0
    for w, b in zip(model.weights, model.biases):
        weights.append(flat[off:off + w.size].reshape(w.shape))
        off += w.size
        biases.append(flat[off:off + b.size])
        off += b.size
    if off != flat.size:
        raise ShapeError(f"flat vector has {flat.size} elements, model needs {off}")
    return Gradients(tuple(weights), tuple(biases))


def flatten_params(model: Model) -> np.ndarray:
    return flatten_grads(Gradients(model.weights, model.biases))


# ---------------------------------------------------------------------------
# Synthetic data


def make_blobs(seed: int, n_samples: int, dim: int, classes: int,
               spread: float) -> Dataset:
    """Deterministic Gaussian-cluster classification data.

    Class centers are drawn once on a sphere of radius 3, samples are
    center + N(0, spread^2). Labels cycle 0..K-1 so every class count is
    exact for balanced-data tests.
    """
    if n_samples < 1 or dim < 1 or classes < 2:
        raise ValueError("need n_samples >= 1, dim >= 1, classes >= 2")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xB10B5])))
    centers = rng.normal(size=(classes, dim))
    centers *= 3.0 / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.arange(n_samples, dtype=np.int64) % classes
    samples = centers[labels] + rng.normal(scale=spread, size=(n_samples, dim))
    return Dataset(samples, labels)


def partition(data: Dataset, world_size: int, rank: int) -> Dataset:
    """Contiguous shard ``rank`` of ``world_size``; shards are disjoint and
    together cover every sample."""
    if world_size < 1 or not 0 <= rank < world_size:
        raise ValueError(f"bad world_size={world_size} rank={rank}")
    n = data.size
    start = (n * rank) // world_size
    stop = (n * (rank + 1)) // world_size
    return Dataset(data.samples[start:stop].copy(), data.labels[start:stop].copy())


def epoch_order(seed: int, epoch: int, rank: int, n: int) -> np.ndarray:
    """Deterministic sample permutation for one epoch on one rank."""
    ss = np.random.SeedSequence([seed, epoch, rank, 0x0A7A])
    return np.random.Generator(np.random.PCG64(ss)).permutation(n)


def pretrain_teacher(data: Dataset, cfg: TrainConfig, epochs: int,
                     hidden: tuple[int, ...] = (256, 256)) -> Model:
    """Hard-label-only SGD training for the larger teacher net."""
    classes = int(data.labels.max()) + 1
    model = init_model((data.dim, *hidden, classes), cfg.seed)
    bpe = data.size // cfg.batch_size
    if bpe < 1:
        raise ValueError("dataset smaller than one batch")
    hard_cfg = TrainConfig(eta=cfg.eta, alpha=1.0, beta=0.0,
                           temperature=cfg.temperature,
                           batch_size=cfg.batch_size, seed=cfg.seed)
    for epoch in range(epochs):
        order = epoch_order(cfg.seed, epoch, 0, data.size)
        for i in range(bpe):
            idx = order[i * cfg.batch_size:(i + 1) * cfg.batch_size]
            batch = Batch(data.samples[idx], data.labels[idx])
            _, grads = kd_loss(model, batch, None, hard_cfg)
            model = sgd_step(model, grads, cfg.eta)
    return model


# ---------------------------------------------------------------------------
# Model file round-trip


def serialize_model(model: Model, iteration: int = 0) -> bytes:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    out = [MODEL_MAGIC,
           struct.pack(">I", MODEL_FORMAT_VERSION),
           struct.pack(">Q", iteration),
           struct.pack(">I", len(model.layer_dims))]
    out.extend(struct.pack(">I", d) for d in model.layer_dims)
    for w, b in zip(model.weights, model.biases):
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def deserialize_model(blob: bytes) -> tuple[Model, int]:
    if len(blob) < 20 or blob[:4] != MODEL_MAGIC:
        raise ModelFileError("not a model file (bad magic or truncated header)")
    version = struct.unpack(">I", blob[4:8])[0]
    if version != MODEL_FORMAT_VERSION:
        raise ModelFileError(f"unsupported format version {version}")
    iteration = struct.unpack(">Q", blob[8:16])[0]
    ndims = struct.unpack(">I", blob[16:20])[0]
    off = 20
    if ndims < 2 or len(blob) < off + 4 * ndims:
        raise ModelFileError("truncated layer dim table")
    dims = struct.unpack(f">{ndims}I", blob[off:off + 4 * ndims])
    off += 4 * ndims
    weights, biases = [], []
    for l in range(ndims - 1):
        wn, bn = dims[l + 1] * dims[l], dims[l + 1]
        need = 8 * (wn + bn)
        if len(blob) < off + need:
            raise ModelFileError(f"truncated parameters at layer {l}")
        weights.append(np.frombuffer(blob, dtype="<f8", count=wn, offset=off)
                       .reshape(dims[l + 1], dims[l]).copy())
        off += 8 * wn
        biases.append(np.frombuffer(blob, dtype="<f8", count=bn, offset=off).copy())
        off += 8 * bn
    if off != len(blob):
        raise ModelFileError(f"{len(blob) - off} trailing bytes after parameters")
    try:
        model = Model(dims, tuple(weights), tuple(biases))
    except (ShapeError, NumericError) as exc:
        raise ModelFileError(f"invalid parameters: {exc}") from exc
    return model, iteration


def save_model(path: str, model: Model, iteration: int = 0) -> None:
    from .runtime import atomic_write_bytes
    atomic_write_bytes(path, serialize_model(model, iteration))


def load_model(path: str) -> tuple[Model, int]:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
