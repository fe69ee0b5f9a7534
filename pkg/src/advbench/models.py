"""The target classifier: an affine-ReLU stack, its training loop, and checkpoints.

The model stores raw float64 parameter arrays.  ``logits`` is the fast
inference path (plain numpy); ``forward`` builds a gradient tape over the
same arrays and is used by training and by every attack loss.  Both paths
issue identical numpy operations, so their outputs agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .seeding import substream
from .serial import MODEL_MAGIC, FormatError, Reader, append_crc, pack_f64, pack_u32, strip_crc

DEFAULT_HIDDEN = (256, 128)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    final_test_accuracy: float | None = None


class Model:
    """x -> logits classifier: affine + ReLU layers, final affine to k logits."""

    def __init__(self, sizes, rng: np.random.Generator | None = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        self.sizes = sizes
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def d(self) -> int:
        return self.sizes[0]

    @property
    def k(self) -> int:
        return self.sizes[-1]

    def logits(self, X: np.ndarray) -> np.ndarray:
        """Fast inference path; accepts (d,) or (n, d)."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        H = X.reshape(1, -1) if single else X
        if H.shape[1] != self.d:
            raise ad.ShapeMismatch("logits", H.shape, (self.d,))
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            H = H @ W + b
            if i != last:
                H = np.where(H > 0, H, 0.0)
        return H[0] if single else H

    def forward(self, x: ad.Tensor, params=None) -> ad.Tensor:
        """Tape-building path over a (n, d) input tensor.

        ``params`` is the list of (W, b) tensor pairs to differentiate
        through during training; when omitted the stored arrays are wrapped
        as constants so only input gradients are tracked.
        """
        if params is None:
            params = [(ad.Tensor(W), ad.Tensor(b)) for W, b in zip(self.weights, self.biases)]
        h = x
        last = len(params) - 1
        for i, (W, b) in enumerate(params):
            h = ad.add_bias(ad.matmul(h, W), b)
            if i != last:
                h = ad.relu(h)
        return h

    def param_tensors(self) -> list[tuple[ad.Tensor, ad.Tensor]]:
        """Wrap the live parameter arrays for a training step (no copies)."""
        return [
            (ad.Tensor(W, requires_grad=True), ad.Tensor(b, requires_grad=True))
            for W, b in zip(self.weights, self.biases)
        ]

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, int]:
        """(logits, label); ties go to the first maximal index."""
        z = self.logits(np.asarray(x, dtype=np.float64))
        if z.ndim != 1:
            raise ad.ShapeMismatch("predict", np.shape(x), (self.d,))
        return z, int(np.argmax(z))

    def copy(self) -> "Model":
        clone = Model(self.sizes)
        clone.weights = [W.copy() for W in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def param_blob(self) -> bytes:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(pack_f64(W))
            parts.append(pack_f64(b))
        return b"".join(parts)

    def load_param_blob(self, reader: Reader) -> None:
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.weights[i] = reader.f64_array(fan_in * fan_out, f"layer {i} weights").reshape(
                fan_in, fan_out
            )
            self.biases[i] = reader.f64_array(fan_out, f"layer {i} bias")

    def save(self, path) -> None:
        payload = MODEL_MAGIC + pack_u32(len(self.sizes), *self.sizes) + self.param_blob()
        with open(path, "wb") as fh:
            fh.write(append_crc(payload))

    @classmethod
    def load(cls, path) -> "Model":
        with open(path, "rb") as fh:
            blob = fh.read()
        r = Reader(strip_crc(blob))
        r.expect_magic(MODEL_MAGIC)
        n_sizes = r.u32("layer count")
        if n_sizes < 2:
            raise FormatError(f"checkpoint declares {n_sizes} layer sizes", offset=5)
        sizes = [r.u32(f"layer size {i}") for i in range(n_sizes)]
        model = cls(sizes)
        model.load_param_blob(r)
        r.done()
        return model


def predict(model: Model, x: np.ndarray) -> tuple[np.ndarray, int]:
    return model.predict(x)


def cross_entropy(logits_t: ad.Tensor, onehot: np.ndarray) -> ad.Tensor:
    logp = ad.log_softmax(logits_t, axis=1)
    return ad.multiply(ad.reduce_sum(ad.multiply(logp, onehot)), -1.0 / len(onehot))


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def accuracy(model: Model, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(model.logits(X), axis=1) == y))


def train(
    model: Model,
    dataset: Dataset,
    epochs: int,
    lr: float = 0.05,
    batch: int = 64,
    seed: int = 0,
    momentum: float = 0.9,
) -> TrainReport:
    """Minibatch SGD with momentum on softmax cross-entropy.

    Deterministic given the seed; raises DivergenceError when the loss
    stops being finite.
    """
    X, y, _ = dataset.arrays("train")
    if len(X) == 0:
        raise ValueError("dataset has no train split")
    report = TrainReport()
    rng = substream(seed, "train-shuffle")
    vel = [np.zeros_like(a) for pair in zip(model.weights, model.biases) for a in pair]

    for epoch in range(epochs):
        perm = rng.permutation(len(X))
        total, count = 0.0, 0
        for start in range(0, len(X), batch):
            idx = perm[start : start + batch]
            params = model.param_tensors()
            logits_t = model.forward(ad.Tensor(X[idx]), params=params)
            loss = cross_entropy(logits_t, one_hot(y[idx], model.k))
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"training loss is not finite at epoch {epoch}; lower the learning rate"
                )
            loss.backward()
            flat = [p for pair in params for p in pair]
            arrays = [a for pair in zip(model.weights, model.biases) for a in pair]
            for slot, (tensor, arr) in enumerate(zip(flat, arrays)):
                g = tensor.grad if tensor.grad is not None else np.zeros_like(arr)
                vel[slot] = momentum * vel[slot] + g
                arr -= lr * vel[slot]
            total += float(loss.data) * len(idx)
            count += len(idx)
        report.epoch_losses.append(total / count)

    test_idx = dataset.indices("test")
    if test_idx.size:
        report.final_test_accuracy = accuracy(model, dataset.X[test_idx], dataset.y[test_idx])
    return report
