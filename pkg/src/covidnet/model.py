"""The three-branch convolutional screening network."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .dsp import N_BINS, InputBundle
from .tensor import Tensor

STREAMS = ("raw", "group64", "group128")
STREAM_CHANNELS = {"raw": 1, "group64": N_BINS * 4, "group128": N_BINS * 4}


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int
    channels: int
    n_dense: int
    dropout: float = 0.2
    kernel: int = 3
    hidden_width: int = 64

    def __post_init__(self):
        if not 2 <= self.n_blocks <= 6:
            raise ValueError("n_blocks (N) must lie in [2, 6]")
        if not 64 <= self.channels <= 512:
            raise ValueError("channels (C) must lie in [64, 512]")
        if self.n_dense not in (1, 2):
            raise ValueError("n_dense (F) must be 1 or 2")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel size must be odd")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class Batch:
    """Zero-padded stream arrays plus the true length of every sample per stream."""

    raw: np.ndarray
    group64: np.ndarray
    group128: np.ndarray
    lengths: dict
    labels: np.ndarray | None = None
    indices: np.ndarray | None = None

    def __len__(self):
        return self.raw.shape[0]

    def stream(self, name: str) -> np.ndarray:
        x = getattr(self, name)
        return x.reshape(x.shape[0], x.shape[1], -1)


def collate(bundles: Sequence[InputBundle], labels=None, indices=None) -> Batch:
    """Pad every stream independently to the longest sample in the batch."""
    if not bundles:
        raise ValueError("cannot collate an empty batch")
    arrays = {}
    lengths = {}
    for name in STREAMS:
        parts = [getattr(b, name) for b in bundles]
        lens = np.array([p.shape[0] for p in parts])
        out = np.zeros((len(parts), lens.max()) + parts[0].shape[1:])
        for i, p in enumerate(parts):
            out[i, : p.shape[0]] = p
        arrays[name] = out
        lengths[name] = lens
    return Batch(
        **arrays,
        lengths=lengths,
        labels=None if labels is None else np.asarray(labels),
        indices=None if indices is None else np.asarray(indices),
    )


class CovidNet:
    """Parameter container; ``params`` maps names to leaf tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __repr__(self):
        c = self.config
        return f"CovidNet(N={c.n_blocks}, C={c.channels}, F={c.n_dense}, params={self.n_parameters})"

    @property
    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise tn.ShapeError(f"parameter {k}: expected {p.data.shape}, got {arrays[k].shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def head_widths(self) -> list[int]:
        c = self.config
        widths = [3 * 2 * c.channels]
        if c.n_dense == 2:
            widths.append(c.hidden_width)
        return widths + [1]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    for stream in STREAMS:
        c_in = STREAM_CHANNELS[stream]
        for i in range(config.n_blocks):
            shapes[f"{stream}.conv{i}.w"] = (config.kernel, c_in, config.channels)
            shapes[f"{stream}.conv{i}.b"] = (config.channels,)
            c_in = config.channels
    widths = [6 * config.channels] + ([config.hidden_width] if config.n_dense == 2 else []) + [1]
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"head.dense{i}.w"] = (n_in, n_out)
        shapes[f"head.dense{i}.b"] = (n_out,)
    return shapes


def build_model(config: ModelConfig, seed: int = 0) -> CovidNet:
    """Uniform He (fan-in) initialisation for weights, zero biases.

    The output layer starts at zero so every sample begins at probability 0.5;
    with unnormalised log-spectrogram inputs a He-scaled output layer produces
    logits beyond the loss clamp, where the gradient vanishes.
    """
    rng = np.random.default_rng(seed)
    params = {}
    output_w = f"head.dense{config.n_dense - 1}.w"
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".b") or name == output_w:
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return CovidNet(config, params)


def branch(model: CovidNet, stream: str, x: Tensor, lengths, training: bool, rng) -> Tensor:
    """N conv blocks (conv, relu, pool, dropout) then masked global mean/max pooling."""
    p = model.params
    lengths = np.asarray(lengths)
    for i in range(model.config.n_blocks):
        h = tn.conv1d(x, p[f"{stream}.conv{i}.w"], p[f"{stream}.conv{i}.b"])
        h = tn.apply_mask(tn.relu(h), lengths)
        h = tn.maxpool1d(h)
        lengths = tn.pooled_lengths(lengths)
        x = tn.dropout(h, model.config.dropout, training, rng)
    return tn.global_pool_concat(x, lengths)


def forward_logits(model: CovidNet, batch: Batch, training: bool = False, rng=None) -> Tensor:
    feats = [
        branch(model, s, Tensor(batch.stream(s)), batch.lengths[s], training, rng)
        for s in STREAMS
    ]
    h = tn.concat(feats, axis=1)
    n_layers = model.config.n_dense
    for i in range(n_layers):
        h = tn.dense(h, model.params[f"head.dense{i}.w"], model.params[f"head.dense{i}.b"])
        if i < n_layers - 1:
            h = tn.relu(h)
    return tn.reshape(h, (h.shape[0],))


def forward(model: CovidNet, batch: Batch | InputBundle, training: bool = False, rng=None) -> Tensor:
    """Probabilities of the positive class, one per sample."""
    if isinstance(batch, InputBundle):
        batch = collate([batch])
    return tn.sigmoid(forward_logits(model, batch, training, rng))


def predict_batch(model: CovidNet, bundles: Sequence[InputBundle], chunk_size: int = 1) -> list[float]:
    """Eval-mode probabilities, order preserved. Chunks are padded and masked."""
    out: list[float] = []
    with tn.no_grad():
        for start in range(0, len(bundles), chunk_size):
            batch = collate(bundles[start : start + chunk_size])
            out.extend(float(v) for v in forward(model, batch).data)
    return out
