"""Validation-loss encoders producing a single embedding for the sequence model.

Three interchangeable encoders map a loss representation to one hidden
vector: a strided-convolution stack over raw token probabilities, a linear
projection of the mean probability, and a two-layer MLP over histogram
deltas. The ``none`` kind contributes no embedding at all.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ndgrad
from .datapipe import ValidationError
from .ndgrad import Tensor

__all__ = [
    "EncoderConfig",
    "init_encoder_params",
    "cnn_encode",
    "average_encode",
    "histdiff_encode",
    "fit_length",
]

log = logging.getLogger(__name__)

ENCODER_KINDS = ("cnn", "average", "histdiff", "none")


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry of one loss encoder; ``hidden_dim`` matches the sequence model."""

    kind: str = "cnn"
    input_len: int = 4096
    bin_count: int = 64
    channels: tuple[int, ...] = (8, 16, 32, 64)
    kernel_size: int = 64
    stride: int = 16
    padding: int = 32
    hidden_dim: int = 64

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValidationError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "cnn":
            if self.input_len < 1:
                raise ValidationError("cnn encoder needs input_len >= 1")
            self.conv_lengths()  # validates geometry
        if self.kind == "histdiff" and self.bin_count < 2:
            raise ValidationError("histdiff encoder needs bin_count >= 2")

    def conv_lengths(self) -> list[int]:
        """Sequence lengths after each convolution layer."""
        lengths = [self.input_len]
        for _ in self.channels:
            lengths.append(
                ndgrad.conv_output_length(
                    lengths[-1], self.kernel_size, self.stride, self.padding
                )
            )
        return lengths[1:]

    def flatten_dim(self) -> int:
        """Width of the flattened convolution output fed to the projection."""
        return self.channels[-1] * self.conv_lengths()[-1]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_len": self.input_len,
            "bin_count": self.bin_count,
            "channels": list(self.channels),
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "hidden_dim": self.hidden_dim,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderConfig":
        known = {
            "kind", "input_len", "bin_count", "channels",
            "kernel_size", "stride", "padding", "hidden_dim",
        }
        for key in doc:
            if key not in known:
                raise ValidationError(f"unknown encoder config field {key!r}")
        doc = dict(doc)
        if "channels" in doc:
            doc["channels"] = tuple(int(c) for c in doc["channels"])
        return cls(**doc)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh trainable parameters for one encoder, keyed by stable names."""
    d = cfg.hidden_dim
    params: dict[str, Tensor] = {}
    if cfg.kind == "cnn":
        c_in = 1
        for i, c_out in enumerate(cfg.channels):
            params[f"enc.conv{i}.w"] = Tensor(
                ndgrad.trunc_normal(rng, (c_out, c_in, cfg.kernel_size)),
                requires_grad=True,
            )
            params[f"enc.conv{i}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
            params[f"enc.gn{i}.gain"] = Tensor(np.ones(c_out), requires_grad=True)
            params[f"enc.gn{i}.shift"] = Tensor(np.zeros(c_out), requires_grad=True)
            c_in = c_out
        params["enc.proj.w"] = Tensor(
            ndgrad.trunc_normal(rng, (cfg.flatten_dim(), d)), requires_grad=True
        )
        params["enc.proj.b"] = Tensor(np.zeros(d), requires_grad=True)
    elif cfg.kind == "average":
        params["enc.lin.w"] = Tensor(ndgrad.trunc_normal(rng, (d,)), requires_grad=True)
        params["enc.lin.b"] = Tensor(np.zeros(d), requires_grad=True)
    elif cfg.kind == "histdiff":
        params["enc.mlp.w1"] = Tensor(
            ndgrad.trunc_normal(rng, (cfg.bin_count, d)), requires_grad=True
        )
        params["enc.mlp.b1"] = Tensor(np.zeros(d), requires_grad=True)
        params["enc.mlp.w2"] = Tensor(ndgrad.trunc_normal(rng, (d, d)), requires_grad=True)
        params["enc.mlp.b2"] = Tensor(np.zeros(d), requires_grad=True)
        params["enc.mlp.ln_gain"] = Tensor(np.ones(d), requires_grad=True)
        params["enc.mlp.ln_shift"] = Tensor(np.zeros(d), requires_grad=True)
    return params


def fit_length(p: np.ndarray, n: int) -> tuple[np.ndarray, bool]:
    """Zero-pad or truncate each row of ``p`` to exactly ``n`` entries.

    Returns the adjusted array and whether any adjustment happened, so the
    caller can record the mismatch.
    """
    if n < 1:
        raise ValidationError("configured input length must be >= 1")
    length = p.shape[-1]
    if length == n:
        return p, False
    if length > n:
        return p[..., :n], True
    pad = [(0, 0)] * (p.ndim - 1) + [(0, n - length)]
    return np.pad(p, pad), True


def cnn_encode(p, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Hierarchically downsample token probabilities into one embedding.

    ``p`` is a probability vector ``[n]`` or a batch ``[b, n]``. Inputs whose
    length differs from the configured one are zero-padded or truncated, with
    a log note recording the adjustment.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValidationError("cnn encoder input must be nonempty")
    squeeze = p.ndim == 1
    if squeeze:
        p = p[None, :]
    p, adjusted = fit_length(p, cfg.input_len)
    if adjusted:
        log.debug("cnn encoder input resized to configured length %d", cfg.input_len)
    b = p.shape[0]
    x = Tensor(p.reshape(b, 1, cfg.input_len))
    for i, c_out in enumerate(cfg.channels):
        x = ndgrad.conv1d(
            x,
            params[f"enc.conv{i}.w"],
            params[f"enc.conv{i}.b"],
            stride=cfg.stride,
            padding=cfg.padding,
        )
        x = ndgrad.group_norm(
            x,
            params[f"enc.gn{i}.gain"],
            params[f"enc.gn{i}.shift"],
            groups=min(8, c_out),
        )
        x = ndgrad.gelu(x)
    flat = ndgrad.reshape(x, (b, cfg.flatten_dim()))
    e = ndgrad.add(ndgrad.matmul(flat, params["enc.proj.w"]), params["enc.proj.b"])
    if squeeze:
        e = ndgrad.reshape(e, (cfg.hidden_dim,))
    return e


def average_encode(values, params: dict[str, Tensor]) -> Tensor:
    """Project the mean of a value sequence to the hidden dimension.

    Averaging linear projections of each value equals projecting the mean,
    so the sequence collapses to one scalar per example. ``values`` is a
    sequence ``[t]`` or a per-example mean batch ``[b]``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValidationError("average encoder input must be nonempty")
    if values.ndim == 1:
        m = Tensor(np.array(values.mean()))
        return ndgrad.add(ndgrad.mul(m, params["enc.lin.w"]), params["enc.lin.b"])
    raise ValidationError("average encoder expects a 1-D value sequence")


def average_encode_batch(means: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Batched form: one precomputed sequence mean per example."""
    m = Tensor(np.asarray(means, dtype=np.float64)[:, None])
    return ndgrad.add(ndgrad.mul(m, params["enc.lin.w"]), params["enc.lin.b"])


def histdiff_encode(delta, params: dict[str, Tensor]) -> Tensor:
    """Two-layer MLP with a LayerNorm head over a histogram delta.

    ``delta`` is ``[bins]`` or ``[b, bins]`` and must match the configured
    bin count implied by the first weight matrix.
    """
    delta = np.asarray(delta, dtype=np.float64)
    squeeze = delta.ndim == 1
    if squeeze:
        delta = delta[None, :]
    bins = params["enc.mlp.w1"].shape[0]
    if delta.shape[-1] != bins:
        raise ValidationError(
            f"histogram delta has {delta.shape[-1]} bins, encoder expects {bins}"
        )
    h = ndgrad.gelu(
        ndgrad.add(ndgrad.matmul(Tensor(delta), params["enc.mlp.w1"]), params["enc.mlp.b1"])
    )
    h = ndgrad.add(ndgrad.matmul(h, params["enc.mlp.w2"]), params["enc.mlp.b2"])
    e = ndgrad.layer_norm(h, params["enc.mlp.ln_gain"], params["enc.mlp.ln_shift"])
    if squeeze:
        e = ndgrad.reshape(e, (e.shape[-1],))
    return e
