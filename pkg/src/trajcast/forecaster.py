"""Quantile-forecasting sequence model, its MLP ablation, and the training loop.

The main model embeds an (accuracy, gap) history as context tokens, prepends
a learned CLS token and an optional loss-encoder token, runs pre-norm
bidirectional attention with rotary positions, and projects the CLS output
to five quantiles of the future accuracy. Training minimizes pinball loss.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datapipe, encoders, ndgrad
from .datapipe import (
    ContextSequence,
    ExampleDescriptor,
    HistogramDelta,
    MissingOracleData,
    TokenLossStore,
    Trajectory,
    ValidationError,
)
from .encoders import EncoderConfig
from .ndgrad import Tensor

__all__ = [
    "ConfigError",
    "TrainingAborted",
    "TrainConfig",
    "ModelConfig",
    "QuantilePrediction",
    "point_and_interval",
    "pinball_loss",
    "embed_context",
    "Forecaster",
    "DiffProbe",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "train",
    "train_from_manifest",
    "make_predictor",
]

DEFAULT_QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)


class ConfigError(ValueError):
    """A model configuration field is missing, unknown, or invalid."""


class TrainingAborted(RuntimeError):
    """Training stopped on a numeric fault; carries the last good state."""

    def __init__(self, message: str, checkpoint: "Checkpoint", trace: list):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.trace = trace


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 3
    base_lr: float = 6e-4
    weight_decay: float = 0.033
    clip_norm: float = 1.0
    warmup_ratio: float = 0.1

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "base_lr": self.base_lr,
            "weight_decay": self.weight_decay,
            "clip_norm": self.clip_norm,
            "warmup_ratio": self.warmup_ratio,
        }


_ENCODER_KIND_BY_VARIANT = {
    "neuneu": "cnn",
    "average": "average",
    "histdiff": "histdiff",
    "noloss": "none",
    "diffprobe": "histdiff",
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus training hyperparameters, serialized into checkpoints."""

    variant: str = "neuneu"
    hidden_dim: int = 64
    layers: int = 2
    heads: int = 2
    ffn_dim: int = 256
    max_seq_len: int = 512
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES
    encoder: EncoderConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.variant not in _ENCODER_KIND_BY_VARIANT:
            raise ConfigError(f"variant: unknown value {self.variant!r}")
        if self.hidden_dim % 2 != 0:
            raise ConfigError(f"hidden_dim: {self.hidden_dim} must be even")
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(
                f"heads: hidden_dim {self.hidden_dim} not divisible by {self.heads}"
            )
        if (self.hidden_dim // self.heads) % 2 != 0:
            raise ConfigError("heads: per-head width must be even for rotation pairs")
        q = tuple(float(x) for x in self.quantiles)
        if any(not 0.0 < x < 1.0 for x in q) or any(
            a >= b for a, b in zip(q, q[1:])
        ):
            raise ConfigError(f"quantiles: {q} must be strictly increasing in (0, 1)")
        object.__setattr__(self, "quantiles", q)
        if self.encoder is None:
            object.__setattr__(self, "encoder", self._default_encoder())
        expected = _ENCODER_KIND_BY_VARIANT[self.variant]
        if self.encoder.kind != expected:
            raise ConfigError(
                f"encoder.kind: variant {self.variant!r} requires {expected!r}, "
                f"got {self.encoder.kind!r}"
            )
        if self.encoder.hidden_dim != self.hidden_dim:
            raise ConfigError(
                f"encoder.hidden_dim: {self.encoder.hidden_dim} != {self.hidden_dim}"
            )

    def _default_encoder(self) -> EncoderConfig:
        kind = _ENCODER_KIND_BY_VARIANT[self.variant]
        return EncoderConfig(kind=kind, hidden_dim=self.hidden_dim)

    @classmethod
    def desk(cls, variant: str = "neuneu", tokens: int = 4096, bins: int = 64,
             **train_overrides) -> "ModelConfig":
        """Small configuration trainable on one CPU core.

        The learning rate defaults higher than the full-scale value: at this
        width the loss plateaus at the unconditional optimum for hundreds of
        steps otherwise.
        """
        enc = EncoderConfig(
            kind=_ENCODER_KIND_BY_VARIANT[variant],
            input_len=tokens,
            bin_count=bins,
            hidden_dim=64,
        )
        train_overrides.setdefault("base_lr", 5e-3)
        return cls(
            variant=variant, hidden_dim=64, layers=2, heads=2, ffn_dim=256,
            encoder=enc, train=TrainConfig(**train_overrides),
        )

    @classmethod
    def paper(cls, variant: str = "neuneu", tokens: int = 256000,
              bins: int = 64) -> "ModelConfig":
        """Full-scale configuration matching the published hyperparameters."""
        enc = EncoderConfig(
            kind=_ENCODER_KIND_BY_VARIANT[variant],
            input_len=tokens,
            bin_count=bins,
            hidden_dim=512,
        )
        return cls(
            variant=variant, hidden_dim=512, layers=6, heads=8, ffn_dim=2048,
            encoder=enc,
        )

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "hidden_dim": self.hidden_dim,
            "layers": self.layers,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "max_seq_len": self.max_seq_len,
            "quantiles": list(self.quantiles),
            "encoder": self.encoder.to_dict(),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {
            "variant", "hidden_dim", "layers", "heads", "ffn_dim",
            "max_seq_len", "quantiles", "encoder", "train",
        }
        for key in doc:
            if key not in known:
                raise ConfigError(f"{key}: unknown config field")
        doc = dict(doc)
        try:
            if "encoder" in doc and doc["encoder"] is not None:
                doc["encoder"] = EncoderConfig.from_dict(doc["encoder"])
            if "train" in doc and doc["train"] is not None:
                tdoc = doc["train"]
                unknown = set(tdoc) - set(TrainConfig().to_dict())
                if unknown:
                    raise ConfigError(f"train.{sorted(unknown)[0]}: unknown config field")
                doc["train"] = TrainConfig(**tdoc)
            if "quantiles" in doc:
                doc["quantiles"] = tuple(doc["quantiles"])
            return cls(**doc)
        except ValidationError as exc:
            raise ConfigError(f"encoder: {exc}") from exc
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_model_config(path) -> ModelConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    return ModelConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# Predictions
# ---------------------------------------------------------------------------


@dataclass
class QuantilePrediction:
    """Raw quantile head outputs plus the quantile levels they target."""

    raw: np.ndarray
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.shape != (len(self.quantiles),):
            raise ValidationError(
                f"expected {len(self.quantiles)} raw outputs, got {self.raw.shape}"
            )

    def sorted_values(self) -> np.ndarray:
        """Monotone rearrangement: raw outputs sorted ascending."""
        return np.sort(self.raw)


def point_and_interval(pred: QuantilePrediction) -> tuple[float, float, float]:
    """(median, lower, upper) from the sorted outputs, clamped to [0, 1].

    Sorting repairs quantile crossings; the lowest and highest levels bound
    the uncertainty interval and the middle level is the point estimate.
    """
    s = np.clip(pred.sorted_values(), 0.0, 1.0)
    levels = list(pred.quantiles)
    mid = levels.index(0.5) if 0.5 in levels else len(levels) // 2
    return float(s[mid]), float(s[0]), float(s[-1])


def pinball_loss(raw, target, quantiles=DEFAULT_QUANTILES) -> Tensor:
    """Quantile (pinball) loss summed over the quantile levels.

    Computed on the raw, unsorted head outputs so gradients follow the
    training objective exactly. For a batch ``raw`` is [b, Q] and ``target``
    is [b]; the result is the per-example sum [b]. Unbatched inputs give a
    scalar.
    """
    taus = np.asarray(quantiles, dtype=np.float64)
    raw_t = raw if isinstance(raw, Tensor) else Tensor(raw)
    target_arr = np.asarray(target, dtype=np.float64)
    if raw_t.ndim == 2:
        target_t = Tensor(target_arr[:, None])
    else:
        target_t = Tensor(target_arr)
    u = ndgrad.sub(target_t, raw_t)  # a - q
    loss = ndgrad.add(
        ndgrad.mul(ndgrad.relu(u), taus),
        ndgrad.mul(ndgrad.relu(ndgrad.neg(u)), 1.0 - taus),
    )
    return ndgrad.tensor_sum(loss, axis=-1)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def embed_context(y: float, g: int, params: dict[str, Tensor]) -> Tensor:
    """One context token: accuracy fills the first half, log1p(gap) the second."""
    y_t = Tensor(np.array(float(y)))
    g_t = Tensor(np.array(math.log1p(float(g))))
    first = ndgrad.add(ndgrad.mul(y_t, params["ctx.wy"]), params["ctx.by"])
    second = ndgrad.add(ndgrad.mul(g_t, params["ctx.wg"]), params["ctx.bg"])
    return ndgrad.concat([first, second], axis=-1)


def _attention_param_view(params: dict[str, Tensor], layer: int) -> dict[str, Tensor]:
    prefix = f"blk{layer}."
    return {
        "ln1_gain": params[prefix + "ln1.gain"],
        "ln1_shift": params[prefix + "ln1.shift"],
        "wq": params[prefix + "attn.wq"],
        "bq": params[prefix + "attn.bq"],
        "wk": params[prefix + "attn.wk"],
        "bk": params[prefix + "attn.bk"],
        "wv": params[prefix + "attn.wv"],
        "bv": params[prefix + "attn.bv"],
        "wo": params[prefix + "attn.wo"],
        "bo": params[prefix + "attn.bo"],
        "ln2_gain": params[prefix + "ln2.gain"],
        "ln2_shift": params[prefix + "ln2.shift"],
        "ffn_w1": params[prefix + "ffn.w1"],
        "ffn_b1": params[prefix + "ffn.b1"],
        "ffn_w2": params[prefix + "ffn.w2"],
        "ffn_b2": params[prefix + "ffn.b2"],
    }


class Forecaster:
    """Transformer over context tokens with an optional loss-encoder token."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Forecaster":
        rng = np.random.default_rng(seed)
        d = config.hidden_dim
        half = d // 2
        q = len(config.quantiles)
        params: dict[str, Tensor] = {}

        def weight(shape):
            return Tensor(ndgrad.trunc_normal(rng, shape), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape), requires_grad=True)

        params["cls"] = weight((d,))
        params["ctx.wy"] = weight((half,))
        params["ctx.by"] = zeros((half,))
        params["ctx.wg"] = weight((half,))
        params["ctx.bg"] = zeros((half,))
        for i in range(config.layers):
            p = f"blk{i}."
            params[p + "ln1.gain"] = ones((d,))
            params[p + "ln1.shift"] = zeros((d,))
            for name in ("wq", "wk", "wv", "wo"):
                params[p + f"attn.{name}"] = weight((d, d))
            for name in ("bq", "bk", "bv", "bo"):
                params[p + f"attn.{name}"] = zeros((d,))
            params[p + "ln2.gain"] = ones((d,))
            params[p + "ln2.shift"] = zeros((d,))
            params[p + "ffn.w1"] = weight((d, config.ffn_dim))
            params[p + "ffn.b1"] = zeros((config.ffn_dim,))
            params[p + "ffn.w2"] = weight((config.ffn_dim, d))
            params[p + "ffn.b2"] = zeros((d,))
        params["head.w"] = weight((d, q))
        # start roughly calibrated: the untrained head emits the quantile levels
        params["head.b"] = Tensor(np.array(config.quantiles), requires_grad=True)
        params.update(encoders.init_encoder_params(config.encoder, rng))
        return cls(config, params)

    # -- forward ------------------------------------------------------------

    def _encode(self, enc_input) -> Tensor | None:
        """Run the configured loss encoder on a batched representation."""
        if enc_input is None:
            return None
        kind = self.config.encoder.kind
        if kind == "cnn":
            return encoders.cnn_encode(enc_input, self.params, self.config.encoder)
        if kind == "average":
            return encoders.average_encode_batch(enc_input, self.params)
        if kind == "histdiff":
            return encoders.histdiff_encode(enc_input, self.params)
        raise ValidationError(f"variant {self.config.variant!r} takes no encoder input")

    def forward_batch(
        self, ys: np.ndarray, gaps: np.ndarray, enc_input, enc_embedding=None
    ) -> Tensor:
        """Raw quantile outputs [b, Q] for contexts of a shared length.

        ``ys`` and ``gaps`` are [b, t]; the final gap of each row is the
        prediction horizon. ``enc_input`` is the batched loss representation
        (or None, in which case no encoder token is inserted). A caller that
        already encoded its representations may pass ``enc_embedding`` [b, d]
        instead.
        """
        ys = np.asarray(ys, dtype=np.float64)
        gaps = np.asarray(gaps, dtype=np.float64)
        if ys.ndim != 2 or ys.shape != gaps.shape:
            raise ValidationError(f"bad context batch shapes {ys.shape} / {gaps.shape}")
        b, t = ys.shape
        d = self.config.hidden_dim
        p = self.params

        y_t = Tensor(ys[:, :, None])
        g_t = Tensor(np.log1p(gaps)[:, :, None])
        first = ndgrad.add(ndgrad.mul(y_t, p["ctx.wy"]), p["ctx.by"])
        second = ndgrad.add(ndgrad.mul(g_t, p["ctx.wg"]), p["ctx.bg"])
        ctx = ndgrad.concat([first, second], axis=-1)  # [b, t, d]

        tokens = [ndgrad.broadcast_to(ndgrad.reshape(p["cls"], (1, 1, d)), (b, 1, d))]
        e = enc_embedding if enc_embedding is not None else self._encode(enc_input)
        if e is not None:
            tokens.append(ndgrad.reshape(e, (b, 1, d)))
        tokens.append(ctx)
        x = ndgrad.concat(tokens, axis=1)
        seq_len = x.shape[1]
        if seq_len > self.config.max_seq_len:
            raise ValidationError(
                f"sequence length {seq_len} exceeds max {self.config.max_seq_len}"
            )
        positions = np.arange(seq_len)
        for i in range(self.config.layers):
            x = ndgrad.attention_block(
                x, _attention_param_view(p, i), self.config.heads, positions
            )
        h0 = ndgrad.select(x, 0, axis=1)  # CLS position
        return ndgrad.add(ndgrad.matmul(h0, p["head.w"]), p["head.b"])

    def forward(self, context: ContextSequence, enc_input=None) -> QuantilePrediction:
        """Single-example prediction from a context sequence."""
        enc = self._prepare_representation(enc_input)
        raw = self.forward_batch(
            context.ys()[None, :],
            context.effective_gaps()[None, :].astype(np.float64),
            enc,
        )
        return QuantilePrediction(raw.data[0], self.config.quantiles)

    def forecast_horizons(
        self, context: ContextSequence, future_gaps, enc_input=None
    ) -> list[QuantilePrediction]:
        """Independent predictions for several horizons of one context.

        ``enc_input`` is either a single representation shared by all
        horizons or a list with one entry per horizon.
        """
        future_gaps = [int(g) for g in future_gaps]
        if any(g < 1 for g in future_gaps):
            raise ValidationError("prediction horizons must be >= 1")
        h = len(future_gaps)
        if h == 0:
            return []
        ys = np.tile(context.ys(), (h, 1))
        gaps = np.tile(context.gaps().astype(np.float64), (h, 1))
        gaps[:, -1] = future_gaps
        if isinstance(enc_input, list):
            if len(enc_input) != h:
                raise ValidationError("need one encoder input per horizon")
            rows = [self._prepare_representation(e) for e in enc_input]
            enc = None if rows[0] is None else np.stack([r[0] for r in rows])
        else:
            one = self._prepare_representation(enc_input)
            enc = None if one is None else np.repeat(one, h, axis=0)
        raw = self.forward_batch(ys, gaps, enc)
        return [QuantilePrediction(r, self.config.quantiles) for r in raw.data]

    def _prepare_representation(self, rep) -> np.ndarray | None:
        """Normalize a datapipe representation to one batched encoder row."""
        if rep is None:
            return None
        kind = self.config.encoder.kind
        if kind == "cnn":
            row, _ = encoders.fit_length(
                np.asarray(rep, dtype=np.float64), self.config.encoder.input_len
            )
            return row[None, :]
        if kind == "average":
            return np.array([np.asarray(rep, dtype=np.float64).mean()])
        if kind == "histdiff":
            delta = rep.delta if isinstance(rep, HistogramDelta) else np.asarray(rep)
            return np.asarray(delta, dtype=np.float64)[None, :]
        raise ValidationError(f"variant {self.config.variant!r} takes no representation")

    def batch_loss(self, groups: list[dict]) -> Tensor:
        """Mean pinball loss over one shuffled mini-batch.

        ``groups`` buckets examples by context length: each entry holds
        ``ys``, ``gaps``, ``targets``, and ``enc`` arrays for one length.
        All representations are encoded in a single pass (the encoder is
        context-length independent), then split back per bucket.
        """
        embeddings = [None] * len(groups)
        if self.config.encoder.kind != "none" and groups:
            stacked = np.concatenate([np.atleast_1d(g["enc"]) for g in groups], axis=0)
            e_all = self._encode(stacked)
            offset = 0
            for i, g in enumerate(groups):
                n = len(g["targets"])
                embeddings[i] = ndgrad.narrow(e_all, 0, offset, n)
                offset += n
        total = None
        count = 0
        for g, emb in zip(groups, embeddings):
            raw = self.forward_batch(g["ys"], g["gaps"], None, enc_embedding=emb)
            per_example = pinball_loss(raw, g["targets"], self.config.quantiles)
            part = ndgrad.tensor_sum(per_example)
            total = part if total is None else ndgrad.add(total, part)
            count += len(g["targets"])
        return ndgrad.mul(total, 1.0 / count)


class DiffProbe:
    """Anchored MLP: predicts the accuracy change implied by a histogram delta."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        if config.variant != "diffprobe":
            raise ConfigError("variant: DiffProbe requires variant 'diffprobe'")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "DiffProbe":
        rng = np.random.default_rng(seed)
        d = config.hidden_dim
        bins = config.encoder.bin_count
        params = {
            "probe.w1": Tensor(ndgrad.trunc_normal(rng, (bins, d)), requires_grad=True),
            "probe.b1": Tensor(np.zeros(d), requires_grad=True),
            "probe.w2": Tensor(ndgrad.trunc_normal(rng, (d, d)), requires_grad=True),
            "probe.b2": Tensor(np.zeros(d), requires_grad=True),
            # zero-initialized output layer: the untrained probe predicts no change
            "probe.w3": Tensor(np.zeros((d, 1)), requires_grad=True),
            "probe.b3": Tensor(np.zeros(1), requires_grad=True),
        }
        return cls(config, params)

    def delta_batch(self, deltas: np.ndarray) -> Tensor:
        """Predicted accuracy changes [b, 1] for histogram deltas [b, bins]."""
        p = self.params
        h = ndgrad.gelu(ndgrad.add(ndgrad.matmul(Tensor(deltas), p["probe.w1"]), p["probe.b1"]))
        h = ndgrad.gelu(ndgrad.add(ndgrad.matmul(h, p["probe.w2"]), p["probe.b2"]))
        return ndgrad.add(ndgrad.matmul(h, p["probe.w3"]), p["probe.b3"])

    def forward(self, delta, y_anchor: float) -> float:
        """Anchor accuracy plus the predicted change, clamped to [0, 1]."""
        if not 0.0 <= y_anchor <= 1.0:
            raise ValidationError(f"anchor accuracy {y_anchor} outside [0, 1]")
        d = delta.delta if isinstance(delta, HistogramDelta) else np.asarray(delta)
        out = self.delta_batch(np.asarray(d, dtype=np.float64)[None, :])
        return float(np.clip(y_anchor + out.data[0, 0], 0.0, 1.0))

    def batch_loss(self, groups: list[dict]) -> Tensor:
        """Pinball loss of the anchored scalar, broadcast over quantile levels.

        A single prediction repeated across all levels makes the summed
        pinball objective proportional to absolute error, so the probe is
        trained toward the conditional median.
        """
        q = len(self.config.quantiles)
        total = None
        count = 0
        for g in groups:
            delta_pred = self.delta_batch(g["enc"])
            anchors = Tensor(np.asarray(g["anchors"], dtype=np.float64)[:, None])
            pred = ndgrad.broadcast_to(ndgrad.add(anchors, delta_pred), (len(g["targets"]), q))
            per_example = pinball_loss(pred, g["targets"], self.config.quantiles)
            part = ndgrad.tensor_sum(per_example)
            total = part if total is None else ndgrad.add(total, part)
            count += len(g["targets"])
        return ndgrad.mul(total, 1.0 / count)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"NNCK"
_CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int
    version: int = _CKPT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary container: magic, version, JSON config block, named tensors."""
    path = Path(path)
    header = json.dumps(
        {"config": ckpt.config.to_dict(), "seed": ckpt.seed},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in sorted(ckpt.params):
            data = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != _CKPT_MAGIC:
        raise datapipe.DataFormatError(path, 0, "not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _CKPT_VERSION:
        raise datapipe.DataFormatError(path, 4, f"unsupported version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    config = ModelConfig.from_dict(header["config"])
    params: dict[str, np.ndarray] = {}
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        end = off + 8 * count
        if end > len(blob):
            raise datapipe.DataFormatError(path, off, f"tensor {name!r} truncated")
        params[name] = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).copy()
        off = end
    return Checkpoint(config=config, params=params, seed=int(header["seed"]))


def model_from_checkpoint(ckpt: Checkpoint):
    params = {n: Tensor(v, requires_grad=True) for n, v in ckpt.params.items()}
    if ckpt.config.variant == "diffprobe":
        return DiffProbe(ckpt.config, params)
    return Forecaster(ckpt.config, params)


def _snapshot(model, seed: int) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        params={n: p.data.copy() for n, p in model.params.items()},
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _materialize_groups(
    batch: list[ExampleDescriptor],
    trajectories: dict[str, Trajectory],
    store: TokenLossStore | None,
    config: ModelConfig,
) -> list[dict]:
    """Bucket a mini-batch by context length and build dense arrays.

    Contexts longer than the model's window are truncated from the oldest
    end (with gap absorption) before bucketing.
    """
    max_pairs = config.max_seq_len - (1 if config.encoder.kind == "none" else 2)
    buckets: dict[int, list[tuple[ExampleDescriptor, datapipe.ContextSequence]]] = {}
    for desc in batch:
        traj = trajectories[desc.traj_path]
        ctx = datapipe.truncate_context(
            datapipe.context_from_descriptor(desc, traj), max_pairs
        )
        buckets.setdefault(len(ctx), []).append((desc, ctx))
    groups = []
    bins = config.encoder.bin_count
    for t_len in sorted(buckets):
        descs = buckets[t_len]
        ys = np.empty((len(descs), t_len))
        gaps = np.empty((len(descs), t_len))
        targets = np.empty(len(descs))
        anchors = np.empty(len(descs))
        reps = []
        for i, (desc, ctx) in enumerate(descs):
            traj = trajectories[desc.traj_path]
            ys[i] = ctx.ys()
            gaps[i] = ctx.effective_gaps()
            targets[i] = traj.accuracies[desc.target_index - 1]
            anchors[i] = ys[i, -1]
            rep = datapipe.attach_representation(desc, traj, store, bins=bins)
            reps.append(rep)
        kind = config.encoder.kind
        if kind == "cnn":
            n = config.encoder.input_len
            enc = np.stack(
                [encoders.fit_length(np.asarray(r, dtype=np.float64), n)[0] for r in reps]
            )
        elif kind == "average":
            enc = np.array([np.asarray(r, dtype=np.float64).mean() for r in reps])
        elif kind == "histdiff":
            enc = np.stack([r.delta for r in reps])
        else:
            enc = None
        groups.append(
            {"ys": ys, "gaps": gaps, "targets": targets, "anchors": anchors, "enc": enc}
        )
    return groups


def train(
    descriptors: list[ExampleDescriptor],
    trajectories: dict[str, Trajectory],
    store: TokenLossStore | None,
    config: ModelConfig,
    seed: int,
    progress=None,
) -> tuple[Checkpoint, list[tuple[int, float, float]]]:
    """Train a model on descriptor-level examples; returns (checkpoint, trace).

    Mini-batches are drawn by seeded shuffles each epoch, the last partial
    batch is kept, gradients are globally clipped, and the learning rate
    follows warmup plus cosine decay. A non-finite loss or gradient raises
    TrainingAborted carrying the last good checkpoint.
    """
    if not descriptors:
        raise ValidationError("empty training manifest")
    variants = {d.variant for d in descriptors}
    if variants != {config.variant}:
        raise ConfigError(
            f"variant: manifest holds {sorted(variants)}, config expects "
            f"{config.variant!r}"
        )
    if config.variant == "diffprobe":
        model = DiffProbe.init(config, seed)
    else:
        model = Forecaster.init(config, seed)
    tc = config.train
    rng = np.random.default_rng(seed + 1)
    n = len(descriptors)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    state = ndgrad.init_optim_state(
        model.params, base_lr=tc.base_lr, weight_decay=tc.weight_decay
    )
    names = state.order
    trace: list[tuple[int, float, float]] = []
    step = 0
    for _ in range(tc.epochs):
        order = rng.permutation(n)
        for start in range(0, n, tc.batch_size):
            step += 1
            batch = [descriptors[i] for i in order[start : start + tc.batch_size]]
            groups = _materialize_groups(batch, trajectories, store, config)
            with ndgrad.Tape() as tape:
                loss = model.batch_loss(groups)
            loss_val = float(loss.data)
            lr_now = ndgrad.lr_at_step(step, total_steps, tc.warmup_ratio, tc.base_lr)
            trace.append((step, lr_now, loss_val))
            if not math.isfinite(loss_val):
                raise TrainingAborted(
                    f"non-finite loss {loss_val} at step {step}",
                    _snapshot(model, seed),
                    trace,
                )
            grad_list = tape.grad(loss, [model.params[nm] for nm in names])
            grads = dict(zip(names, grad_list))
            clipped, _ = ndgrad.clip_grad_norm(grads, tc.clip_norm)
            try:
                ndgrad.adam_step(model.params, clipped, state, lr_now)
            except ndgrad.NonFiniteGradientError as exc:
                raise TrainingAborted(
                    f"{exc} at step {step}", _snapshot(model, seed), trace
                ) from exc
            if progress is not None:
                progress(step, total_steps, loss_val)
    return _snapshot(model, seed), trace


def train_from_manifest(
    manifest_path, config: ModelConfig, seed: int, progress=None
) -> tuple[Checkpoint, list[tuple[int, float, float]]]:
    """Load a JSONL example manifest and its trajectories, then train."""
    descriptors, variant = datapipe.read_example_manifest(manifest_path)
    if variant != config.variant:
        raise ConfigError(
            f"variant: manifest was built for {variant!r}, config says "
            f"{config.variant!r}"
        )
    trajectories = {
        path: datapipe.read_trajectory(path)
        for path in sorted({d.traj_path for d in descriptors})
    }
    store = None if variant == "noloss" else TokenLossStore()
    return train(descriptors, trajectories, store, config, seed, progress=progress)


# ---------------------------------------------------------------------------
# Evaluation-time prediction
# ---------------------------------------------------------------------------


def make_predictor(ckpt: Checkpoint, store: TokenLossStore | None, allow_oracle: bool):
    """Callable(traj, context, horizons) -> [h, 3] rows of (median, lo, hi).

    Representations are fetched per the model's variant; variants that need
    future-checkpoint data refuse to run unless ``allow_oracle`` is set.
    """
    model = model_from_checkpoint(ckpt)
    variant = ckpt.config.variant
    bins = ckpt.config.encoder.bin_count

    max_pairs = ckpt.config.max_seq_len - (
        1 if ckpt.config.encoder.kind == "none" else 2
    )

    def predict(traj: Trajectory, context: ContextSequence, horizons) -> np.ndarray:
        horizons = [int(g) for g in horizons]
        # representations index the true context end; only the transformer's
        # window is truncated from the oldest side
        s_k = int(context.checkpoint_indices()[-1])
        context = datapipe.truncate_context(context, max_pairs)
        if variant in datapipe.ORACLE_KINDS and not allow_oracle:
            raise MissingOracleData(
                f"variant {variant!r} needs future mean-loss data; rerun with "
                "oracle losses enabled"
            )
        if variant == "diffprobe":
            anchor = context.pairs[-1][0]
            rows = np.empty((len(horizons), 3))
            for i, g in enumerate(horizons):
                delta = datapipe.hist_diff(
                    store.histogram(traj, s_k, bins),
                    store.histogram(traj, s_k + g, bins),
                )
                p = model.forward(delta, anchor)
                rows[i] = (p, p, p)
            return rows
        if variant == "neuneu":
            enc_input = store.probs(traj, s_k)
        elif variant == "average":
            enc_input = np.array(
                [store.mean_prob(traj, i) for i in range(1, s_k + 1)]
            )
        elif variant == "histdiff":
            enc_input = [
                datapipe.hist_diff(
                    store.histogram(traj, s_k, bins),
                    store.histogram(traj, s_k + g, bins),
                )
                for g in horizons
            ]
        else:
            enc_input = None
        preds = model.forecast_horizons(context, horizons, enc_input)
        return np.array([point_and_interval(p) for p in preds])

    return predict
