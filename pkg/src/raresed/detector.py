"""The event detector: frame posteriors, attention pooling, utterance
posterior, the combined loss, its exact gradients, and inference.

One classifier vector w serves both prediction levels. Per frame,
p_t = sigmoid(w . h_t) scores frame t; the p_t normalized over the
utterance become attention weights that pool the frame features into an
utterance embedding, scored again by w. Training minimizes

    loss = utterance_loss + alpha * frame_loss,

where the frame term is a mean cross-entropy over a window around the
labeled event (only for positive utterances), and the utterance term is
the cross-entropy of the pooled posterior.

Gradients are fully analytic: backpropagation through both uses of w,
through the attention normalization (quotient rule), and through the
recurrent encoder (BPTT, including the pooling of the multi-resolution
stack). The test suite checks them against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, TYPE_CHECKING

import numpy as np

from .numerics import as_f64, flatten_arrays, sigmoid
from .recurrent import (
    EncoderConfig,
    EncoderLayer,
    EncoderTrace,
    GruLayerParams,
    encoder_backward,
    encoder_forward,
    init_encoder_layers,
)

if TYPE_CHECKING:  # pragma: no cover
    from .data import Utterance

# Attention denominator guard: keeps weights defined when every frame
# posterior underflows to zero, and keeps sum(a) strictly <= 1.
ATTENTION_EPS = 1e-12
# Posteriors are clamped to [PROB_FLOOR, 1 - PROB_FLOOR] before logs.
PROB_FLOOR = 1e-12

DEFAULT_WINDOW_MARGIN = 50


@dataclass
class EventModel:
    """Encoder parameters plus the shared event classifier vector w."""

    config: EncoderConfig
    layers: list[EncoderLayer]
    w: np.ndarray

    def __post_init__(self) -> None:
        self.w = as_f64(self.w)
        if self.w.shape != (self.config.output_dim,):
            raise ValueError(
                f"classifier has shape {self.w.shape}, encoder emits "
                f"{self.config.output_dim}-dim frames"
            )

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int) -> "EventModel":
        """Deterministic init: weights uniform +-1/sqrt(fan-in), zero biases."""
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        layers = init_encoder_layers(config, rng)
        s = 1.0 / np.sqrt(config.output_dim)
        w = rng.uniform(-s, s, size=config.output_dim)
        return cls(config=config, layers=layers, w=w)

    def _param_arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend(layer.fwd.arrays())
            if layer.bwd is not None:
                out.extend(layer.bwd.arrays())
        out.append(self.w)
        return out

    def flatten(self) -> np.ndarray:
        """All parameters as one vector: layers in order (forward cell
        before backward), fields in GruLayerParams.field_order(), w last."""
        return flatten_arrays(self._param_arrays())

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self._param_arrays())

    def with_flat(self, vec: np.ndarray) -> "EventModel":
        """New model with parameters taken from a flat vector (lossless)."""
        vec = as_f64(vec)
        if vec.shape != (self.param_count,):
            raise ValueError(
                f"parameter vector has {vec.size} entries, model has "
                f"{self.param_count}"
            )
        pos = 0

        def take(shape: tuple[int, ...]) -> np.ndarray:
            nonlocal pos
            size = int(np.prod(shape, dtype=np.int64))
            out = vec[pos:pos + size].reshape(shape).copy()
            pos += size
            return out

        layers = []
        for layer in self.layers:
            cells = []
            for cell in (layer.fwd, layer.bwd):
                if cell is None:
                    cells.append(None)
                    continue
                cells.append(GruLayerParams(
                    *[take(getattr(cell, name).shape)
                      for name in GruLayerParams.field_order()]))
            layers.append(EncoderLayer(fwd=cells[0], bwd=cells[1]))
        w = take(self.w.shape)
        return EventModel(config=self.config, layers=layers, w=w)


@dataclass
class ForwardTrace:
    """Cached activations of one utterance forward pass.

    Filled in stages: frame_posteriors populates the encoder outputs and
    p_t; utterance_posterior adds attention, embedding, and p.
    """

    encoder: EncoderTrace
    hidden: np.ndarray            # (T, h)
    frame_posteriors: np.ndarray  # (T,)
    attention: Optional[np.ndarray] = None
    embedding: Optional[np.ndarray] = None
    utterance_posterior: Optional[float] = None


@dataclass(frozen=True)
class Detection:
    """Inference outcome; onset/offset are 1-based inclusive frame indices."""

    present: bool
    onset: Optional[int] = None
    offset: Optional[int] = None

    def __post_init__(self) -> None:
        if self.present:
            if self.onset is None or self.offset is None:
                raise ValueError("present detection needs onset and offset")
            if not 1 <= self.onset <= self.offset:
                raise ValueError(f"bad boundary {self.onset}..{self.offset}")


def frame_posteriors(model: EventModel, features: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """p_t = sigmoid(w . h_t) for every frame of a (d, T) feature matrix.

    No bias term on the classifier at either level.
    """
    features = as_f64(features)
    if features.ndim != 2 or features.shape[0] != model.config.input_dim:
        raise ValueError(
            f"features have shape {features.shape}, model expects "
            f"({model.config.input_dim}, T)"
        )
    hs, enc_trace = encoder_forward(model.config, model.layers, features.T)
    p = sigmoid(hs @ model.w)
    return p, ForwardTrace(encoder=enc_trace, hidden=hs, frame_posteriors=p)


def attention_weights(p: np.ndarray) -> np.ndarray:
    """Frame posteriors normalized over the utterance.

    a_t = p_t / (sum_s p_s + eps); the guard keeps the weights defined
    for all-zero posteriors and the sum strictly within [0, 1].
    """
    p = as_f64(p)
    if p.ndim != 1 or p.shape[0] < 1:
        raise ValueError("attention_weights expects a nonempty vector")
    return p / (p.sum() + ATTENTION_EPS)


def utterance_posterior(model: EventModel, trace: ForwardTrace) -> float:
    """Pool frames with attention and classify the embedding with w.

    Stores attention, embedding, and the posterior on the trace.
    """
    if trace.attention is None:
        trace.attention = attention_weights(trace.frame_posteriors)
    trace.embedding = trace.attention @ trace.hidden
    trace.utterance_posterior = sigmoid(float(model.w @ trace.embedding))
    return trace.utterance_posterior


def forward(model: EventModel, features: np.ndarray) -> ForwardTrace:
    """Full forward pass: posteriors, attention, embedding, p."""
    _, trace = frame_posteriors(model, features)
    utterance_posterior(model, trace)
    return trace


def _clamped_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR))


def utterance_loss(p: float, y: int) -> float:
    """Cross-entropy of the utterance posterior against the binary label."""
    p = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return float(-(y * np.log(p) + (1 - y) * np.log(1.0 - p)))


def frame_window(onset: int, offset: int, margin: int, t_len: int) -> range:
    """1-based inclusive window [onset - margin, offset + margin] clipped
    to the utterance."""
    if not 1 <= onset <= offset <= t_len:
        raise ValueError(f"bad event boundaries {onset}..{offset} for T={t_len}")
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    return range(max(1, onset - margin), min(t_len, offset + margin) + 1)


def frame_loss(trace: ForwardTrace, utt: "Utterance",
               window: Iterable[int]) -> float:
    """Mean frame cross-entropy over the window; 0 for negative utterances.

    Frame labels are meaningless when no event occurs, so the frame term
    is only measured on positives.
    """
    if utt.y == 0:
        return 0.0
    idx = np.fromiter(window, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("frame_loss needs a nonempty window for positives")
    t_len = trace.frame_posteriors.shape[0]
    if idx.min() < 1 or idx.max() > t_len:
        raise ValueError(
            f"window touches frames outside [1, {t_len}]: "
            f"{idx.min()}..{idx.max()}"
        )
    p = trace.frame_posteriors[idx - 1]
    y = as_f64(utt.frame_labels)[idx - 1]
    ll = y * _clamped_log(p) + (1.0 - y) * _clamped_log(1.0 - p)
    return float(-np.mean(ll))


def total_loss(model: EventModel, utt: "Utterance", alpha: float,
               margin: int = DEFAULT_WINDOW_MARGIN) -> tuple[float, ForwardTrace]:
    """utterance_loss + alpha * frame_loss with the standard event window."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    trace = forward(model, utt.features)
    loss = utterance_loss(trace.utterance_posterior, utt.y)
    if utt.y == 1:
        window = frame_window(utt.onset, utt.offset, margin,
                              trace.frame_posteriors.shape[0])
        loss += alpha * frame_loss(trace, utt, window)
    return loss, trace


def _backward(model: EventModel, trace: ForwardTrace, utt: "Utterance",
              alpha: float, margin: int) -> np.ndarray:
    """Exact gradient of the total loss for one utterance, flattened."""
    hs = trace.hidden
    p = trace.frame_posteriors
    a = trace.attention
    t_len = p.shape[0]

    # Utterance branch. d(loss)/d(logit) of a sigmoid cross-entropy is
    # posterior - label, so the clamp never enters the gradient path.
    gu = trace.utterance_posterior - utt.y
    grad_w = gu * trace.embedding
    d_embed = gu * model.w

    # Pooling h_bar = sum_t a_t h_t.
    d_a = hs @ d_embed
    d_hs = np.outer(a, d_embed)

    # Attention normalization a_t = p_t / (sum p + eps), quotient rule.
    denom = p.sum() + ATTENTION_EPS
    d_p = d_a / denom - (d_a @ p) / (denom * denom)

    # Frame logits receive the attention chain plus the frame loss.
    d_s = d_p * (p * (1.0 - p))
    if utt.y == 1:
        window = frame_window(utt.onset, utt.offset, margin, t_len)
        idx = np.arange(window.start - 1, window.stop - 1)
        labels = as_f64(utt.frame_labels)[idx]
        d_s[idx] += alpha * (p[idx] - labels) / idx.size

    grad_w = grad_w + hs.T @ d_s
    d_hs += np.outer(d_s, model.w)

    layer_grads = encoder_backward(model.config, model.layers, trace.encoder, d_hs)
    arrays: list[np.ndarray] = []
    for g in layer_grads:
        arrays.extend(g.fwd.arrays())
        if g.bwd is not None:
            arrays.extend(g.bwd.arrays())
    arrays.append(grad_w)
    return flatten_arrays(arrays)


def batch_loss_and_gradients(model: EventModel, batch: Sequence["Utterance"],
                             alpha: float,
                             margin: int = DEFAULT_WINDOW_MARGIN) -> tuple[float, np.ndarray]:
    """Mean total loss over the batch and its gradient, in flatten() order."""
    if not batch:
        raise ValueError("batch must be nonempty")
    total = 0.0
    grad = np.zeros(model.param_count)
    for utt in batch:
        loss, trace = total_loss(model, utt, alpha, margin)
        total += loss
        grad += _backward(model, trace, utt, alpha, margin)
    n = len(batch)
    return total / n, grad / n


def gradients(model: EventModel, batch: Sequence["Utterance"], alpha: float,
              margin: int = DEFAULT_WINDOW_MARGIN) -> np.ndarray:
    """Gradient of the mean total loss over the batch."""
    return batch_loss_and_gradients(model, batch, alpha, margin)[1]


def _longest_true_run(mask: np.ndarray) -> Optional[tuple[int, int]]:
    """(start, end) 0-based inclusive of the longest run; earliest wins ties."""
    best = None
    best_len = 0
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - start > best_len:
                best, best_len = (start, i - 1), i - start
            start = None
    if start is not None and mask.shape[0] - start > best_len:
        best = (start, mask.shape[0] - 1)
    return best


def decide_detection(p_utt: float, frame_p: np.ndarray, thres0: float = 0.5,
                     thres1: float = 0.5) -> Detection:
    """Two-level thresholding rule on already-computed posteriors.

    No event when the utterance posterior is <= thres0. Otherwise the
    frame posteriors are binarized at thres1 and the longest run of 1's
    (earliest on ties) gives the boundaries; if no frame clears thres1
    the single highest-posterior frame is returned.
    """
    if not (0.0 < thres0 < 1.0 and 0.0 < thres1 < 1.0):
        raise ValueError("thresholds must lie strictly inside (0, 1)")
    frame_p = as_f64(frame_p)
    if p_utt <= thres0:
        return Detection(present=False)
    run = _longest_true_run(frame_p > thres1)
    if run is None:
        t = int(np.argmax(frame_p))
        return Detection(present=True, onset=t + 1, offset=t + 1)
    return Detection(present=True, onset=run[0] + 1, offset=run[1] + 1)


def infer(model: EventModel, features: np.ndarray, thres0: float = 0.5,
          thres1: float = 0.5) -> Detection:
    """Run the model and apply the two-level thresholding rule."""
    trace = forward(model, features)
    return decide_detection(trace.utterance_posterior, trace.frame_posteriors,
                            thres0, thres1)
