"""GRU layers and the sequence encoders built from them.

Three encoder kinds produce one hidden vector per input frame:

* ``unidirectional``: L stacked forward GRU layers.
* ``bidirectional``: L stacked layers, each the concatenation of a
  forward run and a backward run (2H outputs per frame).
* ``multiresolution``: after each layer the output sequence is
  average-pooled by 2 along time and fed to the next layer, so higher
  layers see coarser time scales; every layer's pooled output is
  replicated back to full length and the streams are summed.

Cell convention (fixed here for reproducibility):

    z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
    r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
    c_t = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t

Forward passes cache every activation needed for exact
backpropagation through time; the backward functions return parameter
gradients in the same shapes as the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import as_f64, sigmoid

ENCODER_KINDS = ("unidirectional", "bidirectional", "multiresolution")


@dataclass
class GruLayerParams:
    """One GRU direction: three input maps, three recurrent maps, biases."""

    w_z: np.ndarray  # (H, D_in)
    w_r: np.ndarray
    w_h: np.ndarray
    u_z: np.ndarray  # (H, H)
    u_r: np.ndarray
    u_h: np.ndarray
    b_z: np.ndarray  # (H,)
    b_r: np.ndarray
    b_h: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w_z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[1]

    def validate(self) -> None:
        h, d = self.w_z.shape
        for name in ("w_z", "w_r", "w_h"):
            a = getattr(self, name)
            if a.shape != (h, d):
                raise ValueError(f"{name} has shape {a.shape}, expected {(h, d)}")
        for name in ("u_z", "u_r", "u_h"):
            a = getattr(self, name)
            if a.shape != (h, h):
                raise ValueError(f"{name} has shape {a.shape}, expected {(h, h)}")
        for name in ("b_z", "b_r", "b_h"):
            a = getattr(self, name)
            if a.shape != (h,):
                raise ValueError(f"{name} has shape {a.shape}, expected {(h,)}")
        for name in self.field_order():
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @staticmethod
    def field_order() -> tuple[str, ...]:
        """Canonical field order used for flattening and initialization."""
        return ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.field_order()]

    @classmethod
    def zeros(cls, hidden: int, input_dim: int) -> "GruLayerParams":
        return cls(
            w_z=np.zeros((hidden, input_dim)),
            w_r=np.zeros((hidden, input_dim)),
            w_h=np.zeros((hidden, input_dim)),
            u_z=np.zeros((hidden, hidden)),
            u_r=np.zeros((hidden, hidden)),
            u_h=np.zeros((hidden, hidden)),
            b_z=np.zeros(hidden),
            b_r=np.zeros(hidden),
            b_h=np.zeros(hidden),
        )

    @classmethod
    def initialize(cls, rng: np.random.Generator, hidden: int,
                   input_dim: int) -> "GruLayerParams":
        """Weights uniform in [-s, s] with s = 1/sqrt(fan-in); zero biases.

        Matrices are drawn in canonical field order so a fixed seed
        pins every parameter.
        """
        p = cls.zeros(hidden, input_dim)
        for name in ("w_z", "w_r", "w_h"):
            s = 1.0 / np.sqrt(input_dim)
            setattr(p, name, rng.uniform(-s, s, size=(hidden, input_dim)))
        for name in ("u_z", "u_r", "u_h"):
            s = 1.0 / np.sqrt(hidden)
            setattr(p, name, rng.uniform(-s, s, size=(hidden, hidden)))
        return p


@dataclass
class EncoderLayer:
    """Parameters of one encoder layer: forward cell, optional backward cell."""

    fwd: GruLayerParams
    bwd: Optional[GruLayerParams] = None


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the frame encoder."""

    kind: str
    layers: int
    hidden: int
    input_dim: int
    multires_bidirectional: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.hidden < 1 or self.input_dim < 1:
            raise ValueError("hidden size and input dim must be positive")

    @property
    def directions(self) -> int:
        if self.kind == "bidirectional":
            return 2
        if self.kind == "multiresolution" and self.multires_bidirectional:
            return 2
        return 1

    @property
    def output_dim(self) -> int:
        """Per-frame output width; identical for every layer of a stack."""
        return self.hidden * self.directions

    def layer_input_dim(self, index: int) -> int:
        return self.input_dim if index == 0 else self.output_dim


def init_encoder_layers(config: EncoderConfig,
                        rng: np.random.Generator) -> list[EncoderLayer]:
    """Draw all layer parameters in a fixed, documented order.

    Layers in order; forward direction before backward within a layer.
    """
    layers = []
    for i in range(config.layers):
        d_in = config.layer_input_dim(i)
        fwd = GruLayerParams.initialize(rng, config.hidden, d_in)
        bwd = None
        if config.directions == 2:
            bwd = GruLayerParams.initialize(rng, config.hidden, d_in)
        layers.append(EncoderLayer(fwd=fwd, bwd=bwd))
    return layers


def zero_encoder_layers(config: EncoderConfig) -> list[EncoderLayer]:
    layers = []
    for i in range(config.layers):
        d_in = config.layer_input_dim(i)
        bwd = GruLayerParams.zeros(config.hidden, d_in) if config.directions == 2 else None
        layers.append(EncoderLayer(fwd=GruLayerParams.zeros(config.hidden, d_in), bwd=bwd))
    return layers


# ---------------------------------------------------------------------------
# Single cell step and sequence runs
# ---------------------------------------------------------------------------

def gru_cell_step(params: GruLayerParams, x_t: np.ndarray,
                  h_prev: np.ndarray) -> np.ndarray:
    """One GRU step; reference form of the cell equations."""
    x_t = as_f64(x_t)
    h_prev = as_f64(h_prev)
    if x_t.shape != (params.input_dim,) or h_prev.shape != (params.hidden,):
        raise ValueError(
            f"gru_cell_step dimension mismatch: x {x_t.shape}, h {h_prev.shape}, "
            f"cell expects ({params.input_dim},) and ({params.hidden},)"
        )
    z = sigmoid(params.w_z @ x_t + params.u_z @ h_prev + params.b_z)
    r = sigmoid(params.w_r @ x_t + params.u_r @ h_prev + params.b_r)
    c = np.tanh(params.w_h @ x_t + params.u_h @ (r * h_prev) + params.b_h)
    return (1.0 - z) * h_prev + z * c


@dataclass
class GruRunTrace:
    """Activations of one directional run, in the run's own time order."""

    inputs: np.ndarray  # (T, D_in)
    hs: np.ndarray      # (T, H)
    zs: np.ndarray
    rs: np.ndarray
    cs: np.ndarray


def _run_gru(params: GruLayerParams, xs: np.ndarray) -> GruRunTrace:
    """Run the cell over a (T, D_in) sequence from a zero initial state.

    Input projections for all steps are batched into one matmul; the
    time loop only carries the recurrent part.
    """
    xs = as_f64(xs)
    if xs.ndim != 2 or xs.shape[1] != params.input_dim:
        raise ValueError(
            f"sequence has shape {xs.shape}, layer expects (*, {params.input_dim})"
        )
    t_len = xs.shape[0]
    h_dim = params.hidden
    w_all = np.concatenate([params.w_z, params.w_r, params.w_h], axis=0)
    b_all = np.concatenate([params.b_z, params.b_r, params.b_h])
    pre = xs @ w_all.T + b_all  # (T, 3H)
    u_zr = np.concatenate([params.u_z, params.u_r], axis=0)  # (2H, H)

    hs = np.empty((t_len, h_dim))
    zs = np.empty((t_len, h_dim))
    rs = np.empty((t_len, h_dim))
    cs = np.empty((t_len, h_dim))
    h = np.zeros(h_dim)
    for t in range(t_len):
        zr = sigmoid(pre[t, : 2 * h_dim] + u_zr @ h)
        z = zr[:h_dim]
        r = zr[h_dim:]
        c = np.tanh(pre[t, 2 * h_dim:] + params.u_h @ (r * h))
        h = (1.0 - z) * h + z * c
        zs[t] = z
        rs[t] = r
        cs[t] = c
        hs[t] = h
    return GruRunTrace(inputs=xs, hs=hs, zs=zs, rs=rs, cs=cs)


def run_unidirectional(params: GruLayerParams, xs: np.ndarray) -> np.ndarray:
    """Hidden sequence of a forward run over ``xs`` (zero initial state)."""
    return _run_gru(params, xs).hs


def run_bidirectional(fwd: GruLayerParams, bwd: GruLayerParams,
                      xs: np.ndarray) -> np.ndarray:
    """Per-frame concatenation (forward_t || backward_t).

    The backward half runs over the time-reversed input and is
    re-reversed, so backward_t summarizes frames t..T.
    """
    if fwd.input_dim != bwd.input_dim or fwd.hidden != bwd.hidden:
        raise ValueError("forward/backward cells must share dimensions")
    f = _run_gru(fwd, xs)
    b = _run_gru(bwd, as_f64(xs)[::-1])
    return np.concatenate([f.hs, b.hs[::-1]], axis=1)


def _gru_backward(params: GruLayerParams, trace: GruRunTrace,
                  d_out: np.ndarray, need_dx: bool) -> tuple[GruLayerParams, Optional[np.ndarray]]:
    """BPTT through one directional run.

    ``d_out`` is the loss gradient on every hidden output (T, H).
    Returns gradients shaped like the parameters, plus the gradient on
    the input sequence when requested.
    """
    t_len, h_dim = trace.hs.shape
    u_zr_t = np.concatenate([params.u_z, params.u_r], axis=0).T  # (H, 2H)
    u_h_t = params.u_h.T

    d_az = np.empty((t_len, h_dim))
    d_ar = np.empty((t_len, h_dim))
    d_ac = np.empty((t_len, h_dim))
    carry = np.zeros(h_dim)
    zero_h = np.zeros(h_dim)
    for t in range(t_len - 1, -1, -1):
        h_prev = trace.hs[t - 1] if t > 0 else zero_h
        z = trace.zs[t]
        r = trace.rs[t]
        c = trace.cs[t]
        dh = d_out[t] + carry
        dz = dh * (c - h_prev)
        dac = (dh * z) * (1.0 - c * c)
        carry = dh * (1.0 - z)
        drh = u_h_t @ dac
        carry = carry + drh * r
        dar = (drh * h_prev) * (r * (1.0 - r))
        daz = dz * (z * (1.0 - z))
        carry = carry + u_zr_t @ np.concatenate([daz, dar])
        d_az[t] = daz
        d_ar[t] = dar
        d_ac[t] = dac

    h_prev_seq = np.vstack([zero_h[None, :], trace.hs[:-1]])
    grads = GruLayerParams(
        w_z=d_az.T @ trace.inputs,
        w_r=d_ar.T @ trace.inputs,
        w_h=d_ac.T @ trace.inputs,
        u_z=d_az.T @ h_prev_seq,
        u_r=d_ar.T @ h_prev_seq,
        u_h=d_ac.T @ (trace.rs * h_prev_seq),
        b_z=d_az.sum(axis=0),
        b_r=d_ar.sum(axis=0),
        b_h=d_ac.sum(axis=0),
    )
    dxs = None
    if need_dx:
        dxs = d_az @ params.w_z + d_ar @ params.w_r + d_ac @ params.w_h
    return grads, dxs


# ---------------------------------------------------------------------------
# Time-axis pooling
# ---------------------------------------------------------------------------

def subsample2(seq: np.ndarray) -> np.ndarray:
    """Average neighboring frame pairs; an odd trailing frame passes through.

    Output length is ceil(T/2).
    """
    seq = as_f64(seq)
    t_len = seq.shape[0]
    if t_len < 1:
        raise ValueError("subsample2 needs at least one frame")
    pairs = t_len // 2
    head = 0.5 * (seq[0:2 * pairs:2] + seq[1:2 * pairs:2])
    if t_len % 2:
        return np.concatenate([head, seq[-1:]], axis=0)
    return head


def _subsample2_backward(d_out: np.ndarray, t_len: int) -> np.ndarray:
    pairs = t_len // 2
    d_in = np.zeros((t_len,) + d_out.shape[1:])
    d_in[: 2 * pairs] = np.repeat(0.5 * d_out[:pairs], 2, axis=0)
    if t_len % 2:
        d_in[-1] += d_out[-1]
    return d_in


def _upsample_k(seq: np.ndarray, target_t: int, k: int) -> np.ndarray:
    idx = np.arange(target_t) // (2 ** k)
    return seq[idx]


def _upsample_k_backward(d_out: np.ndarray, source_t: int, k: int) -> np.ndarray:
    bounds = np.arange(source_t) * (2 ** k)
    return np.add.reduceat(d_out, bounds, axis=0)


def upsample_replicate(seq: np.ndarray, target_t: int) -> np.ndarray:
    """Replicate pooled frames back over the spans they summarized.

    ``seq`` must come from repeated subsample2 of a length-target_t
    sequence; each frame is copied 2^k times (final partial span covered
    by the last frame).
    """
    seq = as_f64(seq)
    m = seq.shape[0]
    n, k = target_t, 0
    while n > m:
        n = (n + 1) // 2
        k += 1
    if n != m:
        raise ValueError(
            f"cannot upsample {m} frames to {target_t}: no whole number of "
            f"halvings connects the lengths"
        )
    return _upsample_k(seq, target_t, k)


# ---------------------------------------------------------------------------
# Full encoder
# ---------------------------------------------------------------------------

@dataclass
class LayerTrace:
    fwd: GruRunTrace
    bwd: Optional[GruRunTrace] = None


@dataclass
class EncoderTrace:
    """Everything the encoder backward pass needs."""

    input_length: int
    layer_traces: list[LayerTrace] = field(default_factory=list)
    # Pooled per-layer outputs, multiresolution only (one per layer).
    sub_outputs: Optional[list[np.ndarray]] = None


def _run_layer(layer: EncoderLayer, xs: np.ndarray) -> tuple[LayerTrace, np.ndarray]:
    f = _run_gru(layer.fwd, xs)
    if layer.bwd is None:
        return LayerTrace(fwd=f), f.hs
    b = _run_gru(layer.bwd, xs[::-1])
    return LayerTrace(fwd=f, bwd=b), np.concatenate([f.hs, b.hs[::-1]], axis=1)


def _layer_backward(layer: EncoderLayer, trace: LayerTrace, d_out: np.ndarray,
                    need_dx: bool) -> tuple[EncoderLayer, Optional[np.ndarray]]:
    if layer.bwd is None:
        gf, dx = _gru_backward(layer.fwd, trace.fwd, d_out, need_dx)
        return EncoderLayer(fwd=gf), dx
    h_dim = layer.fwd.hidden
    gf, dxf = _gru_backward(layer.fwd, trace.fwd, d_out[:, :h_dim], need_dx)
    gb, dxb = _gru_backward(layer.bwd, trace.bwd, d_out[::-1, h_dim:], need_dx)
    dx = dxf + dxb[::-1] if need_dx else None
    return EncoderLayer(fwd=gf, bwd=gb), dx


def encoder_forward(config: EncoderConfig, layers: list[EncoderLayer],
                    xs: np.ndarray) -> tuple[np.ndarray, EncoderTrace]:
    """Encode a (T, d) sequence into (T, output_dim) frame features."""
    xs = as_f64(xs)
    if len(layers) != config.layers:
        raise ValueError(f"expected {config.layers} layers, got {len(layers)}")
    if xs.ndim != 2 or xs.shape[1] != config.input_dim:
        raise ValueError(
            f"input has shape {xs.shape}, encoder expects (*, {config.input_dim})"
        )
    t_len = xs.shape[0]
    if t_len < 1:
        raise ValueError("need at least one frame")
    trace = EncoderTrace(input_length=t_len)

    if config.kind == "multiresolution":
        return _multires_forward(config, layers, xs, trace)

    seq = xs
    for layer in layers:
        ltr, seq = _run_layer(layer, seq)
        trace.layer_traces.append(ltr)
    return seq, trace


def multires_forward(config: EncoderConfig, layers: list[EncoderLayer],
                     xs: np.ndarray) -> tuple[np.ndarray, EncoderTrace]:
    """Multi-resolution stack; thin alias over encoder_forward."""
    if config.kind != "multiresolution":
        raise ValueError("multires_forward requires a multiresolution config")
    return encoder_forward(config, layers, xs)


def _multires_forward(config: EncoderConfig, layers: list[EncoderLayer],
                      xs: np.ndarray, trace: EncoderTrace) -> tuple[np.ndarray, EncoderTrace]:
    t_len = xs.shape[0]
    trace.sub_outputs = []
    seq = xs
    total = np.zeros((t_len, config.output_dim))
    for depth, layer in enumerate(layers):
        ltr, out = _run_layer(layer, seq)
        trace.layer_traces.append(ltr)
        sub = subsample2(out)
        trace.sub_outputs.append(sub)
        # Layer at this depth has been pooled depth+1 times in total.
        total += _upsample_k(sub, t_len, depth + 1)
        seq = sub
    return total, trace


def encoder_backward(config: EncoderConfig, layers: list[EncoderLayer],
                     trace: EncoderTrace, d_hs: np.ndarray) -> list[EncoderLayer]:
    """Gradients of all layer parameters given d(loss)/d(encoder output).

    Returns one EncoderLayer of gradient arrays per parameter layer.
    """
    if config.kind == "multiresolution":
        return _multires_backward(config, layers, trace, d_hs)
    grads: list[Optional[EncoderLayer]] = [None] * len(layers)
    d = d_hs
    for i in range(len(layers) - 1, -1, -1):
        grads[i], d = _layer_backward(layers[i], trace.layer_traces[i], d,
                                      need_dx=i > 0)
    return grads  # type: ignore[return-value]


def _multires_backward(config: EncoderConfig, layers: list[EncoderLayer],
                       trace: EncoderTrace, d_hs: np.ndarray) -> list[EncoderLayer]:
    t_len = trace.input_length
    grads: list[Optional[EncoderLayer]] = [None] * len(layers)
    d_next_input: Optional[np.ndarray] = None
    for i in range(len(layers) - 1, -1, -1):
        sub = trace.sub_outputs[i]
        d_sub = _upsample_k_backward(d_hs, sub.shape[0], i + 1)
        if d_next_input is not None:
            d_sub = d_sub + d_next_input
        out_len = trace.layer_traces[i].fwd.hs.shape[0]
        d_out = _subsample2_backward(d_sub, out_len)
        grads[i], d_next_input = _layer_backward(layers[i], trace.layer_traces[i],
                                                 d_out, need_dx=i > 0)
    return grads  # type: ignore[return-value]
