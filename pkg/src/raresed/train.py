"""Training loop: minibatched ADAM over the combined loss, per-epoch
development scoring, early stopping on dev error rate, and alpha sweeps.

Determinism contract: identical (config, data) yields a bit-identical
report. Initialization and epoch shuffling use separate substreams of
the config seed; the last partial minibatch is kept.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import Utterance
from .detector import EventModel, batch_loss_and_gradients, infer
from .errors import DataMismatchError, InputError, ParseError
from .metrics import (
    DEFAULT_COLLAR_S,
    DEFAULT_FRAME_SHIFT_S,
    EventAnnotation,
    MetricCounts,
    evaluate_dataset,
)
from .numerics import AdamState, adam_step
from .recurrent import EncoderConfig

MODEL_MAGIC = b"RSEM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig
    alpha: float = 1.0
    batch_size: int = 10
    stepsize: float = 1e-4
    epochs: int = 15
    seed: int = 0
    thres0: float = 0.5
    thres1: float = 0.5
    margin: int = 50
    collar_s: float = DEFAULT_COLLAR_S
    frame_shift_s: float = DEFAULT_FRAME_SHIFT_S

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise InputError("alpha must be nonnegative")
        if self.batch_size < 1:
            raise InputError("minibatch size must be at least 1")
        if self.margin < 0:
            raise InputError("frame-window margin must be nonnegative")
        if self.epochs < 0:
            raise InputError("epoch budget must be nonnegative")


@dataclass(frozen=True)
class EpochStats:
    train_loss: float
    dev_er: float
    dev_f1: float


@dataclass
class TrainReport:
    config: TrainConfig
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 when no epoch ran
    best_params: Optional[np.ndarray] = None


def build_frame_window(utt: Utterance, margin: int) -> range:
    """1-based frame window [onset - margin, offset + margin] clipped to
    the utterance; only defined for positive utterances."""
    if utt.y != 1:
        raise ValueError("frame windows are only defined for positive utterances")
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    lo = max(1, utt.onset - margin)
    hi = min(utt.n_frames, utt.offset + margin)
    return range(lo, hi + 1)


def reference_annotations(dataset: Sequence[Utterance],
                          frame_shift_s: float = DEFAULT_FRAME_SHIFT_S) -> dict[str, Optional[EventAnnotation]]:
    """Per-utterance reference events in seconds, from the frame labels."""
    refs: dict[str, Optional[EventAnnotation]] = {}
    for utt in dataset:
        if utt.y == 1:
            refs[utt.id] = EventAnnotation(onset=(utt.onset - 1) * frame_shift_s,
                                           offset=(utt.offset - 1) * frame_shift_s)
        else:
            refs[utt.id] = None
    return refs


def evaluate_model(model: EventModel, dataset: Sequence[Utterance],
                   thres0: float, thres1: float,
                   frame_shift_s: float = DEFAULT_FRAME_SHIFT_S,
                   collar_s: float = DEFAULT_COLLAR_S) -> tuple[float, float, MetricCounts]:
    """Run inference over a dataset and score against its own labels."""
    detections = {utt.id: infer(model, utt.features, thres0, thres1)
                  for utt in dataset}
    refs = reference_annotations(dataset, frame_shift_s)
    return evaluate_dataset(refs, detections, frame_shift_s, collar_s)


def train(config: TrainConfig, trainset: Sequence[Utterance],
          devset: Sequence[Utterance]) -> TrainReport:
    """Minibatched ADAM with per-epoch dev scoring and early stopping.

    The returned snapshot is from the epoch with the lowest dev ER
    (earliest on ties); with an epoch budget of 0 it is the initialized
    model.
    """
    if not trainset or not devset:
        raise InputError("train and dev sets must be nonempty")
    _check_dims(config.encoder, trainset, "train")
    _check_dims(config.encoder, devset, "dev")

    model = EventModel.initialize(config.encoder,
                                  _substream_seed(config.seed, 0))
    params = model.flatten()
    adam = AdamState.fresh(params.size, stepsize=config.stepsize)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence(config.seed, spawn_key=(1,)))

    report = TrainReport(config=config, best_params=params.copy())
    best_er = np.inf
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(trainset))
        loss_sum = 0.0
        for b_start in range(0, len(order), config.batch_size):
            batch = [trainset[i] for i in order[b_start:b_start + config.batch_size]]
            loss, grad = batch_loss_and_gradients(model, batch, config.alpha,
                                                  config.margin)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, "
                    f"batch {b_start // config.batch_size + 1}"
                )
            loss_sum += loss * len(batch)
            params, adam = adam_step(params, grad, adam)
            model = model.with_flat(params)
        dev_er, dev_f1, _ = evaluate_model(model, devset, config.thres0,
                                           config.thres1, config.frame_shift_s,
                                           config.collar_s)
        report.epochs.append(EpochStats(train_loss=loss_sum / len(trainset),
                                        dev_er=dev_er, dev_f1=dev_f1))
        if dev_er < best_er:
            best_er = dev_er
            report.best_epoch = epoch
            report.best_params = params.copy()
    return report


def best_model(report: TrainReport) -> EventModel:
    shell = EventModel.initialize(report.config.encoder,
                                  _substream_seed(report.config.seed, 0))
    return shell.with_flat(report.best_params)


def alpha_sweep(config: TrainConfig, grid: Sequence[float],
                trainset: Sequence[Utterance],
                devset: Sequence[Utterance]) -> list[dict]:
    """Train one model per alpha from identical initialization.

    Returns rows {alpha, best_epoch, dev_er, dev_f1} sorted by alpha.
    """
    if not grid:
        raise InputError("alpha grid must be nonempty")
    rows = []
    for alpha in sorted(grid):
        report = train(replace(config, alpha=float(alpha)), trainset, devset)
        stats = report.epochs[report.best_epoch - 1]
        rows.append({"alpha": float(alpha), "best_epoch": report.best_epoch,
                     "dev_er": stats.dev_er, "dev_f1": stats.dev_f1})
    return rows


def _substream_seed(seed: int, key: int) -> int:
    # EventModel.initialize takes a plain seed; derive one per purpose.
    return int(np.random.SeedSequence(seed, spawn_key=(key,)).generate_state(1)[0])


def _check_dims(encoder: EncoderConfig, dataset: Sequence[Utterance],
                name: str) -> None:
    for utt in dataset:
        if utt.dim != encoder.input_dim:
            raise DataMismatchError(
                f"{name} utterance {utt.id} has {utt.dim}-dim features, "
                f"encoder expects {encoder.input_dim}"
            )


# ---------------------------------------------------------------------------
# Model snapshots.
#
# Byte layout: magic "RSEM" | u32 version | u32 header length | header
# (UTF-8 JSON: encoder config, seed, training hyperparameters) |
# u64 parameter count | parameters as float64 little-endian, in
# EventModel.flatten() order.
# ---------------------------------------------------------------------------

def save_model(path, model: EventModel, config: Optional[TrainConfig] = None) -> None:
    header = {
        "encoder": {
            "kind": model.config.kind,
            "layers": model.config.layers,
            "hidden": model.config.hidden,
            "input_dim": model.config.input_dim,
            "multires_bidirectional": model.config.multires_bidirectional,
        },
    }
    if config is not None:
        header["train"] = {
            "alpha": config.alpha, "batch_size": config.batch_size,
            "stepsize": config.stepsize, "epochs": config.epochs,
            "seed": config.seed, "thres0": config.thres0,
            "thres1": config.thres1, "margin": config.margin,
        }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    flat = model.flatten()
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    buf.write(struct.pack("<Q", flat.size))
    buf.write(np.ascontiguousarray(flat, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path) -> tuple[EventModel, dict]:
    try:
        fh = open(path, "rb")
    except FileNotFoundError:
        raise InputError(f"model file not found: {path}")
    with fh:
        blob = fh.read()
    if blob[:4] != MODEL_MAGIC:
        raise ParseError(f"{path}: not a model snapshot")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != MODEL_VERSION:
        raise ParseError(f"{path}: unsupported model version {version}")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
        enc = header["encoder"]
        config = EncoderConfig(kind=enc["kind"], layers=enc["layers"],
                               hidden=enc["hidden"], input_dim=enc["input_dim"],
                               multires_bidirectional=enc["multires_bidirectional"])
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ParseError(f"{path}: bad model header: {exc}")
    pos = 12 + header_len
    (count,) = struct.unpack("<Q", blob[pos:pos + 8])
    raw = blob[pos + 8:pos + 8 + count * 8]
    if len(raw) != count * 8:
        raise ParseError(f"{path}: truncated parameter block")
    flat = np.frombuffer(raw, dtype="<f8").copy()
    shell = EventModel.initialize(config, seed=0)
    if flat.size != shell.param_count:
        raise ParseError(
            f"{path}: header promises {shell.param_count} parameters, "
            f"file carries {flat.size}"
        )
    return shell.with_flat(flat), header


# ---------------------------------------------------------------------------
# Train reports: tab-separated, one row per epoch.
# Columns: epoch, train_loss, dev_er, dev_f1, best (0/1 marker).
# ---------------------------------------------------------------------------

REPORT_HEADER = "epoch\ttrain_loss\tdev_er\tdev_f1\tbest"


def format_report(report: TrainReport) -> str:
    lines = [REPORT_HEADER]
    for i, stats in enumerate(report.epochs, start=1):
        best = 1 if i == report.best_epoch else 0
        lines.append(f"{i}\t{stats.train_loss!r}\t{stats.dev_er!r}"
                     f"\t{stats.dev_f1!r}\t{best}")
    return "\n".join(lines) + "\n"


def write_report(path, report: TrainReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_report(report))
