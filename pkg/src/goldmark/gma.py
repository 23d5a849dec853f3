"""Gated-attention multiple-instance learning head.

A slide is a bag of tile embeddings h_k (rows of an N x M tensor). Tiles are
scored through two gated projections,

    a_k = softmax_k( w^T ( tanh(V h_k) * sigmoid(U h_k) ) )

the bag embedding is the attention-weighted sum z = sum_k a_k h_k, and the
slide probability is sigmoid(W_c z + b). Gradients of the binary
cross-entropy loss are derived analytically through the softmax and both
gates (verified against central finite differences in the test suite).

Training is plain seeded SGD-over-bags with Adam-style moments and decoupled
weight decay, batch of one bag, dual checkpointing (best validation AUROC
and final epoch), and a per-epoch CSV-able log. Inference never mutates
parameters.
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    DimensionMismatchError,
    FormatError,
    MissingArtifactError,
    NonFiniteBagError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .formats import SplitManifest, atomic_write, sha256_bytes
from .metrics import auroc

WEIGHTS_MAGIC = b"GMWTS\x00"
WEIGHTS_VERSION = 1
WEIGHTS_SUFFIX = ".gmw"
WEIGHTS_ALIGN = 64
DIGEST_BYTES = 32

ATTENTION_COLUMNS = ["slide_id", "tile_index", "attention", "checkpoint_kind"]
TRAIN_LOG_COLUMNS = ["split", "epoch", "train_loss", "val_auroc"]

PROB_CLAMP = 1e-7
CHECKPOINT_KINDS = ("best_auc", "final_epoch")


@dataclass
class GmaParameters:
    """V, U: gate projections (L x M); w: attention vector (L); W_c, b: classifier."""

    V: np.ndarray
    U: np.ndarray
    w: np.ndarray
    W_c: np.ndarray
    b: float

    @property
    def attention_dim(self) -> int:
        return int(self.V.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.V.shape[1])

    def validate(self) -> None:
        l, m = self.V.shape
        if self.U.shape != (l, m) or self.w.shape != (l,) or self.W_c.shape != (m,):
            raise DimensionMismatchError(
                f"inconsistent parameter shapes: V{self.V.shape} U{self.U.shape} "
                f"w{self.w.shape} W_c{self.W_c.shape}"
            )
        for name, arr in (("V", self.V), ("U", self.U), ("w", self.w), ("W_c", self.W_c)):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteBagError(f"parameter {name} contains non-finite entries")
        if not math.isfinite(self.b):
            raise NonFiniteBagError("parameter b is non-finite")

    def copy(self) -> "GmaParameters":
        return GmaParameters(self.V.copy(), self.U.copy(), self.w.copy(), self.W_c.copy(), self.b)

    def to_bytes(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes()
            for a in (self.V, self.U, self.w, self.W_c, np.float64(self.b))
        )


def init_parameters(input_dim: int, attention_dim: int, seed: int) -> GmaParameters:
    """Seeded uniform init in +-1/sqrt(fan_in) per matrix; bias starts at zero."""
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return GmaParameters(
        V=uniform((attention_dim, input_dim), input_dim),
        U=uniform((attention_dim, input_dim), input_dim),
        w=uniform((attention_dim,), attention_dim),
        W_c=uniform((input_dim,), input_dim),
        b=0.0,
    )


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_bag(params: GmaParameters, bag: np.ndarray) -> np.ndarray:
    bag = np.asarray(bag, dtype=np.float64)
    if bag.ndim != 2 or bag.shape[0] < 1:
        raise DimensionMismatchError(f"bag must be a nonempty N x M matrix, got shape {bag.shape}")
    if bag.shape[1] != params.input_dim:
        raise DimensionMismatchError(
            f"bag dim {bag.shape[1]} does not match model input dim {params.input_dim}"
        )
    if not np.all(np.isfinite(bag)):
        raise NonFiniteBagError("bag contains NaN/Inf; QC should have excluded this slide")
    return bag


def forward(params: GmaParameters, bag: np.ndarray) -> tuple[float, np.ndarray]:
    """Slide probability and per-tile attention (sums to 1)."""
    h = _check_bag(params, bag)
    gates = np.tanh(h @ params.V.T) * _sigmoid(h @ params.U.T)  # N x L
    scores = gates @ params.w  # N
    scores = scores - scores.max()
    exps = np.exp(scores)
    attention = exps / exps.sum()
    z = attention @ h  # M
    logit = float(z @ params.W_c + params.b)
    prob = float(_sigmoid(np.array([logit]))[0])
    return prob, attention


def loss_and_grads(
    params: GmaParameters, bag: np.ndarray, label: int
) -> tuple[float, GmaParameters]:
    """Binary cross-entropy loss and analytic gradients for one bag."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    h = _check_bag(params, bag)

    t = np.tanh(h @ params.V.T)  # N x L
    s = _sigmoid(h @ params.U.T)  # N x L
    gates = t * s
    scores = gates @ params.w
    shifted = scores - scores.max()
    exps = np.exp(shifted)
    attention = exps / exps.sum()
    z = attention @ h
    logit = float(z @ params.W_c + params.b)
    prob = float(_sigmoid(np.array([logit]))[0])

    clamped = min(max(prob, PROB_CLAMP), 1.0 - PROB_CLAMP)
    loss = -(label * math.log(clamped) + (1 - label) * math.log(1.0 - clamped))

    dlogit = prob - label
    d_wc = dlogit * z
    d_b = dlogit
    dz = dlogit * params.W_c  # M
    d_attention = h @ dz  # N
    d_scores = attention * (d_attention - float(attention @ d_attention))  # softmax backward
    d_w = gates.T @ d_scores  # L
    d_gates = np.outer(d_scores, params.w)  # N x L
    d_pre_v = d_gates * s * (1.0 - t * t)  # through tanh
    d_pre_u = d_gates * t * s * (1.0 - s)  # through sigmoid
    d_v = d_pre_v.T @ h  # L x M
    d_u = d_pre_u.T @ h

    grads = GmaParameters(V=d_v, U=d_u, w=d_w, W_c=d_wc, b=float(d_b))
    return loss, grads


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 120
    attention_dim: int = 128
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    seed: int = 0


@dataclass(frozen=True)
class Bag:
    slide_id: str
    patient_id: str
    label: int
    features: np.ndarray  # N x M


@dataclass
class Checkpoint:
    task_id: str
    encoder_id: str
    split_index: int
    epoch: int
    kind: str  # best_auc | final_epoch
    val_auroc: float
    params: GmaParameters


@dataclass(frozen=True)
class EpochLogRow:
    split: int
    epoch: int
    train_loss: float
    val_auroc: float


@dataclass
class SplitOutcome:
    split_index: int
    best: Checkpoint
    final: Checkpoint
    log: list[EpochLogRow]


class _Adam:
    """Adam moments with decoupled weight decay, one state per parameter field."""

    def __init__(self, params: GmaParameters, cfg: TrainingConfig):
        self.cfg = cfg
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in self._fields(params).items()}
        self.v = {k: np.zeros_like(v) for k, v in self._fields(params).items()}

    @staticmethod
    def _fields(params: GmaParameters) -> dict[str, np.ndarray]:
        return {
            "V": params.V,
            "U": params.U,
            "w": params.w,
            "W_c": params.W_c,
            "b": np.atleast_1d(np.float64(params.b)),
        }

    def update(self, params: GmaParameters, grads: GmaParameters) -> GmaParameters:
        cfg = self.cfg
        self.step += 1
        new = {}
        for key, value in self._fields(params).items():
            g = self._fields(grads)[key]
            self.m[key] = cfg.beta1 * self.m[key] + (1 - cfg.beta1) * g
            self.v[key] = cfg.beta2 * self.v[key] + (1 - cfg.beta2) * g * g
            m_hat = self.m[key] / (1 - cfg.beta1**self.step)
            v_hat = self.v[key] / (1 - cfg.beta2**self.step)
            new[key] = value - cfg.learning_rate * (
                m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * value
            )
        return GmaParameters(
            V=new["V"], U=new["U"], w=new["w"], W_c=new["W_c"], b=float(new["b"][0])
        )


def _train_seed(base_seed: int, split_index: int) -> int:
    digest = hashlib.sha256(f"gma-train:{base_seed}:{split_index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def train(
    task_id: str,
    encoder_id: str,
    splits: SplitManifest,
    bags: Mapping[str, Bag],
    config: TrainingConfig = TrainingConfig(),
    expected_slides: Iterable[str] | None = None,
    split_indices: Sequence[int] | None = None,
) -> list[SplitOutcome]:
    """Train one model per split; returns dual checkpoints plus the epoch log.

    Fail-closed: if ``expected_slides`` (the labeled, QC-passing slide set) is
    given, every one of them must be present in ``bags`` or training refuses
    to start, naming the offenders.
    """
    if expected_slides is not None:
        missing = sorted(set(expected_slides) - set(bags))
        if missing:
            raise MissingArtifactError(missing)
    for bag in bags.values():
        if bag.label not in (0, 1):
            raise ValueError(f"bag {bag.slide_id} has non-binary label {bag.label!r}")

    outcomes = []
    for split_index in split_indices if split_indices is not None else range(splits.n_splits):
        train_patients = splits.train_patients(split_index)
        test_patients = splits.test_patients(split_index)
        train_bags = [bags[s] for s in sorted(bags) if bags[s].patient_id in train_patients]
        val_bags = [bags[s] for s in sorted(bags) if bags[s].patient_id in test_patients]
        if not train_bags or not val_bags:
            raise MissingArtifactError(
                [], message=f"split {split_index} of {task_id} has an empty partition"
            )

        input_dim = train_bags[0].features.shape[1]
        seed = _train_seed(config.seed, split_index)
        params = init_parameters(input_dim, config.attention_dim, seed)
        optimizer = _Adam(params, config)
        rng = np.random.default_rng(seed)

        log: list[EpochLogRow] = []
        best_auroc = -1.0
        best_epoch = -1
        best_params = params.copy()
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train_bags))
            total_loss = 0.0
            for bag_index in order:
                bag = train_bags[bag_index]
                loss, grads = loss_and_grads(params, bag.features, bag.label)
                params = optimizer.update(params, grads)
                total_loss += loss
            val_scores = [forward(params, b.features)[0] for b in val_bags]
            val_labels = [b.label for b in val_bags]
            val_auroc = auroc(val_labels, val_scores)
            log.append(
                EpochLogRow(
                    split=split_index,
                    epoch=epoch,
                    train_loss=total_loss / len(train_bags),
                    val_auroc=val_auroc,
                )
            )
            if val_auroc > best_auroc:
                best_auroc = val_auroc
                best_epoch = epoch
                best_params = params.copy()

        outcomes.append(
            SplitOutcome(
                split_index=split_index,
                best=Checkpoint(
                    task_id=task_id,
                    encoder_id=encoder_id,
                    split_index=split_index,
                    epoch=best_epoch,
                    kind="best_auc",
                    val_auroc=best_auroc,
                    params=best_params,
                ),
                final=Checkpoint(
                    task_id=task_id,
                    encoder_id=encoder_id,
                    split_index=split_index,
                    epoch=config.epochs,
                    kind="final_epoch",
                    val_auroc=log[-1].val_auroc,
                    params=params.copy(),
                ),
                log=log,
            )
        )
    return outcomes


def write_train_log(log: Iterable[EpochLogRow], path: Path | str) -> None:
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_COLUMNS)
        for row in log:
            writer.writerow([row.split, row.epoch, repr(row.train_loss), repr(row.val_auroc)])


# ---------------------------------------------------------------------------
# inference and attention export

@dataclass(frozen=True)
class SlidePrediction:
    slide_id: str
    patient_id: str
    label: int
    probability: float


@dataclass
class AttentionExport:
    """Per-tile attention rows aligned to the slide's tile manifest."""

    checkpoint_kind: str
    rows: list[tuple[str, int, float]] = field(default_factory=list)

    def validate(self, tol: float = 1e-6) -> None:
        sums: dict[str, float] = {}
        for slide_id, _, attention in self.rows:
            sums[slide_id] = sums.get(slide_id, 0.0) + attention
        for slide_id, total in sums.items():
            if abs(total - 1.0) > tol:
                raise FormatError(f"{slide_id}: attention sums to {total}, expected 1")

    def rows_for_slide(self, slide_id: str) -> list[tuple[int, float]]:
        return [(idx, a) for sid, idx, a in self.rows if sid == slide_id]


def infer(
    checkpoint: Checkpoint, bags: Mapping[str, Bag]
) -> tuple[list[SlidePrediction], AttentionExport]:
    """Frozen-weight inference over a set of bags; parameters are never touched."""
    checkpoint.params.validate()
    predictions = []
    export = AttentionExport(checkpoint_kind=checkpoint.kind)
    for slide_id in sorted(bags):
        bag = bags[slide_id]
        prob, attention = forward(checkpoint.params, bag.features)
        predictions.append(
            SlidePrediction(
                slide_id=slide_id,
                patient_id=bag.patient_id,
                label=bag.label,
                probability=prob,
            )
        )
        for tile_index, value in enumerate(attention):
            export.rows.append((slide_id, tile_index, float(value)))
    export.validate()
    return predictions, export


def write_attention_csv(exports: Iterable[AttentionExport], path: Path | str) -> None:
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(ATTENTION_COLUMNS)
        for export in exports:
            for slide_id, tile_index, attention in export.rows:
                writer.writerow([slide_id, tile_index, repr(attention), export.checkpoint_kind])


def read_attention_csv(path: Path | str) -> list[AttentionExport]:
    by_kind: dict[str, AttentionExport] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ATTENTION_COLUMNS:
            raise FormatError(f"{path}: bad attention CSV columns {header!r}")
        for slide_id, tile_index, attention, kind in reader:
            export = by_kind.setdefault(kind, AttentionExport(checkpoint_kind=kind))
            export.rows.append((slide_id, int(tile_index), float(attention)))
    return [by_kind[k] for k in sorted(by_kind)]


# ---------------------------------------------------------------------------
# checkpoint serialization (.gmw)

def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(checkpoint: Checkpoint, path: Path | str) -> str:
    """Versioned binary: header, float32 parameter blocks, SHA-256 trailer."""
    if checkpoint.kind not in CHECKPOINT_KINDS:
        raise FormatError(f"unknown checkpoint kind {checkpoint.kind!r}")
    p = checkpoint.params
    p.validate()
    strings = _pack_str(checkpoint.task_id) + _pack_str(checkpoint.encoder_id) + _pack_str(checkpoint.kind)
    body = (
        WEIGHTS_MAGIC
        + struct.pack(
            "<HIIIIId",
            WEIGHTS_VERSION,
            0,  # header_size placeholder
            checkpoint.split_index,
            p.input_dim,
            p.attention_dim,
            checkpoint.epoch,
            checkpoint.val_auroc,
        )
        + strings
    )
    header_size = int(math.ceil(len(body) / WEIGHTS_ALIGN) * WEIGHTS_ALIGN)
    header = (
        WEIGHTS_MAGIC
        + struct.pack(
            "<HIIIIId",
            WEIGHTS_VERSION,
            header_size,
            checkpoint.split_index,
            p.input_dim,
            p.attention_dim,
            checkpoint.epoch,
            checkpoint.val_auroc,
        )
        + strings
    )
    header += b"\x00" * (header_size - len(header))
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes()
        for a in (p.V, p.U, p.w, p.W_c, np.float32(p.b))
    )
    digest = sha256_bytes(header, payload)
    with atomic_write(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(bytes.fromhex(digest))
    return digest


def load_checkpoint(path: Path | str, verify: bool = True) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 36 or blob[:6] != WEIGHTS_MAGIC:
        raise BadMagicError(f"{path}: not a weights file")
    version, header_size, split_index, m, l, epoch, val_auroc = struct.unpack_from("<HIIIIId", blob, 6)
    if version != WEIGHTS_VERSION:
        raise UnsupportedVersionError(f"{path}: weights version {version} unsupported")
    offset = 36
    strings = []
    for _ in range(3):
        (length,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        strings.append(blob[offset : offset + length].decode("utf-8"))
        offset += length
    task_id, encoder_id, kind = strings
    n_floats = 2 * l * m + l + m + 1
    expected = header_size + n_floats * 4 + DIGEST_BYTES
    if len(blob) < expected:
        raise TruncatedPayloadError(f"{path}: {len(blob)} bytes, {expected} expected")
    payload = blob[header_size : header_size + n_floats * 4]
    stored = blob[header_size + n_floats * 4 : expected]
    if verify and sha256_bytes(blob[:header_size], payload) != stored.hex():
        raise ChecksumMismatchError(f"{path}: weights digest mismatch")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = values[pos : pos + size].reshape(shape)
        pos += size
        return out.copy()

    params = GmaParameters(
        V=take((l, m)),
        U=take((l, m)),
        w=take((l,)),
        W_c=take((m,)),
        b=float(values[pos]),
    )
    return Checkpoint(
        task_id=task_id,
        encoder_id=encoder_id,
        split_index=split_index,
        epoch=epoch,
        kind=kind,
        val_auroc=val_auroc,
        params=params,
    )
