"""Training loop: AdamW with a cosine schedule, label-aware augmentation,
attention-guided slice re-allocation at epoch boundaries, evaluation, and
bit-exact checkpointing.

The checkpoint format:

    magic "ADPT" | version u32 LE | config text (u32 length + UTF-8) |
    parameter table | optimizer table | psi as three u32 | rng state
    (u32 length + JSON bytes)

where a tensor table is: count u32, then per tensor name (u16 length +
bytes), rank u8, extents u32 each, float32 LE values. The optimizer table
holds first/second moments as "m.<name>"/"v.<name>" plus a scalar "step".
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .model import AdaptModel, AttentionRecord, attention_scores
from .morphology import augment_sample, flat_square
from .slicer import SliceAllocation, extract_slices
from .volumes import LABEL_MCI, normalize_zmuv, resize_trilinear

CHECKPOINT_MAGIC = b"ADPT"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered during optimization."""


class CheckpointError(ValueError):
    """Unreadable checkpoint: bad magic/version or corrupt payload."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    epochs: int = 10
    batch_size: int = 4
    p_update: float = 0.8
    seed: int = 0
    augment: bool = True
    se_radius: int = 1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    cosine_horizon: int | None = None  # total steps; derived when None

    def __post_init__(self):
        if not 0.0 <= self.p_update <= 1.0:
            raise ValueError("p_update must lie in [0, 1]")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")
        if self.se_radius < 0:
            raise ValueError("se_radius must be nonnegative")


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params, lr=5e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise nm.ShapeError(
                    f"gradient shape {g.shape} does not match parameter {p.data.shape}"
                )
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def cosine_lr(step, total_steps, base_lr):
    """base_lr * (1 + cos(pi * step / total_steps)) / 2."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def initial_allocation(n_total, n_min, n_max):
    """Near-uniform split, remainder to the earlier views."""
    base = n_total // 3
    rem = n_total - 3 * base
    counts = tuple(base + (1 if i < rem else 0) for i in range(3))
    return SliceAllocation(counts, n_total, n_min, n_max)


def update_allocation(scores, alloc, rng, p=0.8):
    """Re-allocate the slice budget from per-view attention scores.

    With probability ``p``: normalize the scores, round each share of
    n_total, clamp into [n_min, n_max], then repair the rounding residual
    one slice at a time (add to the highest-score view that can still
    grow, remove from the lowest-score view that can still shrink; score
    ties fall back to the count and then view order, which round-robins
    tied views). Otherwise: reset to the near-uniform initial list.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != (3,) or (s < 0).any():
        raise ValueError(f"scores must be 3 nonnegative values, got {scores!r}")
    if s.sum() <= 0:
        raise ValueError("scores are all zero")
    n_total, n_min, n_max = alloc.n_total, alloc.n_min, alloc.n_max
    if rng.random() >= p:
        return initial_allocation(n_total, n_min, n_max)
    share = s / s.sum()
    counts = [
        min(max(int(np.floor(sh * n_total + 0.5)), n_min), n_max) for sh in share
    ]
    residual = n_total - (counts[0] + counts[1] + counts[2])
    while residual != 0:
        if residual > 0:
            i = max(
                (i for i in range(3) if counts[i] < n_max),
                key=lambda i: (share[i], -counts[i], -i),
            )
            counts[i] += 1
            residual -= 1
        else:
            i = min(
                (i for i in range(3) if counts[i] > n_min),
                key=lambda i: (share[i], -counts[i], i),
            )
            counts[i] -= 1
            residual += 1
    return SliceAllocation(tuple(counts), n_total, n_min, n_max)


def prepare_stack(vol, alloc, extent):
    """Shared eval/train preprocessing: resize if needed, normalize, slice."""
    if vol.extents != (extent, extent, extent):
        vol = resize_trilinear(vol, (extent, extent, extent))
    return extract_slices(normalize_zmuv(vol), alloc)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_acc: float
    counts: tuple[int, int, int]
    lr: float


@dataclass
class TrainResult:
    model: AdaptModel
    optimizer: AdamW
    allocation: SliceAllocation
    metrics: list[EpochMetrics]
    rng: np.random.Generator


def _epoch_samples(train_vols, cfg, se, rng):
    order = rng.permutation(len(train_vols))
    samples = []
    for i in order:
        vol = train_vols[i]
        if cfg.augment:
            samples.extend(augment_sample(vol, rng, se=se))
        elif vol.label != LABEL_MCI:
            samples.append((vol, vol.label))
    perm = rng.permutation(len(samples))
    return [samples[i] for i in perm]


def effective_train_size(train_vols, cfg):
    """Samples per epoch: MCI volumes contribute twice under augmentation
    and are dropped without it."""
    n_mci = 0
    for v in train_vols:
        if v.label is None:
            raise ValueError("training volumes must be labeled")
        n_mci += v.label == LABEL_MCI
    if cfg.augment:
        return len(train_vols) + n_mci
    return len(train_vols) - n_mci


def train(
    train_vols,
    val_vols,
    model,
    cfg,
    *,
    rng=None,
    optimizer=None,
    allocation=None,
    start_epoch=0,
    log=None,
):
    """Run (or resume) the optimization loop; deterministic given the seed.

    Per epoch: augment, slice with the current allocation, cross-entropy
    forward/backward, AdamW step under the cosine schedule, then update
    the allocation from the epoch-mean attention scores.
    """
    if not train_vols or not val_vols:
        raise ValueError("train and val splits must be nonempty")
    c = model.config
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if optimizer is None:
        optimizer = AdamW(
            model.parameters(),
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,
        )
    if allocation is None:
        allocation = initial_allocation(c.n_total, c.n_min, c.n_max)
    se = flat_square(cfg.se_radius)
    steps_per_epoch = -(-effective_train_size(train_vols, cfg) // cfg.batch_size)
    horizon = cfg.cosine_horizon or max(1, cfg.epochs * steps_per_epoch)

    metrics = []
    lr_now = cfg.lr
    for epoch in range(start_epoch, cfg.epochs):
        samples = _epoch_samples(train_vols, cfg, se, rng)
        loss_sum = 0.0
        score_sum = np.zeros(3)
        seen = 0
        for at in range(0, len(samples), cfg.batch_size):
            batch = samples[at : at + cfg.batch_size]
            stacks = [prepare_stack(vol, allocation, c.image_extent) for vol, _ in batch]
            labels = np.array([label for _, label in batch])
            record = AttentionRecord()
            with nm.Tape() as tape:
                logits = model.forward(stacks, record=record)
                loss = nm.cross_entropy(logits, labels)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, sample offset {at}"
                    )
                tape.backward(loss)
            lr_now = cosine_lr(min(optimizer.step_count, horizon), horizon, cfg.lr)
            optimizer.step(lr=lr_now)
            optimizer.zero_grad()
            loss_sum += value * len(batch)
            score_sum += attention_scores(record) * len(batch)
            seen += len(batch)
        val_acc, _ = evaluate(model, val_vols, allocation, batch_size=cfg.batch_size)
        row = EpochMetrics(epoch, loss_sum / seen, val_acc, allocation.counts, lr_now)
        metrics.append(row)
        if log is not None:
            log(row)
        allocation = update_allocation(score_sum / seen, allocation, rng, p=cfg.p_update)
    return TrainResult(model, optimizer, allocation, metrics, rng)


def evaluate(model, vols, allocation, batch_size=4):
    """Argmax accuracy and the 2x2 confusion matrix (rows: true label)."""
    if not vols:
        raise ValueError("cannot evaluate an empty split")
    for v in vols:
        if v.label not in (0, 1):
            raise ValueError("evaluation needs binary NC/AD labels")
    extent = model.config.image_extent
    confusion = np.zeros((2, 2), dtype=int)
    for at in range(0, len(vols), batch_size):
        batch = vols[at : at + batch_size]
        stacks = [prepare_stack(v, allocation, extent) for v in batch]
        logits = model.forward(stacks)
        preds = np.argmax(logits.data, axis=-1)
        for v, pred in zip(batch, preds):
            confusion[v.label, pred] += 1
    accuracy = confusion.trace() / confusion.sum()
    return float(accuracy), confusion


# checkpoint serialization


def _pack_table(entries):
    blob = bytearray(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode()
        arr = np.asarray(arr, dtype=np.float32)
        blob += struct.pack("<H", len(raw)) + raw
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f4").tobytes()
    return bytes(blob)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.at = 0

    def take(self, count):
        if self.at + count > len(self.blob):
            raise CheckpointError("corrupt checkpoint: truncated payload")
        out = self.blob[self.at : self.at + count]
        self.at += count
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_table(reader):
    (count,) = reader.unpack("<I")
    out = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode()
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape)
        out[name] = np.ascontiguousarray(values)
    return out


def save_checkpoint(path, model, optimizer, allocation, rng, epoch, train_cfg):
    from .configio import snapshot_text

    text = snapshot_text(model.config, train_cfg, epoch).encode()
    params = [(k, p.data) for k, p in model.parameters().items()]
    moments = [("step", np.float32(optimizer.step_count))]
    moments += [(f"m.{k}", v) for k, v in optimizer.m.items()]
    moments += [(f"v.{k}", v) for k, v in optimizer.v.items()]
    state = json.dumps(rng.bit_generator.state).encode()

    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(text)) + text
    blob += _pack_table(params)
    blob += _pack_table(moments)
    blob += struct.pack("<III", *allocation.counts)
    blob += struct.pack("<I", len(state)) + state

    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    model: AdaptModel
    optimizer: AdamW
    allocation: SliceAllocation
    rng: np.random.Generator
    epoch: int
    train_cfg: TrainConfig


def load_checkpoint(path):
    from .configio import parse_snapshot

    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic or version in {path}")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (want {CHECKPOINT_VERSION})"
        )
    (text_len,) = reader.unpack("<I")
    try:
        model_cfg, train_cfg, epoch = parse_snapshot(reader.take(text_len).decode())
    except ValueError as err:
        raise CheckpointError(f"corrupt checkpoint config: {err}") from None

    params = _read_table(reader)
    moments = _read_table(reader)
    counts = reader.unpack("<III")
    (state_len,) = reader.unpack("<I")
    try:
        state = json.loads(reader.take(state_len).decode())
    except json.JSONDecodeError as err:
        raise CheckpointError(f"corrupt rng state: {err}") from None

    model = AdaptModel(model_cfg, seed=0)
    named = model.parameters()
    if set(named) != set(params):
        raise CheckpointError("corrupt checkpoint: parameter names do not match")
    for name, p in named.items():
        if params[name].shape != p.data.shape:
            raise CheckpointError(f"corrupt checkpoint: shape mismatch for {name}")
        p.data = params[name].astype(p.dtype)

    optimizer = AdamW(
        named,
        lr=train_cfg.lr,
        betas=(train_cfg.beta1, train_cfg.beta2),
        eps=train_cfg.adam_eps,
        weight_decay=train_cfg.weight_decay,
    )
    if "step" not in moments:
        raise CheckpointError("corrupt checkpoint: optimizer step missing")
    optimizer.step_count = int(moments["step"].reshape(-1)[0])
    for name in named:
        if f"m.{name}" not in moments or f"v.{name}" not in moments:
            raise CheckpointError("corrupt checkpoint: optimizer moments missing")
        optimizer.m[name] = moments[f"m.{name}"].copy()
        optimizer.v[name] = moments[f"v.{name}"].copy()

    allocation = SliceAllocation(counts, model_cfg.n_total, model_cfg.n_min, model_cfg.n_max)
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return Checkpoint(model, optimizer, allocation, rng, epoch, train_cfg)
