"""Optimizer, checkpoint format, run configuration, and training loops.

Checkpoints are binary: magic ``KGCK``, little-endian uint32 version and
header length, a canonical-JSON header (kind, config echo, step, seed,
sorted parameter manifest), then the parameters as float32 little-endian in
manifest order. Canonical JSON + sorted manifests make checkpoints
byte-identical across runs of the same seeded job.

All file outputs go through atomic temp-file writes, so a failing run
never leaves a partial artifact behind.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .errors import CheckpointError, ConfigError, TrainingDiverged

MAGIC = b"KGCK"
VERSION = 1
IGNORE = -1  # target id excluded from the LM loss


def atomic_write(path: str, data: bytes | str) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with linear warmup over the first 10% of total steps."""

    def __init__(self, params: Sequence[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 warmup_frac: float = 0.1):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.warmup_frac = warmup_frac
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, total_steps: int | None = None) -> None:
        self.t += 1
        lr_t = self.lr
        if total_steps:
            warmup = max(1, math.ceil(self.warmup_frac * total_steps))
            lr_t = self.lr * min(1.0, self.t / warmup)
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / (1.0 - self.b1 ** self.t)
            vhat = self.v[i] / (1.0 - self.b2 ** self.t)
            p.data -= lr_t * mhat / (np.sqrt(vhat) + self.eps)


def sgd_batches(examples: list, batch_size: int,
                rng: np.random.Generator) -> Iterator[list]:
    """Seeded shuffle, then contiguous batches."""
    order = rng.permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    kind: str  # lm | scorer | fused
    config: dict
    step: int
    seed: int
    arrays: dict[str, np.ndarray]

    @property
    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, a.shape) for n, a in sorted(self.arrays.items())]


def save_checkpoint(path: str, kind: str, config: dict,
                    named_arrays: Sequence[tuple[str, np.ndarray]],
                    step: int, seed: int) -> None:
    items = sorted((n, np.asarray(a)) for n, a in named_arrays)
    header = json.dumps(
        {"kind": kind, "config": config, "step": step, "seed": seed,
         "params": [[n, list(a.shape)] for n, a in items]},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join([MAGIC, struct.pack("<I", VERSION),
                     struct.pack("<I", len(header)), header,
                     *(a.astype("<f4").tobytes() for _, a in items)])
    atomic_write(path, blob)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {VERSION}")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    offset = 12 + header_len
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated at parameter {name!r}")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f4") \
            .astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return Checkpoint(header["kind"], header["config"], header["step"],
                      header["seed"], arrays)


def restore_params(named: Sequence[tuple[str, Tensor]], ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into tensors; manifests must match exactly."""
    expected = [(n, t.shape) for n, t in sorted(named)]
    if expected != ckpt.manifest:
        raise CheckpointError(
            f"manifest mismatch: model has {expected[:3]}... vs "
            f"checkpoint {ckpt.manifest[:3]}...")
    for name, tensor in named:
        tensor.data = ckpt.arrays[name].copy()


# ---------------------------------------------------------------------------
# run configuration


PRESETS = {
    # batch sizes follow the two hosted-model training recipes
    "gpt4like": {"train.batch_size": "16"},
    "mistrallike": {"train.batch_size": "32"},
}


def parse_config(path: str) -> dict[str, str]:
    """Flat ``key=value`` lines with dotted sections and # comments."""
    raw: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"{path}: unknown preset {preset!r}")
        merged = dict(PRESETS[preset])
        merged.update(raw)  # explicit keys beat the preset
        raw = merged
    return raw


def _coerce_bool(value: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got {value!r}")


@dataclass
class RunConfig:
    seed: int = 0
    lr: float = 3e-4
    batch_size: int = 8
    epochs: int = 3
    optimizer: str = "adam"
    out_dir: str = "out"
    model: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.epochs <= 1000:
            raise ConfigError(f"epochs must be in 1..1000, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer != "adam":
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_file(cls, path: str, seed_override: int | None = None) -> "RunConfig":
        raw = parse_config(path)
        kw = dict(
            seed=int(raw.pop("seed", 0)),
            lr=float(raw.pop("train.lr", 3e-4)),
            batch_size=int(raw.pop("train.batch_size", 8)),
            epochs=int(raw.pop("train.epochs", 3)),
            optimizer=raw.pop("train.optimizer", "adam"),
            out_dir=raw.pop("out", "out"),
        )
        sections: dict[str, dict] = {"model": {}, "fusion": {}, "data": {}}
        extra: dict[str, str] = {}
        int_like = {"d_model", "n_layers", "n_heads", "d_ff", "max_seq_len",
                    "vocab_size", "layer", "radius", "d_kg"}
        for key, value in raw.items():
            head, _, rest = key.partition(".")
            if head in sections and rest:
                if rest in int_like:
                    sections[head][rest] = int(value)
                elif rest == "cotrain_kg":
                    sections[head][rest] = _coerce_bool(value)
                elif rest == "dropout":
                    sections[head][rest] = float(value)
                else:
                    sections[head][rest] = value
            else:
                extra[key] = value
        cfg = cls(**kw, model=sections["model"], fusion=sections["fusion"],
                  data=sections["data"], extra=extra)
        if seed_override is not None:
            cfg.seed = seed_override
        return cfg


# ---------------------------------------------------------------------------
# training loops


def write_loss_log(path: str, losses: Sequence[float]) -> None:
    atomic_write(path, "".join(f"{i}\t{loss!r}\n" for i, loss in enumerate(losses)))


def run_training(loss_fn: Callable[[list], Tensor], params: Sequence[Tensor],
                 examples: list, epochs: int, batch_size: int, lr: float,
                 seed: int, log_path: str | None = None,
                 checkpoint_fn: Callable[[int], None] | None = None,
                 resample_fn: Callable[[int, np.random.Generator], list] | None = None,
                 ) -> list[float]:
    """Generic seeded loop: shuffle, forward, backward, Adam step.

    ``checkpoint_fn(step)`` runs after every epoch so a NaN abort always
    leaves the last healthy checkpoint on disk. ``resample_fn(epoch, rng)``
    replaces the example list at the start of each epoch (fresh corruption
    negatives); ``examples`` then only sizes the step schedule.
    """
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng([seed, 17])
    steps_per_epoch = max(1, math.ceil(len(examples) / batch_size))
    total_steps = epochs * steps_per_epoch
    losses: list[float] = []
    for epoch in range(epochs):
        if resample_fn is not None:
            examples = resample_fn(epoch, rng)
        for batch in sgd_batches(examples, batch_size, rng):
            with Tape() as tape:
                loss = loss_fn(batch)
                value = loss.item()
                if not math.isfinite(value):
                    if log_path:
                        write_loss_log(log_path, losses)
                    raise TrainingDiverged(
                        f"loss became {value} at step {len(losses)}; "
                        "last epoch checkpoint retained")
                opt.zero_grad()
                tape.backward(loss)
            opt.step(total_steps)
            losses.append(value)
        if checkpoint_fn is not None:
            checkpoint_fn(len(losses))
    if log_path:
        write_loss_log(log_path, losses)
    return losses


def lm_examples(sequences: list[list[int]],
                supervised: list[list[bool]] | None = None,
                ) -> list[tuple[list[int], list[bool]]]:
    """Pair each sequence with a per-token 'counts toward the loss' mask."""
    if supervised is None:
        supervised = [[True] * len(s) for s in sequences]
    return list(zip(sequences, supervised))


def _lm_targets(batch: list) -> tuple[np.ndarray, np.ndarray]:
    """Pad a batch of (seq, mask, ...) examples; mask out skipped targets."""
    from .kgbert import pad_batch
    from .text import PAD

    ids = pad_batch([ex[0] for ex in batch])
    targets = ids[:, 1:].copy()
    for row, ex in enumerate(batch):
        seq, mask = ex[0], ex[1]
        for pos in range(1, len(seq)):
            if not mask[pos]:
                targets[row, pos - 1] = IGNORE
    targets[ids[:, 1:] == PAD] = IGNORE
    return ids, targets


def lm_loss(model, batch: list[tuple[list[int], list[bool]]],
            dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Next-token cross-entropy; unsupervised and [PAD] targets are skipped."""
    from . import autodiff as ad

    ids, targets = _lm_targets(batch)
    logits, _ = model.forward(ids, dropout_rng=dropout_rng)
    return ad.cross_entropy(logits[:, :-1, :], targets, ignore_id=IGNORE)


def fused_lm_loss(fm, batch: list[tuple[list[int], list[bool], list]],
                  dropout_rng: np.random.Generator | None = None) -> Tensor:
    """As lm_loss, but each example carries its own entity alignments."""
    from . import autodiff as ad

    ids, targets = _lm_targets(batch)
    logits, _ = fm.forward(ids, [ex[2] for ex in batch], dropout_rng=dropout_rng)
    return ad.cross_entropy(logits[:, :-1, :], targets, ignore_id=IGNORE)
