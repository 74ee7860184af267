"""Shared prediction service: a hashed perceptron living in the segment.

The model is a table of 2^14 little-endian signed 16-bit weights at the
start of the model region.  Three salted multiply-shift hashes map a
feature triple to three table slots; the prediction margin is their sum
and the decision is 1 when the margin is at least zero.  Updates are
mistake-driven with a training threshold: weights move by one only when
the prediction was wrong or the margin was not confident, and they
saturate at [-128, 127] so a long one-sided history cannot freeze the
model (16-bit storage, 8-bit dynamic range).

Two call paths exist for measurement.  The immediate path runs predict
and update through VM helper calls against the mapped segment, touching
no boundary channel.  The baseline path predicts locally but queues
updates and ships them across the boundary channel one full batch at a
time, the way a syscall-priced update API forces batching.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator

from . import isa
from .verifier import VerifiedProgram, verify
from .vm import HID_PSS_PREDICT, HID_PSS_UPDATE, STANDARD_HELPER_IDS, VmInstance

TABLE_BITS = 14
TABLE_ENTRIES = 1 << TABLE_BITS
TABLE_BYTES = TABLE_ENTRIES * 2

HASH_MULTIPLIER = 0x9E3779B97F4A7C15
DEFAULT_SALTS = (1, 2, 3)
DEFAULT_THETA = 48

WEIGHT_MIN = -128
WEIGHT_MAX = 127

DEFAULT_BATCH_SIZE = 64

_MASK64 = (1 << 64) - 1
_I16 = struct.Struct("<h")


def hash_index(feature: int, salt: int) -> int:
    """Multiply-shift hash into the 14-bit table index space."""
    return (((feature ^ salt) & _MASK64) * HASH_MULTIPLIER & _MASK64) \
        >> (64 - TABLE_BITS)


class PerceptronModel:
    """Weight table resident in a caller-provided buffer region."""

    def __init__(self, buf, base: int = 0,
                 theta: int = DEFAULT_THETA,
                 salts: tuple[int, int, int] = DEFAULT_SALTS) -> None:
        self.buf = buf
        self.base = base
        self.theta = theta
        self.salts = salts

    def reset(self) -> None:
        self.buf[self.base:self.base + TABLE_BYTES] = bytes(TABLE_BYTES)

    def weight(self, index: int) -> int:
        return _I16.unpack_from(self.buf, self.base + 2 * index)[0]

    def _set_weight(self, index: int, value: int) -> None:
        _I16.pack_into(self.buf, self.base + 2 * index, value)

    def indices(self, f1: int, f2: int, f3: int) -> tuple[int, int, int]:
        s1, s2, s3 = self.salts
        return (hash_index(f1, s1), hash_index(f2, s2), hash_index(f3, s3))

    def predict(self, f1: int, f2: int, f3: int) -> tuple[int, int]:
        margin = sum(self.weight(i) for i in self.indices(f1, f2, f3))
        return (1 if margin >= 0 else 0, margin)

    def update(self, f1: int, f2: int, f3: int, outcome: int) -> None:
        decision, margin = self.predict(f1, f2, f3)
        if decision == outcome and abs(margin) > self.theta:
            return
        delta = 1 if outcome else -1
        for index in self.indices(f1, f2, f3):
            w = self.weight(index) + delta
            self._set_weight(index, min(WEIGHT_MAX, max(WEIGHT_MIN, w)))

    def snapshot(self) -> bytes:
        return bytes(self.buf[self.base:self.base + TABLE_BYTES])


# --- batched baseline ---------------------------------------------------------

@dataclass
class UpdateBatch:
    batch_size: int = DEFAULT_BATCH_SIZE
    pending: list[tuple[tuple[int, int, int], int]] = field(default_factory=list)


_ENTRY = struct.Struct("<QQQB")


def encode_batch(pairs: list[tuple[tuple[int, int, int], int]]) -> bytes:
    parts = [struct.pack("<I", len(pairs))]
    for (f1, f2, f3), outcome in pairs:
        parts.append(_ENTRY.pack(f1, f2, f3, 1 if outcome else 0))
    return b"".join(parts)


def decode_batch(raw: bytes) -> list[tuple[tuple[int, int, int], int]]:
    (count,) = struct.unpack_from("<I", raw, 0)
    out = []
    at = 4
    for _ in range(count):
        f1, f2, f3, outcome = _ENTRY.unpack_from(raw, at)
        at += _ENTRY.size
        out.append(((f1, f2, f3), outcome))
    return out


def flush_batch(channel, batch: UpdateBatch) -> None:
    """Ship pending updates across the boundary, then replay them into the
    local replica so later predictions see them.  Until the flush fires the
    replica is stale by up to batch_size samples; that staleness is the
    price the batched path pays."""
    if batch.pending:
        channel.pss_flush(encode_batch(batch.pending))
        model = channel.local_pss_model()
        for features, outcome in batch.pending:
            model.update(*features, outcome)
        batch.pending.clear()


def baseline_predict_update(channel, batch: UpdateBatch,
                            features: tuple[int, int, int], outcome: int) -> int:
    """Local read, deferred write: the update crosses the boundary only
    when the batch fills."""
    model = channel.local_pss_model()
    decision, _ = model.predict(*features)
    batch.pending.append((features, outcome))
    if len(batch.pending) >= batch.batch_size:
        flush_batch(channel, batch)
    return decision


# --- immediate path through the VM -------------------------------------------
# Feature words are preloaded at the top of the stack; the programs load
# them into argument registers and call the model helpers.

@lru_cache(maxsize=None)
def predict_program() -> VerifiedProgram:
    instructions = [
        isa.load_stack(isa.SIZE_DW, 1, -24),
        isa.load_stack(isa.SIZE_DW, 2, -16),
        isa.load_stack(isa.SIZE_DW, 3, -8),
        isa.call(HID_PSS_PREDICT),
        isa.exit_(),
    ]
    result = verify(isa.program_from_instructions(instructions),
                    STANDARD_HELPER_IDS)
    assert isinstance(result, VerifiedProgram)
    return result


@lru_cache(maxsize=None)
def update_program() -> VerifiedProgram:
    instructions = [
        isa.load_stack(isa.SIZE_DW, 1, -32),
        isa.load_stack(isa.SIZE_DW, 2, -24),
        isa.load_stack(isa.SIZE_DW, 3, -16),
        isa.load_stack(isa.SIZE_DW, 4, -8),
        isa.call(HID_PSS_UPDATE),
        isa.exit_(),
    ]
    result = verify(isa.program_from_instructions(instructions),
                    STANDARD_HELPER_IDS)
    assert isinstance(result, VerifiedProgram)
    return result


_PREDICT_AT = 512 - 24
_UPDATE_AT = 512 - 32
_F3 = struct.Struct("<QQQ")
_F4 = struct.Struct("<QQQQ")


def sbpf_predict_update(machine: VmInstance,
                        features: tuple[int, int, int], outcome: int) -> int:
    """Immediate read and write through helper calls; no boundary traffic."""
    f1, f2, f3 = features
    machine.load_stack(_F3.pack(f1, f2, f3), at=_PREDICT_AT)
    decision = machine.execute(predict_program())
    machine.load_stack(_F4.pack(f1, f2, f3, 1 if outcome else 0), at=_UPDATE_AT)
    machine.execute(update_program())
    return decision


def sbpf_predict(machine: VmInstance, features: tuple[int, int, int]) -> int:
    f1, f2, f3 = features
    machine.load_stack(_F3.pack(f1, f2, f3), at=_PREDICT_AT)
    return machine.execute(predict_program())


# --- drift stream for the freshness experiment --------------------------------

def drift_stream(n_samples: int = 20_000, flip_every: int = 500,
                 n_values: int = 64, seed: int = 20_24,
                 skew: float = 2.0) \
        -> Iterator[tuple[tuple[int, int, int], int]]:
    """Labeled feature triples whose decision boundary inverts periodically.

    Each position carries a fixed random +-1 class per token and the base
    label is the majority vote, so the concept is exactly representable by
    one weight per (position, token) slot.  Tokens are drawn Zipf-skewed:
    hot tokens recur often enough that an immediately trained model re-learns
    their flipped sign within a phase, while a model fed stale batches keeps
    paying for its lag.  Uniform draws would touch each slot only a handful
    of times per 500-sample phase, too few to traverse a trained weight, and
    both schedules would sit at chance.
    """
    rng = random.Random(seed)
    tokens = [rng.getrandbits(64) for _ in range(n_values)]
    classes = [[rng.choice((-1, 1)) for _ in range(n_values)]
               for _ in range(3)]
    weights = [1.0 / (rank + 1) ** skew for rank in range(n_values)]
    for k in range(n_samples):
        idx = rng.choices(range(n_values), weights=weights, k=3)
        vote = classes[0][idx[0]] + classes[1][idx[1]] + classes[2][idx[2]]
        base = 1 if vote > 0 else 0
        phase = (k // flip_every) & 1
        yield (tokens[idx[0]], tokens[idx[1]], tokens[idx[2]]), base ^ phase
