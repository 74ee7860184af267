"""Perceptron model rules, hash oracles, batching boundary, and the
VM-path replay equivalence."""

import random
import struct

from sbpf import pss, vm


def make_model(**kwargs):
    return pss.PerceptronModel(bytearray(pss.TABLE_BYTES), base=0, **kwargs)


# --- hash -----------------------------------------------------------------

def test_hash_zero_feature_zero_salt():
    assert pss.hash_index(0, 0) == 0


def test_hash_deterministic():
    assert pss.hash_index(0x1234, 1) == pss.hash_index(0x1234, 1) == 10754


def test_hash_matches_independent_evaluation():
    # same formula evaluated with explicit modular arithmetic
    def reference(feature, salt):
        mixed = (feature ^ salt) % 2**64
        product = (mixed * 0x9E3779B97F4A7C15) % 2**64
        return product // 2**50

    rng = random.Random(77)
    for _ in range(1000):
        f = rng.getrandbits(64)
        s = rng.choice((0, 1, 2, 3, rng.getrandbits(64)))
        got = pss.hash_index(f, s)
        assert got == reference(f, s)
        assert 0 <= got < pss.TABLE_ENTRIES


# --- predict / update rules -------------------------------------------------

def test_zero_table_predicts_one_with_zero_margin():
    model = make_model()
    assert model.predict(1, 2, 3) == (1, 0)
    assert model.predict(2**64 - 1, 0, 42) == (1, 0)


def test_single_negative_update_with_distinct_indices():
    f = (0xDEADBEEF, 0xDEADBEEF, 0xDEADBEEF)
    model = make_model()
    assert len(set(model.indices(*f))) == 3
    model.update(*f, outcome=0)
    assert model.predict(*f) == (0, -3)


def test_positive_update_writes_plus_one():
    f = (11, 22, 33)
    model = make_model()
    model.update(*f, outcome=1)
    for index in set(model.indices(*f)):
        assert model.weight(index) >= 1
    assert model.predict(*f)[1] == 3 if len(set(model.indices(*f))) == 3 else True


def test_colliding_indices_count_with_multiplicity():
    model = make_model()
    a = 42
    target = pss.hash_index(a, 1)
    b = next(f for f in range(300_000) if pss.hash_index(f, 2) == target)
    c = next(f for f in range(300_000)
             if pss.hash_index(f, 3) not in (target,))
    i1, i2, i3 = model.indices(a, b, c)
    assert i1 == i2 != i3
    model.update(a, b, c, outcome=0)
    # the shared slot took two decrements, the lone slot one
    assert model.predict(a, b, c) == (0, -5)


def test_predict_is_read_only():
    model = make_model()
    model.update(5, 6, 7, outcome=1)
    before = model.snapshot()
    rng = random.Random(4)
    for _ in range(1000):
        model.predict(rng.getrandbits(64), rng.getrandbits(64),
                      rng.getrandbits(64))
    assert model.snapshot() == before


def test_confident_correct_prediction_skips_training():
    model = make_model()
    i1, i2, i3 = model.indices(9, 9, 9)
    for index in (i1, i2, i3):
        model._set_weight(index, 30)
    before = model.snapshot()
    model.update(9, 9, 9, outcome=1)  # margin 90 > theta, correct
    assert model.snapshot() == before
    model.update(9, 9, 9, outcome=0)  # wrong prediction always trains
    assert model.snapshot() != before


def test_saturation_clamps_both_ends():
    model = make_model()
    i1, i2, i3 = model.indices(13, 13, 13)
    model._set_weight(i1, 127)
    model._set_weight(i2, -90)
    model._set_weight(i3, -90)
    model.update(13, 13, 13, outcome=1)  # margin -53 → wrong → train up
    assert model.weight(i1) == 127
    model._set_weight(i1, -128)
    model._set_weight(i2, 90)
    model._set_weight(i3, 90)
    model.update(13, 13, 13, outcome=0)  # decision 1, wrong → train down
    assert model.weight(i1) == -128


def test_update_fuzz_never_leaves_weight_range():
    model = make_model(theta=48)
    rng = random.Random(123)
    features = [rng.getrandbits(64) for _ in range(32)]
    for _ in range(100_000):
        f = (rng.choice(features), rng.choice(features), rng.choice(features))
        model.update(*f, outcome=rng.randrange(2))
    weights = struct.unpack(f"<{pss.TABLE_ENTRIES}h", model.snapshot())
    assert min(weights) >= -128 and max(weights) <= 127


# --- batching baseline --------------------------------------------------------

def test_batch_wire_roundtrip():
    pairs = [((1, 2, 3), 1), ((2**64 - 1, 0, 5), 0), ((7, 8, 9), 1)]
    raw = pss.encode_batch(pairs)
    assert len(raw) == 4 + 3 * 25
    assert pss.decode_batch(raw) == pairs


class FlushChannel:
    """Applies flushed batches to a server-side model, like the service."""

    def __init__(self):
        self.client_model = make_model()
        self.server_model = make_model()
        self.flushes = 0

    def local_pss_model(self):
        return self.client_model

    def pss_flush(self, raw):
        self.flushes += 1
        for features, outcome in pss.decode_batch(raw):
            self.server_model.update(*features, outcome)


def test_flush_fires_exactly_at_batch_size():
    chan = FlushChannel()
    batch = pss.UpdateBatch(batch_size=64)
    rng = random.Random(6)
    for k in range(63):
        pss.baseline_predict_update(chan, batch, (k, k + 1, k + 2),
                                    rng.randrange(2))
    assert chan.flushes == 0
    assert len(batch.pending) == 63
    pss.baseline_predict_update(chan, batch, (1, 1, 1), 1)
    assert chan.flushes == 1
    assert len(batch.pending) == 0


def test_flushed_batch_replays_in_order():
    chan = FlushChannel()
    batch = pss.UpdateBatch(batch_size=64)
    rng = random.Random(8)
    history = []
    for _ in range(64):
        features = (rng.getrandbits(64), rng.getrandbits(64), rng.getrandbits(64))
        outcome = rng.randrange(2)
        history.append((features, outcome))
        pss.baseline_predict_update(chan, batch, features, outcome)

    reference = make_model()
    for features, outcome in history:
        reference.update(*features, outcome)
    assert chan.server_model.snapshot() == reference.snapshot()
    # the local replica converges to the same weights at flush time
    assert chan.client_model.snapshot() == reference.snapshot()


def test_replica_stale_until_flush():
    chan = FlushChannel()
    batch = pss.UpdateBatch(batch_size=64)
    for k in range(63):
        pss.baseline_predict_update(chan, batch, (k, 2 * k, 3 * k), 1)
    assert chan.client_model.snapshot() == bytes(pss.TABLE_BYTES)


# --- immediate path through the VM --------------------------------------------

class PssView:
    def __init__(self, model):
        self.model = model

    def pss_predict(self, f1, f2, f3):
        return self.model.predict(f1, f2, f3)[0]

    def pss_update(self, f1, f2, f3, outcome):
        self.model.update(f1, f2, f3, outcome)


def test_vm_path_matches_direct_replay():
    model = make_model()
    machine = vm.VmInstance(helpers=vm.standard_helper_table(),
                            segment_view=PssView(model))
    reference = make_model()
    rng = random.Random(15)
    tokens = [rng.getrandbits(64) for _ in range(16)]
    for _ in range(2000):
        features = (rng.choice(tokens), rng.choice(tokens), rng.choice(tokens))
        outcome = rng.randrange(2)
        vm_decision = pss.sbpf_predict_update(machine, features, outcome)
        ref_decision, _ = reference.predict(*features)
        reference.update(*features, outcome)
        assert vm_decision == ref_decision
    assert model.snapshot() == reference.snapshot()


def test_vm_single_predict_matches_direct():
    model = make_model()
    machine = vm.VmInstance(helpers=vm.standard_helper_table(),
                            segment_view=PssView(model))
    assert pss.sbpf_predict(machine, (4, 5, 6)) == model.predict(4, 5, 6)[0]


# --- drift stream ---------------------------------------------------------

def test_drift_stream_shape_and_determinism():
    first = list(pss.drift_stream(n_samples=2000, flip_every=500, seed=3))
    second = list(pss.drift_stream(n_samples=2000, flip_every=500, seed=3))
    assert first == second
    assert len(first) == 2000
    tokens = {f for features, _ in first for f in features}
    # skewed draws favor hot tokens but stay inside the 64-token pool
    assert 2 <= len(tokens) <= 64
    pool = {f for features, _ in pss.drift_stream(200_000, 500, seed=3)
            for f in features}
    assert len(pool) == 64


def test_drift_stream_flips_boundary():
    flipped = list(pss.drift_stream(n_samples=1000, flip_every=500, seed=3))
    steady = list(pss.drift_stream(n_samples=1000, flip_every=10**9, seed=3))
    # identical feature draws; labels invert exactly in the second phase
    for k in range(1000):
        assert flipped[k][0] == steady[k][0]
        if k < 500:
            assert flipped[k][1] == steady[k][1]
        else:
            assert flipped[k][1] == 1 - steady[k][1]
