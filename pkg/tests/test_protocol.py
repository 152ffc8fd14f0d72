"""Wire-format round trips, feature-bank sampling rules, and ledger totals.

Byte lengths are checked against the closed-form formulas computed
independently of the serializers.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmp import nn, protocol
from fedmp.protocol import (
    CommLedger,
    CorruptBlobError,
    FeatureBank,
    FeatureRecord,
    deserialize_features,
    deserialize_model,
    deserialize_prototypes,
    feature_blob_bytes,
    model_blob_bytes,
    prototype_blob_bytes,
    serialize_features,
    serialize_model,
    serialize_prototypes,
)


def random_params(seed=0):
    spec = nn.mlp_spec(5, (7,), (4,), 3)
    return nn.init_params(spec, seed), spec


class TestModelBlob:
    def test_empty_params_header_only(self):
        blob = serialize_model(nn.Parameters({}))
        assert len(blob) == 8
        out = deserialize_model(blob)
        assert out.keys() == []

    def test_payload_bytes_formula(self):
        params, _ = random_params()
        p = params.count()
        n_tensors = len(params.keys())
        # 8-byte header + per tensor 8-byte shape header + 4 bytes per scalar
        assert len(serialize_model(params)) == 8 + n_tensors * 8 + 4 * p
        assert model_blob_bytes(params) == len(serialize_model(params))

    def test_round_trip_bitwise(self):
        params, spec = random_params(3)
        # quantize to f32 first so the round trip is exact
        f32 = nn.Parameters(
            {k: params[k].astype(np.float32).astype(np.float64) for k in params.keys()}
        )
        out = deserialize_model(serialize_model(f32), spec)
        assert out.equal(f32)

    def test_truncated_rejected(self):
        params, spec = random_params()
        blob = serialize_model(params)
        with pytest.raises(CorruptBlobError):
            deserialize_model(blob[:-3], spec)
        with pytest.raises(CorruptBlobError):
            deserialize_model(blob[:5], spec)

    def test_bad_magic_rejected(self):
        params, spec = random_params()
        blob = bytearray(serialize_model(params))
        blob[0] ^= 0xFF
        with pytest.raises(CorruptBlobError):
            deserialize_model(bytes(blob), spec)

    def test_trailing_bytes_rejected(self):
        params, spec = random_params()
        with pytest.raises(CorruptBlobError):
            deserialize_model(serialize_model(params) + b"\x00", spec)

    def test_shape_mismatch_against_spec(self):
        params, _ = random_params()
        other_spec = nn.mlp_spec(5, (6,), (4,), 3)
        with pytest.raises(CorruptBlobError):
            deserialize_model(serialize_model(params), other_spec)


class TestFeatureBlob:
    def records(self, n=5, width=4, seed=0):
        rng = np.random.default_rng(seed)
        return [
            FeatureRecord(
                embedding=rng.normal(size=width).astype(np.float32).astype(np.float64),
                label=int(rng.integers(0, 3)),
                client_id=int(rng.integers(0, 10)),
                round=int(rng.integers(1, 100)),
            )
            for _ in range(n)
        ]

    def test_round_trip(self):
        recs = self.records()
        out = deserialize_features(serialize_features(recs))
        assert len(out) == len(recs)
        for a, b in zip(recs, out):
            assert np.array_equal(a.embedding, b.embedding)
            assert (a.label, a.client_id, a.round) == (b.label, b.client_id, b.round)

    def test_length_formula(self):
        recs = self.records(n=7, width=9)
        assert len(serialize_features(recs)) == feature_blob_bytes(7, 9)
        assert feature_blob_bytes(7, 9) == 8 + 7 * (8 + 4 * 9)

    def test_empty_batch(self):
        assert deserialize_features(serialize_features([])) == []

    def test_mixed_widths_rejected(self):
        recs = self.records(n=2, width=3) + self.records(n=1, width=4)
        with pytest.raises(CorruptBlobError):
            serialize_features(recs)

    def test_truncation_rejected(self):
        blob = serialize_features(self.records())
        with pytest.raises(CorruptBlobError):
            deserialize_features(blob[:-1])


class TestPrototypeBlob:
    def test_round_trip_and_length(self):
        protos = np.random.default_rng(1).normal(size=(3, 8)).astype(np.float32)
        blob = serialize_prototypes(protos.astype(np.float64))
        assert len(blob) == prototype_blob_bytes(3, 8)
        out = deserialize_prototypes(blob)
        assert np.array_equal(out, protos.astype(np.float64))

    def test_length_mismatch_rejected(self):
        blob = serialize_prototypes(np.zeros((2, 4)))
        with pytest.raises(CorruptBlobError):
            deserialize_prototypes(blob[:-4])


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(0, 20),
    width=st.integers(1, 16),
    seed=st.integers(0, 2**31 - 1),
)
def test_feature_round_trip_property(n, width, seed):
    rng = np.random.default_rng(seed)
    recs = [
        FeatureRecord(
            embedding=rng.normal(size=width).astype(np.float32).astype(np.float64),
            label=int(rng.integers(0, 5)),
            client_id=int(rng.integers(0, 8)),
            round=int(rng.integers(1, 1000)),
        )
        for _ in range(n)
    ]
    blob = serialize_features(recs)
    assert len(blob) == feature_blob_bytes(n, width if n else 0)
    out = deserialize_features(blob)
    assert all(np.array_equal(a.embedding, b.embedding) for a, b in zip(recs, out))


def make_records(client_id, n, label=0, width=4):
    return [
        FeatureRecord(np.full(width, float(i)), label, client_id, 1) for i in range(n)
    ]


class TestFeatureBank:
    def test_exclusion_rule(self):
        bank = FeatureBank()
        bank.insert(make_records(client_id=3, n=10))
        assert bank.sample(requesting_client=3, per_client_count=5, seed=0) == []

    def test_per_client_counting(self):
        bank = FeatureBank()
        bank.insert(make_records(client_id=1, n=10))
        bank.insert(make_records(client_id=2, n=10))
        out = bank.sample(requesting_client=0, per_client_count=3, seed=0)
        assert len(out) == 6
        counts = {}
        for rec in out:
            counts[rec.client_id] = counts.get(rec.client_id, 0) + 1
        assert counts == {1: 3, 2: 3}

    def test_sparse_bank_returns_fewer(self):
        bank = FeatureBank()
        bank.insert(make_records(client_id=1, n=2))
        out = bank.sample(requesting_client=0, per_client_count=5, seed=0)
        assert len(out) == 2

    def test_deterministic_in_seed(self):
        bank = FeatureBank()
        bank.insert(make_records(client_id=1, n=50))
        a = bank.sample(0, 10, seed=42)
        b = bank.sample(0, 10, seed=42)
        assert [r.embedding[0] for r in a] == [r.embedding[0] for r in b]

    def test_without_replacement(self):
        bank = FeatureBank()
        bank.insert(make_records(client_id=1, n=20))
        out = bank.sample(0, 20, seed=7)
        ids = [r.embedding[0] for r in out]
        assert len(set(ids)) == len(ids) == 20

    def test_fifo_eviction(self):
        bank = FeatureBank(capacity_per_slot=3)
        bank.insert(make_records(client_id=1, n=5))
        out = bank.sample(0, 10, seed=0)
        assert sorted(r.embedding[0] for r in out) == [2.0, 3.0, 4.0]

    def test_capacity_validated(self):
        with pytest.raises(ValueError):
            FeatureBank(capacity_per_slot=0)


@settings(max_examples=30, deadline=None)
@given(
    per_client=st.integers(0, 8),
    counts=st.lists(st.integers(0, 12), min_size=2, max_size=5),
    seed=st.integers(0, 2**31 - 1),
)
def test_bank_sample_properties(per_client, counts, seed):
    bank = FeatureBank()
    for cid, n in enumerate(counts):
        bank.insert(make_records(client_id=cid, n=n))
    requester = 0
    out = bank.sample(requester, per_client, seed)
    assert all(r.client_id != requester for r in out)
    expected = sum(min(per_client, n) for cid, n in enumerate(counts) if cid != requester)
    assert len(out) == expected


class TestCommLedger:
    def test_empty_total_zero(self):
        assert CommLedger().total() == 0

    def test_single_entry_total(self):
        ledger = CommLedger()
        ledger.record(1, protocol.UP, protocol.KIND_MODEL, 4000, 0)
        assert ledger.total() == 4000
        assert ledger.total(direction=protocol.UP) == 4000
        assert ledger.total(direction=protocol.DOWN) == 0

    def test_filters(self):
        ledger = CommLedger()
        ledger.record(1, protocol.UP, protocol.KIND_MODEL, 100, 0)
        ledger.record(1, protocol.UP, protocol.KIND_FEATURES, 10, 0)
        ledger.record(2, protocol.DOWN, protocol.KIND_MODEL, 100, 1)
        assert ledger.total(round=1) == 110
        assert ledger.total(kind=protocol.KIND_MODEL) == 200
        assert ledger.total(client_id=0) == 110
        assert ledger.rounds() == [1, 2]

    def test_invalid_entries_rejected(self):
        ledger = CommLedger()
        with pytest.raises(ValueError):
            ledger.record(1, "sideways", protocol.KIND_MODEL, 1, 0)
        with pytest.raises(ValueError):
            ledger.record(1, protocol.UP, "carrier-pigeon", 1, 0)
        with pytest.raises(ValueError):
            ledger.record(1, protocol.UP, protocol.KIND_MODEL, -1, 0)

    def test_csv_export(self, tmp_path):
        ledger = CommLedger()
        ledger.record(1, protocol.UP, protocol.KIND_MODEL, 123, 4)
        path = tmp_path / "ledger.csv"
        ledger.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "round,direction,kind,bytes,client_id"
        assert lines[1] == "1,up,model,123,4"
