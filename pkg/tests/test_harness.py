import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtl.errors import ParameterError, ProtocolError, TranscriptFormatError
from fedtl.harness import (
    SiteDataset,
    StageRecord,
    Transcript,
    TranscriptEntry,
    audit_ledger,
    partition_site,
    run_protocol,
)
from fedtl.mechanisms import PrivacyBudget


class TestPartitionSite:
    def test_no_split(self):
        p = partition_site(10, 2)
        assert p.detection is None
        assert p.blocks == ((0, 5), (5, 10))

    def test_split(self):
        p = partition_site(10, 1, detection_split=True)
        assert p.detection == (0, 4)
        assert p.blocks == ((4, 10),)

    def test_too_small(self):
        with pytest.raises(ParameterError):
            partition_site(3, 4)

    @given(st.integers(2, 2000), st.integers(1, 50), st.booleans())
    @settings(max_examples=1000, deadline=None)
    def test_blocks_disjoint_and_in_range(self, n, T, split):
        try:
            p = partition_site(n, T, detection_split=split)
        except ParameterError:
            return
        ranges = list(p.blocks) + ([p.detection] if p.detection else [])
        for start, stop in ranges:
            assert 0 <= start < stop <= n
        ordered = sorted(ranges)
        for (s1, e1), (s2, e2) in zip(ordered, ordered[1:]):
            assert s2 >= e1


def _constant_round_fn(view, broadcast):
    return [StageRecord("laplace", 0.5, 0.0, 1.0, 2.0, 1.0)]


def _count_agg(entries, broadcast, t):
    return (broadcast or 0) + len(entries)


def _sites(K, n=6):
    return [SiteDataset(k, np.arange(n, dtype=float)) for k in range(K + 1)]


class TestRunProtocol:
    def test_entry_count(self):
        K, T = 3, 4
        sites = _sites(K, n=8)
        blocks = {s.site_id: [(2 * t, 2 * t + 2) for t in range(T)] for s in sites}
        total, entries = run_protocol(
            sites, _constant_round_fn, _count_agg, T, blocks=blocks, master_seed=0
        )
        assert len(entries) == (K + 1) * T
        assert total == (K + 1) * T

    def test_deterministic_replay(self):
        sites = _sites(2, n=10)
        blocks = {s.site_id: [(0, 5), (5, 10)] for s in sites}

        def noisy_round(view, broadcast):
            draw = view.rng("gaussian").standard_normal(3)
            return [StageRecord("gaussian", 0.5, 1e-6, 1.0, 10.0, draw)]

        def agg(entries, broadcast, t):
            return [e.payload for e in entries]

        r1 = run_protocol(sites, noisy_round, agg, 2, blocks=blocks, master_seed=99)
        r2 = run_protocol(sites, noisy_round, agg, 2, blocks=blocks, master_seed=99)
        t1, t2 = Transcript(tuple(r1[1]), 2), Transcript(tuple(r2[1]), 2)
        assert t1.serialize() == t2.serialize()
        for a, b in zip(r1[1], r2[1]):
            np.testing.assert_array_equal(a.payload, b.payload)

    def test_view_closed_after_round(self):
        captured = []

        def stealing_round(view, broadcast):
            captured.append(view)
            return [StageRecord("laplace", 0.5, 0.0, 1.0, 2.0, 0.0)]

        sites = _sites(0, n=4)
        run_protocol(sites, stealing_round, _count_agg, 1, blocks={0: [(0, 4)]}, master_seed=0)
        with pytest.raises(ProtocolError):
            _ = captured[0].data

    def test_aggregator_sees_only_entries(self):
        seen = []

        def agg(entries, broadcast, t):
            seen.extend(entries)
            return broadcast

        sites = _sites(1, n=4)
        run_protocol(sites, _constant_round_fn, agg, 1,
                     blocks={0: [(0, 4)], 1: [(0, 4)]}, master_seed=0)
        assert all(isinstance(e, TranscriptEntry) for e in seen)
        field_names = {f.name for f in dataclasses.fields(TranscriptEntry)}
        assert "payload" in field_names  # privatized message only
        for e in seen:
            for f in dataclasses.fields(e):
                assert not isinstance(getattr(e, f.name), SiteDataset)

    def test_out_of_range_block_rejected(self):
        sites = _sites(0, n=4)

        def touch(view, broadcast):
            _ = view.data
            return []

        with pytest.raises(ProtocolError):
            run_protocol(sites, touch, _count_agg, 1, blocks={0: [(2, 9)]}, master_seed=0)

    def test_mismatched_block_count(self):
        sites = _sites(0, n=4)
        with pytest.raises(ParameterError):
            run_protocol(sites, _constant_round_fn, _count_agg, 2, blocks={0: [(0, 4)]}, master_seed=0)


def _valid_entry(**kw):
    base = dict(
        round_index=0, site_id=0, stage="gaussian", epsilon=0.5, delta=5e-6,
        sensitivity=1.0, noise_scale=None, payload=np.ones(2), stream_id="x", block=(0, 10),
    )
    base.update(kw)
    if base["noise_scale"] is None:
        from fedtl.mechanisms import gaussian_noise_std

        base["noise_scale"] = gaussian_noise_std(base["sensitivity"], PrivacyBudget(base["epsilon"], base["delta"]))
    return TranscriptEntry(**base)


class TestAuditLedger:
    DECLARED = PrivacyBudget(1.0, 1e-5)

    def test_valid_two_stage_round(self):
        entries = (
            _valid_entry(stage="private_variance", epsilon=0.5, delta=5e-6,
                         sensitivity=2 / 5, noise_scale=(2 / 5) / 0.5),
            _valid_entry(),
        )
        verdict = audit_ledger(Transcript(entries, 1), self.DECLARED)
        assert verdict.ok and not verdict.violations

    def test_budget_overrun_flagged(self):
        entries = (_valid_entry(epsilon=0.7), _valid_entry(stage="laplace", epsilon=0.7, delta=0.0,
                                                           sensitivity=1.0, noise_scale=2.0))
        verdict = audit_ledger(Transcript(entries, 1), self.DECLARED)
        assert not verdict.ok
        v = verdict.violations[0]
        assert v.rule == "budget" and v.site == 0 and v.round == 0

    def test_undersized_noise_flagged(self):
        good = _valid_entry()
        bad = dataclasses.replace(good, noise_scale=good.noise_scale / 2, round_index=3, site_id=2)
        verdict = audit_ledger(Transcript((good, bad), 4), self.DECLARED)
        assert not verdict.ok
        assert any(v.rule == "noise" and v.site == 2 and v.round == 3 for v in verdict.violations)

    def test_block_reuse_flagged(self):
        e0 = _valid_entry(block=(0, 10))
        e1 = _valid_entry(round_index=1, block=(0, 10))
        verdict = audit_ledger(Transcript((e0, e1), 2), self.DECLARED)
        assert not verdict.ok
        assert any(v.rule == "partition" and v.site == 0 for v in verdict.violations)

    def test_overlapping_blocks_flagged(self):
        e0 = _valid_entry(block=(0, 10))
        e1 = _valid_entry(round_index=1, block=(5, 15))
        verdict = audit_ledger(Transcript((e0, e1), 2), self.DECLARED)
        assert not verdict.ok
        assert any(v.rule == "partition" for v in verdict.violations)

    def test_peeling_stage_audit(self):
        from fedtl.mechanisms import peeling_noise_scale

        lam = 0.2
        ok = _valid_entry(stage="peeling[s=4]", sensitivity=lam,
                          noise_scale=peeling_noise_scale(lam, 4, PrivacyBudget(0.5, 5e-6)))
        assert audit_ledger(Transcript((ok,), 1), self.DECLARED).ok
        bad = dataclasses.replace(ok, noise_scale=ok.noise_scale * 0.9)
        assert not audit_ledger(Transcript((bad,), 1), self.DECLARED).ok

    def test_unknown_stage_flagged(self):
        e = _valid_entry(stage="mystery")
        verdict = audit_ledger(Transcript((e,), 1), self.DECLARED)
        assert not verdict.ok and verdict.violations[0].rule == "noise"


class TestTranscriptSerialization:
    def test_roundtrip(self):
        entries = (
            _valid_entry(),
            _valid_entry(stage="laplace", delta=0.0, site_id=1, noise_scale=2.0, payload=0.5, block=None),
        )
        t = Transcript(entries, 1)
        parsed = Transcript.parse(t.serialize())
        assert len(parsed.entries) == 2
        assert parsed.entries[0].stage == "gaussian"
        assert parsed.entries[1].block is None
        assert parsed.entries[0].epsilon == 0.5

    def test_parse_rejects_garbage(self):
        with pytest.raises(TranscriptFormatError):
            Transcript.parse("not a transcript\n")
        with pytest.raises(TranscriptFormatError):
            Transcript.parse(Transcript.HEADER + "\n1,2,gaussian,oops\n")

    def test_empty_file_rejected(self):
        with pytest.raises(TranscriptFormatError):
            Transcript.parse("")

    def test_payload_hash_stable(self):
        e = _valid_entry()
        assert e.payload_hash() == _valid_entry().payload_hash()
        other = _valid_entry(payload=np.array([1.0, 2.0]))
        assert e.payload_hash() != other.payload_hash()
