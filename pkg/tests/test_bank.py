import logging

import numpy as np
import pytest

from protodet.bank import (
    PrototypeBank,
    select_negative_prototypes,
    select_positive_prototypes,
)


def unit(rng, d=16):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


class TestUpdate:
    def test_append_below_capacity(self):
        rng = np.random.default_rng(0)
        bank = PrototypeBank(num_classes=2, capacity=3, dim=8)
        bank.update(0, "pos", unit(rng, 8))
        assert len(bank.pos[0]) == 1
        assert bank.pos_counts[0] == [1]

    def test_momentum_zero_replaces_most_similar(self):
        rng = np.random.default_rng(1)
        bank = PrototypeBank(num_classes=1, capacity=2, dim=8, momentum=0.0)
        a, b = unit(rng, 8), unit(rng, 8)
        bank.update(0, "neg", a)
        bank.update(0, "neg", b)
        incoming = unit(rng, 8)
        sims = [float(a @ incoming), float(b @ incoming)]
        expect_slot = int(np.argmax(sims))
        bank.update(0, "neg", incoming)
        np.testing.assert_allclose(bank.neg[0][expect_slot], incoming, atol=1e-12)

    def test_orthogonal_blend_hand_arithmetic(self):
        # r=0.7 blend of orthogonal units: norm sqrt(0.49 + 0.09) = sqrt(0.58)
        bank = PrototypeBank(num_classes=1, capacity=1, dim=4, momentum=0.7)
        s_old = np.array([1.0, 0, 0, 0])
        s_new = np.array([0, 1.0, 0, 0])
        bank.update(0, "pos", s_old)
        bank.update(0, "pos", s_new)
        blend = 0.7 * s_old + 0.3 * s_new
        np.testing.assert_allclose(bank.pos[0][0], blend / np.sqrt(0.58), atol=1e-12)
        assert np.linalg.norm(blend) == pytest.approx(np.sqrt(0.58))

    def test_momentum_near_one_is_fixed_point(self):
        rng = np.random.default_rng(2)
        bank = PrototypeBank(num_classes=1, capacity=1, dim=8, momentum=0.999)
        v = unit(rng, 8)
        bank.update(0, "pos", v)
        before = bank.pos[0][0].copy()
        for _ in range(5):
            bank.update(0, "pos", unit(rng, 8))
        assert float(before @ bank.pos[0][0]) > 0.999

    def test_capacity_and_norm_invariants_random_events(self):
        rng = np.random.default_rng(3)
        bank = PrototypeBank(num_classes=3, capacity=6, dim=16, momentum=0.7)
        for _ in range(2000):
            c = int(rng.integers(0, 3))
            pol = "pos" if rng.random() < 0.5 else "neg"
            bank.update(c, pol, unit(rng))
            assert len(bank.pos[c]) <= 6 and len(bank.neg[c]) <= 6
        for c in range(3):
            for v in bank.pos[c] + bank.neg[c]:
                assert abs(np.linalg.norm(v) - 1.0) <= 1e-6

    def test_most_similar_slot_equals_exhaustive_scan(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            bank = PrototypeBank(num_classes=1, capacity=4, dim=8, momentum=0.5)
            vecs = [unit(rng, 8) for _ in range(4)]
            for v in vecs:
                bank.update(0, "pos", v)
            incoming = unit(rng, 8)
            j = int(np.argmax([float(v @ incoming) for v in bank.pos[0]]))
            counts_before = list(bank.pos_counts[0])
            bank.update(0, "pos", incoming)
            counts_after = bank.pos_counts[0]
            changed = [i for i in range(4) if counts_after[i] != counts_before[i]]
            assert changed == [j]

    def test_non_unit_input_renormalized_with_warning(self, caplog):
        bank = PrototypeBank(num_classes=1, capacity=2, dim=4)
        with caplog.at_level(logging.WARNING, logger="protodet.bank"):
            bank.update(0, "pos", np.array([2.0, 0, 0, 0]))
        assert "renormalizing" in caplog.text
        np.testing.assert_allclose(bank.pos[0][0], [1, 0, 0, 0])

    def test_bad_momentum_rejected(self):
        with pytest.raises(ValueError):
            PrototypeBank(num_classes=1, momentum=1.0)


class TestSelection:
    def test_positive_picks_argmax_per_present_class(self):
        rng = np.random.default_rng(5)
        fused = rng.uniform(0, 1, (3, 30))
        embed = rng.standard_normal((30, 8))
        labels = np.array([1, 0, 1])
        out = select_positive_prototypes(fused, embed, labels)
        assert [c for c, _, _ in out] == [0, 2]
        for c, vec, m in out:
            assert m == int(np.argmax(fused[c]))
            np.testing.assert_array_equal(vec, embed[m])

    def test_negative_needs_score_floor(self):
        fused = np.array([[0.9, 0.1], [0.05, 0.08]])
        embed = np.eye(2)
        labels = np.array([1, 0])
        # class 1 max (0.08) fails the relative floor 0.1 * 0.9
        assert select_negative_prototypes(fused, embed, labels, score_floor=0.1) == []
        got = select_negative_prototypes(fused, embed, labels, score_floor=0.0)
        assert [(c, m) for c, _, m in got] == [(1, 1)]

    def test_negative_matches_bruteforce(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            fused = rng.uniform(0, 1, (4, 20))
            embed = rng.standard_normal((20, 6))
            labels = rng.integers(0, 2, 4)
            got = select_negative_prototypes(fused, embed, labels, score_floor=0.1)
            floor = 0.1 * fused.max()
            want = []
            for c in range(4):
                if labels[c] == 0:
                    m = max(range(20), key=lambda r: (fused[c, r], -r))
                    if fused[c, m] >= floor:
                        want.append((c, m))
            assert [(c, m) for c, _, m in got] == want

    def test_misclassified_absent_class_harvested(self):
        # an image labeled only class 0 whose top scorer under class 1
        # is confident: class 1 gains a negative prototype
        fused = np.array([[0.8, 0.2, 0.1], [0.1, 0.7, 0.2]])
        embed = np.eye(3)
        got = select_negative_prototypes(fused, embed, np.array([1, 0]))
        assert len(got) == 1
        c, vec, m = got[0]
        assert (c, m) == (1, 1)
        np.testing.assert_array_equal(vec, embed[1])


class TestPersistence:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        bank = PrototypeBank(num_classes=2, capacity=3, dim=8, momentum=0.6)
        for _ in range(10):
            bank.update(int(rng.integers(0, 2)), "pos" if rng.random() < 0.5 else "neg", unit(rng, 8))
        path = tmp_path / "bank.npb"
        bank.save(path)
        back = PrototypeBank.load(path)
        assert back.capacity == 3 and back.momentum == 0.6
        for c in range(2):
            np.testing.assert_array_equal(
                np.stack(back.pos[c]) if back.pos[c] else np.zeros((0, 8)),
                bank.pos_matrix(c).astype(np.float32).astype(np.float64),
            )
            assert back.pos_counts[c] == bank.pos_counts[c]
        bank.save(tmp_path / "bank2.npb")
        assert (tmp_path / "bank.npb").read_bytes() == (tmp_path / "bank2.npb").read_bytes()
