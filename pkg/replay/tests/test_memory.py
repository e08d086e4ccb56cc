import struct
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase

from replay import backbone
from replay import memory
from replay.exceptions import ContractError, DomainError, FormatError
from replay.memory import CondensedExemplar, MemoryBank, MemoryConfig, herding_select


def exemplar(label, value=0, shape=(3, 4, 4), quantized=True, steps=2):
    if quantized:
        pixels = np.full(shape, value, dtype=np.uint8)
    else:
        pixels = np.full(shape, value / 255, dtype=np.float32)
    weights = np.full(steps, 1 / steps, dtype=np.float32) if steps else np.zeros(0, dtype=np.float32)
    return CondensedExemplar(pixels=pixels, label=label, weights_audit=weights, quantized=quantized)


def brute_force_herding(features, m):
    """Exhaustive greedy oracle: every candidate scored from scratch."""
    mu = features.mean(axis=0)
    chosen = []
    for j in range(1, m + 1):
        best, best_distance = None, np.inf
        for i in range(len(features)):
            if i in chosen:
                continue
            total = features[chosen].sum(axis=0) + features[i] if chosen else features[i]
            distance = np.sqrt(((mu - total / j) ** 2).sum())
            if distance < best_distance:
                best, best_distance = i, distance
        chosen.append(best)
    return chosen


class HerdingTests(SimpleTestCase):

    def test_line_example(self):
        self.assertEqual(herding_select([[0.0], [1.0], [2.0], [10.0]], 2), [2, 1])

    def test_ties_go_to_lowest_index(self):
        self.assertEqual(herding_select([[1.0], [1.0], [1.0]], 3), [0, 1, 2])

    def test_full_and_empty_selection(self):
        features = np.random.default_rng(0).normal(size=(6, 3))
        self.assertEqual(sorted(herding_select(features, 6)), list(range(6)))
        self.assertEqual(herding_select(features, 0), [])

    def test_matches_exhaustive_greedy(self):
        rng = np.random.default_rng(42)
        for trial in range(50):
            with self.subTest(trial=trial):
                n = int(rng.integers(3, 12))
                features = rng.normal(size=(n, 5))
                m = int(rng.integers(1, n + 1))
                self.assertEqual(herding_select(features, m), brute_force_herding(features, m))

    def test_permutation_consistency(self):
        rng = np.random.default_rng(7)
        features = rng.normal(size=(9, 4))
        perm = rng.permutation(9)
        direct = [int(i) for i in herding_select(features, 4)]
        permuted = herding_select(features[perm], 4)
        self.assertEqual([int(perm[i]) for i in permuted], direct)

    def test_orthogonal_embeddings_in_index_order(self):
        for m in range(5):
            self.assertEqual(herding_select(np.eye(4), m), list(range(m)))

    def test_errors(self):
        with self.assertRaises(DomainError):
            herding_select(np.zeros((3, 2)), 4)
        with self.assertRaises(DomainError):
            herding_select(np.zeros(3), 1)
        with self.assertRaises(DomainError):
            herding_select([[np.nan], [1.0]], 1)


class BudgetTests(SimpleTestCase):

    def test_one_frame(self):
        self.assertEqual(memory.memory_bytes(1, 224, 224, 3), (150528, 0.15))

    def test_standard_grid(self):
        rows = memory.budget_table(memory.DEFAULT_BUDGET_GRID, 224, 224, 3)
        self.assertEqual(
            [(r['frames'], r['videos'], r['bytes'], r['mb']) for r in rows],
            [
                (1, 1, 150528, 0.15),
                (2, 2, 301056, 0.3),
                (5, 5, 752640, 0.75),
                (8, 8, 1204224, 1.2),
                (16, 16, 2408448, 2.4),
                (40, 40, 6021120, 6.0),
                (8, 1, 1204224, 1.2),
                (16, 2, 2408448, 2.4),
                (40, 5, 6021120, 6.0),
            ],
        )

    def test_non_positive_extent(self):
        with self.assertRaises(DomainError):
            memory.memory_bytes(0, 8, 8, 3)

    def test_large_budgets_keep_two_decimals(self):
        self.assertEqual(memory.memory_bytes(320, 224, 224, 3), (48168960, 48.17))
        self.assertEqual(memory.memory_bytes(2600, 224, 224, 3), (391372800, 391.37))
        rows = memory.budget_table([(8, 40)], 224, 224, 3)
        self.assertEqual(rows, [{'frames': 320, 'videos': 40, 'bytes': 48168960, 'mb': 48.17}])

    def test_megabyte_format_switches_at_ten(self):
        self.assertEqual(memory.format_megabytes(9.94), 9.9)
        self.assertEqual(memory.format_megabytes(0.030720), 0.031)
        self.assertEqual(memory.format_megabytes(10.0), 10.0)
        self.assertEqual(memory.format_megabytes(77.0675), 77.07)

    def test_bank_accounting(self):
        bank = MemoryBank()
        bank.insert(0, [exemplar(0), exemplar(0, shape=(2, 3, 4, 4), steps=0)])
        self.assertEqual(bank.total_bytes(), 48 + 96)
        self.assertEqual(bank.memory_mb(), 144 / 1e6)

    def test_float_storage_costs_the_same(self):
        self.assertEqual(exemplar(1, 10, quantized=False).budget_bytes, exemplar(1, 10).budget_bytes)


class MemoryBankTests(SimpleTestCase):

    def test_class_is_frozen_once_stored(self):
        bank = MemoryBank()
        bank.insert(3, [exemplar(3)])
        with self.assertRaises(ContractError):
            bank.insert(3, [exemplar(3, 1)])

    def test_cap_and_labels(self):
        bank = MemoryBank(videos_per_class=1)
        with self.assertRaises(DomainError):
            bank.insert(0, [exemplar(0), exemplar(0)])
        with self.assertRaises(DomainError):
            bank.insert(1, [exemplar(2)])
        self.assertEqual(len(bank), 0)

    def test_accessors_return_copies(self):
        bank = MemoryBank()
        bank.insert(1, [exemplar(1, 5)])
        bank.insert(0, [exemplar(0, 9)])
        bank.exemplars_for(1).clear()
        self.assertEqual(len(bank.exemplars_for(1)), 1)
        self.assertEqual(bank.classes(), [0, 1])
        self.assertEqual([e.label for e in bank.all_exemplars()], [0, 1])

    def test_exemplar_pixels_are_read_only(self):
        item = exemplar(0, 3)
        with self.assertRaises(ValueError):
            item.pixels[0, 0, 0] = 7

    def test_exemplar_validation(self):
        with self.assertRaises(DomainError):
            exemplar(-1)
        with self.assertRaises(DomainError):
            CondensedExemplar(pixels=np.zeros((3, 4), dtype=np.uint8), label=0, weights_audit=np.zeros(0))
        with self.assertRaises(DomainError):
            CondensedExemplar(pixels=np.zeros((3, 4, 4), dtype=np.float32), label=0, weights_audit=np.zeros(0))

    def test_replay_batch_replicates_frames(self):
        bank = MemoryBank()
        bank.insert(2, [exemplar(2, 51)])
        clips, labels = bank.replay_batch([0, 0], frames=3)
        self.assertEqual(tuple(clips.shape), (2, 3, 3, 4, 4))
        self.assertEqual(labels.tolist(), [2, 2])
        self.assertTrue(torch.all(clips == 0.2))

    def test_class_means(self):
        params = backbone.ModelParams.initialize(channels=3, num_classes=2, seed=0)
        bank = MemoryBank()
        bank.insert(0, [exemplar(0, 40), exemplar(0, 200)])
        means = memory.class_means(bank, params, clip_length=2)
        clips = torch.stack([e.as_clip(2) for e in bank.exemplars_for(0)])
        expected = backbone.extract_features(clips, params).embedding.mean(dim=0)
        self.assertTrue(torch.allclose(means[0], expected, rtol=0, atol=1e-14))
        with self.assertRaises(DomainError):
            memory.class_means(bank, params, clip_length=2, classes=[1])


class MemoryConfigTests(SimpleTestCase):

    def test_defaults(self):
        cfg = MemoryConfig()
        self.assertEqual((cfg.frames_per_exemplar, cfg.videos_per_class), (None, 5))
        self.assertEqual(cfg.budget_grid, memory.DEFAULT_BUDGET_GRID)

    def test_stored_frames_follow_the_strategy(self):
        self.assertEqual(MemoryConfig().stored_frames(store_all=False, clip_length=8), 1)
        self.assertEqual(MemoryConfig().stored_frames(store_all=True, clip_length=8), 8)
        self.assertEqual(MemoryConfig(frames_per_exemplar=2).stored_frames(store_all=True, clip_length=8), 2)

    def test_grid_rows_become_pairs(self):
        self.assertEqual(MemoryConfig(budget_grid=[[8, 5]]).budget_grid, [(8, 5)])

    def test_rejects_zero(self):
        with self.assertRaises(DomainError):
            MemoryConfig(videos_per_class=0)


class ContainerTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / 'bank.fmex'

    def tearDown(self):
        self.tmp.cleanup()

    def test_empty_bank(self):
        memory.store(MemoryBank(), self.path)
        self.assertEqual(self.path.read_bytes(), b'FMEX' + struct.pack('<HH', 1, 0))
        self.assertEqual(memory.load(self.path), MemoryBank())

    def test_mixed_bank_round_trip(self):
        bank = MemoryBank()
        bank.insert(0, [exemplar(0, 10), exemplar(0, 20, steps=5)])
        bank.insert(1, [exemplar(1, 0.25, quantized=False)])
        bank.insert(2, [exemplar(2, 7, shape=(2, 3, 4, 4), steps=0)])
        memory.store(bank, self.path)
        loaded = memory.load(self.path)
        self.assertEqual(loaded, bank)
        self.assertEqual(loaded.digests(), bank.digests())
        self.assertEqual(loaded.exemplars_for(2)[0].pixels.shape, (2, 3, 4, 4))
        self.assertFalse(loaded.exemplars_for(1)[0].quantized)

    def test_cap_and_provenance_come_from_the_caller(self):
        bank = MemoryBank(videos_per_class=2)
        bank.insert(0, [exemplar(0, 10)], stage=1)
        bank.insert(3, [exemplar(3, 30)], stage=2)
        memory.store(bank, self.path)
        bare = memory.load(self.path)
        self.assertEqual(bare, bank)
        self.assertIsNone(bare.videos_per_class)
        self.assertEqual(bare.provenance, {})
        restored = memory.load(self.path, videos_per_class=2, provenance={0: 1, 3: 2})
        self.assertEqual(restored.videos_per_class, 2)
        self.assertEqual(restored.provenance, bank.provenance)

    def test_every_byte_value_survives(self):
        pixels = np.arange(256, dtype=np.uint8).reshape(1, 16, 16)
        item = CondensedExemplar(pixels=pixels, label=4, weights_audit=np.array([1.0], dtype=np.float32))
        memory.write_container(self.path, [item])
        (loaded,), params = memory.read_container(self.path)
        self.assertIsNone(params)
        self.assertTrue(np.array_equal(loaded.pixels, pixels))

    def test_params_round_trip(self):
        params = backbone.ModelParams.initialize(channels=3, num_classes=4, seed=8, shift_fold=0.25)
        memory.store_params(params, self.path)
        loaded = memory.load_params(self.path)
        self.assertTrue(loaded.equals(params))
        self.assertEqual(loaded.shift_fold, 0.25)

    def test_missing_params_section(self):
        memory.store(MemoryBank(), self.path)
        with self.assertRaises(FormatError):
            memory.load_params(self.path)

    def test_bad_magic(self):
        self.path.write_bytes(b'FMEY' + struct.pack('<HH', 1, 0))
        with self.assertRaises(FormatError) as ctx:
            memory.load(self.path)
        self.assertEqual(ctx.exception.offset, 0)

    def test_bad_version(self):
        self.path.write_bytes(b'FMEX' + struct.pack('<HH', 2, 0))
        with self.assertRaises(FormatError) as ctx:
            memory.load(self.path)
        self.assertEqual(ctx.exception.offset, 4)

    def test_truncation_at_every_cut(self):
        bank = MemoryBank()
        bank.insert(0, [exemplar(0, 10)])
        memory.store(bank, self.path)
        data = self.path.read_bytes()
        for cut in range(len(data)):
            with self.subTest(cut=cut):
                self.path.write_bytes(data[:cut])
                with self.assertRaises(FormatError):
                    memory.load(self.path)

    def test_trailing_bytes(self):
        memory.store(MemoryBank(), self.path)
        self.path.write_bytes(self.path.read_bytes() + b'\x00')
        with self.assertRaises(FormatError):
            memory.load(self.path)

    def test_unknown_section_kind(self):
        self.path.write_bytes(b'FMEX' + struct.pack('<HH', 1, 1) + struct.pack('<BQ', 9, 0))
        with self.assertRaises(FormatError) as ctx:
            memory.load(self.path)
        self.assertEqual(ctx.exception.offset, 8)
