import dataclasses
import math

import numpy as np
import torch
import torch.nn.functional as F
from django.test import SimpleTestCase

from replay import autodiff as ad
from replay import backbone
from replay.exceptions import ContractError, DimensionError, DomainError


def reference_embedding(clip, params):
    """Straightforward per-frame forward pass with an explicit shift loop."""
    frames = clip.shape[0]
    stage0 = torch.relu(F.conv2d(clip, params.conv1_weight, params.conv1_bias, padding=1)).detach()
    n = int(math.floor(params.shift_fold * stage0.shape[1]))
    shifted = stage0.clone()
    for t in range(frames):
        for c in range(n):
            shifted[t, c] = stage0[t - 1, c] if t > 0 else 0.0
        for c in range(n, 2 * n):
            shifted[t, c] = stage0[t + 1, c] if t + 1 < frames else 0.0
    stage1 = torch.relu(F.conv2d(shifted, params.conv2_weight, params.conv2_bias, stride=2, padding=1))
    per_frame = [stage1[t].mean(dim=(1, 2)) for t in range(frames)]
    return sum(per_frame) / frames


class TemporalShiftTests(SimpleTestCase):

    def test_index_oracle(self):
        x = torch.arange(3 * 8 * 2 * 2, dtype=ad.DTYPE).reshape(3, 8, 2, 2)
        out = backbone.temporal_shift(x, 1 / 8)
        self.assertEqual(out.shape, x.shape)
        for t in range(3):
            expected_fwd = x[t - 1, 0] if t > 0 else torch.zeros(2, 2, dtype=ad.DTYPE)
            expected_bwd = x[t + 1, 1] if t < 2 else torch.zeros(2, 2, dtype=ad.DTYPE)
            self.assertTrue(torch.equal(out[t, 0], expected_fwd))
            self.assertTrue(torch.equal(out[t, 1], expected_bwd))
            self.assertTrue(torch.equal(out[t, 2:], x[t, 2:]))

    def test_single_frame_zeroes_shifted_channels(self):
        x = torch.rand(1, 8, 3, 3, dtype=ad.DTYPE) + 1.0
        out = backbone.temporal_shift(x, 0.25)
        self.assertTrue(torch.equal(out[0, :4], torch.zeros(4, 3, 3, dtype=ad.DTYPE)))
        self.assertTrue(torch.equal(out[0, 4:], x[0, 4:]))

    def test_zero_fold_is_identity(self):
        x = torch.rand(4, 8, 3, 3, dtype=ad.DTYPE)
        self.assertTrue(torch.equal(backbone.temporal_shift(x, 0.0), x))

    def test_sum_never_grows_for_nonnegative_input(self):
        x = torch.rand(5, 8, 3, 3, dtype=ad.DTYPE)
        self.assertLessEqual(backbone.temporal_shift(x, 0.25).sum().item(), x.sum().item())


class ModelParamsTests(SimpleTestCase):

    def test_initialize_shapes(self):
        params = backbone.ModelParams.initialize(channels=3, num_classes=5, seed=1)
        self.assertEqual(params.conv1_weight.shape, (8, 3, 3, 3))
        self.assertEqual(params.conv2_weight.shape, (16, 8, 3, 3))
        self.assertEqual(params.head_weight.shape, (5, 16))
        self.assertEqual(params.num_classes, 5)
        self.assertEqual(params.channels, 3)

    def test_shift_fold_domain(self):
        with self.assertRaises(DomainError):
            backbone.ModelParams.initialize(channels=3, shift_fold=0.6)

    def test_classify_needs_a_head(self):
        params = backbone.ModelParams.initialize(channels=3)
        bundle = backbone.extract_features(torch.rand(2, 3, 8, 8, dtype=ad.DTYPE), params)
        with self.assertRaises(ContractError):
            backbone.classify(bundle, params)


class ExtractFeaturesTests(SimpleTestCase):

    def setUp(self):
        self.params = backbone.ModelParams.initialize(channels=3, num_classes=4, seed=3)

    def test_shapes(self):
        bundle = backbone.extract_features(torch.rand(4, 3, 8, 8, dtype=ad.DTYPE), self.params)
        self.assertEqual(bundle.embedding.shape, (16,))
        self.assertEqual(bundle.stage_maps[0].shape, (4, 8, 8, 8))
        self.assertEqual(bundle.stage_maps[1].shape, (4, 16, 4, 4))

    def test_zero_clip_gives_zero_embedding(self):
        bundle = backbone.extract_features(torch.zeros(3, 3, 8, 8, dtype=ad.DTYPE), self.params)
        self.assertTrue(torch.equal(bundle.embedding, torch.zeros(16, dtype=ad.DTYPE)))

    def test_matches_reference_forward(self):
        gen = torch.Generator().manual_seed(11)
        clip = torch.rand(4, 3, 8, 8, generator=gen, dtype=ad.DTYPE)
        bundle = backbone.extract_features(clip, self.params)
        expected = reference_embedding(clip, self.params)
        self.assertTrue(torch.allclose(bundle.embedding, expected, rtol=0, atol=1e-12))

    def test_batched_matches_unbatched(self):
        clips = torch.rand(3, 4, 3, 8, 8, dtype=ad.DTYPE)
        batched = backbone.extract_features(clips, self.params)
        for i in range(3):
            single = backbone.extract_features(clips[i], self.params)
            self.assertTrue(torch.allclose(batched.embedding[i], single.embedding, rtol=0, atol=1e-12))

    def test_identical_frames_without_shift(self):
        params = dataclasses.replace(self.params, shift_fold=0.0)
        frame = torch.rand(3, 8, 8, dtype=ad.DTYPE)
        clip = torch.stack([frame.clone() for _ in range(5)])
        from_clip = backbone.extract_features(clip, params)
        from_frame = backbone.extract_features(backbone.replicate(frame, 5), params)
        self.assertTrue(torch.equal(from_clip.embedding, from_frame.embedding))
        single = backbone.extract_features(frame.unsqueeze(0), params)
        self.assertTrue(torch.allclose(from_clip.embedding, single.embedding, rtol=0, atol=1e-14))

    def test_channel_mismatch(self):
        with self.assertRaises(DimensionError):
            backbone.extract_features(torch.rand(2, 1, 8, 8, dtype=ad.DTYPE), self.params)

    def test_to_tensor_scales_bytes(self):
        pixels = np.array([[[0, 128, 255]]], dtype=np.uint8)
        self.assertEqual(backbone.to_tensor(pixels).tolist(), [[[0.0, 128 / 255, 1.0]]])


class HeadTests(SimpleTestCase):

    def test_classify_returns_bias_for_zero_embedding(self):
        params = backbone.ModelParams.initialize(channels=3, num_classes=3)
        params = dataclasses.replace(
            params,
            head_weight=torch.zeros(3, 16, dtype=ad.DTYPE),
            head_bias=ad.tensor([0.5, -1.0, 2.0]),
        )
        bundle = backbone.FeatureBundle(embedding=torch.zeros(16, dtype=ad.DTYPE))
        self.assertEqual(backbone.classify(bundle, params).tolist(), [0.5, -1.0, 2.0])

    def test_one_hot_weights_pick_the_class(self):
        params = backbone.ModelParams.initialize(channels=3, num_classes=4)
        weight = torch.zeros(4, 16, dtype=ad.DTYPE)
        weight[2, 5] = 1.0
        params = dataclasses.replace(params, head_weight=weight, head_bias=torch.zeros(4, dtype=ad.DTYPE))
        embedding = torch.zeros(16, dtype=ad.DTYPE)
        embedding[5] = 3.0
        logits = backbone.classify(backbone.FeatureBundle(embedding=embedding), params)
        self.assertEqual(int(logits.argmax()), 2)

    def test_extend_head_keeps_old_rows(self):
        params = backbone.ModelParams.initialize(channels=3, num_classes=5, seed=2)
        grown = backbone.extend_head(params, 2, seed=9)
        self.assertEqual(grown.num_classes, 7)
        self.assertTrue(torch.equal(grown.head_weight[:5], params.head_weight))
        self.assertTrue(torch.equal(grown.head_bias[5:], torch.zeros(2, dtype=ad.DTYPE)))

        clip = torch.rand(3, 3, 8, 8, dtype=ad.DTYPE)
        _, before = backbone.forward(clip, params)
        _, after = backbone.forward(clip, grown)
        self.assertTrue(torch.allclose(before, after[:5], rtol=0, atol=1e-14))

    def test_extend_head_is_seeded(self):
        params = backbone.ModelParams.initialize(channels=3, num_classes=2)
        a = backbone.extend_head(params, 3, seed=4)
        b = backbone.extend_head(params, 3, seed=4)
        self.assertTrue(torch.equal(a.head_weight, b.head_weight))

    def test_extend_by_zero_rejected(self):
        params = backbone.ModelParams.initialize(channels=3, num_classes=2)
        with self.assertRaises(DomainError):
            backbone.extend_head(params, 0)


class SnapshotTests(SimpleTestCase):

    def test_snapshot_is_independent(self):
        params = backbone.ModelParams.initialize(channels=3, num_classes=2, seed=5)
        clip = torch.rand(2, 3, 8, 8, dtype=ad.DTYPE)
        before = backbone.extract_features(clip, params).embedding.detach()
        frozen = backbone.snapshot(params, stage=1)
        with torch.no_grad():
            params.conv1_weight.add_(1.0)
        self.assertFalse(torch.equal(frozen.params.conv1_weight, params.conv1_weight))
        self.assertTrue(torch.equal(backbone.extract_features(clip, frozen.params).embedding, before))
        self.assertEqual(frozen.stage, 1)
