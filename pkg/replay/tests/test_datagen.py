import math
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase, tag

from replay import datagen
from replay.datagen import (
    BACKGROUND,
    FOREGROUND,
    SynthSpec,
    class_params,
    generate_dataset,
    instance_seed,
    object_path,
    reflect,
    render_clip,
)
from replay.exceptions import DomainError

QUIET = SynthSpec(num_classes=4, train_per_class=2, test_per_class=1, frames=6, height=24, width=24, noise_std=0.0)


class ClassParamsTests(SimpleTestCase):

    def test_triples_are_distinct(self):
        triples = {(p.shape, p.motion, p.speed) for p in map(class_params, range(27))}
        self.assertEqual(len(triples), 27)

    def test_layout(self):
        params = class_params(4)
        self.assertEqual((params.shape, params.motion, params.speed), ('disc', 'circular', 1.0))
        self.assertEqual(class_params(9).speed, 2.0)
        self.assertAlmostEqual(class_params(2).theta, math.pi / 2)

    def test_negative_id(self):
        with self.assertRaises(DomainError):
            class_params(-1)


class ReflectTests(SimpleTestCase):

    def test_inside_is_unchanged(self):
        self.assertEqual(reflect(5.0, 2.0, 10.0), 5.0)

    def test_bounces(self):
        self.assertEqual(reflect(12.0, 2.0, 10.0), 8.0)
        self.assertEqual(reflect(0.0, 2.0, 10.0), 4.0)
        self.assertEqual(reflect(19.0, 2.0, 10.0), 3.0)

    def test_degenerate_range(self):
        self.assertEqual(reflect(7.0, 3.0, 3.0), 3.0)


class RenderTests(SimpleTestCase):

    def test_shape_and_dtype(self):
        clip = render_clip(class_params(0), 11, QUIET)
        self.assertEqual(clip.frames.shape, (6, 3, 24, 24))
        self.assertEqual(clip.frames.dtype, np.uint8)
        self.assertEqual(set(np.unique(clip.frames)), {BACKGROUND, FOREGROUND})

    def test_same_seed_same_bytes(self):
        spec = SynthSpec(frames=4, height=20, width=20, radius=3)
        a = render_clip(class_params(5), 123, spec)
        b = render_clip(class_params(5), 123, spec)
        self.assertEqual(a.frames.tobytes(), b.frames.tobytes())
        self.assertNotEqual(a.frames.tobytes(), render_clip(class_params(5), 124, spec).frames.tobytes())

    def test_static_object_without_noise(self):
        still = datagen.ClassParams(class_id=0, shape='square', motion='linear', speed=0.0)
        clip = render_clip(still, 3, QUIET)
        for frame in clip.frames[1:]:
            self.assertTrue(np.array_equal(frame, clip.frames[0]))

    def test_centroid_follows_the_path(self):
        for class_id in range(9):
            with self.subTest(class_id=class_id):
                params = class_params(class_id)
                seed = instance_seed(0, class_id, 0)
                rng = np.random.default_rng(seed)
                margin = QUIET.radius + 1
                start = (
                    rng.uniform(margin, QUIET.height - 1 - margin),
                    rng.uniform(margin, QUIET.width - 1 - margin),
                )
                phase = rng.uniform(0.0, 2 * math.pi)
                path = object_path(params, start, phase, QUIET.frames, QUIET.height, QUIET.width, QUIET.radius)

                clip = render_clip(params, seed, QUIET)
                for t, (y, x) in enumerate(path):
                    ys, xs = np.nonzero(clip.frames[t, 0] == FOREGROUND)
                    self.assertLess(abs(ys.mean() - y), 1.0)
                    self.assertLess(abs(xs.mean() - x), 1.0)

    def test_path_stays_inside(self):
        for class_id in range(18):
            path = object_path(class_params(class_id), (5.0, 5.0), 0.3, 40, 24, 24, 4)
            self.assertTrue(((path >= 4) & (path <= 19)).all())


class SynthSpecTests(SimpleTestCase):

    def test_rejects_bad_values(self):
        for kwargs in ({'frames': 0}, {'noise_std': -0.1}, {'train_per_class': -1}, {'height': 10, 'radius': 4}):
            with self.subTest(**kwargs):
                with self.assertRaises(DomainError):
                    SynthSpec(**kwargs)


class DatasetTests(SimpleTestCase):

    def test_balanced_and_ordered(self):
        dataset = generate_dataset(QUIET)
        self.assertEqual(len(dataset.train), 8)
        self.assertEqual(len(dataset.test), 4)
        for label in range(4):
            self.assertEqual([c.instance_id for c in dataset.clips('train', [label])], [0, 1])
            self.assertEqual([c.instance_id for c in dataset.clips('test', [label])], [2])

    def test_train_and_test_seeds_are_disjoint(self):
        dataset = generate_dataset(QUIET)
        train_seeds = {c.seed for c in dataset.train}
        test_seeds = {c.seed for c in dataset.test}
        self.assertFalse(train_seeds & test_seeds)
        self.assertEqual(len(train_seeds), 8)

    def test_dataset_seed_changes_the_clips(self):
        a = generate_dataset(QUIET)
        b = generate_dataset(SynthSpec(**{**QUIET.__dict__, 'seed': 1}))
        self.assertNotEqual(a.train[0], b.train[0])
        self.assertEqual(a.train, generate_dataset(QUIET).train)

    def test_by_class(self):
        grouped = generate_dataset(QUIET).by_class('train', [2, 0])
        self.assertEqual(list(grouped), [2, 0])
        self.assertTrue(all(c.label == 2 for c in grouped[2]))

    def test_dump_and_load(self):
        clips = generate_dataset(QUIET).train
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'clips.fmex'
            datagen.dump_clips(clips, path)
            self.assertEqual(datagen.load_clips(path), clips)


@tag('slow')
class SeparabilityTests(SimpleTestCase):
    """A small two-layer network trained to convergence tells the default classes apart."""

    def test_default_spec_is_learnable(self):
        dataset = generate_dataset(SynthSpec())
        torch.manual_seed(0)

        def tensors(clips):
            frames = torch.stack([torch.from_numpy(c.frames.astype(np.float32) / 255.0) for c in clips])
            return frames.flatten(1, 2), torch.tensor([c.label for c in clips])

        x_train, y_train = tensors(dataset.train)
        x_test, y_test = tensors(dataset.test)
        model = torch.nn.Sequential(
            torch.nn.Conv2d(x_train.shape[1], 32, 3, padding=1),
            torch.nn.ReLU(),
            torch.nn.Conv2d(32, 32, 3, stride=2, padding=1),
            torch.nn.ReLU(),
            torch.nn.AdaptiveAvgPool2d(1),
            torch.nn.Flatten(),
            torch.nn.Linear(32, 8),
        )
        optimizer = torch.optim.Adam(model.parameters(), lr=3e-3)
        for _ in range(300):
            optimizer.zero_grad()
            loss = torch.nn.functional.cross_entropy(model(x_train), y_train)
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            accuracy = (model(x_test).argmax(dim=1) == y_test).float().mean().item()
        self.assertGreaterEqual(accuracy, 0.9)
