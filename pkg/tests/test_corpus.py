import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np

from corpus import (
    EMOTION_WORDS,
    EMOTIONS,
    MAX_PROMPT_TOKENS,
    PROMPT_VOCABULARY,
    TEMPLATES,
    EmotionSpec,
    class_counts,
    generate_corpus,
    load_corpus,
    render_prompt,
    save_corpus,
    split,
    synth_target,
    tokenize_prompt,
)
from errors import ConfigurationError, InputError


class TestEmotionSpec(unittest.TestCase):
    def test_class_directions_are_orthonormal(self):
        spec = EmotionSpec(seed=3)
        gram = spec.class_directions @ spec.class_directions.T
        np.testing.assert_allclose(gram, np.eye(len(EMOTIONS)), atol=1e-12)

    def test_emotion_space_must_hold_every_class(self):
        with self.assertRaises(ConfigurationError):
            EmotionSpec(emotion_dim=6)

    def test_same_seed_same_matrices(self):
        a, b = EmotionSpec(seed=5), EmotionSpec(seed=5)
        np.testing.assert_array_equal(a.mel_emotion, b.mel_emotion)
        self.assertFalse(np.allclose(a.mel_emotion, EmotionSpec(seed=6).mel_emotion))

    def test_unknown_emotion(self):
        with self.assertRaises(InputError):
            EmotionSpec().emotion_vector(7)


class TestSynthTarget(unittest.TestCase):
    def setUp(self):
        self.spec = EmotionSpec(noise_free=True, seed=1)
        self.content = np.random.default_rng(0).standard_normal((6, self.spec.content_dim))

    def test_affine_in_intensity(self):
        y0 = synth_target(self.spec, self.content, 2, 0.0)
        y1 = synth_target(self.spec, self.content, 2, 1.0)
        y2 = synth_target(self.spec, self.content, 2, 2.0)
        np.testing.assert_allclose(y2 - y1, y1 - y0, atol=1e-12)
        np.testing.assert_allclose(y0, self.content @ self.spec.mel_content, atol=1e-12)

    def test_intensity_out_of_range(self):
        with self.assertRaises(InputError):
            synth_target(self.spec, self.content, 0, 2.5)
        with self.assertRaises(InputError):
            synth_target(self.spec, self.content, 0, -0.1)

    def test_noise_is_seeded(self):
        spec = EmotionSpec(seed=1)
        a = synth_target(spec, self.content, 1, 1.0, noise_seed=9)
        b = synth_target(spec, self.content, 1, 1.0, noise_seed=9)
        np.testing.assert_array_equal(a, b)
        clean = synth_target(spec, self.content, 1, 1.0)
        self.assertGreater(np.abs(a - clean).max(), 0.0)


class TestPrompts(unittest.TestCase):
    def test_prompt_names_its_emotion(self):
        spec = EmotionSpec()
        for emotion_id in range(spec.num_classes):
            for template_id in spec.template_ids(emotion_id):
                text, returned = render_prompt(spec, emotion_id, template_id, seed=template_id)
                self.assertEqual(returned, template_id)
                self.assertNotIn(0, tokenize_prompt(text))

    def test_template_must_belong_to_emotion(self):
        spec = EmotionSpec()
        with self.assertRaises(InputError):
            render_prompt(spec, 0, spec.template_ids(1)[0], seed=0)

    def test_unknown_words_map_to_zero(self):
        self.assertEqual(tokenize_prompt("Very zzz"), [PROMPT_VOCABULARY["very"], 0])

    def test_token_bound(self):
        spec = EmotionSpec()
        for emotion_id in range(spec.num_classes):
            for template_id in spec.template_ids(emotion_id):
                for seed in range(5):
                    tokens = tokenize_prompt(render_prompt(spec, emotion_id, template_id, seed)[0])
                    self.assertTrue(1 <= len(tokens) <= MAX_PROMPT_TOKENS)
        self.assertEqual(len(tokenize_prompt(" ".join(["very"] * MAX_PROMPT_TOKENS))), MAX_PROMPT_TOKENS)
        with self.assertRaises(InputError):
            tokenize_prompt(" ".join(["very"] * (MAX_PROMPT_TOKENS + 1)))

    def test_overlong_template_is_rejected(self):
        long_template = " ".join(["so"] * MAX_PROMPT_TOKENS) + " {deg} {word}"
        with mock.patch("corpus.TEMPLATES", (long_template,) * len(TEMPLATES)):
            with self.assertRaises(InputError):
                render_prompt(EmotionSpec(), 1, 3, seed=0)

    def test_same_inputs_same_text(self):
        spec = EmotionSpec()
        self.assertEqual(render_prompt(spec, 4, 13, seed=9), render_prompt(spec, 4, 13, seed=9))

    def test_templates_of_one_class_differ(self):
        spec = EmotionSpec()
        first, second = spec.template_ids(2)[:2]
        text_a, template_a = render_prompt(spec, 2, first, seed=5)
        text_b, template_b = render_prompt(spec, 2, second, seed=5)
        self.assertNotEqual(text_a, text_b)
        for text, template_id in ((text_a, template_a), (text_b, template_b)):
            self.assertIn(template_id, spec.template_ids(2))
            self.assertTrue(set(text.split()) & set(EMOTION_WORDS["sad"]))


class TestGenerateCorpus(unittest.TestCase):
    def setUp(self):
        self.spec = EmotionSpec(seed=1)
        self.corpus = generate_corpus(self.spec, 70, seed=1)

    def test_classes_are_balanced(self):
        self.assertEqual(class_counts(self.corpus), [10] * 7)
        uneven = generate_corpus(self.spec, 23, seed=2)
        counts = class_counts(uneven)
        self.assertLessEqual(max(counts) - min(counts), 1)

    def test_too_small(self):
        with self.assertRaises(InputError):
            generate_corpus(self.spec, 6, seed=1)

    def test_deterministic(self):
        again = generate_corpus(self.spec, 70, seed=1)
        for a, b in zip(self.corpus, again):
            self.assertEqual(a.to_dict(), b.to_dict())
        other = generate_corpus(self.spec, 70, seed=2)
        self.assertNotEqual(self.corpus[0].to_dict(), other[0].to_dict())

    def test_utterance_fields(self):
        for index, utterance in enumerate(self.corpus):
            self.assertEqual(utterance.id, index)
            self.assertTrue(self.spec.min_frames <= utterance.num_frames <= self.spec.max_frames)
            self.assertEqual(utterance.content_features.shape, (utterance.num_frames, self.spec.content_dim))
            self.assertEqual(utterance.audio_features.shape, (utterance.num_frames, self.spec.audio_dim))
            self.assertEqual(utterance.mel_target.shape, (utterance.num_frames, self.spec.mel_dim))
            self.assertTrue(0.5 <= utterance.intensity_gt <= 1.0)
            self.assertIn(utterance.prompt_template_id, self.spec.template_ids(utterance.emotion_id))

    def test_mel_target_matches_oracle(self):
        utterance = self.corpus[4]
        expected = synth_target(
            self.spec, utterance.content_features, utterance.emotion_id,
            utterance.intensity_gt, utterance.mel_noise_seed,
        )
        np.testing.assert_array_equal(utterance.mel_target, expected)

    def test_mel_emotion_is_recoverable_by_projection(self):
        spec = EmotionSpec(noise_free=True, seed=4)
        for utterance in generate_corpus(spec, 21, seed=4):
            residual = utterance.mel_target - utterance.content_features @ spec.mel_content
            emotion, *_ = np.linalg.lstsq(spec.mel_emotion.T, residual.mean(axis=0), rcond=None)
            self.assertEqual(int(np.argmax(spec.class_directions @ emotion)), utterance.emotion_id)
            self.assertAlmostEqual(np.linalg.norm(emotion), utterance.intensity_gt, places=8)

    def test_emotion_is_linearly_separable_in_audio(self):
        spec = EmotionSpec(seed=4)
        corpus = generate_corpus(spec, 350, seed=4)
        features = np.stack([np.append(u.audio_features.mean(axis=0), 1.0) for u in corpus])
        labels = np.array([u.emotion_id for u in corpus])
        targets = np.eye(spec.num_classes)[labels]
        weights, *_ = np.linalg.lstsq(features[:210], targets[:210], rcond=None)
        predicted = np.argmax(features[210:] @ weights, axis=1)
        self.assertGreaterEqual(np.mean(predicted == labels[210:]), 0.99)

    def test_class_mean_audio_projects_onto_its_direction(self):
        spec = EmotionSpec(seed=4)
        corpus = generate_corpus(spec, 140, seed=4)
        means = np.stack([
            np.mean([u.audio_features.mean(axis=0) for u in corpus if u.emotion_id == k], axis=0)
            for k in range(spec.num_classes)
        ])
        projections = means @ spec.audio_projection.T @ spec.class_directions.T
        off_diagonal = projections[~np.eye(spec.num_classes, dtype=bool)]
        self.assertGreater(np.diag(projections).min(), 1.0)
        self.assertLess(np.abs(off_diagonal).max(), 0.3)

    def test_noise_free_audio_matches_formula(self):
        spec = EmotionSpec(noise_free=True, seed=4)
        utterance = generate_corpus(spec, 7, seed=4)[3]
        direction = spec.class_directions[utterance.emotion_id]
        emotion = spec.emotion_gain * utterance.intensity_gt * (direction @ spec.audio_projection)
        np.testing.assert_allclose(
            utterance.audio_features[:, spec.content_dim :],
            np.tile(emotion[spec.content_dim :], (utterance.num_frames, 1)),
            atol=1e-12,
        )
        np.testing.assert_allclose(
            utterance.audio_features[:, : spec.content_dim] - utterance.content_features,
            np.tile(emotion[: spec.content_dim], (utterance.num_frames, 1)),
            atol=1e-12,
        )

    def test_save_and_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "corpus.jsonl"
            save_corpus(path, self.corpus[:5])
            loaded = load_corpus(path)
        self.assertEqual(len(loaded), 5)
        for a, b in zip(self.corpus, loaded):
            self.assertEqual(a.to_dict(), b.to_dict())


class TestSplit(unittest.TestCase):
    def setUp(self):
        self.corpus = generate_corpus(EmotionSpec(seed=1), 70, seed=1)

    def test_sizes_and_disjointness(self):
        result = split(self.corpus, (0.8, 0.1, 0.1), seed=1)
        self.assertEqual((len(result.train), len(result.val), len(result.test)), (56, 7, 7))
        ids = set(result.train) | set(result.val) | set(result.test)
        self.assertEqual(ids, set(range(70)))
        by_id = {u.id: u for u in self.corpus}
        self.assertEqual(sorted(by_id[i].emotion_id for i in result.test), list(range(7)))

    def test_deterministic(self):
        self.assertEqual(split(self.corpus, seed=3).to_dict(), split(self.corpus, seed=3).to_dict())

    def test_invalid_ratios(self):
        with self.assertRaises(ConfigurationError):
            split(self.corpus, (0.5, 0.1, 0.1))
        with self.assertRaises(ConfigurationError):
            split(generate_corpus(EmotionSpec(seed=1), 14, seed=1), (0.8, 0.1, 0.1))


if __name__ == "__main__":
    unittest.main()
