import threading
import unittest

import numpy as np
from scipy.special import logsumexp

from autograd import Tensor
from clap import (
    ClapModel,
    EmoBatch,
    SimilarityLogits,
    SoftLabelMatrix,
    build_agreement_matrix,
    build_soft_labels,
    clap_loss,
    clap_train_step,
    embed,
    embed_many,
    encode_audio,
    encode_text,
    kl_div,
    similarity_logits,
    smooth_targets,
    symkl_loss,
)
from corpus import PROMPT_VOCABULARY, EmotionSpec, generate_corpus, tokenize_prompt
from errors import DataError, DimensionError, DomainError, InputError
from gradcheck import finite_diff_check
from optim import Optimizer
from rng import make_rng


def reference_loss(s_audio, s_text, emotion, prompt, alpha_e, alpha, variant):
    n = len(emotion)

    def agreement(labels):
        out = np.zeros((n, n))
        for i in range(n):
            same = [j for j in range(n) if labels[j] == labels[i]]
            for j in same:
                out[i, j] = 1.0 / len(same)
        return out

    def softmax(rows):
        return np.exp(rows - logsumexp(rows, axis=1, keepdims=True))

    def kl(s, m):
        total = 0.0
        for i in range(n):
            for j in range(n):
                if s[i, j] > 0:
                    total += s[i, j] * np.log(s[i, j] / max(m[i, j], 1e-12))
        return total

    m_s = alpha_e * agreement(emotion) + (1.0 - alpha_e) * agreement(prompt)
    m_tilde = (1.0 - alpha) * m_s + alpha / n
    p_audio, p_text = softmax(s_audio), softmax(s_text)
    if variant == "kl":
        return 0.5 * (kl(p_audio, m_s) + kl(p_text, m_s))
    return 0.25 * (kl(p_audio, m_s) + kl(m_tilde, p_audio) + kl(p_text, m_s) + kl(m_tilde, p_text))


def small_batch(seed, size=4, audio_dim=4, vocab=10):
    rng = make_rng(seed, "clap-batch")
    return EmoBatch(
        [rng.standard_normal((3, audio_dim)) for _ in range(size)],
        [i % 3 for i in range(size)],
        [list(rng.integers(1, vocab, size=3)) for _ in range(size)],
        [i % 2 for i in range(size)],
    )


class TestSoftLabels(unittest.TestCase):
    def test_agreement_rows_are_distributions(self):
        m = build_agreement_matrix([0, 1, 0, 2, 0])
        np.testing.assert_allclose(m.sum(axis=1), np.ones(5))
        self.assertAlmostEqual(m[0, 2], 1.0 / 3.0)
        self.assertEqual(m[1, 1], 1.0)
        with self.assertRaises(DataError):
            build_agreement_matrix([])

    def test_blend_and_smoothing(self):
        m_y = build_agreement_matrix([0, 0, 1])
        m_p = build_agreement_matrix([0, 1, 1])
        labels = SoftLabelMatrix(m_y, m_p, alpha_e=0.2, alpha=0.1)
        np.testing.assert_allclose(labels.m_s, 0.2 * m_y + 0.8 * m_p)
        np.testing.assert_allclose(labels.m_tilde, 0.9 * labels.m_s + 0.1 / 3)
        np.testing.assert_allclose(labels.m_tilde.sum(axis=1), np.ones(3))
        self.assertTrue(np.all(smooth_targets(labels.m_s) > 0))

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            build_soft_labels(np.eye(3), np.eye(2))


class TestSymKlLoss(unittest.TestCase):
    def test_matches_brute_force(self):
        rng = make_rng(0, "symkl-oracle")
        for trial in range(200):
            n = int(rng.integers(2, 11))
            emotion = rng.integers(0, 7, size=n)
            prompt = rng.integers(0, 21, size=n)
            s_audio = rng.standard_normal((n, n)) * 3.0
            s_text = rng.standard_normal((n, n)) * 3.0
            alpha_e = float(rng.uniform(0.0, 1.0))
            alpha = float(10.0 ** rng.uniform(-9.0, -1.0))
            variant = "kl" if trial % 4 == 0 else "symkl"
            m_s = build_soft_labels(build_agreement_matrix(emotion), build_agreement_matrix(prompt), alpha_e)
            got = symkl_loss(SimilarityLogits(Tensor(s_audio), Tensor(s_text)), m_s, alpha, variant).item()
            expected = reference_loss(s_audio, s_text, emotion, prompt, alpha_e, alpha, variant)
            self.assertAlmostEqual(got, expected, delta=1e-10 * max(1.0, abs(expected)))

    def test_near_zero_at_smoothed_labels(self):
        m_s = build_soft_labels(
            build_agreement_matrix([0, 0, 1, 2, 3, 3, 4, 5]),
            build_agreement_matrix([0, 1, 2, 3, 4, 4, 5, 6]),
        )
        logits = np.log(smooth_targets(m_s))
        loss = symkl_loss(SimilarityLogits(Tensor(logits), Tensor(logits)), m_s).item()
        self.assertGreaterEqual(loss, -1e-12)
        self.assertLess(loss, 1e-6)

    def test_unknown_variant(self):
        logits = SimilarityLogits(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))))
        with self.assertRaises(InputError):
            symkl_loss(logits, np.eye(2), variant="infonce")

    def test_kl_without_floor_rejects_zero_target(self):
        with self.assertRaises(DomainError):
            kl_div(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]))
        self.assertAlmostEqual(kl_div(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).item(), np.log(2.0))


class TestClapModel(unittest.TestCase):
    def setUp(self):
        self.model = ClapModel(audio_dim=4, vocab_size=10, dim=4, hidden=5, token_dim=3, seed=0)

    def test_embeddings_are_unit_norm(self):
        batch = small_batch(1)
        vectors = embed_many("reference", batch.audio_features, self.model)
        np.testing.assert_allclose(np.linalg.norm(vectors, axis=1), np.ones(4), atol=1e-12)
        single = embed("reference", batch.audio_features[2], self.model)
        np.testing.assert_allclose(single.vector, vectors[2], atol=1e-12)
        self.assertEqual(single.source_mode, "reference")

    def test_prompt_text_and_tokens_agree(self):
        model = ClapModel(audio_dim=4, vocab_size=len(PROMPT_VOCABULARY), dim=4, seed=0)
        text = "a very happy voice"
        a = embed("prompt", text, model).vector
        b = embed_many("prompt", [tokenize_prompt(text)], model)[0]
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_invalid_inputs(self):
        with self.assertRaises(InputError):
            embed("retrieval", "happy", self.model)
        with self.assertRaises(InputError):
            embed("prompt", [42], self.model)
        with self.assertRaises(DataError):
            embed("prompt", [], self.model)
        with self.assertRaises(DataError):
            EmoBatch([np.ones((2, 4))], [0, 1], [[1]], [0])

    def test_loss_needs_two_items(self):
        batch = small_batch(2, size=1)
        with self.assertRaises(DataError):
            clap_loss(batch, self.model)

    def test_permutation_invariance(self):
        batch = small_batch(3, size=6)
        order = [4, 2, 0, 5, 1, 3]
        for variant in ("symkl", "kl"):
            a = clap_loss(batch, self.model, loss_variant=variant).item()
            b = clap_loss(batch.permuted(order), self.model, loss_variant=variant).item()
            self.assertLess(abs(a - b), 1e-12)

    def test_training_beside_inference_thread(self):
        batch = small_batch(5)
        loss = clap_loss(batch, self.model)
        loss.backward()
        expected = [np.array(p.grad) for p in self.model.parameters()]
        self.model.zero_grad()

        stop = threading.Event()

        def infer():
            while not stop.is_set():
                embed_many("reference", batch.audio_features, self.model)

        worker = threading.Thread(target=infer)
        worker.start()
        try:
            for _ in range(5):
                loss = clap_loss(batch, self.model)
                self.assertTrue(loss.requires_grad)
                loss.backward()
                for p, grad in zip(self.model.parameters(), expected):
                    np.testing.assert_allclose(p.grad, grad, atol=1e-12)
                self.model.zero_grad()
        finally:
            stop.set()
            worker.join()

    def test_gradients(self):
        for seed in range(20):
            with self.subTest(seed=seed):
                model = ClapModel(audio_dim=4, vocab_size=10, dim=4, hidden=5, token_dim=3, seed=seed)
                batch = small_batch(100 + seed)
                error = finite_diff_check(lambda: clap_loss(batch, model), model.parameters())
                self.assertLess(error, 1e-5)

    def test_without_emotion_labels_only_prompts_matter(self):
        batch = small_batch(5, size=6)
        relabelled = EmoBatch(batch.audio_features, [0, 1, 2, 3, 4, 5], batch.prompt_tokens, batch.prompt_label)
        a = clap_loss(batch, self.model, use_emo_label=False).item()
        b = clap_loss(relabelled, self.model, use_emo_label=False).item()
        self.assertEqual(a, b)
        self.assertNotEqual(a, clap_loss(relabelled, self.model).item())


class TestClapTraining(unittest.TestCase):
    def test_training_lowers_the_loss(self):
        spec = EmotionSpec(seed=0)
        batch = EmoBatch.from_utterances(generate_corpus(spec, 14, seed=0))
        model = ClapModel(spec.audio_dim, len(PROMPT_VOCABULARY), dim=16, hidden=32, seed=0)
        optimizer = Optimizer(model.named_parameters(), lr=1e-2)
        losses = [clap_train_step(batch, model, optimizer) for _ in range(40)]
        self.assertTrue(all(np.isfinite(losses)))
        self.assertLess(losses[-1], losses[0])
        self.assertEqual(optimizer.state.step, 40)


class TestReferenceValues(unittest.TestCase):
    def test_agreement_examples(self):
        np.testing.assert_array_equal(build_agreement_matrix([0, 1, 2]), np.eye(3))
        np.testing.assert_array_equal(build_agreement_matrix([4, 4]), np.full((2, 2), 0.5))
        np.testing.assert_array_equal(
            build_agreement_matrix([1, 1, 2]), [[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]
        )

    def test_soft_label_examples(self):
        m_y = np.full((2, 2), 0.5)
        np.testing.assert_allclose(build_soft_labels(m_y, np.eye(2), 0.2), [[0.9, 0.1], [0.1, 0.9]], atol=1e-15)
        np.testing.assert_array_equal(build_soft_labels(m_y, np.eye(2), 1.0), m_y)
        np.testing.assert_array_equal(build_soft_labels(m_y, m_y), m_y)

    def test_smoothing_examples(self):
        np.testing.assert_array_equal(smooth_targets(np.eye(2), 0.0), np.eye(2))
        smoothed = smooth_targets(np.eye(2), 1e-8)
        self.assertAlmostEqual(smoothed[0, 1], 5e-9, delta=1e-24)
        self.assertGreaterEqual(smoothed.min(), 1e-8 / 2)

    def test_kl_examples(self):
        self.assertAlmostEqual(kl_div(np.eye(2), np.full((2, 2), 0.5)).item(), 2.0 * np.log(2.0), places=14)
        m = np.array([[0.2, 0.8], [0.6, 0.4]])
        self.assertEqual(kl_div(m, m).item(), 0.0)

    def test_similarity_examples(self):
        z = np.eye(3)
        logits = similarity_logits(Tensor(z), Tensor(z), Tensor([1.0]), Tensor([1.0]))
        np.testing.assert_array_equal(logits.s_audio.data, np.eye(3))
        rng = make_rng(9, "similarity")
        z_a, z_p = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        base = similarity_logits(Tensor(z_a), Tensor(z_p), Tensor([1.0]), Tensor([1.0]))
        scaled = similarity_logits(Tensor(z_a), Tensor(z_p), Tensor([2.3]), Tensor([0.5]))
        np.testing.assert_allclose(scaled.s_audio.data, 2.3 * base.s_audio.data)
        np.testing.assert_allclose(scaled.s_text.data, scaled.s_audio.data.T * (0.5 / 2.3))
        with self.assertRaises(DimensionError):
            similarity_logits(Tensor(z_a), Tensor(z_p[:, :2]), 1.0, 1.0)

    def test_encoder_pooling(self):
        model = ClapModel(audio_dim=4, vocab_size=10, dim=4, seed=1)
        frames = make_rng(10, "pool").standard_normal((3, 4))
        doubled = np.repeat(frames, 2, axis=0)
        np.testing.assert_allclose(
            encode_audio([frames], model).data, encode_audio([doubled], model).data, atol=1e-12
        )
        single = encode_audio([frames[:1]], model).data[0]
        direct = model.audio_encoder(Tensor(frames[:1])).data[0]
        np.testing.assert_allclose(single, direct / np.linalg.norm(direct), atol=1e-12)
        np.testing.assert_allclose(
            encode_text([[3, 5, 7]], model).data, encode_text([[7, 3, 5]], model).data, atol=1e-12
        )
        token = model.text_encoder(Tensor(model.token_embedding.data[4:5])).data[0]
        np.testing.assert_allclose(encode_text([[4]], model).data[0], token / np.linalg.norm(token), atol=1e-12)
        with self.assertRaises(DataError):
            encode_audio([np.zeros((0, 4))], model)

    def test_temperatures_stay_positive(self):
        model = ClapModel(audio_dim=4, vocab_size=10, dim=4, seed=1)
        self.assertAlmostEqual(model.eps_audio.item(), 2.3)
        model.log_eps_audio.data = np.array([-800.0])
        self.assertGreaterEqual(model.eps_audio.item(), 0.0)
        model.log_eps_text.data = np.array([-30.0])
        self.assertGreater(model.eps_text.item(), 0.0)

    def test_embedding_is_deterministic(self):
        model = ClapModel(audio_dim=4, vocab_size=10, dim=4, seed=1)
        frames = make_rng(11, "embed").standard_normal((5, 4))
        np.testing.assert_array_equal(embed("reference", frames, model).vector, embed("reference", frames, model).vector)


if __name__ == "__main__":
    unittest.main()
