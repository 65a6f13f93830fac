import math

import numpy as np
import pytest

from ieci import numerics as nx
from ieci.corpus import PairedSample, SynthConfig, synth_generate
from ieci.model import Batch, IeciModel, ModelConfig
from ieci.numerics import ContractError, Tensor
from ieci.training import (
    AdamW, TrainConfig, batch_similarity, batches, compute_losses, history_csv, kl_loss, load_checkpoint,
    save_checkpoint, sentence_image_similarity, total_loss, toy_gradcheck, train, wpg_loss,
)


def oracle_sentence_image(a):
    rows = [max(row) for row in a]
    return sum(rows) / len(rows)


class TestSentenceImage:
    @pytest.mark.parametrize("a, want", [
        ([[1, 0], [0, 1]], 1.0),
        ([[0.2, 0.8, 0.5]], 0.8),
        ([[1, 2], [3, 0], [-1, -2]], 4 / 3),
    ])
    def test_examples(self, a, want):
        got = sentence_image_similarity(Tensor(a)).item()
        assert got == oracle_sentence_image(a)
        assert got == pytest.approx(want, rel=1e-15)

    def test_empty(self):
        with pytest.raises(ContractError):
            sentence_image_similarity(Tensor(np.zeros((0, 3))))


class TestWpg:
    @pytest.mark.parametrize("t", [2, 4, 8])
    def test_uniform_logits(self, t):
        assert abs(wpg_loss(Tensor(np.zeros((t, t)))).item() - math.log(t)) < 1e-9

    def test_confident_diagonal(self):
        got = wpg_loss(Tensor(np.eye(2) * 10)).item()
        assert got == pytest.approx(-math.log(math.exp(10) / (math.exp(10) + 1)), rel=1e-9)
        assert got == pytest.approx(4.54e-5, rel=1e-3)

    def test_permutation_equivariant(self, rng):
        for _ in range(20):
            a = rng.normal(size=(6, 6))
            perm = rng.permutation(6)
            assert abs(wpg_loss(Tensor(a)).item() - wpg_loss(Tensor(a[perm][:, perm])).item()) < 1e-9

    def test_symmetric_averages_directions(self, rng):
        a = rng.normal(size=(4, 4))
        rows, cols = wpg_loss(Tensor(a)).item(), wpg_loss(Tensor(a.T)).item()
        assert wpg_loss(Tensor(a), symmetric=True).item() == pytest.approx((rows + cols) / 2, rel=1e-12)

    def test_needs_square(self):
        with pytest.raises(ContractError):
            wpg_loss(Tensor(np.zeros((2, 3))))


class TestKl:
    def test_equal_distributions(self, rng):
        a = Tensor(rng.normal(size=(3, 5)))
        assert abs(kl_loss(a, a).item()) < 1e-15

    def test_near_one_hot_vs_uniform(self):
        # p = [1-eps, eps] against q = [1/2, 1/2] tends to ln 2
        got = kl_loss(Tensor([[40.0, 0.0]]), Tensor([[0.0, 0.0]])).item()
        assert got == pytest.approx(math.log(2), abs=1e-12)

    def test_non_negative_on_random_rows(self, rng):
        for _ in range(1000):
            m = int(rng.integers(2, 8))
            f, c = rng.normal(scale=3, size=(1, m)), rng.normal(scale=3, size=(1, m))
            assert kl_loss(Tensor(f), Tensor(c)).item() >= 0.0

    def test_matches_direct_formula(self, rng):
        f, c = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 1, 4))
        p = np.exp(f) / np.exp(f).sum(-1, keepdims=True)
        q = np.exp(c) / np.exp(c).sum(-1, keepdims=True)
        want = (p * np.log(p / q)).sum(-1).mean()
        assert kl_loss(Tensor(f), Tensor(c)).item() == pytest.approx(want, rel=1e-12)

    def test_masks_drop_padding(self, rng):
        f, c = rng.normal(size=(1, 2, 3)), rng.normal(size=(1, 1, 3))
        padded_f = np.concatenate([f, rng.normal(size=(1, 1, 3))], axis=1)
        padded_f = np.concatenate([padded_f, np.full((1, 3, 1), 50.0)], axis=2)
        padded_c = np.concatenate([c, np.full((1, 1, 1), -50.0)], axis=2)
        pm = np.array([[True, True, False]])
        rm = np.array([[True, True, True, False]])
        got = kl_loss(Tensor(padded_f), Tensor(padded_c), pm, rm).item()
        assert got == pytest.approx(kl_loss(Tensor(f), Tensor(c)).item(), rel=1e-12)

    def test_gradient_only_to_counterfactual(self, rng):
        f = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        c = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        nx.backward(kl_loss(f, c))
        assert f.grad is None and c.grad is not None


class TestTotal:
    def test_examples(self):
        assert total_loss(Tensor(1.0), Tensor(0.5), 0.1).item() == 1.0 + 0.1 * 0.5
        assert total_loss(Tensor(1.0), Tensor(0.5), 0.0).item() == 1.0
        assert total_loss(Tensor(1.0), Tensor(0.0), 0.1).item() == 1.0


def identity_model(d, train_samples, ablation="no_both"):
    model = IeciModel.build(ModelConfig(d_p=d, d_r=d, d_model=d, layers=1, heads=1, dict_size=2,
                                        ablation=ablation), train_samples)
    model.phrase_in.data, model.region_in.data = np.eye(d), np.eye(d)
    model.head.phrase_proj.data, model.head.region_proj.data = np.eye(d), np.eye(d)
    return model


def sample(pid, phrases, regions):
    phrases, regions = np.asarray(phrases, float), np.asarray(regions, float)
    boxes = np.array([[0, 0, 10 + i, 10 + i] for i in range(len(regions))], dtype=float)
    return PairedSample(pid, np.arange(len(phrases)), phrases, np.arange(len(regions)), regions, boxes)


class TestBatchSimilarity:
    def test_planted_alignment(self):
        e = np.eye(4)
        pairs = [sample(0, [e[0]], [e[0], e[2] * 0.1]), sample(1, [e[1]], [e[1], e[3] * 0.1])]
        sim = batch_similarity(Batch.from_samples(pairs), identity_model(4, pairs))
        assert sim.predicted.tolist() == [0, 1] and sim.targets.tolist() == [0, 1]

    def test_identical_images_tie(self):
        e = np.eye(3)
        pairs = [sample(0, [e[0]], [e[0], e[1]]), sample(1, [e[2]], [e[0], e[1]])]
        sim = batch_similarity(Batch.from_samples(pairs), identity_model(3, pairs))
        a = sim.matrix.data
        assert np.array_equal(a[:, 0], a[:, 1]) and sim.predicted.tolist() == [0, 0]

    def test_shape(self, small_corpus):
        pairs = small_corpus.splits["train"][:3]
        model = IeciModel.build(ModelConfig(d_p=8, d_r=8, d_model=8, layers=1, dict_size=4), pairs)
        assert batch_similarity(Batch.from_samples(pairs), model).matrix.shape == (3, 3)

    def test_single_pair(self, small_corpus):
        pairs = small_corpus.splits["train"][:1]
        model = IeciModel.build(ModelConfig(d_p=8, d_r=8, d_model=8, layers=1, dict_size=2), pairs)
        with pytest.raises(ContractError):
            batch_similarity(Batch.from_samples(pairs), model)


def raw_baseline(model, samples):
    """no_both scores coded directly in numpy from the model's weights."""
    h = model.head
    out = np.empty((len(samples), len(samples)))
    for i, si in enumerate(samples):
        p = (si.phrase_features @ model.phrase_in.data + model.phrase_in_bias.data) @ h.phrase_proj.data
        for j, sj in enumerate(samples):
            r = (sj.region_features @ model.region_in.data + model.region_in_bias.data) @ h.region_proj.data
            out[i, j] = (p @ r.T * h.scale).max(axis=1).mean()
    return out


class TestAblations:
    def test_no_both_matches_raw_baseline(self):
        c = synth_generate(SynthConfig(train_pairs=5, test_pairs=0, n_phrases=3, n_regions=4, dim=8, seed=2))
        samples = c.splits["train"]
        model = IeciModel.build(ModelConfig(d_p=8, d_r=8, d_model=8, layers=2, dict_size=4,
                                            ablation="no_both"), samples)
        rng = np.random.default_rng(0)
        for _, p in model.named_parameters():
            p.data = p.data + rng.normal(scale=0.2, size=p.shape)
        got = model.forward(Batch.from_samples(samples)).sentence_image.data
        np.testing.assert_allclose(got, raw_baseline(model, samples), rtol=1e-12, atol=1e-14)

    def test_no_both_with_ragged_pairs(self, rng):
        samples = [sample(i, rng.normal(size=(n, 4)), rng.normal(size=(m, 4)))
                   for i, (n, m) in enumerate([(1, 3), (3, 2), (2, 4)])]
        model = IeciModel.build(ModelConfig(d_p=4, d_r=4, d_model=4, layers=1, heads=2, dict_size=2,
                                            ablation="no_both"), samples)
        model.head.r.data = rng.normal(size=4)
        got = model.forward(Batch.from_samples(samples)).sentence_image.data
        np.testing.assert_allclose(got, raw_baseline(model, samples), rtol=1e-12, atol=1e-14)

    def test_no_ici_scores_are_factual(self, small_corpus):
        samples = small_corpus.splits["train"][:4]
        model = IeciModel.build(ModelConfig(d_p=8, d_r=8, d_model=8, layers=1, dict_size=4,
                                            ablation="no_ici"), samples)
        model.head.r.data = np.ones(8)
        batch = Batch.from_samples(samples)
        p, r = model.encode(batch)
        from ieci.ici import similarity
        assert np.array_equal(model.grounding_scores(batch), similarity(p, r, model.head).data)
        assert model.forward(batch).matched_cf is None

    def test_same_seed_shares_weights(self, small_corpus):
        samples = small_corpus.splits["train"]
        models = [IeciModel.build(ModelConfig(d_p=8, d_r=8, d_model=8, layers=2, dict_size=4, ablation=a),
                                  samples) for a in ("full", "no_both")]
        for (n1, p1), (n2, p2) in zip(*(m.named_parameters() for m in models)):
            assert n1 == n2 and np.array_equal(p1.data, p2.data)


class TestGradients:
    @pytest.mark.parametrize("ablation", ["full", "no_ida", "no_ici", "no_both"])
    def test_loss_gradcheck_per_ablation(self, ablation):
        res = toy_gradcheck(layers=1, ablation=ablation)
        assert res.max_rel_error < 1e-4, max(res.per_param.items(), key=lambda kv: kv[1])

    def test_r_moves_only_through_kl(self, small_corpus):
        samples = small_corpus.splits["train"][:4]
        cfg = TrainConfig(d_model=8, layers=1, dict_size=4, alpha=0.5)
        model = IeciModel.build(cfg.model_config(8, 8), samples)
        model.head.r.data = np.random.default_rng(1).normal(size=8)
        batch = Batch.from_samples(samples)
        r = model.head.r

        wpg, kl, total = compute_losses(model, batch, cfg)
        nx.backward(wpg)
        assert r.grad is None

        wpg, kl, total = compute_losses(model, batch, cfg)
        nx.backward(kl)
        kl_grad = r.grad.data.copy()
        assert np.abs(kl_grad).max() > 0
        r.grad = None

        wpg, kl, total = compute_losses(model, batch, cfg)
        nx.backward(total)
        np.testing.assert_allclose(r.grad.data, cfg.alpha * kl_grad, rtol=1e-12)


class TestLoop:
    def test_history_length(self):
        c = synth_generate(SynthConfig(train_pairs=8, test_pairs=0, n_phrases=2, n_regions=3, dim=8, seed=0))
        cfg = TrainConfig(epochs=1, batch_size=4, d_model=8, layers=1, dict_size=4)
        steps = []
        res = train(c, cfg, on_step=steps.append)
        assert len(res.history) == len(steps) == 2
        assert [h.step for h in res.history] == [0, 1]

    def test_deterministic(self, small_corpus):
        cfg = TrainConfig(epochs=3, batch_size=5, d_model=8, layers=1, dict_size=4, learning_rate=1e-3, seed=4)
        a, b = train(small_corpus, cfg), train(small_corpus, cfg)
        assert history_csv(a.history) == history_csv(b.history)

    def test_wpg_decreases_on_planted_corpus(self):
        c = synth_generate(SynthConfig(train_pairs=64, test_pairs=0, n_regions=6, dim=16, seed=5))
        cfg = TrainConfig(epochs=300, batch_size=64, d_model=16, layers=1, dict_size=8, learning_rate=1e-3)
        hist = train(c, cfg).history
        assert hist[-1].wpg < hist[0].wpg

    def test_no_ici_records_no_kl(self, small_corpus):
        hist = train(small_corpus, TrainConfig(epochs=1, batch_size=8, d_model=8, layers=1, dict_size=4,
                                               ablation="no_ici")).history
        assert all(h.kl is None and h.total == h.wpg for h in hist)
        assert ",," in history_csv(hist)

    def test_batches_merge_lone_leftover(self):
        chunks = batches(9, 4, np.random.default_rng(0))
        assert [len(c) for c in chunks] == [4, 5]
        assert sorted(np.concatenate(chunks).tolist()) == list(range(9))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)
        with pytest.raises(ValueError):
            TrainConfig(alpha=-0.1)
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"lr": 0.1})

    def test_default_hyperparameters(self):
        cfg = TrainConfig()
        assert (cfg.alpha, cfg.learning_rate, cfg.weight_decay, cfg.batch_size) == (0.1, 1e-5, 1e-4, 64)


class TestAdamW:
    def test_first_step_is_lr_sized(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = AdamW([p], lr=0.1)
        p.grad = Tensor(np.array([3.0, -0.5]))
        opt.step()
        np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-6)

    def test_decoupled_decay_without_gradient_signal(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = AdamW([p], lr=0.1, weight_decay=0.5)
        p.grad = Tensor(np.array([0.0]))
        opt.step()
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_skips_params_without_grad(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        AdamW([p], lr=0.1, weight_decay=0.5).step()
        assert p.data[0] == 2.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path, small_corpus):
        cfg = TrainConfig(epochs=1, batch_size=8, d_model=8, layers=2, dict_size=4, ablation="no_ida")
        res = train(small_corpus, cfg)
        path = save_checkpoint(tmp_path / "m.ckpt", res.model, cfg)
        model, back = load_checkpoint(path)
        assert back == cfg and model.cfg.ablation == "no_ida"
        for (n1, p1), (n2, p2) in zip(res.model.named_parameters(), model.named_parameters()):
            assert n1 == n2
            assert np.array_equal(p1.data.astype(np.float32), p2.data.astype(np.float32))
        batch = Batch.from_samples(small_corpus.splits["test"])
        np.testing.assert_allclose(model.grounding_scores(batch), res.model.grounding_scores(batch), atol=1e-4)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"garbage!")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "x.ckpt")
