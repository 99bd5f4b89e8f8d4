import numpy as np
import pytest

from dseb import autodiff as ad
from dseb.contrastive import nt_xent
from dseb.models import (Adversaries, CausalBottleneck, Encoder, ProjectionHead, class_weights, covariance_penalty,
                         encode)
from dseb.synth import SynthConfig, synth_generate
from dseb.training import TrainConfig, embed, train_adversarial, train_baseline, train_bottleneck

CLASSES = {"gender": 2, "age": 3, "accent": 5}
TINY = dict(hidden=16, dim=8, projection_hidden=(8, 8), projection_dim=4, batch_size=8)


def tiny_data(n_speakers=12, **kw):
    return synth_generate(SynthConfig(n_speakers=n_speakers, utterances_per_speaker=2, feature_dim=8,
                                      n_frames=6, **kw))


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def grad_check(build, params, surrogate=None):
    """Relative error of the tape gradient over all ``params`` jointly.

    ``surrogate`` is the scalar whose plain derivative the tape gradient
    should equal; it differs from ``build`` when a GRL sits in the graph.
    """
    with ad.Tape() as tape:
        loss = build()
    grads = ad.backward(tape, loss)
    numeric = ad.numeric_gradient(lambda: (surrogate or build)().item(), params, 1e-6)
    tape_vec = np.concatenate([grads.get(p, np.zeros_like(p.data)).ravel() for p in params])
    return rel_err(tape_vec, np.concatenate([n.ravel() for n in numeric]))


class TestEncoder:
    def test_single_frame(self):
        enc = Encoder(np.random.default_rng(0), 8, 16, 4)
        frame = np.random.default_rng(1).normal(size=(1, 8))
        pooled = enc.pooled(frame).data[0]
        assert not pooled[16:].any()
        np.testing.assert_array_equal(pooled[:16], enc.frame_transform(ad.Tensor(frame)).data[0])

    def test_duplicated_frames(self):
        enc = Encoder(np.random.default_rng(0), 8, 16, 4)
        x = np.random.default_rng(2).normal(size=(5, 8))
        np.testing.assert_allclose(encode(np.repeat(x, 2, axis=0), enc), encode(x, enc), atol=1e-12)

    def test_frame_permutation(self):
        enc = Encoder(np.random.default_rng(0))
        x = np.random.default_rng(3).normal(size=(30, 64))
        perm = np.random.default_rng(4).permutation(30)
        np.testing.assert_allclose(encode(x[perm], enc), encode(x, enc), atol=1e-12)

    def test_straight_line_forward(self):
        enc = Encoder(np.random.default_rng(5))
        x = np.random.default_rng(6).normal(size=(98, 64))
        h = np.maximum(x @ enc.w1.data + enc.b1.data, 0) @ enc.w2.data + enc.b2.data
        mu = h.sum(axis=0) * (1 / 98)
        c = h - h.mean(axis=0)
        stats = np.concatenate([mu, np.sqrt((c * c).mean(axis=0))])
        z = stats @ enc.wp.data + enc.bp.data
        assert z.shape == (128,)
        np.testing.assert_array_equal(encode(x, enc), z)

    def test_batch_matches_single(self):
        enc = Encoder(np.random.default_rng(7), 8, 16, 4)
        x = np.random.default_rng(8).normal(size=(3, 5, 8))
        np.testing.assert_allclose(enc(x).data, np.stack([encode(f, enc) for f in x]), atol=1e-12)

    def test_init_bounds(self):
        enc = Encoder(np.random.default_rng(9))
        limit = np.sqrt(6 / (64 + 256))
        assert np.abs(enc.w1.data).max() <= limit and not enc.b1.data.any()


class TestBottleneck:
    def test_zero_residual(self):
        bn = CausalBottleneck(np.random.default_rng(0), 6, 2, CLASSES)
        bn.w_res.data[:] = 0
        _, z_res, _, res_logits = bn(np.random.default_rng(1).normal(size=(5, 6)))
        assert not z_res.data.any()
        for logits in res_logits.values():
            np.testing.assert_array_equal(logits.data, np.repeat(logits.data[:1], 5, axis=0))

    def test_hand_example(self):
        bn = CausalBottleneck(np.random.default_rng(0), 4, 2, CLASSES)
        bn.w_demo.data = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
        bn.w_res.data = np.array([[0.0, 2.0], [1.0, 0.0], [0.0, 0.0], [1.0, -1.0]])
        z_demo, z_res = bn.branches(np.array([[1.0, 2.0, 3.0, 4.0]]))
        np.testing.assert_array_equal(z_demo.data, [[4.0, 5.0]])
        np.testing.assert_array_equal(z_res.data, [[6.0, -2.0]])

    def test_grl_does_not_change_forward(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(4, 6))
        bn = CausalBottleneck(np.random.default_rng(3), 6, 2, CLASSES, {a: 0.7 for a in CLASSES})
        _, z_res, _, logits = bn(z)
        for a, head in bn.res_adversaries.heads.items():
            np.testing.assert_array_equal(logits[a].data, head(z_res).data)

    def test_k_bounds(self):
        with pytest.raises(ValueError):
            CausalBottleneck(np.random.default_rng(0), 8, 8)


class TestCovariance:
    def test_constant_residual(self):
        z_demo = np.random.default_rng(0).normal(size=(6, 3))
        assert covariance_penalty(z_demo, np.ones((6, 2))).item() == 0.0

    def test_two_point(self):
        assert covariance_penalty(np.array([[-1.0], [1.0]]), np.array([[-1.0], [1.0]])).item() == 1.0

    def test_formula_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(10, 3)), rng.normal(size=(10, 4))
        c = np.zeros((3, 4))
        for i in range(3):
            for j in range(4):
                c[i, j] = np.mean((a[:, i] - a[:, i].mean()) * (b[:, j] - b[:, j].mean()))
        expected = (c ** 2).sum() / 12
        assert abs(covariance_penalty(a, b).item() - expected) / expected < 1e-12

    def test_centering_invariance(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(8, 3)), rng.normal(size=(8, 2))
        base = covariance_penalty(a, b).item()
        assert abs(covariance_penalty(a + rng.normal(size=3), b - 4.0).item() - base) < 1e-12

    def test_orthogonal_batches(self):
        a = np.array([[1.0], [-1.0], [1.0], [-1.0]])
        b = np.array([[1.0], [1.0], [-1.0], [-1.0]])
        assert covariance_penalty(a, b).item() == 0.0

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            covariance_penalty(np.ones((1, 2)), np.ones((1, 2)))


def test_class_weights_mean_one():
    w = class_weights(np.array([0, 0, 0, 1]), 2)
    np.testing.assert_allclose(w, [0.5, 1.5])
    assert w.mean() == pytest.approx(1.0)


class TestGradients:
    """Finite-difference checks on tiny instances of every trainable graph."""

    @pytest.mark.parametrize("seed", range(3))
    def test_encoder_and_head(self, seed):
        rng = np.random.default_rng(seed)
        enc = Encoder(rng, 3, 4, 3)
        head = ProjectionHead(rng, 3, (4, 4), 2)
        x = rng.normal(size=(4, 3, 3))
        params = list(ad.parameters_of(enc, head).values())
        assert grad_check(lambda: nt_xent(ad.l2_normalize(head(enc(x)))), params) < 1e-5

    @pytest.mark.parametrize("seed", range(3))
    def test_adversaries_through_grl(self, seed):
        rng = np.random.default_rng(seed)
        z = ad.parameter(rng.normal(size=(6, 4)))
        adv = Adversaries(rng, 4, CLASSES, hidden=5)
        labels = {a: rng.integers(0, c, 6) for a, c in CLASSES.items()}

        def build():
            logits = adv(z, {a: 1.0 for a in CLASSES})
            return sum(ad.softmax_cross_entropy(logits[a], labels[a]) for a in CLASSES)

        params = list(adv.named_parameters().values())
        assert grad_check(build, params) < 1e-5
        # the input gradient is the reversed one
        with ad.Tape() as tape:
            loss = build()
        g = ad.backward(tape, loss)[z]
        (num,) = ad.numeric_gradient(lambda: build().item(), [z])
        assert rel_err(g, -num) < 1e-5

    @pytest.mark.parametrize("seed", range(3))
    def test_bottleneck_with_covariance(self, seed):
        rng = np.random.default_rng(seed)
        bn = CausalBottleneck(rng, 6, 2, CLASSES, {"gender": 0.5, "age": 0.05, "accent": 0.05}, adversary_hidden=4)
        z = rng.normal(size=(8, 6))
        labels = {a: rng.integers(0, c, 8) for a, c in CLASSES.items()}

        def build(reversed_=False):
            z_demo, z_res, demo, res = bn(z)
            adv = {a: ad.softmax_cross_entropy(res[a], labels[a]) for a in CLASSES}
            if reversed_:
                # what the GRL makes the projections descend on
                adv_term = sum(adv[a] * -bn.lambdas[a] for a in CLASSES)
            else:
                adv_term = sum(adv.values())
            return (sum(ad.softmax_cross_entropy(demo[a], labels[a]) for a in CLASSES)
                    + adv_term + covariance_penalty(z_demo, z_res))

        adv_params = bn.res_adversaries.named_parameters()
        head_params = [p for n, p in bn.named_parameters().items() if n not in adv_params]
        assert grad_check(build, list(adv_params.values())) < 1e-5
        assert grad_check(build, head_params, lambda: build(True)) < 1e-5


class TestTraining:
    def test_zero_epochs_returns_init(self):
        data = tiny_data()
        cfg = TrainConfig(epochs=0, **TINY)
        fresh = Encoder(np.random.default_rng(np.random.SeedSequence(0).spawn(6)[0]), 8, 16, 8)
        out = train_baseline(data, cfg).encoder.state_dict()
        for name, value in fresh.state_dict().items():
            np.testing.assert_array_equal(out[name], value)

    def test_deterministic(self):
        data = tiny_data()
        cfg = TrainConfig(epochs=2, **TINY)
        a, b = train_baseline(data, cfg), train_baseline(data, cfg)
        for name, value in a.parameters().items():
            assert value.tobytes() == b.parameters()[name].tobytes()

    def test_loss_improves(self):
        data = synth_generate(SynthConfig(n_speakers=16, utterances_per_speaker=4, feature_dim=8, n_frames=10,
                                          speaker_std=3.0))
        res = train_baseline(data, TrainConfig(epochs=30, learning_rate=1e-3, **{**TINY, "batch_size": 16}))
        assert res.curves[-1]["ntxent"] < res.curves[0]["ntxent"]

    def test_zero_lambda_matches_baseline(self):
        data = tiny_data()
        base = train_baseline(data, TrainConfig(epochs=2, **TINY))
        adv = train_adversarial(data, TrainConfig(mode="adversarial", lambda_adv=0.0, epochs=2, **TINY))
        for name, value in base.encoder.state_dict().items():
            assert value.tobytes() == adv.encoder.state_dict()[name].tobytes()

    def test_zero_lambda_gives_zero_encoder_gradient(self):
        rng = np.random.default_rng(0)
        enc = Encoder(rng, 4, 6, 5)
        adv = Adversaries(rng, 5, CLASSES, hidden=4)
        x = rng.normal(size=(6, 3, 4))
        labels = {a: rng.integers(0, c, 6) for a, c in CLASSES.items()}
        with ad.Tape() as tape:
            logits = adv(ad.l2_normalize(enc(x)), {a: 1.0 for a in CLASSES})
            loss = sum(ad.softmax_cross_entropy(logits[a], labels[a]) for a in CLASSES) * 0.0
        grads = ad.backward(tape, loss)
        for p in enc.named_parameters().values():
            assert not grads[p].any()

    def test_grl_sign(self):
        rng = np.random.default_rng(1)
        z = ad.parameter(rng.normal(size=(6, 4)))
        adv = Adversaries(rng, 4, {"gender": 2}, hidden=5)
        y = rng.integers(0, 2, 6)
        with ad.Tape() as tape:
            loss = ad.softmax_cross_entropy(adv(z, {"gender": 1.0})["gender"], y)
        encoder_side = ad.backward(tape, loss)[z]
        with ad.Tape() as tape:
            plain = ad.parameter(z.data.copy())
            loss = ad.softmax_cross_entropy(adv.heads["gender"](plain), y)
        adversary_side = ad.backward(tape, loss)[plain]
        assert float(np.sum(encoder_side * adversary_side)) <= 0

    def test_missing_label(self):
        data = tiny_data()
        data.labels["age"][3] = -1
        with pytest.raises(ValueError, match=data.utterance_ids[3]):
            train_adversarial(data, TrainConfig(mode="adversarial", lambda_adv=1.0, epochs=1, **TINY))

    def test_adversary_only_learns_planted_gender(self):
        data = synth_generate(SynthConfig(n_speakers=40, utterances_per_speaker=4, feature_dim=16, n_frames=8,
                                          gender_direction_strength=5.0))
        cfg = TrainConfig(mode="adversarial", lambda_adv=1.0, epochs=60, freeze_encoder=True,
                          adversary_lr=1e-2, dim=32, hidden=64, batch_size=16)
        res = train_adversarial(data, cfg)
        z = ad.l2_normalize(ad.Tensor(embed(res, data.frames)))
        pred = np.argmax(res.adversaries.heads["gender"](z).data, axis=1)
        assert np.mean(pred == data.labels["gender"]) >= 0.95

    def test_bottleneck_without_pressure(self):
        data = synth_generate(SynthConfig(n_speakers=40, utterances_per_speaker=4, feature_dim=16, n_frames=8,
                                          gender_direction_strength=5.0))
        base = train_baseline(data, TrainConfig(epochs=0, **{**TINY, "dim": 16, "hidden": 32}))
        cfg = TrainConfig(mode="bottleneck", k=4, lambda_triple=(0.0, 0.0, 0.0), covariance_weight=0.0,
                          epochs=40, **{**TINY, "dim": 16, "hidden": 32})
        a = train_bottleneck(data, base.encoder, cfg)
        b = train_bottleneck(data, base.encoder, cfg)
        for name, value in a.parameters().items():
            assert value.tobytes() == b.parameters()[name].tobytes()
        from dseb.probes import ProbeConfig, evaluate_probe, train_probe
        y = data.labels["gender"]
        accs = {}
        for branch in ("demo", "residual"):
            z = embed(a, data.frames, branch)
            accs[branch] = evaluate_probe(train_probe(z[::2], y[::2], ProbeConfig()), z[1::2], y[1::2])
        assert accs["demo"] >= accs["residual"]

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            TrainConfig(mode="bottleneck", k=8, lambda_triple=(0.1, 0.1, 0.1), dim=8)

    def test_mode_fields(self):
        with pytest.raises(ValueError):
            TrainConfig(mode="baseline", lambda_adv=1.0)
        with pytest.raises(ValueError):
            TrainConfig(mode="adversarial")
