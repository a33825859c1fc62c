import numpy as np
import pytest

from astra_lab import data as D
from astra_lab import grounding as G
from astra_lab.envs import make_pair
from astra_lab.numerics import Tape, check_gradients


@pytest.fixture(scope="module")
def lagcart_pair():
    return make_pair("lagcart")


@pytest.fixture(scope="module")
def lagcart_dataset(lagcart_pair):
    ds = D.collect(lagcart_pair, 30, seed=13)
    D.make_paired(ds, lagcart_pair)
    return ds


def tiny_model(abs_dim=2, action_dim=1, seed=0):
    return G.AstraModel(abs_dim, action_dim, seed=seed, latent_dim=3, hidden=4)


def tiny_batch(rng, B=3, L=6, abs_dim=2, action_dim=1):
    batch = G.Batch(
        abs_in=rng.normal(size=(B, L, abs_dim)),
        prev_a=rng.normal(size=(B, L, action_dim)),
        act=rng.normal(size=(B, L - 1, action_dim)),
        rew=rng.normal(size=(B, L - 1)),
        next_real=rng.normal(size=(B, L - 1, abs_dim)),
        next_sim=rng.normal(size=(B, L - 1, abs_dim)),
        mask=np.ones((B, L - 1)),
    )
    batch.mask[-1, -2:] = 0.0
    return batch


class TestModel:
    def test_untrained_corrector_is_identity(self):
        model = tiny_model()
        rng = np.random.default_rng(0)
        z = rng.normal(size=(5, 3))
        a = rng.normal(size=(5, 1))
        s = rng.normal(size=(5, 2))
        assert np.array_equal(model.correct(z, a, s), s)

    def test_construction_deterministic(self):
        a, b = tiny_model(seed=4), tiny_model(seed=4)
        for (na, pa), (nb, pb) in zip(a.named_parameters().items(),
                                      b.named_parameters().items()):
            assert na == nb
            assert np.array_equal(pa.value, pb.value)

    def test_encode_step_shapes(self):
        model = tiny_model()
        h = model.init_hidden(4)
        h2, z = model.encode_step(h, np.zeros((4, 2)), np.zeros((4, 1)))
        assert h2.shape == (4, 4)
        assert z.shape == (4, 3)

    def test_normalizer_from_dataset(self, lagcart_dataset, lagcart_pair):
        model = G.AstraModel(2, 1, seed=0)
        model.fit_normalizer(lagcart_dataset, lagcart_pair)
        stacked = np.concatenate(
            [lagcart_pair.phi(lagcart_dataset.trajectories[i].states)
             for i in lagcart_dataset.train_indices()])
        assert np.allclose(model.abs_mean, stacked.mean(axis=0))
        normed = model.normalize(stacked)
        assert np.allclose(normed.std(axis=0), 1.0, atol=1e-6)

    def test_save_load_round_trip(self, tmp_path):
        model = tiny_model(seed=1)
        model.abs_mean = np.array([0.5, -0.5])
        model.abs_std = np.array([2.0, 0.5])
        path = tmp_path / "m.ckpt"
        model.save(path)
        other = tiny_model(seed=2)
        other.load(path)
        for name, p in model.named_parameters().items():
            got = other.named_parameters()[name].value
            assert np.allclose(got, p.value, atol=1e-6)
        assert np.allclose(other.abs_mean, model.abs_mean)

    def test_load_rejects_name_mismatch(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "m.ckpt"
        model.save(path)
        other = G.AstraModel(3, 1, seed=0, latent_dim=3, hidden=4)
        with pytest.raises(IOError, match="mismatch"):
            other.load(path)


class TestLosses:
    def test_gradients_match_finite_differences(self):
        model = tiny_model()
        # move the corrector off its zero init so its gradients are generic
        rng = np.random.default_rng(3)
        for p in model.parameters():
            if p.name.startswith("f_abs"):
                p.value = p.value + 0.05 * rng.normal(size=p.value.shape)
        batch = tiny_batch(np.random.default_rng(7))
        h0 = model.init_hidden(3)

        for weights in [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0),
                        (1.0, 1.0, 1.0)]:
            # freeze the transition target at its unperturbed value so the
            # finite-difference reference matches the stop-gradient
            # semantics of the analytic loss
            base = G.chunk_losses(model, batch, 0, batch.L, h0, weights)
            tgt = base.get("trans_target")

            def f(w=weights, tgt=tgt):
                return G._weighted_total(
                    G.chunk_losses(model, batch, 0, batch.L, h0, w,
                                   trans_target=tgt), w)
            err = check_gradients(f, model.parameters())
            assert err <= 1e-4, (weights, err)

    def test_frozen_target_matches_stop_gradient(self):
        # analytic gradients of the stop-gradient loss equal those of the
        # loss with the target held constant at the same value
        model = tiny_model()
        batch = tiny_batch(np.random.default_rng(9))
        h0 = model.init_hidden(3)
        w = (1.0, 0.0, 0.0)
        with Tape() as tape:
            out = G.chunk_losses(model, batch, 0, batch.L, h0, w)
            g_sg = tape.gradients(out["l_trans"], model.parameters())
        with Tape() as tape:
            out2 = G.chunk_losses(model, batch, 0, batch.L, h0, w,
                                  trans_target=out["trans_target"])
            g_fz = tape.gradients(out2["l_trans"], model.parameters())
        for p in model.parameters():
            assert np.allclose(g_sg[p], g_fz[p], atol=1e-12), p.name

    def test_nas_gradients_skip_other_heads(self):
        model = tiny_model()
        # at the zero corrector init no gradient reaches the encoder, so
        # nudge the final layer off zero first
        rng = np.random.default_rng(8)
        for p in model.parameters():
            if p.name.startswith("f_abs"):
                p.value = p.value + 0.05 * rng.normal(size=p.value.shape)
        batch = tiny_batch(np.random.default_rng(1))
        h0 = model.init_hidden(3)
        weights = G.MODES["nas"]
        with Tape() as tape:
            out = G.chunk_losses(model, batch, 0, batch.L, h0, weights)
            grads = tape.gradients(G._weighted_total(out, weights),
                                   model.parameters())
        for p in model.parameters():
            g = grads[p]
            if p.name.startswith(("p_lat", "r_base", "r_pot")):
                assert np.all(g == 0.0), p.name
        # the encoder and corrector do receive gradient
        enc = [g for p, g in grads.items() if p.name.startswith("enc_gru")]
        assert any(np.any(g != 0.0) for g in enc)

    def test_stop_gradient_on_transition_target(self):
        # with only the transition loss, the encoder still gets gradient
        # through the input latent, but shrinking the target's contribution
        # is impossible: check gradients agree with finite differences even
        # though the target path is cut (covered above), and that the
        # masked count excludes padded transitions
        batch = tiny_batch(np.random.default_rng(2))
        model = tiny_model()
        out = G.chunk_losses(model, batch, 0, batch.L,
                             model.init_hidden(3), (1.0, 1.0, 1.0))
        assert out["count"] == batch.mask.sum()

    def test_window_split_matches_full_pass_values(self):
        # evaluation losses must not depend on the window size
        model = tiny_model()
        batch = tiny_batch(np.random.default_rng(5), B=2, L=9)
        full = G.batch_losses(model, batch, (1.0, 1.0, 1.0))
        split = G.batch_losses(model, batch, (1.0, 1.0, 1.0), window=3)
        for key in ("l_trans", "l_rew", "l_abs"):
            assert np.isclose(full[key], split[key], rtol=1e-10), key


class TestPrepareBatch:
    def test_masks_and_padding(self, lagcart_dataset, lagcart_pair):
        idx = [0, 1, 2]
        batch = G.prepare_batch(lagcart_dataset, lagcart_pair, idx)
        lens = [len(lagcart_dataset.trajectories[i]) for i in idx]
        assert batch.L == max(lens)
        for k, T in enumerate(lens):
            assert batch.mask[k, :T - 1].all()
            assert not batch.mask[k, T - 1:].any()
        assert np.all(batch.prev_a[:, 0] == 0.0)

    def test_requires_paired(self, lagcart_pair):
        ds = D.collect(lagcart_pair, 2, seed=0)
        with pytest.raises(ValueError, match="paired"):
            G.prepare_batch(ds, lagcart_pair, [0])


class TestTraining:
    def test_unknown_mode(self, lagcart_dataset, lagcart_pair):
        model = G.AstraModel(2, 1, seed=0)
        with pytest.raises(ValueError, match="mode"):
            G.train_grounding(model, lagcart_dataset, lagcart_pair, mode="bogus")

    def test_training_beats_raw_simulator(self, lagcart_dataset, lagcart_pair,
                                          tmp_path):
        model = G.AstraModel(2, 1, seed=0)
        log_path = tmp_path / "curve.csv"
        hist = G.train_grounding(model, lagcart_dataset, lagcart_pair,
                                 mode="full", epochs=60, patience=15,
                                 log_path=log_path, seed=0)
        assert log_path.exists()
        assert hist["val"][-1] <= hist["val"][0]
        report = G.prediction_report(model, lagcart_dataset, lagcart_pair,
                                     lagcart_dataset.val_indices())
        assert report["grounded_mse"] < report["raw_mse"]

    def test_nas_leaves_reward_head_untrained(self, lagcart_dataset,
                                              lagcart_pair):
        model = G.AstraModel(2, 1, seed=0)
        before = {n: p.value.copy()
                  for n, p in model.named_parameters().items()}
        G.train_grounding(model, lagcart_dataset, lagcart_pair, mode="nas",
                          epochs=3, seed=0)
        after = model.named_parameters()
        for name in before:
            if name.startswith(("p_lat", "r_base", "r_pot")):
                assert np.array_equal(before[name], after[name].value), name
            if name.startswith("enc_gru.Wz"):
                assert not np.array_equal(before[name], after[name].value)
