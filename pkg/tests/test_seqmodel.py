import math

import numpy as np
import pytest
import torch

from idp._nn import state_checksum
from idp.checkpoint import CheckpointError
from idp.dataset import from_sequences, split_leave_one_out
from idp.seqmodel import (ATTENTION, RECURRENT, SeqHyper, SeqRecModel, bpr_loss, forward, load_model, load_partial,
                          mean_training_loss, pad_batch, pretrain, save_model, score, train, user_representations)

from oracles import attention_block_reference, check_gradients, gru_reference


def _model(num_items=6, backend=ATTENTION, dim=4, heads=2, layers=1, dtype=torch.float64, seed=0, max_len=8):
    torch.manual_seed(seed)
    hyper = SeqHyper(dim=dim, num_heads=heads, num_layers=layers, max_len=max_len, dropout=0.0, backend=backend)
    return SeqRecModel(num_items, hyper).to(dtype)


def _lists(t):
    return t.detach().tolist()


class TestForward:
    def test_hand_computed_two_dim_block(self):
        model = _model(num_items=3, dim=2, heads=1)
        block = model.encoder.layers[0]
        vals = {
            "W_Q": [[0.5, -0.2], [0.1, 0.3]], "W_K": [[0.4, 0.0], [-0.3, 0.6]], "W_V": [[1.0, 0.2], [0.0, -0.5]],
            "W_O": [[0.7, 0.1], [-0.2, 0.9]], "W_1": [[0.3, -0.8], [0.5, 0.2]], "b_1": [0.1, -0.1],
            "W_2": [[0.6, 0.4], [-0.3, 0.2]], "b_2": [0.05, 0.0],
        }
        with torch.no_grad():
            for name, v in vals.items():
                getattr(block, name).copy_(torch.tensor(v, dtype=torch.float64))
            block.ln1.gain.copy_(torch.tensor([1.2, 0.8], dtype=torch.float64))
            block.ln1.bias.copy_(torch.tensor([0.1, -0.1], dtype=torch.float64))
            block.ln2.gain.copy_(torch.tensor([0.9, 1.1], dtype=torch.float64))
            block.ln2.bias.copy_(torch.tensor([0.0, 0.2], dtype=torch.float64))
            model.E.copy_(torch.tensor([[0.3, -0.7], [1.1, 0.4], [-0.6, 0.2]], dtype=torch.float64))
            model.P.copy_(torch.tensor([[0.05 * i, -0.02 * i] for i in range(8)], dtype=torch.float64))
        seq = [2, 0]
        E, P = _lists(model.E), _lists(model.P)
        h0 = [[E[v][c] + P[i][c] for c in range(2)] for i, v in enumerate(seq)]
        params = {**vals, "g1": [1.2, 0.8], "c1": [0.1, -0.1], "g2": [0.9, 1.1], "c2": [0.0, 0.2]}
        expected = attention_block_reference(h0, params, 1, model.hyper.layer_norm_eps)
        model.eval()
        got = model(torch.tensor([seq]))[0]
        np.testing.assert_allclose(got.detach().numpy(), np.array(expected), rtol=0, atol=1e-12)
        np.testing.assert_allclose(forward(model, seq).detach().numpy(), expected[-1], atol=1e-12)
        # with d=2 the normalised output only carries signs, so also pin the attention sublayer
        h = torch.tensor(h0, dtype=torch.float64)[None]
        mh = block.multi_head(h)[0].detach().numpy()
        q = [[sum(r[i] * vals["W_Q"][i][j] for i in range(2)) for j in range(2)] for r in h0]
        k = [[sum(r[i] * vals["W_K"][i][j] for i in range(2)) for j in range(2)] for r in h0]
        v = [[sum(r[i] * vals["W_V"][i][j] for i in range(2)) for j in range(2)] for r in h0]
        l01 = (q[1][0] * k[0][0] + q[1][1] * k[0][1]) / math.sqrt(2)
        l11 = (q[1][0] * k[1][0] + q[1][1] * k[1][1]) / math.sqrt(2)
        w0 = math.exp(l01) / (math.exp(l01) + math.exp(l11))
        ctx = [[v[0][0], v[0][1]], [w0 * v[0][0] + (1 - w0) * v[1][0], w0 * v[0][1] + (1 - w0) * v[1][1]]]
        ref = [[sum(c[i] * vals["W_O"][i][j] for i in range(2)) for j in range(2)] for c in ctx]
        np.testing.assert_allclose(mh, ref, rtol=0, atol=1e-14)

    def test_multi_head_matches_reference(self):
        model = _model(num_items=5, dim=4, heads=2, seed=3)
        model.eval()
        block = model.encoder.layers[0]
        seq = [1, 4, 2]
        E, P = _lists(model.E), _lists(model.P)
        h0 = [[E[v][c] + P[i][c] for c in range(4)] for i, v in enumerate(seq)]
        params = {n: _lists(getattr(block, n)) for n in ("W_Q", "W_K", "W_V", "W_O", "W_1", "b_1", "W_2", "b_2")}
        params.update(g1=_lists(block.ln1.gain), c1=_lists(block.ln1.bias), g2=_lists(block.ln2.gain),
                      c2=_lists(block.ln2.bias))
        expected = attention_block_reference(h0, params, 2, model.hyper.layer_norm_eps)
        np.testing.assert_allclose(model(torch.tensor([seq]))[0].detach().numpy(), expected, atol=1e-12)

    def test_gru_matches_reference(self):
        model = _model(num_items=5, backend=RECURRENT, dim=3, heads=1, seed=4)
        model.eval()
        enc = model.encoder
        seq = [0, 3, 1, 2]
        E = _lists(model.E)
        expected = gru_reference([E[v] for v in seq], _lists(enc.W_z), _lists(enc.W_r), _lists(enc.W_h),
                                 _lists(enc.b_z), _lists(enc.b_r), _lists(enc.b_h))
        np.testing.assert_allclose(model(torch.tensor([seq]))[0].detach().numpy(), expected, atol=1e-12)

    def test_single_position_attends_to_itself(self):
        model = _model()
        h = model.embed(torch.tensor([[3]]))
        w = model.encoder.layers[0].attention_weights(h)
        assert torch.all(w == 1.0)

    def test_equal_logits_uniform(self):
        model = _model()
        block = model.encoder.layers[0]
        with torch.no_grad():
            block.W_K.zero_()
        h = model.embed(torch.tensor([[1, 2, 3, 4]]))
        w = block.attention_weights(h)[0, 0]
        for i in range(4):
            np.testing.assert_allclose(w[i, : i + 1].detach().numpy(), 1.0 / (i + 1), atol=1e-15)

    def test_attention_rows_sum_to_one(self, rng):
        model = _model(num_items=20, dim=8, heads=2, seed=1)
        seqs = torch.as_tensor(rng.integers(0, 20, size=(5, 7)))
        w = model.encoder.layers[0].attention_weights(model.embed(seqs))
        np.testing.assert_allclose(w.sum(-1).detach().numpy(), 1.0, atol=1e-6)

    @pytest.mark.parametrize("backend", [ATTENTION, RECURRENT])
    def test_causality(self, backend, rng):
        model = _model(num_items=30, backend=backend, dim=8, layers=2, seed=2)
        model.eval()
        for _ in range(10):
            n = int(rng.integers(2, 8))
            seq = rng.integers(0, 30, size=n)
            i = int(rng.integers(0, n - 1))
            other = seq.copy()
            other[i + 1:] = rng.integers(0, 30, size=n - i - 1)
            a = model(torch.as_tensor(seq)[None])[0, : i + 1]
            b = model(torch.as_tensor(other)[None])[0, : i + 1]
            assert torch.equal(a, b)

    def test_truncation_keeps_recent(self, caplog):
        model = _model(max_len=3)
        caplog.set_level("INFO")
        a = user_representations(model, [[0, 1, 2, 3, 4]])
        b = user_representations(model, [[2, 3, 4]])
        assert torch.equal(a, b)
        assert "truncated 1" in caplog.text

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError):
            pad_batch([[]], 5)

    def test_padding_does_not_leak(self):
        model = _model(num_items=10, dim=4)
        model.eval()
        alone = user_representations(model, [[1, 2]])
        padded = user_representations(model, [[1, 2], [3, 4, 5, 6]])
        torch.testing.assert_close(alone[0], padded[0], rtol=0, atol=1e-14)

    def test_out_of_range_item(self):
        with pytest.raises(IndexError):
            user_representations(_model(num_items=3), [[0, 5]])

    def test_dropout_only_in_training(self):
        torch.manual_seed(0)
        model = SeqRecModel(10, SeqHyper(dim=4, num_heads=2, num_layers=1, max_len=6, dropout=0.5))
        x = torch.tensor([[1, 2, 3]])
        model.eval()
        assert torch.equal(model(x), model(x))
        model.train()
        assert not torch.equal(model(x), model(x))


class TestScoreAndLoss:
    def test_score_cases(self):
        E = torch.eye(3, dtype=torch.float64)
        assert float(score(torch.zeros(3, dtype=torch.float64), 1, E)) == 0.0
        assert float(score(E[2], 2, E)) == 1.0
        e_u = torch.tensor([0.3, -1.0, 2.0], dtype=torch.float64)
        s = score(e_u, torch.arange(3), E)
        torch.testing.assert_close(score(2.5 * e_u, torch.arange(3), E), 2.5 * s)

    def test_bpr_equal_scores(self):
        assert math.isclose(float(bpr_loss(torch.tensor(1.0), torch.tensor(1.0))), math.log(2), rel_tol=1e-7)

    def test_bpr_limits(self):
        assert float(bpr_loss(torch.tensor(100.0, dtype=torch.float64), torch.tensor(0.0, dtype=torch.float64))) < 1e-40
        big = bpr_loss(torch.tensor(0.0, dtype=torch.float64), torch.tensor(20.0, dtype=torch.float64))
        import mpmath
        mpmath.mp.dps = 40
        ref = -mpmath.log(1 / (1 + mpmath.e ** 20))
        assert math.isfinite(float(big))
        assert abs(float(big) - float(ref)) < 1e-12
        huge = bpr_loss(torch.tensor(0.0), torch.tensor(1e4))
        assert math.isfinite(float(huge))


class TestGradients:
    @pytest.mark.parametrize("backend", [ATTENTION, RECURRENT])
    def test_bpr_through_encoder(self, backend):
        model = _model(num_items=6, backend=backend, dim=4, heads=2, seed=11)
        model.eval()
        seqs = torch.tensor([[0, 3, 5], [2, 1, 4]])
        pos = torch.tensor([1, 0])
        neg = torch.tensor([2, 5])

        def loss():
            h = model(seqs)[:, -1]
            return bpr_loss((h * model.E[pos]).sum(-1), (h * model.E[neg]).sum(-1))

        errs = check_gradients(loss, dict(model.named_parameters()))
        assert max(errs.values()) < 1e-4, errs


class TestTraining:
    def _toy(self):
        seqs = {f"u{i}": [f"i{(i + j) % 12}" for j in range(8)] for i in range(20)}
        return from_sequences(seqs)

    def test_loss_decreases(self):
        store = self._toy()
        split = split_leave_one_out(store, 0, num_negatives=3)
        hyper = SeqHyper(dim=8, num_heads=2, num_layers=1, max_len=10, batch_size=8, epochs=50, lr=1e-2)
        torch.manual_seed(0)
        model = SeqRecModel(store.num_items, hyper)
        before = mean_training_loss(model, split.train, 5)
        train(model, split.train, None, 0, hyper)
        after = mean_training_loss(model, split.train, 5)
        assert after < before

    def test_same_seed_same_checksum(self):
        store = self._toy()
        split = split_leave_one_out(store, 0, num_negatives=3)
        hyper = SeqHyper(dim=8, num_heads=2, num_layers=1, max_len=10, batch_size=8, epochs=3)
        a, _, _ = pretrain(store, hyper, 9, split)
        b, _, _ = pretrain(store, hyper, 9, split)
        assert state_checksum(a.state_dict()) == state_checksum(b.state_dict())

    def test_zero_lr_changes_nothing(self):
        store = self._toy()
        hyper = SeqHyper(dim=8, num_heads=2, num_layers=1, max_len=10, batch_size=8, epochs=2, lr=0.0)
        torch.manual_seed(0)
        model = SeqRecModel(store.num_items, hyper)
        before = state_checksum(model.state_dict())
        train(model, store.sequences, None, 0, hyper)
        assert state_checksum(model.state_dict()) == before

    def test_invalid_hyper(self):
        with pytest.raises(ValueError):
            SeqHyper(dim=5, num_heads=2).validate()


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = _model(dtype=torch.float32)
        save_model(model, tmp_path / "m.ckpt")
        back = load_model(tmp_path / "m.ckpt")
        for name, t in model.state_dict().items():
            assert torch.equal(t, back.state_dict()[name])

    def test_mix_encoder_and_embeddings(self, tmp_path):
        a = _model(seed=1)
        b = _model(seed=2)
        save_model(a, tmp_path / "a.ckpt")
        save_model(b, tmp_path / "b.ckpt")
        mixed = _model(seed=3)
        load_partial(mixed, tmp_path / "a.ckpt", ["encoder"])
        load_partial(mixed, tmp_path / "b.ckpt", ["embeddings"])
        assert torch.equal(mixed.E, b.E) and torch.equal(mixed.P, b.P)
        for name, t in a.encoder.state_dict().items():
            assert torch.equal(mixed.encoder.state_dict()[name], t)
        mixed.eval()
        assert torch.all(torch.isfinite(mixed(torch.tensor([[0, 1, 2]]))))

    def test_dim_mismatch_names_tensor(self, tmp_path):
        save_model(_model(dim=4), tmp_path / "a.ckpt")
        with pytest.raises(CheckpointError, match="E"):
            load_partial(_model(dim=6, heads=2), tmp_path / "a.ckpt", ["embeddings"])

    def test_backend_mismatch(self, tmp_path):
        save_model(_model(backend=RECURRENT), tmp_path / "g.ckpt")
        with pytest.raises(CheckpointError, match="backend"):
            load_partial(_model(), tmp_path / "g.ckpt", ["encoder"])

    def test_text_projection_survives(self, tmp_path):
        from idp.seqmodel import TextProjection

        model = _model(num_items=4)
        model.attach_text(np.ones((4, 3)), np.array([1, 1, 0, 1]), TextProjection(3, 4, "learned"))
        save_model(model, tmp_path / "t.ckpt")
        back = load_model(tmp_path / "t.ckpt")
        torch.testing.assert_close(back.item_vectors(), model.item_vectors(), rtol=0, atol=0)
