import math

import numpy as np
import pytest
import torch

from dualbin import quantcore as qc
from dualbin import toymodel as tm

from oracles import sliding_window_nll


class TestCorpus:
    def test_deterministic_and_sized(self):
        a = tm.make_toy_corpus(10_000, seed=3)
        b = tm.make_toy_corpus(10_000, seed=3)
        assert a == b and len(a) == 10_000
        assert tm.make_toy_corpus(10_000, seed=4) != a

    def test_byte_range(self, corpus_tokens):
        assert corpus_tokens.min() >= 0 and corpus_tokens.max() < 256


class TestModelBasics:
    def test_logit_shape_and_determinism(self):
        model = tm.build_model(tm.ModelConfig(), seed=0)
        toks = np.arange(20) % 256
        l1 = tm.forward(model, toks)
        l2 = tm.forward(model, toks)
        assert l1.shape == (20, 256)
        assert np.array_equal(l1, l2)

    def test_float64_parameters(self):
        model = tm.build_model(tm.ModelConfig(), seed=0)
        assert all(p.dtype == torch.float64 for p in model.parameters())

    def test_rejects_long_sequence(self):
        model = tm.build_model(tm.ModelConfig(max_seq_len=8), seed=0)
        with pytest.raises(ValueError, match="max_seq_len"):
            tm.forward(model, np.zeros(9, dtype=np.int64))

    def test_rejects_bad_token(self):
        model = tm.build_model(tm.ModelConfig(), seed=0)
        with pytest.raises(ValueError, match="token"):
            tm.forward(model, np.array([0, 300]))

    def test_causality(self):
        model = tm.build_model(tm.ModelConfig(), seed=1)
        toks = np.arange(16, dtype=np.int64)
        base = tm.forward(model, toks)
        toks2 = toks.copy()
        toks2[10] = 99
        changed = tm.forward(model, toks2)
        assert np.array_equal(base[:10], changed[:10])
        assert not np.array_equal(base[10], changed[10])


class TestPerplexity:
    def test_matches_naive_oracle(self, corpus_tokens):
        model = tm.build_model(tm.ModelConfig(max_seq_len=16), seed=0)
        toks = corpus_tokens[:200]
        want = math.exp(
            sliding_window_nll(lambda c: tm.forward(model, c), list(toks), 16)
        )
        got = tm.perplexity(model, toks)
        assert got == pytest.approx(want, rel=1e-10)

    def test_uniform_model_bound(self, corpus_tokens):
        # an untrained model should sit near vocab-size perplexity
        model = tm.build_model(tm.ModelConfig(), seed=0)
        ppl = tm.perplexity(model, corpus_tokens[:2048])
        assert 128 < ppl < 512

    def test_needs_two_tokens(self):
        model = tm.build_model(tm.ModelConfig(), seed=0)
        with pytest.raises(ValueError):
            tm.perplexity(model, np.array([1]))


class TestTraining:
    def test_teacher_learns(self, mini_teacher, corpus_tokens):
        ppl = tm.perplexity(mini_teacher, corpus_tokens[:4096])
        assert ppl < 64  # far below the 256-way uniform baseline

    def test_training_is_seeded(self, corpus_tokens):
        cfg = tm.ModelConfig(n_layers=1, d_model=32, n_heads=2, d_ffn=64)
        train = tm.TrainConfig(steps=5, batch_size=4, seed=7)
        m1, l1 = tm.train_teacher(cfg, corpus_tokens[:5000], train)
        m2, l2 = tm.train_teacher(cfg, corpus_tokens[:5000], train)
        assert l1 == l2
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)


class TestQuantizedModel:
    def test_quant_layer_inventory(self, mini_teacher):
        layers = mini_teacher.quant_layers()
        assert len(layers) == 6 * mini_teacher.config.n_layers
        names = {n.rsplit(".", 1)[-1] for n in layers}
        assert names == {"q", "k", "v", "o", "ffn_up", "ffn_down"}

    def test_fdb_init_matches_asymmetric_rtn_exactly(self, mini_teacher, corpus_tokens):
        s_fdb = tm.quantized_from(mini_teacher, quant_mode="fdb")
        s_rtn = tm.quantized_from(mini_teacher, quant_mode="rtn")
        toks = corpus_tokens[:1024]
        assert tm.perplexity(s_fdb, toks) == tm.perplexity(s_rtn, toks)

    def test_fdb_weight_matches_numpy_path(self, mini_teacher):
        student = tm.quantized_from(mini_teacher, quant_mode="fdb")
        for layer in student.quant_layers().values():
            w_torch = layer.reconstructed_weight().detach().numpy()
            w_numpy = qc.fdb_reconstruct(layer.fdb_payload())
            assert np.array_equal(w_torch, w_numpy)

    def test_quantization_hurts_but_not_fatally(self, mini_teacher, corpus_tokens):
        toks = corpus_tokens[:4096]
        ppl_fp = tm.perplexity(mini_teacher, toks)
        ppl_fdb = tm.perplexity(
            tm.quantized_from(mini_teacher, quant_mode="fdb"), toks
        )
        ppl_sign = tm.perplexity(
            tm.quantized_from(mini_teacher, quant_mode="sign"), toks
        )
        assert ppl_fp < ppl_fdb < ppl_sign

    def test_only_alphas_trainable_in_fdb(self, mini_teacher):
        student = tm.quantized_from(mini_teacher, quant_mode="fdb")
        for layer in student.quant_layers().values():
            trainable = {
                n for n, p in layer.named_parameters() if p.requires_grad
            }
            assert trainable == {"alpha1", "alpha2"}

    def test_ste_gradients_reach_alphas_only(self, mini_teacher):
        student = tm.quantized_from(mini_teacher, quant_mode="fdb")
        logits = student(torch.arange(16, dtype=torch.long))
        logits.sum().backward()
        for layer in student.quant_layers().values():
            assert layer.alpha1.grad is not None
            assert layer.alpha2.grad is not None
            assert not layer.latent.requires_grad

    def test_projection_restores_ordering(self, mini_teacher):
        student = tm.quantized_from(mini_teacher, quant_mode="fdb")
        layer = next(iter(student.quant_layers().values()))
        with torch.no_grad():
            layer.alpha2.fill_(0.5)  # violates alpha2 < 0
        student.project_scales_()
        a1 = layer.alpha1.detach()
        a2 = layer.alpha2.detach()
        live = ~layer.degenerate
        assert (a2[live] < 0).all()
        assert (a1[live] + a2[live] > 0).all()


class TestSampling:
    def test_sample_deterministic(self, mini_teacher):
        a = tm.sample(mini_teacher, [10], 30, seed=5)
        b = tm.sample(mini_teacher, [10], 30, seed=5)
        c = tm.sample(mini_teacher, [10], 30, seed=6)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_sample_batch_shape(self, mini_teacher):
        out = tm.sample_batch(mini_teacher, 4, 12, seed=0)
        assert out.shape == (4, 12)
        assert (out[:, 0] == 10).all()

    def test_rejects_nonpositive_temperature(self, mini_teacher):
        with pytest.raises(ValueError, match="temperature"):
            tm.sample(mini_teacher, [10], 1, temperature=0.0)
