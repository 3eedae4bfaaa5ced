"""Interpolated objective, SGD regimes, fine-tuning, language transfer.

Oracles: the interpolation is checked against hand arithmetic and exact
linearity; the full per-utterance loss gradient is checked against
central differences; transfer freezing is checked by bit-equality of
carried-over tensors against the pooled model, step by step.
"""

import numpy as np
import pytest

from mlasr import autodiff as ad
from mlasr import model as modeling
from mlasr import training
from mlasr.data import Utterance
from mlasr.training import MtlConfig, TransferPlan
from mlasr.vocab import Vocabulary

FEAT = 4

# one orthogonal direction per character keeps tiny corpora learnable
PROTO = {
    "a": np.array([1.0, 0.0, 0.0, 0.0]),
    "b": np.array([0.0, 1.0, 0.0, 0.0]),
    "c": np.array([0.0, 0.0, 1.0, 0.0]),
    "d": np.array([0.0, 0.0, 0.0, 1.0]),
}


def micro_config():
    return modeling.ModelConfig(feat_dim=FEAT, enc_layers=1, enc_hidden=4,
                                enc_proj=4, att_dim=4, att_channels=2,
                                att_width=3, dec_hidden=4, emb_dim=3, ctc_dim=4)


def make_utt(rng, uid, lang, chars, length=None):
    n = int(length or rng.integers(2, 5))
    text = "".join(rng.choice(sorted(chars), size=n))
    rows = [PROTO[ch] + 0.05 * rng.standard_normal(FEAT) for ch in text for _ in range(3)]
    return Utterance(uid, lang, text, np.asarray(rows, dtype=np.float32))


def make_corpus(lang, chars, n, seed):
    rng = np.random.default_rng(seed)
    return [make_utt(rng, f"{lang}-{i:03d}", lang, chars) for i in range(n)]


def vocab_for(*corpora):
    utts = [u for c in corpora for u in c]
    return Vocabulary.from_utterances(utts)


def fresh_model(vocab, seed=0):
    return modeling.init_model(micro_config(), vocab, seed=seed)


class TestMtlLoss:
    def test_pure_ctc_endpoint(self):
        c, a = ad.constant(np.array(2.5)), ad.constant(np.array(7.0))
        assert float(training.mtl_loss(c, a, 1.0).value) == 2.5

    def test_pure_attention_endpoint(self):
        c, a = ad.constant(np.array(2.5)), ad.constant(np.array(7.0))
        assert float(training.mtl_loss(c, a, 0.0).value) == 7.0

    def test_midpoint_arithmetic(self):
        # negated log-probs -2 and -4 interpolate to -(-3)
        c, a = ad.constant(np.array(2.0)), ad.constant(np.array(4.0))
        assert float(training.mtl_loss(c, a, 0.5).value) == 3.0

    @pytest.mark.parametrize("w", [0.0, 0.125, 0.3, 0.5, 0.875, 1.0])
    def test_exact_linearity_in_weight(self, w):
        c, a = ad.constant(np.array(-1.7)), ad.constant(np.array(0.9))
        lw = float(training.mtl_loss(c, a, w).value)
        l1 = float(training.mtl_loss(c, a, 1.0).value)
        l0 = float(training.mtl_loss(c, a, 0.0).value)
        assert lw == w * l1 + (1.0 - w) * l0

    @pytest.mark.parametrize("w", [-0.1, 1.1, 2.0])
    def test_weight_out_of_range(self, w):
        c, a = ad.constant(np.array(1.0)), ad.constant(np.array(1.0))
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            training.mtl_loss(c, a, w)

    def test_gradient_splits_by_weight(self):
        c = ad.parameter(np.array(1.0), name="c")
        a = ad.parameter(np.array(2.0), name="a")
        ad.backward(training.mtl_loss(c, a, 0.3), [c, a])
        assert float(c.grad) == pytest.approx(0.3, abs=1e-15)
        assert float(a.grad) == pytest.approx(0.7, abs=1e-15)


class TestUtteranceLoss:
    def test_matches_manual_composition(self):
        from mlasr import ctc as ctcmod
        corpus = make_corpus("LA", "ab", 1, seed=1)
        vocab = vocab_for(corpus)
        params = fresh_model(vocab)
        loss, ctc_val, att_val = training.utterance_loss(params, corpus[0], 0.4)
        enc = modeling.encode(params, corpus[0].features)
        labels = vocab.encode(corpus[0].transcript)
        want_ctc = float(ctcmod.ctc_loss(modeling.ctc_head(params, enc), labels).value)
        want_att = float(modeling.attention_nll(params, enc, labels).value)
        assert ctc_val == want_ctc
        assert att_val == want_att
        assert float(loss.value) == pytest.approx(0.4 * want_ctc + 0.6 * want_att, rel=1e-15)

    def test_missing_character_names_utterance(self):
        vocab = Vocabulary([("a", ["LA"]), ("b", ["LA"])])
        params = fresh_model(vocab)
        utt = Utterance("LA-00042", "LA", "abd",
                        np.zeros((9, FEAT), dtype=np.float32))
        with pytest.raises(ValueError, match=r"LA-00042.*'d'"):
            training.utterance_loss(params, utt, 0.5)

    def test_finite_difference_full_objective(self):
        corpus = make_corpus("LA", "ab", 1, seed=5)
        vocab = vocab_for(corpus)
        params = fresh_model(vocab, seed=3)
        report = ad.grad_check(
            lambda: training.utterance_loss(params, corpus[0], 0.5)[0],
            params.all_params(), step=1e-4)
        assert report.max_rel_err < 1e-4, report


class TestTrain:
    def test_zero_epochs_bit_exact(self):
        corpus = make_corpus("LA", "ab", 3, seed=2)
        vocab = vocab_for(corpus)
        params = fresh_model(vocab)
        before = params.snapshot()
        _, trace = training.train(params, corpus, MtlConfig(epochs=0))
        assert trace == []
        after = params.snapshot()
        assert all(np.array_equal(before[n], after[n]) for n in before)

    def test_vocabulary_check_precedes_training(self):
        vocab = Vocabulary([("a", ["LA"]), ("b", ["LA"])])
        params = fresh_model(vocab)
        bad = Utterance("LA-bad", "LA", "ac", np.zeros((6, FEAT), dtype=np.float32))
        before = params.snapshot()
        with pytest.raises(ValueError, match=r"LA-bad.*'c'"):
            training.train(params, make_corpus("LA", "ab", 2, seed=0) + [bad],
                           MtlConfig(epochs=1))
        after = params.snapshot()
        assert all(np.array_equal(before[n], after[n]) for n in before)

    def test_deterministic_given_seed(self):
        corpus = make_corpus("LA", "ab", 4, seed=7)
        vocab = vocab_for(corpus)
        cfg = MtlConfig(epochs=2, seed=11)
        p1 = fresh_model(vocab)
        _, t1 = training.train(p1, corpus, cfg)
        p2 = fresh_model(vocab)
        _, t2 = training.train(p2, corpus, cfg)
        assert t1 == t2
        s1, s2 = p1.snapshot(), p2.snapshot()
        assert all(np.array_equal(s1[n], s2[n]) for n in s1)

    def test_seed_changes_visit_order(self):
        corpus = make_corpus("LA", "ab", 6, seed=7)
        vocab = vocab_for(corpus)
        p1 = fresh_model(vocab)
        _, t1 = training.train(p1, corpus, MtlConfig(epochs=1, seed=1))
        p2 = fresh_model(vocab)
        _, t2 = training.train(p2, corpus, MtlConfig(epochs=1, seed=2))
        s1, s2 = p1.snapshot(), p2.snapshot()
        assert any(not np.array_equal(s1[n], s2[n]) for n in s1)

    def test_loss_decreases(self):
        corpus = make_corpus("LA", "ab", 6, seed=3)
        vocab = vocab_for(corpus)
        params = fresh_model(vocab)
        _, trace = training.train(params, corpus, MtlConfig(epochs=8, seed=0))
        assert trace[-1][1] < trace[0][1]

    def test_trace_rows_interpolate_terms(self):
        corpus = make_corpus("LA", "ab", 3, seed=4)
        vocab = vocab_for(corpus)
        params = fresh_model(vocab)
        w = 0.3
        _, trace = training.train(params, corpus, MtlConfig(ctc_weight=w, epochs=3))
        assert [row[0] for row in trace] == [0, 1, 2]
        for _, mean_loss, mean_ctc, mean_att in trace:
            assert mean_loss == pytest.approx(w * mean_ctc + (1 - w) * mean_att, rel=1e-12)

    def test_trace_csv_round_trip(self, tmp_path):
        import csv
        corpus = make_corpus("LA", "ab", 2, seed=4)
        vocab = vocab_for(corpus)
        params = fresh_model(vocab)
        _, trace = training.train(params, corpus, MtlConfig(epochs=2))
        out = tmp_path / "trace.csv"
        training.write_loss_trace(out, trace)
        with open(out, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["epoch", "mean_loss", "mean_ctc_term", "mean_att_term"]
        got = [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]
        assert got == trace


class TestTrainMultilingual:
    def test_single_language_degenerates_to_train(self):
        corpus = make_corpus("LA", "ab", 4, seed=9)
        vocab = vocab_for(corpus)
        cfg = MtlConfig(epochs=2, seed=5)
        p1 = fresh_model(vocab)
        _, t1 = training.train(p1, corpus, cfg)
        p2 = fresh_model(vocab)
        _, t2 = training.train_multilingual(p2, {"LA": corpus}, cfg)
        assert t1 == t2
        s1, s2 = p1.snapshot(), p2.snapshot()
        assert all(np.array_equal(s1[n], s2[n]) for n in s1)

    def test_pooled_two_languages_converges(self):
        ca = make_corpus("LA", "ab", 4, seed=1)
        cb = make_corpus("LB", "cd", 4, seed=2)
        vocab = vocab_for(ca, cb)
        assert vocab.size == 5  # union charset plus eos
        params = fresh_model(vocab)
        _, trace = training.train_multilingual(
            params, {"LA": ca, "LB": cb}, MtlConfig(epochs=8, seed=0))
        assert trace[-1][1] < trace[0][1]

    def test_pooling_order_is_sorted_not_insertion(self):
        ca = make_corpus("LA", "ab", 3, seed=1)
        cb = make_corpus("LB", "cd", 3, seed=2)
        vocab = vocab_for(ca, cb)
        cfg = MtlConfig(epochs=1, seed=3)
        p1 = fresh_model(vocab)
        _, t1 = training.train_multilingual(p1, {"LA": ca, "LB": cb}, cfg)
        p2 = fresh_model(vocab)
        _, t2 = training.train_multilingual(p2, {"LB": cb, "LA": ca}, cfg)
        assert t1 == t2
        s1, s2 = p1.snapshot(), p2.snapshot()
        assert all(np.array_equal(s1[n], s2[n]) for n in s1)


class TestFineTune:
    def pooled_setup(self):
        ca = make_corpus("LA", "abc", 3, seed=1)
        cb = make_corpus("LB", "bcd", 3, seed=2)
        vocab = vocab_for(ca, cb)
        return fresh_model(vocab), vocab

    def test_zero_epochs_unchanged(self):
        params, vocab = self.pooled_setup()
        target = make_corpus("LC", "ad", 3, seed=3)
        before = params.snapshot()
        training.fine_tune(params, target, MtlConfig(epochs=0))
        after = params.snapshot()
        assert all(np.array_equal(before[n], after[n]) for n in before)

    def test_vocabulary_unchanged(self):
        params, vocab = self.pooled_setup()
        target = make_corpus("LC", "ad", 3, seed=3)
        training.fine_tune(params, target, MtlConfig(epochs=1))
        assert params.vocab == vocab

    def test_compatible_charset_trains(self):
        params, _ = self.pooled_setup()
        target = make_corpus("LC", "ad", 4, seed=3)
        _, trace = training.fine_tune(params, target, MtlConfig(epochs=4))
        assert len(trace) == 4
        assert trace[-1][1] < trace[0][1]

    def test_incompatible_charset_directs_to_transfer(self):
        params, _ = self.pooled_setup()
        # 'e' and 'f' were never seen by the pooled model
        target = [Utterance("LD-000", "LD", "aef",
                            np.zeros((9, FEAT), dtype=np.float32))]
        with pytest.raises(ValueError, match=r"'e', 'f'.*language_transfer"):
            training.fine_tune(params, target, MtlConfig(epochs=1))


class TestLanguageTransfer:
    def pooled(self, seed=0):
        ca = make_corpus("LA", "ab", 3, seed=1)
        cb = make_corpus("LB", "bc", 3, seed=2)
        vocab = vocab_for(ca, cb)
        return fresh_model(vocab, seed=seed)

    def target(self, n=3):
        return make_corpus("LD", "cd", n, seed=4)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="unknown transfer variant.*att-ctc-out"):
            TransferPlan(variant="everything")

    def test_variant_group_semantics(self):
        assert TransferPlan("out").reinit_groups == ("ctc_out", "out")
        assert TransferPlan("att-out").reinit_groups == ("attention", "ctc_out", "out")
        assert TransferPlan("ctc-out").reinit_groups == ("ctc_internal", "ctc_out", "out")
        assert TransferPlan("att-ctc-out").reinit_groups == (
            "attention", "ctc_internal", "ctc_out", "out")

    def test_vocabulary_replaced_by_target(self):
        pooled = self.pooled()
        new, _ = training.language_transfer(
            pooled, self.target(), TransferPlan("out", 1, 0), MtlConfig(epochs=0))
        assert new.vocab.charset("LD") == {"c", "d"}
        assert new.vocab.size == 3

    @pytest.mark.parametrize("variant", sorted(training.TRANSFER_VARIANTS))
    def test_phase2_keeps_carried_groups_bit_identical(self, variant):
        pooled = self.pooled()
        before = pooled.snapshot()
        plan = TransferPlan(variant, phase2_epochs=3, phase3_epochs=0)
        new, trace = training.language_transfer(
            pooled, self.target(), plan, MtlConfig(epochs=0, seed=8))
        assert len(trace) == 3
        frozen = [g for g in modeling.GROUPS if g not in plan.reinit_groups]
        for g in frozen:
            for name in new.group_names(g):
                assert np.array_equal(new[name].value, before[name]), name

    def test_phase2_stepwise_freezing(self):
        # drive the phase-2 loop one epoch at a time and look between steps
        pooled = self.pooled()
        plan = TransferPlan("att-out", 1, 0)
        new, _ = training.language_transfer(
            pooled, self.target(1), plan, MtlConfig(epochs=0, seed=8))
        frozen_names = [n for g in modeling.GROUPS if g not in plan.reinit_groups
                        for n in new.group_names(g)]
        fresh = [t for g in plan.reinit_groups for t in new.group(g)]
        reference = {n: new[n].value.copy() for n in frozen_names}
        for step in range(6):
            training.run_epochs(new, self.target(1), MtlConfig(), 1, seed=step,
                                tensors=fresh)
            for n in frozen_names:
                assert np.array_equal(new[n].value, reference[n]), (step, n)

    def test_reinitialized_groups_change(self):
        pooled = self.pooled()
        before = pooled.snapshot()
        new, _ = training.language_transfer(
            pooled, self.target(), TransferPlan("att-out", 0, 0), MtlConfig(epochs=0))
        assert any(not np.array_equal(new[n].value, before[n])
                   for n in new.group_names("attention"))

    def test_phase3_updates_everything(self):
        pooled = self.pooled()
        before = pooled.snapshot()
        new, trace = training.language_transfer(
            pooled, self.target(), TransferPlan("out", 1, 2), MtlConfig(epochs=0))
        assert [row[0] for row in trace] == [0, 1, 2]
        changed = [n for n in new.group_names("encoder")
                   if not np.array_equal(new[n].value, before[n])]
        assert changed

    def test_input_model_untouched(self):
        pooled = self.pooled()
        before = pooled.snapshot()
        training.language_transfer(
            pooled, self.target(), TransferPlan("out", 2, 1), MtlConfig(epochs=0))
        after = pooled.snapshot()
        assert all(np.array_equal(before[n], after[n]) for n in before)

    def test_deterministic(self):
        cfg = MtlConfig(epochs=0, seed=21)
        plan = TransferPlan("ctc-out", 2, 1)
        n1, t1 = training.language_transfer(self.pooled(), self.target(), plan, cfg)
        n2, t2 = training.language_transfer(self.pooled(), self.target(), plan, cfg)
        assert t1 == t2
        s1, s2 = n1.snapshot(), n2.snapshot()
        assert all(np.array_equal(s1[n], s2[n]) for n in s1)
