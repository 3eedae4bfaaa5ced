"""End-to-end smoke tests for the mlasr and featex entry points.

Everything runs in-process through main(argv)/featex_main(argv) on
4-utterance corpora and a micro recognizer, checking artifact layout and
command wiring rather than accuracy.
"""

import os

import numpy as np
import pytest

from mlasr import cli, decoding, experiments
from mlasr import model as modeling
from mlasr import training
from mlasr.data import load_corpus, write_feature_archive, write_manifest

MODEL_LINES = ["model.enc_layers = 1", "model.enc_hidden = 6", "model.enc_proj = 6",
               "model.att_dim = 4", "model.att_channels = 2", "model.att_width = 3",
               "model.dec_hidden = 6", "model.emb_dim = 4", "model.ctc_dim = 6"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli-corpora")
    experiments.generate_corpora(str(d), ["LA", "LB", "LC", "LD"], 4, 2, seed=11)
    return str(d)


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "micro.cfg"
    p.write_text("\n".join(["epochs = 1"] + MODEL_LINES) + "\n")
    return str(p)


@pytest.fixture(scope="module")
def mono_ckpt(data_dir, config_path, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("mono") / "la.s2sm")
    cli.main(["train", "--config", config_path,
              "--manifest", os.path.join(data_dir, "LA-train.tsv"),
              "--out", out, "--seed", "0"])
    return out


@pytest.fixture(scope="module")
def multi_ckpt(data_dir, config_path, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("multi") / "pooled.s2sm")
    cli.main(["train-multi", "--config", config_path,
              "--manifest", os.path.join(data_dir, "LA-train.tsv"),
              "--manifest", os.path.join(data_dir, "LB-train.tsv"),
              "--manifest", os.path.join(data_dir, "LC-train.tsv"),
              "--out", out, "--seed", "0"])
    return out


class TestTrain:
    def test_writes_checkpoint_and_trace(self, mono_ckpt):
        assert os.path.exists(mono_ckpt)
        params = modeling.load_model(mono_ckpt)
        assert params.vocab.languages() == ["LA"]
        trace = os.path.splitext(mono_ckpt)[0] + ".trace.csv"
        with open(trace) as f:
            lines = f.read().splitlines()
        assert lines[0] == "epoch,mean_loss,mean_ctc_term,mean_att_term"
        assert len(lines) == 2 and lines[1].startswith("0,")

    def test_missing_manifest(self, config_path, tmp_path):
        with pytest.raises(FileNotFoundError, match="train: missing manifest"):
            cli.main(["train", "--config", config_path,
                      "--manifest", str(tmp_path / "nope.tsv"),
                      "--out", str(tmp_path / "m.s2sm")])

    def test_init_conflicts_with_model_overrides(self, data_dir, config_path,
                                                 mono_ckpt, tmp_path):
        with pytest.raises(SystemExit, match="conflict with --init"):
            cli.main(["train", "--config", config_path, "--init", mono_ckpt,
                      "--manifest", os.path.join(data_dir, "LA-train.tsv"),
                      "--out", str(tmp_path / "m.s2sm")])

    def test_resume_from_checkpoint(self, data_dir, mono_ckpt, tmp_path):
        cfg = tmp_path / "resume.cfg"
        cfg.write_text("epochs = 1\n")
        out = str(tmp_path / "resumed.s2sm")
        cli.main(["train", "--config", str(cfg), "--init", mono_ckpt,
                  "--manifest", os.path.join(data_dir, "LA-train.tsv"),
                  "--out", out, "--seed", "1"])
        assert modeling.load_model(out).vocab == modeling.load_model(mono_ckpt).vocab


class TestTrainMulti:
    def test_vocabulary_spans_all_languages(self, multi_ckpt):
        vocab = modeling.load_model(multi_ckpt).vocab
        assert vocab.languages() == ["LA", "LB", "LC"]
        assert vocab.size == len(set("abcdefgh" + "efghijkl" + "abghijkl")) + 1


class TestFinetune:
    def test_default_is_five_epochs(self, data_dir, multi_ckpt, tmp_path):
        out = str(tmp_path / "tuned.s2sm")
        cli.main(["finetune", "--init", multi_ckpt,
                  "--manifest", os.path.join(data_dir, "LC-train.tsv"),
                  "--out", out, "--seed", "0"])
        trace = os.path.splitext(out)[0] + ".trace.csv"
        with open(trace) as f:
            assert len(f.read().splitlines()) == 1 + 5

    def test_config_epochs_win(self, data_dir, multi_ckpt, tmp_path):
        cfg = tmp_path / "ft.cfg"
        cfg.write_text("epochs = 1\n")
        out = str(tmp_path / "tuned1.s2sm")
        cli.main(["finetune", "--config", str(cfg), "--init", multi_ckpt,
                  "--manifest", os.path.join(data_dir, "LC-train.tsv"),
                  "--out", out])
        trace = os.path.splitext(out)[0] + ".trace.csv"
        with open(trace) as f:
            assert len(f.read().splitlines()) == 1 + 1


class TestTransfer:
    def test_new_charset_checkpoint(self, data_dir, multi_ckpt, tmp_path):
        cfg = tmp_path / "tr.cfg"
        cfg.write_text("phase2_epochs = 1\nphase3_epochs = 1\n")
        out = str(tmp_path / "ld.s2sm")
        cli.main(["transfer", "--variant", "out", "--config", str(cfg),
                  "--init", multi_ckpt,
                  "--manifest", os.path.join(data_dir, "LD-train.tsv"),
                  "--out", out, "--seed", "0"])
        vocab = modeling.load_model(out).vocab
        assert "m" in vocab and "c" not in vocab
        trace = os.path.splitext(out)[0] + ".trace.csv"
        with open(trace) as f:
            assert len(f.read().splitlines()) == 1 + 2

    def test_variant_is_checked_by_argparse(self, multi_ckpt, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["transfer", "--variant", "everything", "--init", multi_ckpt,
                      "--manifest", "x.tsv", "--out", str(tmp_path / "m.s2sm")])


@pytest.fixture(scope="module")
def hyp_path(data_dir, mono_ckpt, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("dec") / "la.hyp")
    cli.main(["decode", "--model", mono_ckpt,
              "--manifest", os.path.join(data_dir, "LA-eval.tsv"),
              "--beam", "2", "--alpha", "0.3", "--max-length", "6",
              "--out", out])
    return out


class TestDecodeAndScore:
    def test_hypothesis_file_layout(self, hyp_path, data_dir):
        hyps = decoding.read_hypotheses(hyp_path)
        evals = load_corpus(os.path.join(data_dir, "LA-eval.tsv"))
        assert set(hyps) == {u.utt_id for u in evals}
        with open(hyp_path) as f:
            ids = [line.split("\t")[0] for line in f]
        assert ids == sorted(ids)

    def test_charset_mask_restricts_output(self, data_dir, multi_ckpt, tmp_path):
        out = str(tmp_path / "masked.hyp")
        cli.main(["decode", "--model", multi_ckpt,
                  "--manifest", os.path.join(data_dir, "LC-eval.tsv"),
                  "--beam", "2", "--max-length", "6", "--charset-mask", "LC",
                  "--out", out])
        text = "".join(decoding.read_hypotheses(out).values())
        assert set(text) <= set("abghijkl")

    def test_score_to_stdout(self, hyp_path, data_dir, capsys):
        cli.main(["score", "--hyp", hyp_path,
                  "--ref", os.path.join(data_dir, "LA-eval.tsv")])
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "utt_id,cer"
        assert lines[-1].startswith("corpus,")
        assert len(lines) == 1 + 2 + 1

    def test_score_to_file_matches_stdout(self, hyp_path, data_dir, tmp_path, capsys):
        out = tmp_path / "scores.csv"
        cli.main(["score", "--hyp", hyp_path,
                  "--ref", os.path.join(data_dir, "LA-eval.tsv"),
                  "--out", str(out)])
        cli.main(["score", "--hyp", hyp_path,
                  "--ref", os.path.join(data_dir, "LA-eval.tsv")])
        stdout = capsys.readouterr().out.replace("\r\n", "\n")
        assert out.read_text().replace("\r\n", "\n") == stdout


class TestHarnessCommands:
    def test_gen_corpus(self, tmp_path, capsys):
        cli.main(["gen-corpus", "--languages", "LA", "--train-count", "3",
                  "--eval-count", "2", "--out", str(tmp_path), "--seed", "4"])
        printed = capsys.readouterr().out.splitlines()
        assert printed == [str(tmp_path / "LA-train.tsv"), str(tmp_path / "LA-eval.tsv")]
        assert len(load_corpus(printed[0])) == 3

    def test_run_exp_and_report(self, data_dir, tmp_path, capsys):
        spec = tmp_path / "exp.spec"
        spec.write_text("\n".join(["regime = mono-fbank", "languages = LA",
                                   "epochs = 1", "beam_width = 2",
                                   "max_length = 6"] + MODEL_LINES) + "\n")
        out = tmp_path / "run"
        cli.main(["run-exp", "--spec", str(spec), "--data", data_dir,
                  "--out", str(out), "--seed", "9"])
        rows = experiments.read_results(str(out / "results.csv"))
        assert [(r[0], r[3]) for r in rows] == [("mono-fbank", 9)]  # --seed wins
        assert "mono-fbank LA f=1 s=9" in capsys.readouterr().out
        report = tmp_path / "report.md"
        cli.main(["report", "--in", str(tmp_path), "--out", str(report)])
        text = report.read_text()
        assert "## Features and training-data fractions" in text
        assert "- regime=mono-fbank" in text
        assert os.path.exists(tmp_path / "report.csv")


@pytest.fixture(scope="module")
def sbn_ckpt(data_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("sbn")
    cfg = d / "sbn.cfg"
    cfg.write_text("hidden_dim = 8\nhidden_layers = 1\n"
                   "stage1_epochs = 1\njoint_epochs = 1\n")
    out = str(d / "front.sbnp")
    cli.featex_main(["sbn-train", "--config", str(cfg),
                     "--manifest", os.path.join(data_dir, "LA-train.tsv"),
                     "--manifest", os.path.join(data_dir, "LB-train.tsv"),
                     "--out", out, "--seed", "0"])
    return out


class TestFeatex:
    def test_fbank_from_waveforms(self, tmp_path):
        rng = np.random.default_rng(0)
        waves = [("W-0", rng.standard_normal((1600, 1))),
                 ("W-1", rng.standard_normal((2000, 1)))]
        write_feature_archive(str(tmp_path / "waves.farc"), waves)
        write_manifest(str(tmp_path / "waves.tsv"),
                       [("W-0", "waves.farc", "LA", "abc"),
                        ("W-1", "waves.farc", "LA", "de")])
        out = str(tmp_path / "raw.tsv")
        cli.featex_main(["fbank", "--manifest", str(tmp_path / "waves.tsv"),
                         "--out", out, "--rate", "8000"])
        utts = load_corpus(out)
        assert [u.utt_id for u in utts] == ["W-0", "W-1"]
        assert all(u.features.shape[1] == 37 for u in utts)
        assert utts[0].transcript == "abc" and utts[0].phone_labels is None

    def test_sbn_train_then_extract(self, sbn_ckpt, data_dir, tmp_path):
        out = str(tmp_path / "LA-train-bn.tsv")
        cli.featex_main(["sbn-extract", "--params", sbn_ckpt,
                         "--manifest", os.path.join(data_dir, "LA-train.tsv"),
                         "--out", out])
        raw = load_corpus(os.path.join(data_dir, "LA-train.tsv"))
        bn = load_corpus(out)
        assert all(u.features.shape[1] == 30 for u in bn)
        by_id = {u.utt_id: u for u in raw}
        assert all(u.features.shape[0] == -(-by_id[u.utt_id].features.shape[0] // 5)
                   for u in bn)

    def test_extracted_features_train_a_recognizer(self, sbn_ckpt, data_dir,
                                                   config_path, tmp_path):
        bn_manifest = str(tmp_path / "bn.tsv")
        cli.featex_main(["sbn-extract", "--params", sbn_ckpt,
                         "--manifest", os.path.join(data_dir, "LA-train.tsv"),
                         "--out", bn_manifest])
        out = str(tmp_path / "bn.s2sm")
        cli.main(["train", "--config", config_path, "--manifest", bn_manifest,
                  "--out", out])
        assert modeling.load_model(out).config.feat_dim == 30

    def test_sbn_config_rejects_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("dropout = 0.5\n")
        with pytest.raises(ValueError, match="unknown sbn key 'dropout'"):
            cli.featex_main(["sbn-train", "--config", str(cfg),
                             "--manifest", "x.tsv", "--out", str(tmp_path / "o.sbnp")])
