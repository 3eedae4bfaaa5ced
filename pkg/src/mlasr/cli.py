"""Command-line entry points.

Two programs share this module: `mlasr` (recognizer training, decoding,
scoring, and the experiment harness) and `featex` (the bottleneck front
end).  Config files everywhere use the same key=value format as
experiment specs; recognizer commands read the training keys (epochs,
ctc_weight, learn_rate, clip_norm, model.*) and ignore the rest, featex
reads bare SbnConfig keys.

Checkpoints carry their own architecture and vocabulary, so commands
with --init reject model.* overrides instead of silently dropping them.
"""

import argparse
import csv
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import decoding, experiments, model as modeling, sbn as sbnmod, training
from .data import load_corpus, write_feature_archive, write_manifest
from .features import SbnConfig, conversation_mean_subtract, raw_sbn_features
from .training import MtlConfig, TransferPlan
from .vocab import Vocabulary


def _config_keys(text):
    keys = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#") and "=" in line:
            keys.add(line.partition("=")[0].strip())
    return keys


def _read_exp_config(path):
    """-> (ExperimentSpec, set of keys the file actually sets)."""
    if path is None:
        return experiments.ExperimentSpec(), set()
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return experiments.parse_experiment_spec(text), _config_keys(text)


def _read_sbn_config(path):
    if path is None:
        return SbnConfig()
    types = {f.name: type(getattr(SbnConfig(), f.name)) for f in fields(SbnConfig)}
    kwargs = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ValueError(f"{path}:{ln}: unknown sbn key {key!r}")
            kwargs[key] = types[key](value.strip())
    return SbnConfig(**kwargs)


def _load_manifests(paths, stage):
    utts = []
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(f"{stage}: missing manifest {p}")
        utts.extend(load_corpus(p))
    return utts


def _mtl_from(spec, seed, epochs=None):
    return MtlConfig(ctc_weight=spec.ctc_weight, learn_rate=spec.learn_rate,
                     clip_norm=spec.clip_norm,
                     epochs=spec.epochs if epochs is None else epochs,
                     seed=seed)


def _init_or_fresh(args, spec, utts):
    if args.init:
        if spec.model:
            raise SystemExit("model.* settings conflict with --init "
                             "(architecture comes from the checkpoint)")
        return modeling.load_model(args.init)
    vocab = Vocabulary.from_utterances(utts)
    feat_dim = utts[0].features.shape[1]
    cfg = modeling.ModelConfig(feat_dim=feat_dim, **spec.model)
    return modeling.init_model(cfg, vocab, seed=args.seed)


def _finish_training(args, params, trace):
    modeling.save_model(args.out, params)
    trace_path = os.path.splitext(args.out)[0] + ".trace.csv"
    training.write_loss_trace(trace_path, trace)
    for epoch, mean_loss, _, _ in trace:
        print(f"epoch {epoch}: loss {mean_loss:.4f}")
    print(f"wrote {args.out} and {trace_path}")


def _cmd_train(args):
    spec, _ = _read_exp_config(args.config)
    utts = _load_manifests(args.manifest, "train")
    params = _init_or_fresh(args, spec, utts)
    params, trace = training.train(params, utts, _mtl_from(spec, args.seed))
    _finish_training(args, params, trace)


def _cmd_train_multi(args):
    spec, _ = _read_exp_config(args.config)
    utts = _load_manifests(args.manifest, "train-multi")
    params = _init_or_fresh(args, spec, utts)
    corpora = {}
    for u in utts:
        corpora.setdefault(u.language, []).append(u)
    params, trace = training.train_multilingual(params, corpora,
                                                _mtl_from(spec, args.seed))
    _finish_training(args, params, trace)


def _cmd_finetune(args):
    spec, keys = _read_exp_config(args.config)
    utts = _load_manifests(args.manifest, "finetune")
    params = modeling.load_model(args.init)
    epochs = spec.epochs if "epochs" in keys else 5
    params, trace = training.fine_tune(params, utts, _mtl_from(spec, args.seed,
                                                               epochs=epochs))
    _finish_training(args, params, trace)


def _cmd_transfer(args):
    spec, _ = _read_exp_config(args.config)
    utts = _load_manifests(args.manifest, "transfer")
    pooled = modeling.load_model(args.init)
    plan = TransferPlan(args.variant, spec.phase2_epochs, spec.phase3_epochs)
    params, trace = training.language_transfer(pooled, utts, plan,
                                               _mtl_from(spec, args.seed))
    _finish_training(args, params, trace)


def _cmd_decode(args):
    params = modeling.load_model(args.model)
    utts = _load_manifests(args.manifest, "decode")
    mask = (params.vocab.charset_mask(args.charset_mask)
            if args.charset_mask else None)
    cfg = decoding.BeamConfig(width=args.beam, alpha=args.alpha,
                              max_length=args.max_length, mask=mask)
    pairs = []
    for u in utts:
        best, _ = decoding.beam_search(params, u.features, cfg)[0]
        pairs.append((u.utt_id, best))
    decoding.write_hypotheses(args.out, sorted(pairs))
    print(f"decoded {len(pairs)} utterances -> {args.out}")


def _cmd_score(args):
    hyps = decoding.read_hypotheses(args.hyp)
    refs = _load_manifests([args.ref], "score")
    rows, corpus = decoding.score_hypotheses(hyps, refs)
    if args.out:
        decoding.write_score_csv(args.out, rows, corpus)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["utt_id", "cer"])
        for utt_id, value in rows:
            w.writerow([utt_id, repr(value)])
        w.writerow(["corpus", repr(corpus)])


def _cmd_gen_corpus(args):
    languages = [p.strip() for p in args.languages.split(",") if p.strip()]
    paths = experiments.generate_corpora(args.out, languages, args.train_count,
                                         args.eval_count, args.seed)
    for p in paths:
        print(p)


def _cmd_run_exp(args):
    spec = experiments.read_experiment_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seeds=(args.seed,))
    rows = experiments.run_experiment(spec, args.data, args.out)
    for regime, language, fraction, seed, cer in rows:
        print(f"{regime} {language} f={fraction:g} s={seed}: {cer:.2f}")


def _cmd_report(args):
    rows, header = experiments.collect_results(args.in_dir)
    experiments.write_report(args.out, rows, header)
    print(f"wrote {args.out}")


def _add_common(p, *, manifest=True, out=True, config=False, init=False):
    if config:
        p.add_argument("--config", help="key=value config file")
    if manifest:
        p.add_argument("--manifest", action="append", required=True,
                       help="corpus manifest (repeatable)")
    if init:
        p.add_argument("--init", help="starting checkpoint")
    if out:
        p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="mlasr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="monolingual training from scratch or --init")
    _add_common(p, config=True, init=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("train-multi", help="pooled training, corpora grouped by language")
    _add_common(p, config=True, init=True)
    p.set_defaults(fn=_cmd_train_multi)

    p = sub.add_parser("finetune", help="continue a pooled checkpoint on the target language")
    _add_common(p, config=True)
    p.add_argument("--init", required=True, help="pooled checkpoint")
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("transfer", help="re-grow output layers for a new charset")
    p.add_argument("--variant", required=True, choices=sorted(training.TRANSFER_VARIANTS))
    _add_common(p, config=True)
    p.add_argument("--init", required=True, help="pooled checkpoint")
    p.set_defaults(fn=_cmd_transfer)

    p = sub.add_parser("decode", help="joint beam search over a manifest")
    p.add_argument("--model", required=True)
    _add_common(p)
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--max-length", type=int, default=40)
    p.add_argument("--charset-mask", metavar="LANG",
                   help="restrict output characters to this language's charset")
    p.set_defaults(fn=_cmd_decode)

    p = sub.add_parser("score", help="per-utterance and corpus %%CER")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True, help="reference manifest")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_score)

    p = sub.add_parser("gen-corpus", help="write the synthetic corpora")
    p.add_argument("--languages", default="LA,LB,LC,LD")
    p.add_argument("--train-count", type=int, default=400)
    p.add_argument("--eval-count", type=int, default=100)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gen_corpus)

    p = sub.add_parser("run-exp", help="run one experiment spec end to end")
    p.add_argument("--spec", required=True)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="replace the spec's seed list with this one seed")
    p.set_defaults(fn=_cmd_run_exp)

    p = sub.add_parser("report", help="merge results.csv trees into a markdown report")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_report)

    args = ap.parse_args(argv)
    args.fn(args)
    return 0


# ----------------------------------------------------------------- featex

def _write_features(out_manifest, utts, feats):
    """Archive + manifest next to each other; phone targets are dropped
    because the frame rate changed."""
    stem = os.path.splitext(os.path.basename(out_manifest))[0]
    directory = os.path.dirname(os.path.abspath(out_manifest))
    os.makedirs(directory, exist_ok=True)
    farc = f"{stem}.farc"
    write_feature_archive(os.path.join(directory, farc),
                          [(u.utt_id, f) for u, f in zip(utts, feats)])
    write_manifest(out_manifest, [(u.utt_id, farc, u.language, u.transcript)
                                  for u in utts])
    print(f"wrote {out_manifest} ({len(utts)} utterances)")


def _cms_corpus(utts):
    flat = conversation_mean_subtract([u.features for u in utts])
    return [replace(u, features=f) for u, f in zip(utts, flat)]


def _cmd_fbank(args):
    cfg = _read_sbn_config(args.config)
    utts = _load_manifests(args.manifest, "fbank")
    feats = [raw_sbn_features(np.asarray(u.features).ravel(), args.rate, cfg)
             for u in utts]
    _write_features(args.out, utts, feats)


def _cmd_sbn_train(args):
    cfg = _read_sbn_config(args.config)
    pooled = []
    for path in args.manifest:
        pooled.extend(_cms_corpus(_load_manifests([path], "sbn-train")))
    params, losses = sbnmod.train_sbn(pooled, cfg, seed=args.seed)
    sbnmod.save_sbn(args.out, params)
    for epoch, loss in enumerate(losses):
        print(f"epoch {epoch}: loss {loss:.4f}")
    print(f"wrote {args.out}")


def _cmd_sbn_extract(args):
    params = sbnmod.load_sbn(args.params)
    utts = _cms_corpus(_load_manifests(args.manifest, "sbn-extract"))
    feats = [sbnmod.extract_sbn(u.features, params) for u in utts]
    _write_features(args.out, utts, feats)


def featex_main(argv=None):
    ap = argparse.ArgumentParser(prog="featex")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fbank", help="waveform archive -> 37-d features")
    p.add_argument("--config", help="key=value SbnConfig file")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--rate", type=int, default=8000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_fbank)

    p = sub.add_parser("sbn-train", help="train the bottleneck net on pooled corpora")
    p.add_argument("--config", help="key=value SbnConfig file")
    p.add_argument("--manifest", action="append", required=True,
                   help="corpus manifest; mean subtraction is per manifest")
    p.add_argument("--out", required=True, help="front-end checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_sbn_train)

    p = sub.add_parser("sbn-extract", help="raw 37-d manifest -> 30-d bottleneck manifest")
    p.add_argument("--params", required=True, help="trained front-end checkpoint")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_sbn_extract)

    args = ap.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
