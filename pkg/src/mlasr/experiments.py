"""Experiment driver over the synthetic mini-language corpora.

Five regimes, each producing rows (regime, language, fraction, seed,
corpus %CER):

* mono-fbank      monolingual recognizer on the raw 37-d features
* mono-sbn        bottleneck front end trained on every train language's
                  full corpus (with per-corpus mean subtraction), then a
                  monolingual recognizer on the extracted 30-d features
* multi           one pooled recognizer over the union charset, scored
                  per language
* multi-finetune  pooled model, then fine-tuned on the target language;
                  one row per requested epoch checkpoint, each trained
                  fresh from the pooled checkpoint (plus the pooled
                  baseline row under regime "multi")
* transfer-variant  pooled model adapted to a new-charset target, one
                  row per transfer variant

Train fractions are seeded subsamples of the train manifest; every cell
is a pure function of (spec, corpora, seed), so re-runs reproduce all
artifacts byte for byte.  Artifacts per cell: a checkpoint and a
hypothesis file; per run: results.csv, gnuplot-style curve files, and a
meta.txt recording manifests and seeds for the report header.
"""

import csv
import os
import pathlib
import re
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import decoding
from . import model as modeling
from . import sbn as sbnmod
from . import synth
from . import training
from .data import load_corpus
from .features import SbnConfig, conversation_mean_subtract
from .vocab import Vocabulary

REGIMES = ("mono-fbank", "mono-sbn", "multi", "multi-finetune", "transfer-variant")

# display labels for transfer rows, in report order
TRANSFER_LABELS = {
    "out": "Out",
    "att-out": "Att+Out",
    "ctc-out": "CTC+Out",
    "att-ctc-out": "Att+CTC+Out",
}

_MODEL_KEYS = {f.name for f in fields(modeling.ModelConfig) if f.name != "feat_dim"}
_SBN_KEYS = {f.name for f in fields(SbnConfig)}


@dataclass(frozen=True)
class ExperimentSpec:
    regime: str = "mono-fbank"
    languages: tuple = ("LA",)
    target: str = None
    fractions: tuple = (1.0,)
    seeds: tuple = (0,)
    epochs: int = 10
    finetune_epochs: tuple = (5,)
    phase2_epochs: int = 5
    phase3_epochs: int = 10
    variants: tuple = ("out", "att-out", "ctc-out", "att-ctc-out")
    ctc_weight: float = 0.5
    learn_rate: float = 0.05
    clip_norm: float = 5.0
    beam_width: int = 4
    alpha: float = 0.3
    max_length: int = 16
    model: dict = field(default_factory=dict)   # ModelConfig overrides
    sbn: dict = field(default_factory=dict)     # SbnConfig overrides

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r} (known: {', '.join(REGIMES)})")
        if not self.languages:
            raise ValueError("at least one language required")
        for f_ in self.fractions:
            if not 0.0 < f_ <= 1.0:
                raise ValueError(f"fraction {f_} outside (0, 1]")
        if not self.seeds:
            raise ValueError("at least one seed required")
        if self.regime in ("multi-finetune", "transfer-variant") and not self.target:
            raise ValueError(f"regime {self.regime} needs target=<language>")
        for v in self.variants:
            if v not in TRANSFER_LABELS:
                raise ValueError(f"unknown transfer variant {v!r}")


def parse_experiment_spec(text):
    """key=value lines (# comments allowed) -> ExperimentSpec."""
    raw = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"spec line {ln}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in raw:
            raise ValueError(f"spec line {ln}: duplicate key {key!r}")
        raw[key] = value

    kwargs = {"model": {}, "sbn": {}}
    for key, value in raw.items():
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in _MODEL_KEYS:
                raise ValueError(f"unknown model key {name!r}")
            kwargs["model"][name] = int(value)
        elif key.startswith("sbn."):
            name = key[len("sbn."):]
            if name not in _SBN_KEYS:
                raise ValueError(f"unknown sbn key {name!r}")
            kwargs["sbn"][name] = type(getattr(SbnConfig(), name))(value)
        elif key in ("languages", "variants"):
            kwargs[key] = tuple(p.strip() for p in value.split(",") if p.strip())
        elif key == "fractions":
            kwargs[key] = tuple(float(p) for p in value.split(","))
        elif key in ("seeds", "finetune_epochs"):
            kwargs[key] = tuple(int(p) for p in value.split(","))
        elif key in ("regime", "target"):
            kwargs[key] = value
        elif key in ("epochs", "phase2_epochs", "phase3_epochs", "beam_width", "max_length"):
            kwargs[key] = int(value)
        elif key in ("ctc_weight", "learn_rate", "clip_norm", "alpha"):
            kwargs[key] = float(value)
        else:
            raise ValueError(f"unknown spec key {key!r}")
    return ExperimentSpec(**kwargs)


def read_experiment_spec(path):
    with open(path, encoding="utf-8") as f:
        return parse_experiment_spec(f.read())


# ---------------------------------------------------------------- corpora

def generate_corpora(data_dir, languages, train_count, eval_count, seed, suite=None):
    """Write <lang>-train.tsv and <lang>-eval.tsv (plus archives) per language.

    Per-language seeds are derived from the base seed and the language's
    position in the sorted list, so the emitted bytes depend only on
    (languages, counts, seed).  Returns manifest paths.
    """
    if suite is None:
        suite = synth.default_language_suite()
    out = []
    for i, lang in enumerate(sorted(languages)):
        if lang not in suite:
            raise ValueError(f"unknown language {lang!r} (suite has {', '.join(sorted(suite))})")
        train = synth.generate_utterances(suite[lang], train_count, seed + 1000 * i)
        evals = synth.generate_utterances(suite[lang], eval_count, seed + 1000 * i + 500)
        out.append(synth.write_corpus(data_dir, f"{lang}-train", train))
        out.append(synth.write_corpus(data_dir, f"{lang}-eval", evals))
    return out


def _load(data_dir, lang, role, stage):
    path = os.path.join(data_dir, f"{lang}-{role}.tsv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{stage}: missing manifest {path}")
    return load_corpus(path)


def _subset(utts, fraction, seed):
    """Seeded subsample of round(fraction * n) utterances, at least one."""
    if fraction >= 1.0:
        return list(utts)
    k = max(1, round(fraction * len(utts)))
    order = np.random.default_rng(seed).permutation(len(utts))[:k]
    return [utts[i] for i in sorted(order)]


def _cms(utts):
    flat = conversation_mean_subtract([u.features for u in utts])
    return [replace(u, features=f) for u, f in zip(utts, flat)]


def out_of_charset_rate(hypotheses, charset):
    """Fraction of emitted characters outside the given charset."""
    total = sum(len(h) for h in hypotheses.values())
    if total == 0:
        return 0.0
    bad = sum(1 for h in hypotheses.values() for ch in h if ch not in charset)
    return bad / total


# ------------------------------------------------------------------- cells

def _slug(s):
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", s)


def _cell_name(regime, language, fraction, seed):
    return f"{_slug(regime)}-{language}-f{round(fraction * 1000):04d}-s{seed}"


def _model_config(spec, feat_dim):
    return modeling.ModelConfig(feat_dim=feat_dim, **spec.model)


def _mtl(spec, seed, epochs=None):
    return training.MtlConfig(ctc_weight=spec.ctc_weight, learn_rate=spec.learn_rate,
                              clip_norm=spec.clip_norm,
                              epochs=spec.epochs if epochs is None else epochs,
                              seed=seed)


def _clone(params):
    tensors = {n: ad.parameter(params[n].value.copy(), name=n) for n in params.names()}
    return modeling.ModelParams(params.config, params.vocab, tensors)


class _Run:
    def __init__(self, spec, data_dir, out_dir):
        self.spec = spec
        self.data_dir = data_dir
        self.out_dir = out_dir
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "hyps"), exist_ok=True)
        self.manifests = []

    def load(self, lang, role, stage):
        path = os.path.join(self.data_dir, f"{lang}-{role}.tsv")
        rel = os.path.relpath(path, self.data_dir)
        if rel not in self.manifests:
            self.manifests.append(rel)
        return _load(self.data_dir, lang, role, stage)

    def decode_and_score(self, params, eval_utts, cell):
        cfg = decoding.BeamConfig(width=self.spec.beam_width, alpha=self.spec.alpha,
                                  max_length=self.spec.max_length)
        hyps = {u.utt_id: decoding.beam_search(params, u.features, cfg)[0][0]
                for u in eval_utts}
        decoding.write_hypotheses(os.path.join(self.out_dir, "hyps", cell + ".hyp"),
                                  sorted(hyps.items()))
        _, corpus = decoding.score_hypotheses(hyps, eval_utts)
        return corpus

    def save(self, params, cell):
        modeling.save_model(os.path.join(self.out_dir, "checkpoints", cell + ".s2sm"),
                            params)

    def train_cell(self, utts, vocab, seed, feat_dim):
        params = modeling.init_model(_model_config(self.spec, feat_dim), vocab, seed=seed)
        training.train(params, utts, _mtl(self.spec, seed))
        return params


def _run_mono_fbank(run):
    spec, rows = run.spec, []
    for lang in spec.languages:
        train_full = run.load(lang, "train", f"mono-fbank training ({lang})")
        eval_utts = run.load(lang, "eval", f"mono-fbank scoring ({lang})")
        vocab = Vocabulary.from_utterances(train_full)
        feat_dim = train_full[0].features.shape[1]
        for seed in spec.seeds:
            for fraction in spec.fractions:
                cell = _cell_name("mono-fbank", lang, fraction, seed)
                params = run.train_cell(_subset(train_full, fraction, seed),
                                        vocab, seed, feat_dim)
                run.save(params, cell)
                cer = run.decode_and_score(params, eval_utts, cell)
                rows.append(("mono-fbank", lang, fraction, seed, cer))
    return rows


def _run_mono_sbn(run):
    spec, rows = run.spec, []
    trains = {lang: _cms(run.load(lang, "train", f"mono-sbn feature training ({lang})"))
              for lang in spec.languages}
    evals = {lang: _cms(run.load(lang, "eval", f"mono-sbn scoring ({lang})"))
             for lang in spec.languages}
    cfg = SbnConfig(**spec.sbn)
    for seed in spec.seeds:
        pooled = [u for lang in spec.languages for u in trains[lang]]
        sbn_params, _ = sbnmod.train_sbn(pooled, cfg, seed=seed)
        sbnmod.save_sbn(os.path.join(run.out_dir, "checkpoints", f"sbn-s{seed}.sbnp"),
                        sbn_params)
        for lang in spec.languages:
            train_bn = [replace(u, features=sbnmod.extract_sbn(u.features, sbn_params),
                                phone_labels=None) for u in trains[lang]]
            eval_bn = [replace(u, features=sbnmod.extract_sbn(u.features, sbn_params),
                               phone_labels=None) for u in evals[lang]]
            vocab = Vocabulary.from_utterances(train_bn)
            for fraction in spec.fractions:
                cell = _cell_name("mono-sbn", lang, fraction, seed)
                params = run.train_cell(_subset(train_bn, fraction, seed),
                                        vocab, seed, cfg.bn2_dim)
                run.save(params, cell)
                cer = run.decode_and_score(params, eval_bn, cell)
                rows.append(("mono-sbn", lang, fraction, seed, cer))
    return rows


def _pooled_model(run, trains, vocab, fraction, seed, stage):
    spec = run.spec
    subsets = {lang: _subset(trains[lang], fraction, seed) for lang in spec.languages}
    feat_dim = next(iter(trains.values()))[0].features.shape[1]
    params = modeling.init_model(_model_config(spec, feat_dim), vocab, seed=seed)
    training.train_multilingual(params, subsets, _mtl(spec, seed))
    cell = _cell_name(stage, "pooled", fraction, seed)
    run.save(params, cell)
    return params


def _run_multi(run):
    spec, rows = run.spec, []
    trains = {lang: run.load(lang, "train", f"multi training ({lang})")
              for lang in spec.languages}
    vocab = Vocabulary.from_utterances([u for us in trains.values() for u in us])
    for seed in spec.seeds:
        for fraction in spec.fractions:
            params = _pooled_model(run, trains, vocab, fraction, seed, "multi")
            for lang in spec.languages:
                eval_utts = run.load(lang, "eval", f"multi scoring ({lang})")
                cell = _cell_name("multi", lang, fraction, seed)
                cer = run.decode_and_score(params, eval_utts, cell)
                rows.append(("multi", lang, fraction, seed, cer))
    return rows


def _run_multi_finetune(run):
    spec, rows = run.spec, []
    trains = {lang: run.load(lang, "train", f"multi-finetune pooled training ({lang})")
              for lang in spec.languages}
    vocab = Vocabulary.from_utterances([u for us in trains.values() for u in us])
    target_train = run.load(spec.target, "train", "multi-finetune adaptation")
    target_eval = run.load(spec.target, "eval", "multi-finetune scoring")
    for seed in spec.seeds:
        for fraction in spec.fractions:
            pooled = _pooled_model(run, trains, vocab, fraction, seed, "multi-finetune")
            cell = _cell_name("multi", spec.target, fraction, seed)
            cer = run.decode_and_score(pooled, target_eval, cell)
            rows.append(("multi", spec.target, fraction, seed, cer))
            target_sub = _subset(target_train, fraction, seed)
            for e in spec.finetune_epochs:
                regime = f"multi-finetune:{e}"
                cell = _cell_name(regime, spec.target, fraction, seed)
                tuned = _clone(pooled)
                training.fine_tune(tuned, target_sub, _mtl(spec, seed, epochs=e))
                run.save(tuned, cell)
                cer = run.decode_and_score(tuned, target_eval, cell)
                rows.append((regime, spec.target, fraction, seed, cer))
    return rows


def _run_transfer(run):
    spec, rows = run.spec, []
    trains = {lang: run.load(lang, "train", f"transfer pooled training ({lang})")
              for lang in spec.languages}
    vocab = Vocabulary.from_utterances([u for us in trains.values() for u in us])
    target_train = run.load(spec.target, "train", "transfer adaptation")
    target_eval = run.load(spec.target, "eval", "transfer scoring")
    for seed in spec.seeds:
        for fraction in spec.fractions:
            pooled = _pooled_model(run, trains, vocab, fraction, seed, "transfer")
            target_sub = _subset(target_train, fraction, seed)
            for variant in spec.variants:
                regime = f"transfer:{TRANSFER_LABELS[variant]}"
                cell = _cell_name(regime, spec.target, fraction, seed)
                plan = training.TransferPlan(variant, spec.phase2_epochs,
                                             spec.phase3_epochs)
                adapted, _ = training.language_transfer(pooled, target_sub, plan,
                                                        _mtl(spec, seed))
                run.save(adapted, cell)
                cer = run.decode_and_score(adapted, target_eval, cell)
                rows.append((regime, spec.target, fraction, seed, cer))
    return rows


_REGIME_RUNNERS = {
    "mono-fbank": _run_mono_fbank,
    "mono-sbn": _run_mono_sbn,
    "multi": _run_multi,
    "multi-finetune": _run_multi_finetune,
    "transfer-variant": _run_transfer,
}


def run_experiment(spec, data_dir, out_dir):
    """Execute every (fraction, seed) cell; returns and writes result rows."""
    run = _Run(spec, data_dir, out_dir)
    rows = _REGIME_RUNNERS[spec.regime](run)
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    write_results(os.path.join(out_dir, "results.csv"), rows)
    write_curves(os.path.join(out_dir, "curves"), rows)
    _write_meta(os.path.join(out_dir, "meta.txt"), spec, run.manifests)
    return rows


# ----------------------------------------------------------------- outputs

def write_results(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["regime", "language", "fraction", "seed", "cer"])
        for regime, language, fraction, seed, cer in rows:
            w.writerow([regime, language, repr(float(fraction)), seed, repr(float(cer))])


def read_results(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["regime", "language", "fraction", "seed", "cer"]:
        raise ValueError(f"{path}: not a results file")
    return [(r[0], r[1], float(r[2]), int(r[3]), float(r[4])) for r in rows[1:]]


def write_curves(directory, rows):
    """One gnuplot-style file per (regime, language): fraction vs mean CER."""
    os.makedirs(directory, exist_ok=True)
    series = {}
    for regime, language, fraction, seed, cer in rows:
        series.setdefault((regime, language), {}).setdefault(fraction, []).append(cer)
    for (regime, language), points in sorted(series.items()):
        path = os.path.join(directory, f"{_slug(regime)}-{language}.dat")
        with open(path, "w") as f:
            f.write(f"# {regime} {language}: fraction  mean_cer  n_seeds\n")
            for fraction in sorted(points):
                vals = points[fraction]
                f.write(f"{fraction:g} {np.mean(vals):.6f} {len(vals)}\n")


def _write_meta(path, spec, manifests):
    with open(path, "w") as f:
        f.write(f"regime={spec.regime}\n")
        f.write(f"languages={','.join(spec.languages)}\n")
        if spec.target:
            f.write(f"target={spec.target}\n")
        f.write(f"fractions={','.join(repr(float(x)) for x in spec.fractions)}\n")
        f.write(f"seeds={','.join(str(s) for s in spec.seeds)}\n")
        for m in manifests:
            f.write(f"manifest={m}\n")


def collect_results(in_dir):
    """Gather (rows, header lines) from every results.csv under in_dir."""
    rows, header = [], []
    hits = sorted(str(p) for p in pathlib.Path(in_dir).rglob("results.csv"))
    if not hits:
        raise FileNotFoundError(f"no results.csv under {in_dir}")
    for path in hits:
        rows.extend(read_results(path))
        meta = os.path.join(os.path.dirname(path), "meta.txt")
        if os.path.exists(meta):
            with open(meta) as f:
                for line in f:
                    line = line.strip()
                    if line and line not in header:
                        header.append(line)
    return rows, sorted(header)


# ------------------------------------------------------------------ report

def _aggregate(rows):
    """(regime, language, fraction) -> (mean cer, n seeds)."""
    acc = {}
    for regime, language, fraction, seed, cer in rows:
        acc.setdefault((regime, language, fraction), []).append(cer)
    return {k: (float(np.mean(v)), len(v)) for k, v in acc.items()}


def _finetune_order(regime):
    if regime == "multi":
        return (0, 0)
    return (1, int(regime.partition(":")[2]))


def _transfer_order(regime):
    labels = list(TRANSFER_LABELS.values())
    return labels.index(regime.partition(":")[2])


def _table(lines, keys, agg):
    lines.append("| model | language | fraction | mean %CER | seeds |")
    lines.append("|---|---|---|---|---|")
    for k in keys:
        mean, n = agg[k]
        lines.append(f"| {k[0]} | {k[1]} | {k[2]:g} | {mean:.2f} | {n} |")
    lines.append("")


def emit_report(rows, header):
    """Markdown with one section per regime family; deterministic bytes."""
    agg = _aggregate(rows)
    lines = ["# Synthetic mini-language results", "",
             "Desk-scale synthetic corpora; these numbers demonstrate trends,",
             "not any real-speech performance.", ""]
    if header:
        lines += ["## Inputs", ""] + [f"- {h}" for h in header] + [""]

    mono = sorted(k for k in agg if k[0] in ("mono-fbank", "mono-sbn"))
    if mono:
        lines += ["## Features and training-data fractions", ""]
        _table(lines, mono, agg)

    ft = sorted((k for k in agg if k[0] == "multi" or k[0].startswith("multi-finetune")),
                key=lambda k: (_finetune_order(k[0]), k[1], k[2]))
    if ft:
        lines += ["## Pooled multilingual and target fine-tuning", ""]
        _table(lines, ft, agg)

    tr = sorted((k for k in agg if k[0].startswith("transfer:")),
                key=lambda k: (_transfer_order(k[0]), k[1], k[2]))
    if tr:
        lines += ["## Language transfer", ""]
        _table(lines, tr, agg)
    return "\n".join(lines) + "\n"


def write_report(md_path, rows, header):
    """Markdown report plus the merged rows as CSV next to it."""
    with open(md_path, "w") as f:
        f.write(emit_report(rows, header))
    csv_path = os.path.splitext(md_path)[0] + ".csv"
    write_results(csv_path, sorted(rows, key=lambda r: (r[0], r[1], r[2], r[3])))
