"""Joint CTC-attention training and the multilingual regimes.

The per-utterance objective interpolates two negative log likelihoods
computed from one shared encoder pass:

    loss = w * ctc_nll + (1 - w) * att_nll,    0 <= w <= 1

Everything runs plain SGD with global-norm clipping at batch size 1 over
seeded epoch shuffles.  Regimes: monolingual training, pooled
multilingual training over a union vocabulary, target-language
fine-tuning (charset must already be covered by the pooled vocabulary),
and language transfer, which swaps in the target vocabulary and retrains
selected parameter groups in two phases: first only the reinitialized
tensors while everything else stays frozen, then the whole network.
Transfer always starts from the raw pooled model, never a fine-tuned
one.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ctc as ctcmod
from . import model as modeling
from . import optim
from .vocab import Vocabulary

# Variant name -> parameter groups reinitialized for the target language.
# The two output-facing groups are always included: their widths follow
# the new vocabulary, so the pooled tensors cannot be carried over.
TRANSFER_VARIANTS = {
    "out": ("ctc_out", "out"),
    "att-out": ("attention", "ctc_out", "out"),
    "ctc-out": ("ctc_internal", "ctc_out", "out"),
    "att-ctc-out": ("attention", "ctc_internal", "ctc_out", "out"),
}


@dataclass(frozen=True)
class MtlConfig:
    ctc_weight: float = 0.5       # interpolation weight on the CTC term
    learn_rate: float = 0.05
    clip_norm: float = 5.0
    epochs: int = 10
    seed: int = 0                 # batch-order seed (and reinit seed in transfer)

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError(f"interpolation weight {self.ctc_weight} outside [0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learn_rate <= 0 or self.clip_norm <= 0:
            raise ValueError("learn_rate and clip_norm must be positive")


@dataclass(frozen=True)
class TransferPlan:
    variant: str = "out"
    phase2_epochs: int = 5        # new groups only, rest frozen
    phase3_epochs: int = 10       # full fine-tune

    def __post_init__(self):
        if self.variant not in TRANSFER_VARIANTS:
            known = ", ".join(sorted(TRANSFER_VARIANTS))
            raise ValueError(f"unknown transfer variant {self.variant!r} (known: {known})")
        if self.phase2_epochs < 0 or self.phase3_epochs < 0:
            raise ValueError("phase epochs must be >= 0")

    @property
    def reinit_groups(self):
        return TRANSFER_VARIANTS[self.variant]


def mtl_loss(ctc_nll, att_nll, weight):
    """Interpolated objective; both terms are scalar graph nodes."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"interpolation weight {weight} outside [0, 1]")
    return ad.add(ad.scale(ctc_nll, weight), ad.scale(att_nll, 1.0 - weight))


def _target_ids(vocab, utt):
    try:
        return vocab.encode(utt.transcript)
    except KeyError as e:
        raise ValueError(f"{utt.utt_id}: {e.args[0]}") from None


def utterance_loss(params, utt, ctc_weight):
    """Scalar loss node plus float values of the two terms.

    The encoder runs once; its output feeds the CTC head and the
    teacher-forced attention decoder.
    """
    labels = _target_ids(params.vocab, utt)
    enc = modeling.encode(params, utt.features)
    ctc_nll = ctcmod.ctc_loss(modeling.ctc_head(params, enc), labels)
    att_nll = modeling.attention_nll(params, enc, labels)
    return (mtl_loss(ctc_nll, att_nll, ctc_weight),
            float(ctc_nll.value), float(att_nll.value))


def run_epochs(params, utterances, config, epochs, seed, tensors=None, epoch0=0):
    """SGD over seeded shuffles, updating only `tensors` (default: all).

    Freezing is structural: clipping and the step touch nothing outside
    the given list.  Returns trace rows (epoch, mean_loss, mean_ctc_term,
    mean_att_term) numbered from epoch0.
    """
    utts = list(utterances)
    if not utts:
        raise ValueError("no training utterances")
    if tensors is None:
        tensors = params.all_params()
    trace = []
    for k, order in enumerate(optim.epoch_orders(len(utts), epochs, seed)):
        terms = []
        for i in order:
            loss, ctc_nll, att_nll = utterance_loss(params, utts[i], config.ctc_weight)
            ad.backward(loss, tensors)
            optim.clip_gradients(tensors, config.clip_norm)
            optim.sgd_step(tensors, config.learn_rate)
            terms.append((float(loss.value), ctc_nll, att_nll))
        means = np.asarray(terms).mean(axis=0)
        trace.append((epoch0 + k, float(means[0]), float(means[1]), float(means[2])))
    return trace


def train(params, utterances, config):
    """Monolingual (or pre-pooled) training; mutates params in place.

    Returns (params, trace).  Every transcript is checked against the
    vocabulary before the first step so a bad utterance fails fast.
    """
    utts = list(utterances)
    for u in utts:
        _target_ids(params.vocab, u)
    return params, run_epochs(params, utts, config, config.epochs, config.seed)


def train_multilingual(params, corpora, config):
    """corpora: language id -> utterance list.

    Pooled in sorted language order and trained exactly like a
    monolingual corpus; the seeded shuffle interleaves the languages.
    """
    pooled = [u for lang in sorted(corpora) for u in corpora[lang]]
    return train(params, pooled, config)


def fine_tune(params, target_utterances, config):
    """A few epochs on target-language data only; vocabulary unchanged."""
    utts = list(target_utterances)
    missing = sorted({ch for u in utts for ch in u.transcript if ch not in params.vocab})
    if missing:
        raise ValueError(
            "target charset not covered by the pooled vocabulary (missing "
            + ", ".join(repr(c) for c in missing)
            + "); use language_transfer for incompatible character sets")
    return train(params, utts, config)


def language_transfer(params, target_utterances, plan, config):
    """Adapt a pooled model to a language with an incompatible charset.

    The target vocabulary replaces the pooled one, the plan's groups are
    reinitialized (seeded by config.seed), and training runs in two
    phases: phase 2 updates only the reinitialized tensors, leaving the
    carried-over ones bit-identical; phase 3 fine-tunes everything.
    Returns (new params, trace); the input model is left untouched.
    """
    utts = list(target_utterances)
    if not utts:
        raise ValueError("no target utterances")
    new_vocab = Vocabulary.from_utterances(utts)
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for group in modeling.GROUPS:
        if group in plan.reinit_groups:
            tensors.update(modeling.init_group_tensors(
                params.config, new_vocab.size, group, rng))
        else:
            for name in params.group_names(group):
                tensors[name] = ad.parameter(params[name].value.copy(), name=name)
    new_params = modeling.ModelParams(params.config, new_vocab, tensors)

    fresh = [t for g in plan.reinit_groups for t in new_params.group(g)]
    trace = run_epochs(new_params, utts, config, plan.phase2_epochs,
                       config.seed + 1, tensors=fresh)
    trace += run_epochs(new_params, utts, config, plan.phase3_epochs,
                        config.seed + 2, epoch0=plan.phase2_epochs)
    return new_params, trace


def write_loss_trace(path, trace):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss", "mean_ctc_term", "mean_att_term"])
        for epoch, mean_loss, mean_ctc, mean_att in trace:
            w.writerow([epoch, repr(mean_loss), repr(mean_ctc), repr(mean_att)])
