"""Joint beam decoding over the two branch scores, plus CER scoring.

A hypothesis accumulates the attention decoder's log probability and the
CTC prefix probability of its label sequence; the ranking score is their
interpolation

    combined = alpha * ctc_score + (1 - alpha) * att_score.

A hypothesis is finalized when it emits eos: the attention term then
includes log p(eos) and the CTC term switches from prefix to
complete-sequence probability.  Scores are raw sums by default so tiny
instances can be checked against exhaustive enumeration; an optional
flag divides the final score by the output length.  Hypotheses surviving
at the length cap are force-finalized the same way.
"""

from dataclasses import dataclass

import numpy as np

from . import ctc as ctcmod
from . import model as modeling


@dataclass(frozen=True, eq=False)
class BeamConfig:
    width: int = 8
    alpha: float = 0.3            # weight on the CTC branch
    max_length: int = 40          # characters before eos is forced
    mask: np.ndarray = None       # optional boolean gate over vocabulary ids
    length_normalize: bool = False

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"beam width must be >= 1, got {self.width}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")


@dataclass
class Hypothesis:
    labels: tuple                 # emitted ids, eos never included
    att_score: float
    ctc_score: float
    combined: float
    dec_state: tuple
    att_weights: object
    ctc_state: np.ndarray


def _rank_key(hyp):
    # descending score, then lexicographic prefix for deterministic ties
    return (-hyp.combined, hyp.labels)


def _combine(alpha, ctc_score, att_score):
    # a zero-weight term is absent, not 0 * -inf (which would poison the sum)
    total = 0.0
    if alpha > 0.0:
        total += alpha * ctc_score
    if alpha < 1.0:
        total += (1.0 - alpha) * att_score
    return total


def beam_search(params, features, config):
    """Ranked [(string, score)], best first, at most `width` entries."""
    vocab = params.vocab
    eos = vocab.eos_id
    if config.mask is None:
        mask = np.ones(vocab.size, dtype=bool)
    else:
        mask = np.asarray(config.mask, dtype=bool)
        if mask.shape != (vocab.size,):
            raise ValueError(f"mask shape {mask.shape} does not cover {vocab.size} ids")
        if not mask[eos]:
            raise ValueError("mask must keep eos reachable")
    chars = np.flatnonzero(mask[:eos])
    if chars.size == 0:
        raise ValueError("mask allows no characters")

    enc = modeling.encode(params, features)
    enc_att = modeling.precompute_enc_attention(params, enc)
    scorer = ctcmod.CtcPrefixScorer(modeling.ctc_head(params, enc).value, eos=eos)
    candidates = np.concatenate([chars, [eos]])  # eos last

    alpha = config.alpha
    beams = [Hypothesis((), 0.0, 0.0, 0.0,
                        modeling.initial_decoder_state(params),
                        modeling.initial_attention(enc.value.shape[0]),
                        scorer.initial_state())]
    finished = []
    for step in range(config.max_length + 1):
        last = step == config.max_length
        pool = []
        for hyp in beams:
            prev = hyp.labels[-1] if hyp.labels else eos
            att_a, r = modeling.attend(params, hyp.att_weights,
                                       hyp.dec_state[0], enc, enc_att)
            dist, state = modeling.decode_step(params, r, hyp.dec_state, prev)
            att_row = dist.value
            psi, states = scorer.score(hyp.labels, hyp.ctc_state, candidates)

            att_end = hyp.att_score + att_row[eos]
            ctc_end = psi[-1]
            finished.append(Hypothesis(
                hyp.labels, att_end, ctc_end,
                _combine(alpha, ctc_end, att_end),
                state, att_a, hyp.ctc_state))
            if last:
                continue
            for j, c in enumerate(chars):
                att_s = hyp.att_score + att_row[c]
                ctc_s = psi[j]
                pool.append(Hypothesis(
                    (*hyp.labels, int(c)), att_s, ctc_s,
                    _combine(alpha, ctc_s, att_s),
                    state, att_a, states[j]))
        if last or not pool:
            break
        pool.sort(key=_rank_key)
        beams = pool[:config.width]

    if config.length_normalize:
        key = lambda h: (-h.combined / (len(h.labels) + 1), h.labels)
    else:
        key = _rank_key
    finished.sort(key=key)
    top = finished[:config.width]
    if config.length_normalize:
        return [(vocab.decode(h.labels), h.combined / (len(h.labels) + 1)) for h in top]
    return [(vocab.decode(h.labels), h.combined) for h in top]


def greedy_ctc(params, features):
    """Best-path CTC baseline: frame argmax, collapse repeats, drop blanks."""
    enc = modeling.encode(params, features)
    lp = modeling.ctc_head(params, enc).value
    ids = lp.argmax(axis=1)
    blank = lp.shape[1] - 1
    # the eos row is never a CTC target; frames landing there are silence
    ids[ids == params.vocab.eos_id] = blank
    return params.vocab.decode(ctcmod.collapse(ids, blank))


# ------------------------------------------------------------------- scoring

def levenshtein(a, b):
    """Unit-cost edit distance, two-row DP."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(hypothesis, reference):
    """100 * edit distance / reference length."""
    if not reference:
        raise ValueError("empty reference transcript")
    return 100.0 * levenshtein(hypothesis, reference) / len(reference)


def write_hypotheses(path, pairs):
    """pairs: iterable of (utt-id, hypothesis string), one line each."""
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, hyp in pairs:
            f.write(f"{utt_id}\t{hyp}\n")


def read_hypotheses(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, _, hyp = line.partition("\t")
            out[utt_id] = hyp
    return out


def score_hypotheses(hypotheses, references):
    """Per-utterance CER rows plus corpus CER.

    hypotheses: utt-id -> string; references: utterances with
    transcripts.  The corpus number pools edits over pooled reference
    length rather than averaging per-utterance rates.
    """
    rows = []
    edits = 0
    ref_chars = 0
    for utt in references:
        if utt.utt_id not in hypotheses:
            raise ValueError(f"no hypothesis for {utt.utt_id}")
        if not utt.transcript:
            raise ValueError(f"{utt.utt_id}: empty reference transcript")
        d = levenshtein(hypotheses[utt.utt_id], utt.transcript)
        rows.append((utt.utt_id, 100.0 * d / len(utt.transcript)))
        edits += d
        ref_chars += len(utt.transcript)
    if not rows:
        raise ValueError("no reference utterances")
    return rows, 100.0 * edits / ref_chars


def write_score_csv(path, rows, corpus):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["utt_id", "cer"])
        for utt_id, value in rows:
            w.writerow([utt_id, repr(value)])
        w.writerow(["corpus", repr(corpus)])
