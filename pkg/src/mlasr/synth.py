"""Deterministic synthetic mini-language corpora.

Each language is a handful of characters, each character a fixed 37-d
acoustic prototype; an utterance is a random no-adjacent-repeat
transcript of 3..12 characters rendered as 5..8 noisy prototype frames
per character, with exact frame-level phone labels (one phone state per
character).  Everything is a pure function of (spec, seed).

The default suite has two training languages with partially overlapping
charsets, a fine-tuning target whose charset is a subset of their
union, and a transfer target with novel characters.  Two cross-language
near-homophones ('i' sounds almost like 'c', 'j' like 'd') are built in
so a pooled model decoding the fine-tuning target reliably produces
characters from the wrong language until it is adapted.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import data as dataio

RAW_DIM = 37
TRANSCRIPT_LEN = (3, 12)
FRAMES_PER_CHAR = (5, 8)


@dataclass
class SyntheticLanguageSpec:
    language: str
    charset: str
    prototypes: dict
    frames_per_char: tuple = FRAMES_PER_CHAR
    noise: float = 0.08
    min_distance: float = 1.0

    def __post_init__(self):
        if not self.charset:
            raise ValueError("charset may not be empty")
        if len(set(self.charset)) != len(self.charset):
            raise ValueError("charset has duplicate characters")
        if not 8 <= len(self.charset) <= 30:
            raise ValueError("charset must have 8..30 characters")
        self.charset = "".join(sorted(self.charset))
        for ch in self.charset:
            p = np.asarray(self.prototypes[ch], dtype=np.float64)
            if p.shape != (RAW_DIM,):
                raise ValueError(f"prototype for {ch!r} must be {RAW_DIM}-d")
        protos = np.stack([self.prototypes[ch] for ch in self.charset])
        diffs = protos[:, None, :] - protos[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        if dist.min() < self.min_distance:
            raise ValueError(
                f"{self.language}: prototype pair closer than {self.min_distance}")

    def phone_of(self, ch):
        return self.charset.index(ch)

    @property
    def phone_count(self):
        return len(self.charset)


def default_language_suite(seed=12345):
    """Languages: LA/LB for training, LC (compatible charset) for
    fine-tuning, LD (novel characters) for transfer."""
    charsets = {
        "LA": "abcdefgh",
        "LB": "efghijkl",
        "LC": "abghijkl",
        "LD": "abmnopqr",
    }
    rng = np.random.default_rng(seed)
    chars = sorted(set("".join(charsets.values())))
    protos = {ch: rng.uniform(-1.0, 1.0, RAW_DIM) for ch in chars}
    for twin, original in (("i", "c"), ("j", "d")):
        direction = rng.standard_normal(RAW_DIM)
        direction /= np.linalg.norm(direction)
        protos[twin] = protos[original] + 0.15 * direction
    return {
        lang: SyntheticLanguageSpec(lang, cs, {ch: protos[ch] for ch in cs})
        for lang, cs in charsets.items()
    }


def generate_utterances(spec, count, seed):
    """count utterances, each with float32 features and phone labels."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    lo_len, hi_len = TRANSCRIPT_LEN
    lo_f, hi_f = spec.frames_per_char
    utts = []
    for i in range(count):
        n = int(rng.integers(lo_len, hi_len + 1))
        text = []
        for _ in range(n):
            choices = spec.charset if not text else spec.charset.replace(text[-1], "")
            text.append(choices[int(rng.integers(0, len(choices)))])
        frames = []
        labels = []
        for ch in text:
            k = int(rng.integers(lo_f, hi_f + 1))
            block = np.asarray(spec.prototypes[ch], dtype=np.float64)
            block = block + spec.noise * rng.standard_normal((k, RAW_DIM))
            frames.append(block)
            labels.extend([spec.phone_of(ch)] * k)
        utts.append(dataio.Utterance(
            utt_id=f"{spec.language}-{i:05d}",
            language=spec.language,
            transcript="".join(text),
            features=np.concatenate(frames).astype(np.float32),
            phone_labels=np.array(labels, dtype=np.int64),
        ))
    return utts


def write_corpus(directory, name, utterances):
    """Emit <name>.farc, <name>.phones, <name>.tsv; returns manifest path."""
    os.makedirs(directory, exist_ok=True)
    farc = f"{name}.farc"
    phones = f"{name}.phones"
    manifest = os.path.join(directory, f"{name}.tsv")
    dataio.write_feature_archive(os.path.join(directory, farc),
                                 [(u.utt_id, u.features) for u in utterances])
    dataio.write_phone_targets(os.path.join(directory, phones),
                               [(u.utt_id, u.phone_labels) for u in utterances])
    dataio.write_manifest(manifest, [
        (u.utt_id, farc, u.language, u.transcript, phones) for u in utterances
    ])
    return manifest
