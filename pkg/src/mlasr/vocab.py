"""Character inventories shared by the attention decoder and the CTC head.

A vocabulary is an ordered, deterministic mapping from characters to ids.
Every entry remembers which languages it was observed in so decoding can
be restricted to one language's character set.  The end-of-sequence
marker always sits at the last id and doubles as the decoder start
symbol; the CTC blank is not a vocabulary entry (it lives at index V in
the V+1-wide CTC output).
"""

import numpy as np

EOS = "<eos>"


class Vocabulary:
    def __init__(self, entries):
        """entries: iterable of (symbol, iterable-of-language-ids), eos excluded."""
        self._symbols = []
        self._languages = {}
        for sym, langs in entries:
            if sym == EOS:
                raise ValueError("eos is implicit and may not be listed")
            if sym in self._languages:
                raise ValueError(f"duplicate vocabulary symbol {sym!r}")
            if len(sym) != 1:
                raise ValueError(f"vocabulary symbols are single characters, got {sym!r}")
            self._symbols.append(sym)
            self._languages[sym] = tuple(sorted(set(langs)))
        self._symbols.append(EOS)
        self._languages[EOS] = ()
        self._ids = {s: i for i, s in enumerate(self._symbols)}

    @classmethod
    def from_transcript_pairs(cls, pairs):
        """Build from (language-id, transcript) pairs, sorted for determinism."""
        seen = {}
        for lang, text in pairs:
            for ch in text:
                seen.setdefault(ch, set()).add(lang)
        return cls((s, seen[s]) for s in sorted(seen))

    @classmethod
    def from_utterances(cls, utterances):
        return cls.from_transcript_pairs((u.language, u.transcript) for u in utterances)

    @property
    def size(self):
        return len(self._symbols)

    @property
    def eos_id(self):
        return len(self._symbols) - 1

    def __len__(self):
        return len(self._symbols)

    def __contains__(self, symbol):
        return symbol in self._ids

    def id_of(self, symbol):
        try:
            return self._ids[symbol]
        except KeyError:
            raise KeyError(f"character {symbol!r} not in vocabulary") from None

    def symbol_of(self, idx):
        if not 0 <= idx < len(self._symbols):
            raise IndexError(f"id {idx} outside vocabulary of size {len(self._symbols)}")
        return self._symbols[idx]

    def encode(self, text):
        """Transcript -> int64 id array (eos not appended)."""
        return np.array([self.id_of(ch) for ch in text], dtype=np.int64)

    def decode(self, ids):
        """Id sequence -> string; eos ids are rejected."""
        out = []
        for i in ids:
            sym = self.symbol_of(int(i))
            if sym == EOS:
                raise ValueError("eos id inside a label sequence")
            out.append(sym)
        return "".join(out)

    def languages_of(self, symbol):
        if symbol not in self._ids:
            raise KeyError(f"character {symbol!r} not in vocabulary")
        return self._languages[symbol]

    def languages(self):
        out = set()
        for langs in self._languages.values():
            out.update(langs)
        return sorted(out)

    def charset(self, language):
        return {s for s in self._symbols[:-1] if language in self._languages[s]}

    def charset_mask(self, language):
        """Boolean gate over ids; eos always allowed."""
        mask = np.zeros(len(self._symbols), dtype=bool)
        for s in self._symbols[:-1]:
            if language in self._languages[s]:
                mask[self._ids[s]] = True
        mask[self.eos_id] = True
        if not mask[:-1].any():
            raise ValueError(f"no vocabulary entry belongs to language {language!r}")
        return mask

    def covers(self, text):
        return all(ch in self._ids for ch in text)

    def to_entries(self):
        """Serialized form: one string per entry, symbol TAB comma-joined languages."""
        return [f"{s}\t{','.join(self._languages[s])}" for s in self._symbols[:-1]]

    @classmethod
    def from_serialized_entries(cls, lines):
        entries = []
        for line in lines:
            sym, _, tags = line.partition("\t")
            langs = [t for t in tags.split(",") if t]
            entries.append((sym, langs))
        return cls(entries)

    def __eq__(self, other):
        return (isinstance(other, Vocabulary)
                and self._symbols == other._symbols
                and self._languages == other._languages)

    def __repr__(self):
        return f"Vocabulary({len(self._symbols)} symbols, langs={self.languages()})"
