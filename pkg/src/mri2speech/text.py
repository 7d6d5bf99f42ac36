"""Text front end: normalization, lexicon lookup, token alphabets and a small
backoff n-gram language model used for decoder fusion."""

from __future__ import annotations

import math
import re
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import EmptyTranscriptError, OOVError, StateError

WORD_BOUNDARY = "‖"  # ‖
BLANK = "<blank>"
PAD = "<pad>"
BOS = -1
LOG_FLOOR = -1e10

_PUNCT = re.compile(r"[^\w\s']|_")


def normalize_text(raw: str) -> str:
    """Lowercase, strip punctuation (apostrophes survive) and collapse whitespace."""
    text = _PUNCT.sub(" ", raw.lower())
    text = " ".join(w.strip("'") for w in text.split())
    text = " ".join(text.split())
    if not text:
        raise EmptyTranscriptError(f"transcript is empty after normalization: {raw!r}")
    return text


@dataclass(frozen=True)
class TokenAlphabet:
    tokens: tuple[str, ...]
    blank_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("alphabet tokens must be unique")
        if not 0 <= self.blank_index < len(self.tokens):
            raise ValueError(f"blank_index {self.blank_index} out of range")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def blank(self) -> str:
        return self.tokens[self.blank_index]

    @property
    def symbols(self) -> tuple[str, ...]:
        """Every token except the blank/pad slot."""
        return tuple(t for i, t in enumerate(self.tokens) if i != self.blank_index)

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ValueError(f"token {token!r} is not in the alphabet") from None

    def encode(self, seq: Sequence[str]) -> list[int]:
        return [self.index(t) for t in seq]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise ValueError(f"token id {i} outside alphabet of size {len(self.tokens)}")
            out.append(self.tokens[i])
        return out

    @classmethod
    def for_ctc(cls, phonemes: Iterable[str]) -> "TokenAlphabet":
        """Recognizer alphabet: blank at 0, then phonemes (no word boundary)."""
        return cls((BLANK, *sorted(set(phonemes))), 0)

    @classmethod
    def for_tts(cls, phonemes: Iterable[str]) -> "TokenAlphabet":
        """TTS alphabet: pad at 0, phonemes, then the word-boundary token."""
        return cls((PAD, *sorted(set(phonemes)), WORD_BOUNDARY), 0)


def encode_tokens(seq: Sequence[str], alphabet: TokenAlphabet) -> list[int]:
    return alphabet.encode(seq)


def decode_tokens(ids: Iterable[int], alphabet: TokenAlphabet) -> list[str]:
    return alphabet.decode(ids)


@dataclass(frozen=True)
class PhonemeSequence:
    tokens: tuple[str, ...]
    words: tuple[str, ...]
    lexicon_source: str = "builtin"

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def phonemes(self) -> tuple[str, ...]:
        return tuple(t for t in self.tokens if t != WORD_BOUNDARY)


class Lexicon(Mapping[str, tuple[str, ...]]):
    """Word to pronunciation map.  Only the first pronunciation of a word is kept."""

    def __init__(self, entries: Mapping[str, Sequence[str]] | None = None, source: str = "builtin"):
        self._entries: dict[str, tuple[str, ...]] = {}
        self.source = source
        for word, prons in (entries or {}).items():
            self.add(word, prons)

    def add(self, word: str, phonemes: Sequence[str]) -> None:
        word = word.lower()
        if not phonemes:
            raise ValueError(f"empty pronunciation for {word!r}")
        self._entries.setdefault(word, tuple(phonemes))

    def __getitem__(self, word: str) -> tuple[str, ...]:
        return self._entries[word]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def phoneme_set(self) -> set[str]:
        return {p for pron in self._entries.values() for p in pron}

    def check_alphabet(self, alphabet: TokenAlphabet) -> None:
        missing = self.phoneme_set - set(alphabet.symbols)
        if missing:
            raise ValueError(f"lexicon phonemes missing from alphabet: {sorted(missing)}")
        if alphabet.blank in self.phoneme_set:
            raise ValueError("the blank token may not be a lexicon phoneme")

    def to_lines(self) -> list[str]:
        return [f"{w.upper()} {' '.join(p)}" for w, p in sorted(self._entries.items())]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Lexicon":
        """Read a CMUDict-style file: ``WORD PH1 PH2 ...`` per line.

        ``;;;`` comment lines are skipped and ``WORD(2)`` variants are dropped.
        """
        lex = cls(source=str(path))
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8", errors="replace").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith(";;;"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected 'WORD PH1 ...'")
            word = parts[0]
            if re.search(r"\(\d+\)$", word):
                continue
            lex.add(word, parts[1:])
        return lex

    def words_for(self, phonemes: Sequence[str]) -> list[str]:
        """Invert the lexicon: split a phoneme string into words.

        Uses a segmentation DP that minimizes total edit distance between each
        segment and a lexicon entry, so slightly wrong phoneme strings still
        map to the closest word sequence.  Exact parses cost zero.  Ties prefer
        fewer words, then earlier lexicon order.
        """
        phonemes = list(phonemes)
        n = len(phonemes)
        if n == 0 or not self._entries:
            return []
        items = list(self._entries.items())
        max_len = max(len(p) for _, p in items) + 2
        best: list[tuple[int, int] | None] = [None] * (n + 1)
        back: list[tuple[int, str] | None] = [None] * (n + 1)
        best[0] = (0, 0)
        for i in range(1, n + 1):
            for j in range(max(0, i - max_len), i):
                if best[j] is None:
                    continue
                seg = phonemes[j:i]
                for word, pron in items:
                    cost = _levenshtein(seg, pron)
                    cand = (best[j][0] + cost, best[j][1] + 1)
                    if best[i] is None or cand < best[i]:
                        best[i] = cand
                        back[i] = (j, word)
        words = []
        i = n
        while i > 0:
            if back[i] is None:
                return []
            j, word = back[i]
            words.append(word)
            i = j
        return words[::-1]


def _levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def phonemize(text: str, lexicon: Lexicon) -> PhonemeSequence:
    words = text.split()
    if not words:
        raise EmptyTranscriptError("no words to phonemize")
    tokens: list[str] = []
    for k, word in enumerate(words):
        if word not in lexicon:
            raise OOVError(word)
        if k:
            tokens.append(WORD_BOUNDARY)
        tokens.extend(lexicon[word])
    return PhonemeSequence(tuple(tokens), tuple(words), lexicon.source)


# ---------------------------------------------------------------------------
# n-gram language model


@dataclass
class NGramLM:
    """Backoff n-gram model over integer token ids (ARPA-style tables).

    ``logprobs`` maps ``context + (token,)`` tuples to natural-log conditional
    probabilities; ``backoffs`` maps contexts to log backoff weights.  Context
    positions before the sentence start use the sentinel ``BOS``.
    """

    order: int
    vocab: tuple[int, ...]
    logprobs: dict[tuple[int, ...], float] = field(default_factory=dict)
    backoffs: dict[tuple[int, ...], float] = field(default_factory=dict)
    discount: float = 0.5

    def __post_init__(self):
        if not 1 <= self.order <= 4:
            raise ValueError(f"order must be in 1..4, got {self.order}")
        self.vocab = tuple(int(v) for v in self.vocab)
        self._vocab_set = frozenset(self.vocab)

    @property
    def trained(self) -> bool:
        return bool(self.logprobs)

    @classmethod
    def uniform(cls, vocab: Iterable[int]) -> "NGramLM":
        vocab = tuple(vocab)
        lp = -math.log(len(vocab))
        return cls(1, vocab, {(v,): lp for v in vocab})

    @classmethod
    def train(cls, sequences: Iterable[Sequence[int]], vocab: Iterable[int], order: int = 4,
              discount: float = 0.5) -> "NGramLM":
        """Estimate a Katz-style backoff model with absolute discounting.

        Unigrams are add-one smoothed.  Higher orders subtract ``discount`` from
        every seen count and hand the freed mass to the lower order, renormalized
        over unseen continuations.  A context that has already seen the whole
        vocabulary is left undiscounted.
        """
        lm = cls(order, tuple(vocab), discount=discount)
        V = len(lm.vocab)
        counts: list[Counter] = [Counter() for _ in range(order + 1)]
        for seq in sequences:
            seq = [int(t) for t in seq]
            for t in seq:
                if t not in lm._vocab_set:
                    raise ValueError(f"token id {t} not in LM vocabulary")
            padded = [BOS] * (order - 1) + seq
            for i in range(order - 1, len(padded)):
                for n in range(1, order + 1):
                    counts[n][tuple(padded[i - n + 1:i + 1])] += 1
        total = sum(counts[1].values())
        for v in lm.vocab:
            lm.logprobs[(v,)] = math.log((counts[1][(v,)] + 1) / (total + V))
        for n in range(2, order + 1):
            by_ctx: dict[tuple[int, ...], dict[int, int]] = defaultdict(dict)
            for gram, c in counts[n].items():
                by_ctx[gram[:-1]][gram[-1]] = c
            for ctx in sorted(by_ctx):
                seen = by_ctx[ctx]
                c_ctx = sum(seen.values())
                d = discount if len(seen) < V else 0.0
                for w, c in seen.items():
                    lm.logprobs[ctx + (w,)] = math.log((c - d) / c_ctx)
                if d > 0:
                    alpha = d * len(seen) / c_ctx
                    lower_seen = sum(math.exp(lm.cond_logprob(ctx[1:], w)) for w in seen)
                    lm.backoffs[ctx] = math.log(alpha / (1.0 - lower_seen))
        return lm

    def cond_logprob(self, context: Sequence[int], token: int) -> float:
        ctx = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        backoff = 0.0
        while True:
            lp = self.logprobs.get(ctx + (token,))
            if lp is not None:
                return backoff + lp
            if not ctx:
                return LOG_FLOOR
            backoff += self.backoffs.get(ctx, 0.0)
            ctx = ctx[1:]

    def score(self, token_ids: Sequence[int]) -> float:
        if not self.trained:
            raise StateError("language model has not been trained")
        ids = [int(t) for t in token_ids]
        if not ids:
            raise ValueError("cannot score an empty sequence")
        history = [BOS] * max(self.order - 1, 0)
        total = 0.0
        for t in ids:
            if t not in self._vocab_set:
                raise ValueError(f"token id {t} not in LM vocabulary")
            total += self.cond_logprob(history, t)
            history.append(t)
        return total

    def contexts(self) -> set[tuple[int, ...]]:
        ctxs = {gram[:-1] for gram in self.logprobs if len(gram) > 1}
        return ctxs | set(self.backoffs) | {()}

    def normalization_error(self, context: Sequence[int]) -> float:
        s = sum(math.exp(self.cond_logprob(context, v)) for v in self.vocab)
        return abs(s - 1.0)

    # -- persistence --------------------------------------------------------

    _MAGIC = b"NGLM"

    def to_bytes(self) -> bytes:
        """Sorted-table binary.  Layout (little-endian)::

            b"NGLM" u32 version=1 u32 order u32 V  i32[V] vocab  f64 discount
            u32 n_grams   then per gram:  u8 n  i32[n] ids  f64 logprob
            u32 n_backoff then per entry: u8 n  i32[n] ids  f64 log-weight
        Entries are sorted by (length, ids).
        """
        out = [self._MAGIC, struct.pack("<III", 1, self.order, len(self.vocab))]
        out.append(struct.pack(f"<{len(self.vocab)}i", *self.vocab))
        out.append(struct.pack("<d", self.discount))
        for table in (self.logprobs, self.backoffs):
            keys = sorted(table, key=lambda k: (len(k), k))
            out.append(struct.pack("<I", len(keys)))
            for k in keys:
                out.append(struct.pack(f"<B{len(k)}id", len(k), *k, table[k]))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "NGramLM":
        if data[:4] != cls._MAGIC:
            raise ValueError("not an n-gram LM blob")
        pos = 4
        version, order, V = struct.unpack_from("<III", data, pos)
        pos += 12
        if version != 1:
            raise ValueError(f"unsupported LM version {version}")
        vocab = struct.unpack_from(f"<{V}i", data, pos)
        pos += 4 * V
        (discount,) = struct.unpack_from("<d", data, pos)
        pos += 8
        tables = []
        for _ in range(2):
            (count,) = struct.unpack_from("<I", data, pos)
            pos += 4
            table = {}
            for _ in range(count):
                n = data[pos]
                pos += 1
                ids = struct.unpack_from(f"<{n}i", data, pos)
                pos += 4 * n
                (val,) = struct.unpack_from("<d", data, pos)
                pos += 8
                table[tuple(ids)] = val
            tables.append(table)
        return cls(order, vocab, tables[0], tables[1], discount)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "NGramLM":
        return cls.from_bytes(Path(path).read_bytes())

    def export_text(self, names: Mapping[int, str] | None = None) -> str:
        """ARPA-like listing with natural-log values (not log10)."""
        def fmt(ids):
            return " ".join("<s>" if i == BOS else (names[i] if names else str(i)) for i in ids)

        lines = ["\\data\\", f"order={self.order}", "logbase=e"]
        for n in range(1, self.order + 1):
            grams = sorted(k for k in self.logprobs if len(k) == n)
            lines.append(f"\n\\{n}-grams:")
            for g in grams:
                bo = self.backoffs.get(g)
                tail = f"\t{bo:.8f}" if bo is not None else ""
                lines.append(f"{self.logprobs[g]:.8f}\t{fmt(g)}{tail}")
        ctx_only = sorted(k for k in self.backoffs if k not in self.logprobs)
        if ctx_only:
            lines.append("\n\\backoff-only contexts:")
            for k in ctx_only:
                lines.append(f"{self.backoffs[k]:.8f}\t{fmt(k)}")
        lines.append("\n\\end\\")
        return "\n".join(lines) + "\n"


def lm_score(lm: NGramLM, token_ids: Sequence[int]) -> float:
    return lm.score(token_ids)
