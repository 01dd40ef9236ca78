"""Byte-level BPE tokenizer with a fixed token budget."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

MAX_TOKENS = 117
N_BYTES = 256
SPECIALS = ("<|startoftext|>", "<|endoftext|>", "<|pad|>")
SOT_ID, EOT_ID, PAD_ID = N_BYTES, N_BYTES + 1, N_BYTES + 2
BASE_SIZE = N_BYTES + len(SPECIALS)

_PRETOKEN = re.compile(r"""'s|'t|'re|'ve|'m|'ll|'d| ?[A-Za-z]+| ?[0-9]+| ?[^\sA-Za-z0-9]+|\s+(?!\S)|\s+""")


@lru_cache()
def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable character map (GPT-2 convention)."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def pretokenize(text: str) -> list[bytes]:
    return [m.encode("utf-8") for m in _PRETOKEN.findall(text)]


@dataclass
class Vocab:
    merges: list[tuple[bytes, bytes]]
    tokens: list[bytes] = field(init=False)
    ranks: dict[tuple[bytes, bytes], int] = field(init=False)
    token_to_id: dict[bytes, int] = field(init=False)

    def __post_init__(self):
        self.tokens = [bytes([b]) for b in range(N_BYTES)] + [s.encode() for s in SPECIALS]
        self.tokens += [a + b for a, b in self.merges]
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        self.token_to_id = {}
        # specials occupy fixed ids; a merged token that equals a special string never collides
        for i, tok in enumerate(self.tokens):
            if N_BYTES <= i < BASE_SIZE:
                continue
            self.token_to_id.setdefault(tok, i)
        self._cache: dict[bytes, tuple[int, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    sot_id = SOT_ID
    eot_id = EOT_ID
    pad_id = PAD_ID

    def bpe(self, word: bytes) -> tuple[int, ...]:
        if word in self._cache:
            return self._cache[word]
        parts = [bytes([b]) for b in word]
        while len(parts) > 1:
            best = None
            for i in range(len(parts) - 1):
                r = self.ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best is None or r < best[0]):
                    best = (r, i)
            if best is None:
                break
            pair = (parts[best[1]], parts[best[1] + 1])
            merged, i = [], 0
            while i < len(parts):
                if i < len(parts) - 1 and (parts[i], parts[i + 1]) == pair:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        ids = tuple(self.token_to_id[p] for p in parts)
        self._cache[word] = ids
        return ids

    def tokenize(self, text: str) -> list[int]:
        out: list[int] = []
        for w in pretokenize(text):
            out.extend(self.bpe(w))
        return out

    def save(self, path) -> None:
        enc = bytes_to_unicode()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("#version: 1\n")
            for a, b in self.merges:
                fh.write("".join(enc[x] for x in a) + " " + "".join(enc[x] for x in b) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        dec = {c: b for b, c in bytes_to_unicode().items()}
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line or line.startswith("#version"):
                continue
            a, b = line.split(" ")
            merges.append((bytes(dec[c] for c in a), bytes(dec[c] for c in b)))
        return cls(merges)


def train_bpe(corpus: Sequence[str], vocab_size: int = 2048) -> Vocab:
    """Greedy most-frequent-pair merges; ties go to the lexicographically smallest pair."""
    if not corpus:
        raise ValueError("corpus is empty")
    if vocab_size <= BASE_SIZE:
        raise ValueError(f"vocab_size must exceed the {BASE_SIZE}-symbol base alphabet")
    words = Counter(w for text in corpus for w in pretokenize(text))
    seqs = {w: [bytes([b]) for b in w] for w in words}
    merges: list[tuple[bytes, bytes]] = []
    while BASE_SIZE + len(merges) < vocab_size:
        counts: Counter = Counter()
        for w, parts in seqs.items():
            f = words[w]
            for pair in zip(parts, parts[1:]):
                counts[pair] += f
        if not counts:
            break
        top = max(counts.values())
        pair = min(p for p, c in counts.items() if c == top)
        merges.append(pair)
        for w, parts in seqs.items():
            if len(parts) < 2:
                continue
            merged, i = [], 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == pair[0] and parts[i + 1] == pair[1]:
                    merged.append(pair[0] + pair[1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            seqs[w] = merged
    return Vocab(merges)


def encode(text: str, vocab: Vocab, max_len: int = MAX_TOKENS) -> list[int]:
    """SOT + tokens + EOT, truncated to ``max_len`` (EOT kept) and padded."""
    if max_len < 2:
        raise ValueError("max_len must leave room for SOT and EOT")
    body = vocab.tokenize(text)[: max_len - 2]
    ids = [SOT_ID, *body, EOT_ID]
    return ids + [PAD_ID] * (max_len - len(ids))


def encode_batch(texts: Iterable[str], vocab: Vocab, max_len: int = MAX_TOKENS):
    import numpy as np

    return np.array([encode(t, vocab, max_len) for t in texts], dtype=np.int64)


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    raw = b"".join(vocab.tokens[i] for i in ids if not N_BYTES <= i < BASE_SIZE)
    return raw.decode("utf-8", errors="replace")
