"""Toy tokenizers and a seeded probabilistic grammar used to train fluency models."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import InputError, TokenSequence, Vocabulary

BOS = "<s>"


def byte_vocabulary() -> Vocabulary:
    def show(b: int) -> str:
        c = chr(b)
        return c if c.isprintable() and b < 128 else f"<0x{b:02X}>"

    return Vocabulary(tuple(show(b) for b in range(256)) + (BOS,), bos_id=256, kind="byte")


@dataclass(frozen=True)
class Grammar:
    """Sentence templates over word categories; word frequencies within a category are Zipf-like."""

    categories: dict[str, tuple[str, ...]]
    noun_phrases: tuple[tuple[str, ...], ...]
    verb_phrases: tuple[tuple[str, ...], ...]
    conjunction_p: float = 0.2

    def words(self) -> tuple[str, ...]:
        out: list[str] = []
        for ws in self.categories.values():
            for w in ws:
                if w not in out:
                    out.append(w)
        return tuple(out)

    def vocabulary(self) -> Vocabulary:
        # BOS last so word ids match category order
        words = self.words()
        return Vocabulary(words + (BOS,), bos_id=len(words), kind="word")

    def _word(self, cat: str, rng: np.random.Generator) -> str:
        ws = self.categories[cat]
        p = 1.0 / np.arange(1, len(ws) + 1)
        return ws[rng.choice(len(ws), p=p / p.sum())]

    def _expand(self, template: tuple[str, ...], rng) -> list[str]:
        out: list[str] = []
        for sym in template:
            if sym == "NP":
                out += self._expand(self.noun_phrases[rng.integers(len(self.noun_phrases))], rng)
            else:
                out.append(self._word(sym, rng))
        return out

    def sentence(self, rng: np.random.Generator) -> list[str]:
        words = self._clause(rng)
        while "CONJ" in self.categories and rng.random() < self.conjunction_p:
            words += [self._word("CONJ", rng)] + self._clause(rng)
        return words + [self._word("END", rng)]

    def _clause(self, rng) -> list[str]:
        vp = self.verb_phrases[rng.integers(len(self.verb_phrases))]
        return self._expand(("NP",), rng) + self._expand(vp, rng)

    def generate(self, n_tokens: int, seed: int) -> TokenSequence:
        """A token stream of exactly ``n_tokens`` ids; every sentence is preceded by BOS."""
        vocab = self.vocabulary()
        rng = np.random.default_rng(seed)
        ids: list[int] = []
        while len(ids) < n_tokens:
            ids.append(vocab.bos_id)
            ids.extend(vocab.token_id(w) for w in self.sentence(rng))
        return tuple(ids[:n_tokens])

    def generate_text(self, n_tokens: int, seed: int) -> str:
        return self.vocabulary().decode(self.generate(n_tokens, seed))


TOY_GRAMMAR = Grammar(
    categories={
        "DET": ("the", "a", "this", "that", "every", "some"),
        "ADJ": ("big", "small", "old", "happy", "lazy", "quick", "red", "young"),
        "NOUN": ("dog", "cat", "bird", "fox", "farmer", "child", "teacher", "horse",
                 "dogs", "cats", "apple", "hotdog", "bread"),
        "NAME": ("Rex", "Anna", "Dog", "Tom"),
        "VI": ("runs", "sleeps", "sings", "jumps", "waits"),
        "VT": ("sees", "chases", "likes", "eats", "finds", "wants"),
        "ADV": ("quickly", "slowly", "today", "often", "again"),
        "PREP": ("near", "with", "under", "behind"),
        "CONJ": ("and", "but", "while", "because"),
        "END": (".", "!", "?"),
        "MISC": (",", "very", "not", "never", "always"),
    },
    noun_phrases=(("DET", "NOUN"), ("DET", "NOUN"), ("DET", "ADJ", "NOUN"), ("NAME",),
                  ("DET", "MISC", "ADJ", "NOUN")),
    verb_phrases=(("VI",), ("VI", "ADV"), ("VT", "NP"), ("VT", "NP", "PREP", "NP"), ("VI", "PREP", "NP")),
)

TINY_GRAMMAR = Grammar(
    categories={
        "DET": ("the", "a"),
        "ADJ": ("big",),
        "NOUN": ("dog", "cat", "bird"),
        "VI": ("runs",),
        "VT": ("sees",),
        "ADV": ("quickly",),
        "CONJ": ("and",),
        "END": (".",),
    },
    noun_phrases=(("DET", "NOUN"), ("DET", "ADJ", "NOUN")),
    verb_phrases=(("VI",), ("VI", "ADV"), ("VT", "NP")),
)

GRAMMARS = {"toy": TOY_GRAMMAR, "tiny": TINY_GRAMMAR}


def load_corpus(path: str | Path, vocab: Vocabulary) -> TokenSequence:
    """Read a corpus as token ids: ``.bin``/``.u32`` files hold little-endian u32 ids, anything else is UTF-8 text."""
    path = Path(path)
    if path.suffix in (".bin", ".u32"):
        raw = path.read_bytes()
        if len(raw) % 4:
            raise InputError(f"{path}: length {len(raw)} is not a multiple of 4")
        ids = struct.unpack(f"<{len(raw) // 4}I", raw)
        return vocab.check(ids)
    text = path.read_text(encoding="utf-8")
    if vocab.kind == "word":
        return tuple(vocab.token_id(w) for w in text.split())
    return vocab.encode(text)


def save_corpus_ids(path: str | Path, ids: TokenSequence) -> None:
    Path(path).write_bytes(struct.pack(f"<{len(ids)}I", *ids))


def bundled_corpus_path() -> Path:
    return Path(__file__).parent / "data" / "toy_corpus_10k.txt"
