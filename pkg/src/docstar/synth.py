"""Synthetic corpora for property tests and benchmarks."""

from __future__ import annotations

import random
import string

from .datamodel.corpus import Corpus


def random_word(rng: random.Random, low: int = 2, high: int = 8) -> str:
    return "".join(rng.choice(string.ascii_lowercase) for _ in range(rng.randint(low, high)))


def random_corpus(
    rng: random.Random,
    max_files: int = 200,
    max_keywords: int = 50,
    max_clients: int = 8,
    words_per_file: tuple[int, int] = (1, 8),
    keyword_len: tuple[int, int] = (2, 8),
) -> Corpus:
    """A corpus with uniformly drawn sizes; files mix keywords with filler words."""
    n_kw = rng.randint(1, max_keywords)
    keywords: list[str] = []
    seen = set()
    while len(keywords) < n_kw:
        w = random_word(rng, *keyword_len)
        if w not in seen:
            seen.add(w)
            keywords.append(w)
    filler = [w for w in (random_word(rng, 2, 6) for _ in range(20)) if w not in seen] or ["x"]
    files = []
    for fid in range(1, rng.randint(1, max_files) + 1):
        n = rng.randint(*words_per_file)
        words = [rng.choice(keywords) if rng.random() < 0.6 else rng.choice(filler) for _ in range(n)]
        files.append((fid, words))
    clients = []
    for c in range(rng.randint(1, max_clients)):
        allowed = {k for k in keywords if rng.random() < 0.6}
        clients.append((f"client{c}", allowed))
    return Corpus(files, clients, keywords)


def skewed_corpus(
    rng: random.Random,
    n_keywords: int = 500,
    hot_files: int = 500,
    cold_max: int = 5,
    uniform: bool = False,
    clients: int = 2,
) -> Corpus:
    """One hot keyword in ``hot_files`` files, the rest in at most ``cold_max``.

    With ``uniform`` every keyword appears in exactly ``cold_max`` files.
    """
    keywords: list[str] = []
    seen = set()
    while len(keywords) < n_keywords:
        w = random_word(rng, 4, 8)
        if w not in seen:
            seen.add(w)
            keywords.append(w)
    n_files = max(hot_files, cold_max) if not uniform else max(cold_max, n_keywords // 4)
    contents: dict[int, list[str]] = {fid: [] for fid in range(1, n_files + 1)}
    for i, kw in enumerate(keywords):
        if i == 0 and not uniform:
            chosen = range(1, hot_files + 1)
        else:
            size = cold_max if uniform else rng.randint(1, cold_max)
            chosen = rng.sample(range(1, n_files + 1), min(size, n_files))
        for fid in chosen:
            contents[fid].append(kw)
    files = [(fid, words or ["filler"]) for fid, words in contents.items()]
    cl = [(f"client{c}", set(keywords)) for c in range(clients)]
    return Corpus(files, cl, keywords)
