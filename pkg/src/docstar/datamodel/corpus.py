"""Cleartext corpus and the brute-force access oracle used to judge results."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..codec import tokenize
from ..errors import DuplicateKeyword


@dataclass
class Corpus:
    """Files, clients with their allowed keywords, and the ordered keyword list.

    ``files`` holds ``(file_id, words)`` with positive ids; id 0 is the dummy.
    """

    files: list[tuple[int, list[str]]]
    clients: list[tuple[str, set[str]]]
    keywords: list[str]

    def __post_init__(self):
        self.keywords = [k.casefold() for k in self.keywords]
        if len(set(self.keywords)) != len(self.keywords):
            seen = set()
            dup = next(k for k in self.keywords if k in seen or seen.add(k))
            raise DuplicateKeyword(dup)
        self.files = [(int(fid), [w.casefold() for w in words]) for fid, words in self.files]
        ids = [fid for fid, _ in self.files]
        if any(fid <= 0 for fid in ids):
            raise ValueError("file ids must be positive; 0 is the dummy file")
        if len(set(ids)) != len(ids):
            raise ValueError("file ids must be unique")
        known = set(self.keywords)
        self.clients = [(cid, {k.casefold() for k in allowed}) for cid, allowed in self.clients]
        for cid, allowed in self.clients:
            missing = allowed - known
            if missing:
                raise ValueError(f"client {cid!r} allowed unknown keywords {sorted(missing)}")
        if len({cid for cid, _ in self.clients}) != len(self.clients):
            raise ValueError("client ids must be unique")

    @classmethod
    def from_dict(cls, data: dict) -> "Corpus":
        files = [(f["id"], f["words"] if "words" in f else tokenize(f["text"])) for f in data["files"]]
        clients = [(c["id"], set(c.get("allowed", []))) for c in data["clients"]]
        return cls(files, clients, list(data["keywords"]))

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "keywords": list(self.keywords),
            "files": [{"id": fid, "words": list(words)} for fid, words in self.files],
            "clients": [{"id": cid, "allowed": sorted(allowed)} for cid, allowed in self.clients],
        }


@dataclass
class AccessState:
    """What the owner's data means, independent of any layout.

    ``postings`` is the inverted index, ``file_keywords`` the per-file keyword
    sets that drive file-level restriction, ``access`` each client's allowed
    keywords. Updates mutate these in the same way the shared structures are
    mutated, so the oracle stays authoritative after any sequence of them.
    """

    keywords: list[str]
    postings: dict[str, list[int]]
    file_keywords: dict[int, set[str]]
    access: dict[str, set[str]]
    contents: dict[int, list[str]] = field(default_factory=dict)

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "AccessState":
        keywords = list(corpus.keywords)
        file_keywords = {}
        contents = {}
        for fid, words in corpus.files:
            present = set(words)
            file_keywords[fid] = {k for k in keywords if k in present}
            contents[fid] = list(words)
        postings = {k: sorted(fid for fid, ks in file_keywords.items() if k in ks) for k in keywords}
        access = {cid: set(allowed) for cid, allowed in corpus.clients}
        return cls(keywords, postings, file_keywords, access, contents)

    def query(self, client_id: str, keyword: str) -> tuple[list[int], list[int]] | None:
        """``(delivered, restricted)`` file ids, or None when access is absent."""
        keyword = keyword.casefold()
        if keyword not in self.postings or keyword not in self.access.get(client_id, set()):
            return None
        denied = set(self.keywords) - self.access[client_id]
        delivered, restricted = [], []
        for fid in self.postings[keyword]:
            (restricted if self.file_keywords[fid] & denied else delivered).append(fid)
        return delivered, restricted

    @property
    def gamma(self) -> int:
        return max((len(v) for v in self.postings.values()), default=0)
