"""Keyword and content encodings plus the digest algebra over Z_p.

Letters become two-digit groups (``a`` -> 11 ... ``z`` -> 36) and a word's
numeric value is the decimal concatenation of its groups, so ``"are"`` is
112815. Keywords are padded to a deployment-wide group count with groups from
37..99 derived from the word itself, which keeps the owner's and the client's
encodings of one keyword identical.
"""

from __future__ import annotations

import hashlib
import hmac
import re
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import EncodingOverflow, UnsupportedCharacter
from .field import DEFAULT_FIELD, Field

LETTER_OFFSET = 10
PAD_LOW = 37
PAD_HIGH = 99
WORD_SEPARATOR = 37
CONTENT_PAD = 99

_LETTERS = re.compile(r"[a-z]+")


@dataclass(frozen=True)
class KeywordEncoding:
    groups: tuple[int, ...]
    numeric: int


def letter_groups(word: str) -> list[int]:
    word = word.casefold()
    if not word:
        raise UnsupportedCharacter("empty word")
    groups = []
    for ch in word:
        if not ("a" <= ch <= "z"):
            raise UnsupportedCharacter(f"unsupported character {ch!r} in {word!r}")
        groups.append(ord(ch) - ord("a") + 1 + LETTER_OFFSET)
    return groups


def groups_to_int(groups: Iterable[int]) -> int:
    value = 0
    for g in groups:
        value = value * 100 + g
    return value


def int_to_groups(value: int, count: int) -> list[int]:
    out = []
    for _ in range(count):
        value, g = divmod(value, 100)
        out.append(g)
    return out[::-1]


def _padding(word: str, count: int) -> list[int]:
    stream = hashlib.sha256(b"keyword-padding\x00" + word.encode()).digest()
    span = PAD_HIGH - PAD_LOW + 1
    return [PAD_LOW + stream[i % len(stream)] % span for i in range(count)]


def encode_keyword(word: str, target_groups: int, field: Field = DEFAULT_FIELD) -> KeywordEncoding:
    """Encode ``word`` as ``target_groups`` two-digit groups.

    Raises:
        UnsupportedCharacter: for anything other than ASCII letters.
        EncodingOverflow: if the word is longer than ``target_groups`` or the
            numeric value does not fit below ``p``.
    """
    word = word.casefold()
    groups = letter_groups(word)
    if len(groups) > target_groups:
        raise EncodingOverflow(f"{word!r} needs {len(groups)} groups, deployment allows {target_groups}")
    groups += _padding(word, target_groups - len(groups))
    numeric = groups_to_int(groups)
    if numeric >= field.p:
        raise EncodingOverflow(f"encoding of {word!r} does not fit below p")
    return KeywordEncoding(tuple(groups), numeric)


def decode_keyword(numeric: int, target_groups: int) -> str:
    return "".join(
        chr(g - LETTER_OFFSET - 1 + ord("a"))
        for g in int_to_groups(numeric, target_groups)
        if 11 <= g <= 36
    )


def max_keyword_groups(field: Field) -> int:
    """Largest group count whose every encoding stays below ``p`` with room for the band."""
    g = 0
    while 2 * 10 ** (2 * (g + 1)) < field.p:
        g += 1
    return g


def band_floor(target_groups: int) -> int:
    """Smallest value of the non-access band; every encoding is strictly below it."""
    return 10 ** (2 * target_groups)


def prg_access_value(
    seed: bytes,
    keyword: str,
    client_id: str,
    field: Field = DEFAULT_FIELD,
    target_groups: int = 9,
) -> int:
    """Deterministic non-access value for ``(keyword, client)`` under the owner's seed.

    The value lies in ``[floor, p - floor)`` with ``floor = 10^(2·groups)``, so
    adding any difference of two encodings to it can never wrap to zero.
    """
    if not seed:
        raise ValueError("seed must be nonempty")
    floor = band_floor(target_groups)
    width = field.p - 2 * floor
    if width <= 0:
        raise EncodingOverflow("modulus too small for a non-access band at this group count")
    mac = hmac.new(seed, keyword.casefold().encode() + b"\x00" + client_id.encode(), hashlib.sha256)
    return int.from_bytes(mac.digest(), "big") % width + floor


# digests


def H(*args: int, field: Field = DEFAULT_FIELD) -> int:
    """SHA-256 over the 8-byte big-endian encodings of ``args``, reduced mod p."""
    msg = b"".join(struct.pack(">Q", int(a)) for a in args)
    return int.from_bytes(hashlib.sha256(msg).digest(), "big") % field.p


def hash_chain(items: Sequence[int], seed_label: int, field: Field = DEFAULT_FIELD) -> int:
    """Left fold ``d0 = H(seed)``, ``d_k = H(item_k, d_{k-1})``."""
    digest = H(seed_label, field=field)
    for item in items:
        digest = H(item, digest, field=field)
    return digest


def position_digest_sum(positions: Iterable[int], field: Field = DEFAULT_FIELD) -> int:
    total = 0
    for pos in positions:
        if pos < 1:
            raise ValueError("positions are 1-based")
        total += H(pos, field=field)
    return total % field.p


# file content


def tokenize(text: str) -> list[str]:
    return _LETTERS.findall(text.casefold())


def content_groups_per_element(field: Field) -> int:
    g = 0
    while 10 ** (2 * (g + 1)) <= field.p:
        g += 1
    return g


def content_length(words: Sequence[str], field: Field = DEFAULT_FIELD) -> int:
    """Number of field elements ``encode_content`` needs for ``words``."""
    groups = sum(len(w) for w in words) + max(len(words) - 1, 0)
    per = content_groups_per_element(field)
    return -(-groups // per)


def encode_content(words: Sequence[str], eta: int, field: Field = DEFAULT_FIELD) -> list[int]:
    """Pack words (separated by group 37) into elements, then pad to ``eta`` with 99-groups."""
    per = content_groups_per_element(field)
    stream: list[int] = []
    for i, word in enumerate(words):
        if i:
            stream.append(WORD_SEPARATOR)
        stream.extend(letter_groups(word))
    elements = []
    for start in range(0, len(stream), per):
        chunk = stream[start:start + per]
        chunk += [CONTENT_PAD] * (per - len(chunk))
        elements.append(groups_to_int(chunk))
    if len(elements) > eta:
        raise EncodingOverflow(f"content needs {len(elements)} elements, η is {eta}")
    pad = groups_to_int([CONTENT_PAD] * per)
    return elements + [pad] * (eta - len(elements))


def decode_content(elements: Sequence[int], field: Field = DEFAULT_FIELD) -> list[str]:
    per = content_groups_per_element(field)
    letters = []
    for value in elements:
        for g in int_to_groups(int(value), per):
            if g == CONTENT_PAD:
                continue
            if g == WORD_SEPARATOR:
                letters.append(" ")
            elif 11 <= g <= 36:
                letters.append(chr(g - LETTER_OFFSET - 1 + ord("a")))
            else:
                raise ValueError(f"element {value} is not a content encoding")
    return "".join(letters).split()


def content_digest(elements: Sequence[int], file_id: int, field: Field = DEFAULT_FIELD) -> int:
    return H(*elements, H(file_id, field=field), field=field)
