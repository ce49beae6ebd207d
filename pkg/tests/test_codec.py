import hashlib
import struct

import pytest
from hypothesis import given, strategies as st

from docstar.codec import (
    H,
    band_floor,
    content_digest,
    decode_content,
    decode_keyword,
    encode_content,
    encode_keyword,
    hash_chain,
    max_keyword_groups,
    position_digest_sum,
    prg_access_value,
    tokenize,
)
from docstar.errors import EncodingOverflow, UnsupportedCharacter
from docstar.field import MERSENNE_61, Field

# frozen from a standalone hashlib script (no package code involved)
H_ARE = 1392340513681395217
CHAIN_ARE_1_2 = 1255218524254915904
H_1, H_2, H_3 = 2207860133702939781, 1542032916178368215, 1894885029704939919
POSDIG_1_2_3 = 1033092061158860013

words = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=9)


def sha_oracle(*args):
    msg = b"".join(struct.pack(">Q", a) for a in args)
    return int.from_bytes(hashlib.sha256(msg).digest(), "big") % MERSENNE_61


@pytest.mark.parametrize("word, value", [("are", 112815), ("ana", 112411), ("fig", 161917)])
def test_encode_worked_examples(word, value):
    enc = encode_keyword(word, 3)
    assert enc.numeric == value
    assert decode_keyword(enc.numeric, 3) == word


def test_encode_is_case_folded():
    assert encode_keyword("ARE", 3).numeric == 112815


def test_padding_groups_in_band_and_deterministic():
    a = encode_keyword("ox", 6)
    assert a == encode_keyword("ox", 6)
    assert a.groups[:2] == (25, 34)
    assert all(37 <= g <= 99 for g in a.groups[2:])


@pytest.mark.parametrize("word", ["a1", "héllo", "two words", ""])
def test_encode_rejects_non_letters(word):
    with pytest.raises(UnsupportedCharacter):
        encode_keyword(word, 9)


def test_encode_overflow():
    with pytest.raises(EncodingOverflow):
        encode_keyword("toolong", 3)
    with pytest.raises(EncodingOverflow):
        encode_keyword("zzzz", 4, Field(500009))


def test_hash_matches_standalone_sha256():
    assert H(112815) == H_ARE == sha_oracle(112815)
    assert (H(1), H(2), H(3)) == (H_1, H_2, H_3)


def test_hash_chain_examples():
    assert hash_chain([], 0) == H(0)
    assert hash_chain([1, 2], 112815) == CHAIN_ARE_1_2
    assert CHAIN_ARE_1_2 == sha_oracle(2, sha_oracle(1, sha_oracle(112815)))


@given(st.lists(st.integers(0, 10**6), max_size=10), st.integers(0, 10**6), st.integers(0, 10**6))
def test_hash_chain_incremental_law(items, label, new):
    assert hash_chain(items + [new], label) == H(new, hash_chain(items, label))


def test_position_digest_sum_examples():
    assert position_digest_sum([1, 2, 3]) == POSDIG_1_2_3
    assert position_digest_sum([]) == 0
    assert position_digest_sum([5]) == H(5)
    with pytest.raises(ValueError):
        position_digest_sum([0])


def test_prg_access_value_deterministic_and_in_band():
    a = prg_access_value(b"seed", "horror", "alice")
    assert a == prg_access_value(b"seed", "horror", "alice")
    assert a != prg_access_value(b"seed", "horror", "bob")
    assert a != prg_access_value(b"other", "horror", "alice")
    assert a > int("36" * 9)
    with pytest.raises(ValueError):
        prg_access_value(b"", "x", "y")


@given(st.binary(min_size=1, max_size=16), words, st.text(max_size=8))
def test_band_disjoint_from_every_encoding_difference(seed, kw, client):
    groups = 9
    v = prg_access_value(seed, kw, client, target_groups=groups)
    floor = band_floor(groups)
    assert floor <= v < MERSENNE_61 - floor
    # sw - uw ranges over (-floor, floor); adding v never lands on 0 mod p
    for diff in (-(floor - 1), -1, 0, 1, floor - 1):
        assert (diff + v) % MERSENNE_61 != 0


def test_grant_then_revoke_round_trip():
    f = Field()
    v = prg_access_value(b"s", "fig", "Lisa")
    cell = v
    cell = f.add(cell, f.neg(v))  # grant
    assert cell == 0
    cell = f.add(cell, v)  # revoke
    assert cell == v


@given(words, words)
def test_encoding_injective_on_letters(a, b):
    if a != b:
        assert encode_keyword(a, 9).numeric != encode_keyword(b, 9).numeric


def test_max_groups():
    assert max_keyword_groups(Field()) == 9
    assert max_keyword_groups(Field(500009)) == 2


@given(st.lists(words, max_size=12))
def test_content_round_trip(ws):
    f = Field()
    elements = encode_content(ws, 40, f)
    assert len(elements) == 40
    assert decode_content(elements, f) == ws


def test_content_too_long_and_bad_decode():
    with pytest.raises(EncodingOverflow):
        encode_content(["abcdefghij"] * 10, 2)
    with pytest.raises(ValueError):
        decode_content([12345])


def test_content_digest_binds_file_id():
    el = encode_content(["how", "are", "you"], 3)
    assert content_digest(el, 1) == H(*el, H(1))
    assert content_digest(el, 1) != content_digest(el, 2)


def test_tokenize():
    assert tokenize("How are you? Fig-is_a fruit") == ["how", "are", "you", "fig", "is", "a", "fruit"]
