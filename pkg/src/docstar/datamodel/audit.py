"""Cleartext invariant checks tying a set of tables back to an access state."""

from __future__ import annotations

from ..codec import H, content_digest, decode_content, hash_chain, position_digest_sum
from .build import FAKE_DENIED_LABEL, FAKE_ENCODING, Structures, access_value, addr_entry, keyword_encoding
from .corpus import AccessState


def keyword_columns(tables: Structures, state: AccessState) -> dict[str, int]:
    params = tables.params
    by_encoding = {}
    for c, enc in enumerate(tables["keywords"]):
        if c not in (params.fake_allowed, params.fake_denied):
            by_encoding[int(enc)] = c
    return {k: by_encoding.get(keyword_encoding(k, params), -1) for k in state.keywords}


def check_structures(tables: Structures, state: AccessState, seed: bytes) -> list[str]:
    """Every way ``tables`` disagree with ``state``; empty when consistent."""
    params = tables.params
    f = params.field
    problems: list[str] = []
    columns = keyword_columns(tables, state)
    for k, c in columns.items():
        if c < 0:
            problems.append(f"keyword {k!r} has no column")
    if problems:
        return problems
    if len(columns) != params.beta:
        problems.append(f"{params.beta} real columns but {len(columns)} keywords")
    for c in (params.fake_allowed, params.fake_denied):
        if int(tables["keywords"][c]) != FAKE_ENCODING:
            problems.append(f"fake column {c} has a real encoding")
    for c in range(params.columns):
        if int(tables["posdig"][c]) != H(c + 1, field=f):
            problems.append(f"position digest of column {c}")

    caps = tables["caps"]
    for r, cid in enumerate(params.clients):
        for k, c in columns.items():
            want = 0 if k in state.access.get(cid, set()) else access_value(seed, k, cid, params)
            if int(caps[r, c]) != want:
                problems.append(f"capability {cid}/{k}")
        if int(caps[r, params.fake_allowed]) != 0:
            problems.append(f"fake-allowed cell of {cid}")
        if int(caps[r, params.fake_denied]) != access_value(seed, FAKE_DENIED_LABEL, cid, params):
            problems.append(f"fake-denied cell of {cid}")

    postings = {c: state.postings[k] for k, c in columns.items()}
    encodings = [int(e) for e in tables["keywords"]]
    if params.layout == "padded":
        index = tables["index"]
        slots = params.slots
        if index.shape != (params.columns, slots + 2):
            problems.append(f"index shape {index.shape}")
            return problems
        for c in range(params.columns):
            ids = postings.get(c, [])
            row = [int(v) for v in index[c]]
            if row[:len(ids)] != ids or any(row[len(ids):slots]):
                problems.append(f"index row {c} ids {row[:slots]} != {ids}")
            if row[slots] != len(ids) + 1:
                problems.append(f"index row {c} marker")
            if row[slots + 1] != hash_chain(ids, encodings[c], f):
                problems.append(f"index row {c} digest")
        if params.gamma < max((len(v) for v in postings.values()), default=0) or slots < params.gamma:
            problems.append("γ smaller than the longest posting list")
    else:
        addr, optinv = tables["addr"], tables["optinv"]
        if optinv.shape != (params.x * params.y,):
            problems.append("optinv size differs from x·y")
        used = set()
        for c in range(params.columns):
            sip, cut = int(addr[c, 0]), int(addr[c, 1])
            ids = postings.get(c, [])
            if cut != len(ids) + 1 or cut > params.y:
                problems.append(f"addr row {c} CuT {cut} for {len(ids)} ids")
                continue
            if [int(v) for v in addr[c]] != addr_entry(sip, cut, encodings[c], f):
                problems.append(f"addr row {c} digests")
            span = [int(v) for v in optinv[sip - 1:sip - 1 + cut]]
            if span != ids + [hash_chain(ids, encodings[c], f)]:
                problems.append(f"optinv span of column {c}")
            positions = set(range(sip, sip + cut))
            if positions & used:
                problems.append(f"span of column {c} overlaps another")
            used |= positions
        stray = [i + 1 for i, v in enumerate(optinv) if v and i + 1 not in used]
        if stray:
            problems.append(f"nonzero slots outside spans: {stray[:5]}")
        if params.gamma < max((len(v) for v in postings.values()), default=0):
            problems.append("γ smaller than the longest posting list")

    file_ids, ap, content = tables["file_ids"], tables["ap"], tables["content"]
    if file_ids.shape != (params.records,):
        problems.append("file store size")
        return problems
    for i in range(params.records):
        present = i in state.file_keywords
        if int(file_ids[i]) != (i if present else 0):
            problems.append(f"file id of record {i}")
        positions = sorted(columns[k] + 1 for k in state.file_keywords.get(i, ()))
        row = [int(v) for v in ap[i]]
        if params.ap_mode == "full":
            got = [c + 1 for c, bit in enumerate(row[:-1]) if bit]
            if got != positions or any(b not in (0, 1) for b in row[:-1]):
                problems.append(f"AP bits of record {i}")
        else:
            got = [v for v in row[:-1] if v]
            if got != positions:
                problems.append(f"AP positions of record {i}: {got} != {positions}")
        if row[-1] != position_digest_sum(positions, f):
            problems.append(f"AP digest of record {i}")
        elements = [int(v) for v in content[i, :-1]]
        if int(content[i, -1]) != content_digest(elements, i if present else 0, f):
            problems.append(f"content digest of record {i}")
        if present and decode_content(elements, f) != state.contents.get(i, decode_content(elements, f)):
            problems.append(f"content of record {i}")
    return problems
