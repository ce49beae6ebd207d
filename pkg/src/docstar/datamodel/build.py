"""Owner-side construction of the outsourced tables and their share images.

Every table lives in a named int64 array so that cleartext structures, server
bundles and update deltas all share one representation:

==========  =========================  =====================================
name        shape                      contents
==========  =========================  =====================================
keywords    (B,)                       keyword encoding per column
posdig      (B,)                       H(column position), position 1-based
caps        (α, B)                     0 = allowed, band value = denied
index       (B, slots + 2)             padded layout: ids, marker, chain
addr        (B, 4)                     optimized layout: SiP, CuT, HD, HdV
optinv      (x · y,)                   optimized layout: flat slot array
file_ids    (δ + 1,)                   record i holds file i; 0 is the dummy
ap          (δ + 1, w + 1)             positions (or bits) then Σ H(pos)
content     (δ + 1, η + 1)             encoded words then content digest
==========  =========================  =====================================

``B`` counts every column: the real keywords plus one fake column that every
client may search and one that nobody may.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from ..codec import (
    H,
    content_digest,
    content_length,
    encode_content,
    encode_keyword,
    hash_chain,
    max_keyword_groups,
    position_digest_sum,
    prg_access_value,
)
from ..errors import EncodingOverflow, LayoutOverflow
from ..field import EVAL_POINTS, Field, FieldRng, share_array
from .corpus import AccessState, Corpus

FAKE_ALLOWED_LABEL = "\x00fake-allowed"
FAKE_DENIED_LABEL = "\x00fake-denied"
FAKE_ENCODING = 0

LAYOUTS = ("padded", "optimized")
AP_MODES = ("reduced", "full")


@functools.lru_cache(maxsize=None)
def _field_for(p: int) -> Field:
    return Field(p)


TABLE_NAMES = ("keywords", "posdig", "caps", "index", "addr", "optinv", "file_ids", "ap", "content")


@dataclass
class DeployParams:
    """Public parameters every party knows. Nothing here is secret."""

    p: int
    groups: int
    layout: str
    ap_mode: str
    clients: list[str]
    columns: int
    fake_allowed: int
    fake_denied: int
    gamma: int
    delta: int
    eta: int
    gamma_ap: int
    slots: int = 0
    x: int = 0
    y: int = 0
    reserve: int = 0

    @property
    def field(self) -> Field:
        return _field_for(self.p)

    @property
    def alpha(self) -> int:
        return len(self.clients)

    @property
    def beta(self) -> int:
        return self.columns - 2

    @property
    def records(self) -> int:
        return self.delta + 1

    @property
    def ap_width(self) -> int:
        return self.columns if self.ap_mode == "full" else self.gamma_ap

    def client_row(self, client_id: str) -> int:
        from ..errors import UnknownClient

        try:
            return self.clients.index(client_id)
        except ValueError:
            raise UnknownClient(f"unknown client {client_id!r}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DeployParams":
        return cls(**data)

    def copy(self, **changes) -> "DeployParams":
        return replace(self, clients=list(self.clients), **changes)


@dataclass
class Structures:
    """A full set of tables, cleartext or one server's shares of them."""

    params: DeployParams
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "Structures":
        return Structures(self.params.copy(), {k: v.copy() for k, v in self.arrays.items()})


@dataclass
class ServerBundle(Structures):
    server_index: int = 0


# helpers that both the builder and the update constructors rely on


def keyword_encoding(word: str, params: DeployParams) -> int:
    return encode_keyword(word, params.groups, params.field).numeric


def access_value(seed: bytes, keyword: str, client_id: str, params: DeployParams) -> int:
    return prg_access_value(seed, keyword, client_id, params.field, params.groups)


def padded_row(fids: list[int], slots: int, seed_label: int, f: Field) -> list[int]:
    if len(fids) > slots:
        raise LayoutOverflow(f"{len(fids)} file ids exceed {slots} slots")
    return list(fids) + [0] * (slots - len(fids)) + [len(fids) + 1, hash_chain(fids, seed_label, f)]


def addr_entry(sip: int, cut: int, encoding: int, f: Field) -> list[int]:
    return [sip, cut, H(sip, cut, encoding, field=f), position_digest_sum(range(sip, sip + cut), f)]


def ap_row(positions: list[int], params: DeployParams) -> list[int]:
    f = params.field
    positions = sorted(positions)
    digest = position_digest_sum(positions, f)
    if params.ap_mode == "full":
        bits = [0] * params.columns
        for pos in positions:
            bits[pos - 1] = 1
        return bits + [digest]
    if len(positions) > params.gamma_ap:
        raise LayoutOverflow(f"{len(positions)} keywords exceed AP width {params.gamma_ap}")
    return positions + [0] * (params.gamma_ap - len(positions)) + [digest]


def content_row(words: list[str], file_id: int, params: DeployParams) -> list[int]:
    f = params.field
    elements = encode_content(words, params.eta, f)
    return elements + [content_digest(elements, file_id, f)]


def layout_optinv(
    spans: list[tuple[list[int], int]], reserves: list[int], y: int | None, f: Field
) -> tuple[list[int], list[tuple[int, int]], int, int]:
    """Lay ``(fids, seed_label)`` spans contiguously with per-span reserve.

    Returns the flat slot list padded to ``x · y``, each span's ``(SiP, CuT)``,
    and the matrix view ``(x, y)``.
    """
    slots: list[int] = []
    addresses = []
    for (fids, label), reserve in zip(spans, reserves):
        sip = len(slots) + 1
        slots.extend(fids)
        slots.append(hash_chain(fids, label, f))
        slots.extend([0] * reserve)
        addresses.append((sip, len(fids) + 1))
    widest = max((cut for _, cut in addresses), default=1)
    if y is None:
        y = max(widest, math.isqrt(max(len(slots) - 1, 0)) + 1)
    if widest > y:
        raise LayoutOverflow(f"a span of {widest} slots does not fit rows of width {y}")
    x = max(1, -(-len(slots) // y))
    slots.extend([0] * (x * y - len(slots)))
    return slots, addresses, x, y


def build_structures(
    corpus: Corpus,
    layout: str = "padded",
    reserve_per_keyword: int | Mapping[str, int] = 0,
    *,
    seed: bytes,
    field: Field | None = None,
    ap_mode: str = "reduced",
    groups: int | None = None,
    gamma: int | None = None,
    eta: int | None = None,
    y: int | None = None,
) -> Structures:
    """Build every cleartext table for ``corpus``.

    Args:
        corpus: the owner's data.
        layout: ``"padded"`` inverted rows or ``"optimized"`` AddrList + OptInv.
        reserve_per_keyword: empty slots kept after each keyword's ids for later
            inserts; a mapping gives per-keyword reserves (fakes default to 0).
        seed: the owner's secret for non-access values.
        field: arithmetic modulus, default ``2^61 - 1``.
        ap_mode: ``"reduced"`` position lists or ``"full"`` bit vectors.
        groups: keyword group count; defaults to the longest keyword.
        gamma, eta, y: public widths; default to the tightest that fit.

    Raises:
        DuplicateKeyword, LayoutOverflow, EncodingOverflow.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"layout must be one of {LAYOUTS}")
    if ap_mode not in AP_MODES:
        raise ValueError(f"ap_mode must be one of {AP_MODES}")
    f = field or Field()
    state = AccessState.from_corpus(corpus)
    keywords = state.keywords
    groups = groups or max((len(k) for k in keywords), default=1)
    if groups > max_keyword_groups(f):
        raise EncodingOverflow(
            f"{groups} letter groups leave no non-access band below p={f.p}"
        )
    columns = len(keywords) + 2
    gamma = max(gamma or 0, state.gamma, 1)
    delta = max((fid for fid, _ in corpus.files), default=0)
    eta = max(eta or 0, max((content_length(w, f) for _, w in corpus.files), default=0), 1)
    gamma_ap = max(max((len(ks) for ks in state.file_keywords.values()), default=0), 1)
    if isinstance(reserve_per_keyword, Mapping):
        reserves = [int(reserve_per_keyword.get(k, 0)) for k in keywords] + [0, 0]
        default_reserve = 0
    else:
        reserves = [int(reserve_per_keyword)] * columns
        default_reserve = int(reserve_per_keyword)
    params = DeployParams(
        p=f.p,
        groups=groups,
        layout=layout,
        ap_mode=ap_mode,
        clients=[cid for cid, _ in corpus.clients],
        columns=columns,
        fake_allowed=columns - 2,
        fake_denied=columns - 1,
        gamma=gamma,
        delta=delta,
        eta=eta,
        gamma_ap=gamma_ap,
        reserve=default_reserve,
    )
    encodings = [keyword_encoding(k, params) for k in keywords] + [FAKE_ENCODING, FAKE_ENCODING]
    arrays: dict[str, np.ndarray] = {}
    arrays["keywords"] = np.array(encodings, dtype=np.int64)
    arrays["posdig"] = np.array([H(c + 1, field=f) for c in range(columns)], dtype=np.int64)

    caps = np.zeros((params.alpha, columns), dtype=np.int64)
    for r, (cid, allowed) in enumerate(corpus.clients):
        for c, k in enumerate(keywords):
            if k not in allowed:
                caps[r, c] = access_value(seed, k, cid, params)
        caps[r, params.fake_denied] = access_value(seed, FAKE_DENIED_LABEL, cid, params)
    arrays["caps"] = caps

    postings = [state.postings[k] for k in keywords] + [[], []]
    if layout == "padded":
        params.slots = gamma + max(reserves)
        rows = [padded_row(ids, params.slots, enc, f) for ids, enc in zip(postings, encodings)]
        arrays["index"] = np.array(rows, dtype=np.int64).reshape(columns, params.slots + 2)
    else:
        slots, addresses, params.x, params.y = layout_optinv(
            list(zip(postings, encodings)), reserves, y, f
        )
        arrays["optinv"] = np.array(slots, dtype=np.int64)
        arrays["addr"] = np.array(
            [addr_entry(sip, cut, enc, f) for (sip, cut), enc in zip(addresses, encodings)],
            dtype=np.int64,
        ).reshape(columns, 4)

    position = {k: c + 1 for c, k in enumerate(keywords)}
    by_id = dict(corpus.files)
    file_ids, ap, content = [], [], []
    for fid in range(delta + 1):
        words = by_id.get(fid)
        if words is None:
            file_ids.append(0)
            ap.append(ap_row([], params))
            content.append(content_row([], 0, params))
            continue
        file_ids.append(fid)
        ap.append(ap_row([position[k] for k in state.file_keywords[fid]], params))
        content.append(content_row(words, fid, params))
    arrays["file_ids"] = np.array(file_ids, dtype=np.int64)
    arrays["ap"] = np.array(ap, dtype=np.int64).reshape(delta + 1, params.ap_width + 1)
    arrays["content"] = np.array(content, dtype=np.int64).reshape(delta + 1, eta + 1)
    return Structures(params, arrays)


def share_structures(
    structures: Structures,
    rng: FieldRng | None = None,
    eval_points=EVAL_POINTS,
    slope: int | None = None,
) -> list[ServerBundle]:
    """Split every cell with its own fresh degree-1 polynomial, one bundle per server."""
    rng = rng or FieldRng()
    f = structures.params.field
    bundles = [ServerBundle(structures.params.copy(), {}, server_index=x) for x in eval_points]
    for name, arr in structures.arrays.items():
        shares = share_array(arr, f, rng, eval_points=eval_points, slope=slope)
        for b in bundles:
            b.arrays[name] = shares[b.server_index]
    return bundles


def open_structures(bundles: list[ServerBundle]) -> Structures:
    """Interpolate every table from two or more bundles (owner-side audit helper)."""
    from ..field import open_array

    params = bundles[0].params
    f = params.field
    arrays = {
        name: open_array({b.server_index: b.arrays[name] for b in bundles}, f)
        for name in bundles[0].arrays
    }
    return Structures(params.copy(), arrays)
