import numpy as np
import pytest

from docstar.codec import H, hash_chain, position_digest_sum
from docstar.datamodel import (
    AccessState,
    Corpus,
    DeployParams,
    access_value,
    apply_update,
    build_structures,
    check_structures,
    load_bundle,
    make_update,
    open_structures,
    save_bundle,
    share_structures,
    share_update,
)
from docstar.errors import BadUpdate, ConfigError, DuplicateKeyword, LayoutOverflow, RowFull
from docstar.field import FieldRng
from helpers import OWNER_SEED, optimized_fixture_corpus, table1_corpus

CHAIN_ARE_1_2 = 1255218524254915904


def test_table1_shapes_and_cells(corpus):
    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    p = t.params
    assert (p.alpha, p.beta, p.columns, p.gamma, p.delta) == (2, 3, 5, 2, 3)
    assert t["keywords"].tolist() == [112815, 112411, 161917, 0, 0]
    lisa, ava = t["caps"].tolist()
    assert lisa[0] == 0 and lisa[3] == 0
    assert lisa[1] == access_value(OWNER_SEED, "ana", "Lisa", p) and lisa[1] > 363636
    assert lisa[2] == access_value(OWNER_SEED, "fig", "Lisa", p)
    assert ava[0] > 0 and ava[1:4] == [0, 0, 0]
    assert all(row[p.fake_denied] > 0 for row in (lisa, ava))
    assert t["index"][0].tolist() == [1, 2, 3, CHAIN_ARE_1_2]
    assert t["index"][1].tolist()[:3] == [2, 0, 2]
    assert t["posdig"].tolist() == [H(c) for c in range(1, 6)]
    # AP lists: positions then digest, dummy record 0 empty
    assert t["ap"].tolist() == [
        [0, 0, 0],
        [1, 0, H(1)],
        [1, 2, position_digest_sum([1, 2])],
        [3, 0, H(3)],
    ]


def test_optimized_layout_addr_list():
    t = build_structures(optimized_fixture_corpus(), "optimized", {"ana": 2}, seed=OWNER_SEED, y=4)
    addr = t["addr"]
    assert addr[:3, :2].tolist() == [[1, 3], [4, 3], [9, 2]]
    assert (t.params.x, t.params.y) == (3, 4)
    assert addr[0, 2] == H(1, 3, 112815)
    assert addr[0, 3] == position_digest_sum([1, 2, 3])
    assert t["optinv"][:3].tolist() == [1, 2, CHAIN_ARE_1_2]
    assert t["optinv"][6:8].tolist() == [0, 0]  # reserve after "ana"


def test_empty_corpus_has_only_fakes():
    t = build_structures(Corpus([], [("c", set())], []), "padded", 0, seed=OWNER_SEED)
    assert t.params.columns == 2 and t.params.delta == 0
    assert t["file_ids"].tolist() == [0]
    assert check_structures(t, AccessState.from_corpus(Corpus([], [("c", set())], [])), OWNER_SEED) == []


@pytest.mark.parametrize("layout", ["padded", "optimized"])
@pytest.mark.parametrize("ap_mode", ["reduced", "full"])
def test_builder_satisfies_invariants(corpus, layout, ap_mode):
    t = build_structures(corpus, layout, 1, seed=OWNER_SEED, ap_mode=ap_mode)
    assert check_structures(t, AccessState.from_corpus(corpus), OWNER_SEED) == []
    # uniform shapes
    assert t["content"].shape == (4, t.params.eta + 1)
    assert t["ap"].shape[1] == t.params.ap_width + 1


def test_builder_errors():
    with pytest.raises(DuplicateKeyword):
        Corpus([], [], ["are", "are"])
    with pytest.raises(LayoutOverflow):
        build_structures(table1_corpus(), "optimized", 0, seed=OWNER_SEED, y=2)
    with pytest.raises(ValueError):
        Corpus([(0, ["x"])], [], [])


def test_fixed_slope_shares_reproduce_share_tables(corpus):
    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    bundles = share_structures(t, FieldRng(0), slope=1)
    assert [b["keywords"][:3].tolist() for b in bundles[:3]] == [
        [112816, 112412, 161918], [112817, 112413, 161919], [112818, 112414, 161920],
    ]


def test_bundle_round_trip_any_two(corpus):
    t = build_structures(corpus, "optimized", 1, seed=OWNER_SEED)
    bundles = share_structures(t, FieldRng(4))
    for pair in ([0, 1], [2, 3], [1, 3]):
        opened = open_structures([bundles[i] for i in pair])
        for name, arr in t.arrays.items():
            assert np.array_equal(opened[name], arr), name


def test_equal_cells_get_unrelated_shares(corpus):
    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    b1 = share_structures(t, FieldRng(5))[0]
    zeros = b1["caps"][t["caps"] == 0]
    assert len(set(zeros.tolist())) == zeros.size


def test_bundle_files_round_trip(tmp_path, corpus):
    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    bundle = share_structures(t, FieldRng(1))[2]
    save_bundle(bundle, tmp_path / "b")
    raw = (tmp_path / "b" / "caps.bin").read_bytes()
    assert raw.startswith(b"DOCSTAR1")
    back = load_bundle(tmp_path / "b")
    assert back.server_index == 3 and back.params == bundle.params
    for name in bundle.arrays:
        assert np.array_equal(back[name], bundle[name])


def test_bundle_rejects_corruption(tmp_path, corpus):
    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    save_bundle(share_structures(t, FieldRng(1))[0], tmp_path / "b")
    path = tmp_path / "b" / "caps.bin"
    path.write_bytes(b"NOTMAGIC" + path.read_bytes()[8:])
    with pytest.raises(ConfigError):
        load_bundle(tmp_path / "b")


# updates on cleartext tables


def test_revoke_vector(corpus):
    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    u = make_update("revoke", t.params, seed=OWNER_SEED, client_id="Lisa", keyword="are", column=0)
    (op,) = u.ops
    assert op.rows.tolist() == [0]
    assert op.values.tolist() == [[access_value(OWNER_SEED, "are", "Lisa", t.params), 0, 0, 0, 0]]
    after = apply_update(t, u)
    assert after["caps"][0, 0] == access_value(OWNER_SEED, "are", "Lisa", t.params)


def test_grant_then_revoke_is_net_zero(corpus):
    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    g = make_update("grant", t.params, seed=OWNER_SEED, client_id="Lisa", keyword="fig", column=2)
    r = make_update("revoke", t.params, seed=OWNER_SEED, client_id="Lisa", keyword="fig", column=2)
    assert apply_update(t, g)["caps"][0, 2] == 0
    assert np.array_equal(apply_update(apply_update(t, g), r)["caps"], t["caps"])


def test_add_fid_padded_vectors(corpus):
    t = build_structures(corpus, "padded", 1, seed=OWNER_SEED)
    row = t["index"][2]
    u = make_update("add_fid", t.params, column=2, file_id=4, row=row, encoding=161917)
    (op,) = u.ops
    slots = t.params.slots
    assert op.cols.tolist() == [1, slots, slots + 1]
    old = int(row[slots + 1])
    assert op.values[2].tolist() == [4, 1, (H(4, old) - old) % t.params.p]
    assert not op.values[[0, 1, 3, 4]].any()
    new_row = apply_update(t, u)["index"][2]
    assert new_row.tolist() == [3, 4, 0, 3, hash_chain([3, 4], 161917)]


def test_add_fid_full_row(corpus):
    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    row = t["index"][0]
    with pytest.raises(RowFull):
        make_update("add_fid", t.params, column=0, file_id=3, row=row, encoding=112815, extend=False)
    u = make_update("add_fid", t.params, column=0, file_id=3, row=row, encoding=112815)
    after = apply_update(t, u)
    assert after.params.slots == 3
    assert after["index"].shape == (5, 5)  # every row widened
    assert after["index"][0].tolist() == [1, 2, 3, 4, hash_chain([1, 2, 3], 112815)]


def test_zero_update_is_identity(corpus):
    from docstar.datamodel import Update, UpdateOp

    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    u = Update([UpdateOp("add", "caps", np.zeros_like(t["caps"]))], t.params.copy())
    assert np.array_equal(apply_update(t, u)["caps"], t["caps"])


def test_bad_update_coordinates(corpus):
    from docstar.datamodel import Update, UpdateOp

    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    u = Update([UpdateOp("add", "caps", np.zeros((1, 5), dtype=np.int64), rows=np.array([9]))], t.params.copy())
    with pytest.raises(BadUpdate):
        apply_update(t, u)
    with pytest.raises(BadUpdate):
        apply_update(t, Update([UpdateOp("add", "nope", np.zeros(1, dtype=np.int64))], t.params.copy()))
    with pytest.raises(BadUpdate):
        make_update("grant", t.params, seed=OWNER_SEED, client_id="Lisa", keyword="x", column=3)


def test_shared_update_matches_cleartext_update(corpus):
    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    bundles = share_structures(t, FieldRng(2))
    u = make_update("add_keyword", t.params, seed=OWNER_SEED, keyword="you", allowed={"Lisa"})
    shares = share_update(u, FieldRng(3))
    new = [apply_update(b, shares[b.server_index]) for b in bundles]
    opened = open_structures(new[:2])
    want = apply_update(t, u)
    for name in want.arrays:
        assert np.array_equal(opened[name], want[name]), name


def _random_ops(tables, oracle_state, corpus, rng, n):
    """Apply n random cleartext updates, mirroring them onto the oracle."""
    from helpers import OracleStore

    store = OracleStore(corpus)
    columns = {k: c for c, k in enumerate(store.state.keywords)}
    next_id = tables.params.delta + 1
    for _ in range(n):
        p = tables.params
        kind = rng.choice(["grant", "revoke", "add_keyword", "add_file", "delete_fid", "delete_keyword"])
        kws = store.state.keywords
        cid = rng.choice(p.clients)
        if kind in ("grant", "revoke") and kws:
            kw = rng.choice(kws)
            cell = int(tables["caps"][p.client_row(cid), columns[kw]])
            if (kind == "grant") == (cell == 0):
                continue
            u = make_update(kind, p, seed=OWNER_SEED, client_id=cid, keyword=kw, column=columns[kw])
            getattr(store, kind)(cid, kw)
        elif kind == "add_keyword":
            kw = "new" + "abcdefghij"[len(kws) % 10] * (1 + len(kws) // 10)
            if kw in kws or len(kw) > p.groups:
                continue
            allowed = {c for c in p.clients if rng.random() < 0.5}
            u = make_update("add_keyword", p, seed=OWNER_SEED, keyword=kw, allowed=allowed)
            store.add_keyword(kw, allowed)
            columns[kw] = p.columns  # appended after the fakes
        elif kind == "add_file":
            words = rng.sample(kws, min(2, len(kws))) if kws else ["zz"]
            cols = sorted(columns[w] + 1 for w in set(words))  # posdig positions are 1-based
            u = make_update("add_file", p, file_id=next_id, words=words, positions=cols)
            tables = apply_update(tables, u)
            store.add_file(next_id, words)
            for w in set(words):
                pp = tables.params
                if pp.layout == "padded":
                    u = make_update("add_fid", pp, column=columns[w], file_id=next_id,
                                    row=tables["index"][columns[w]], encoding=int(tables["keywords"][columns[w]]))
                else:
                    u = make_update("add_fid", pp, column=columns[w], file_id=next_id,
                                    addr=tables["addr"], optinv=tables["optinv"], encodings=tables["keywords"])
                tables = apply_update(tables, u)
            next_id += 1
            continue
        elif kind == "delete_fid":
            options = [(k, f) for k in kws for f in store.state.postings[k]]
            if not options:
                continue
            kw, fid = rng.choice(options)
            c = columns[kw]
            fast = rng.random() < 0.5
            if p.layout == "padded":
                u = make_update("delete_fid", p, column=c, file_id=fid, row=tables["index"][c],
                                encoding=int(tables["keywords"][c]), fast=fast)
            else:
                u = make_update("delete_fid", p, column=c, file_id=fid, addr=tables["addr"],
                                optinv=tables["optinv"], encoding=int(tables["keywords"][c]), fast=fast)
            store.delete_fid(kw, fid)
        else:
            if not kws:
                continue
            kw = rng.choice(kws)
            c = columns[kw]
            u = make_update("delete_keyword", p, seed=OWNER_SEED, keyword=kw, column=c,
                            current=tables["caps"][:, c], fast=rng.random() < 0.5)
            store.delete_keyword(kw)
        tables = apply_update(tables, u)
    return tables, store


@pytest.mark.parametrize("layout", ["padded", "optimized"])
@pytest.mark.parametrize("seed", range(6))
def test_oracle_equivalence_after_random_updates(layout, seed):
    import random

    from docstar.synth import random_corpus

    rng = random.Random(seed)
    corpus = random_corpus(rng, max_files=15, max_keywords=8, max_clients=3, keyword_len=(2, 5))
    tables = build_structures(corpus, layout, 1, seed=OWNER_SEED, groups=5, y=12)
    tables, store = _random_ops(tables, None, corpus, rng, 25)
    assert check_structures(tables, store.state, OWNER_SEED) == []


def test_params_round_trip():
    t = build_structures(table1_corpus(), "optimized", 0, seed=OWNER_SEED)
    assert DeployParams.from_dict(t.params.to_dict()) == t.params
