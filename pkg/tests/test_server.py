import json

import numpy as np
import pytest

from docstar.client import build_kpv, build_onehot
from docstar.codec import H, position_digest_sum
from docstar.datamodel import build_structures, make_update, share_update
from docstar.errors import BadUpdate
from docstar.field import Field, consistent_open, open_array
import docstar.server as srv
from docstar.server import (
    access_dot,
    decode_update,
    encode_update,
    masked_content,
    optinv_check,
    optinv_fetch,
    optinv_hash_matrix,
    phase1_answer,
    pool_size,
    scatter_bins,
    select_rows,
    window_size,
)
from docstar.transport.frames import Frame, MsgType
from helpers import (
    OWNER_SEED,
    make_cluster,
    optimized_fixture_corpus,
    rejected_by,
    run_phase1,
    run_to_phase3,
    send_vectors,
    start_session,
)
from worked_example import (
    F as PF,
    PHASE1_OPEN,
    PHASE1_SERVER,
    PHASE2_OPEN,
    PHASE2_SERVER,
    POINTS,
    TEST1_SHARES,
    caps_shares,
    inverted_shares,
    keyword_shares,
    query_shares,
    rn_shares,
    selector_shares,
)

F = Field()


# worked example at p = 500009


def test_phase1_worked_example():
    kw, caps, rn, uw = keyword_shares(), caps_shares("Lisa"), rn_shares(), query_shares()
    answers = {z: phase1_answer(PF, kw[z], uw[z], caps[z], rn[z]) for z in POINTS}
    assert {z: a.tolist() for z, a in answers.items()} == PHASE1_SERVER
    assert open_array(answers, PF).tolist() == PHASE1_OPEN


def test_phase2_worked_example():
    caps, v, inv = caps_shares("Lisa"), selector_shares(0), inverted_shares()
    t1 = {z: np.array([access_dot(PF, caps[z], v[z])]) for z in POINTS}
    assert {z: int(t[0]) for z, t in t1.items()} == TEST1_SHARES
    assert open_array(t1, PF).tolist() == [0]
    rows = {z: select_rows(PF, v[z], inv[z]) for z in POINTS}
    assert {z: r.tolist() for z, r in rows.items()} == PHASE2_SERVER
    assert open_array(rows, PF).tolist() == PHASE2_OPEN


def test_phase2_denied_selector_fails_test1():
    caps, v = caps_shares("Lisa"), selector_shares(1)
    t1 = {z: np.array([access_dot(PF, caps[z], v[z])]) for z in POINTS}
    assert open_array(t1, PF).tolist() != [0]


# client vector tests on cleartext values (every test is linear or quadratic)


@pytest.mark.parametrize("v, a, b", [
    ([0, 1, 0], 1, 1),
    ([0, 0, 0], 0, 0),
    ([1, 0, 1], 2, 2),
    ([0, 10, -9], 1, 181),
])
def test_tests_a_and_b(v, a, b):
    vec = F.array(v)
    assert int(srv.test_a(F, vec)) == a
    assert int(srv.test_b(F, vec)) == b


def test_test_c():
    assert not srv.test_c(F, F.array([0, 1, 1, 0])).any()
    assert srv.test_c(F, F.array([0, 2, 1])).tolist() == [0, 2, 0]


def test_test2_and_test4_cleartext():
    file_ids = F.array([0, 1, 2, 3])
    window = F.array([1, 2, 0])
    v = F.array([[0, 1, 0, 0]])
    assert srv.test2_values(F, file_ids, v, F.array([[1, 0, 0]]), window).tolist() == [0]
    assert srv.test2_values(F, file_ids, F.array([[0, 0, 0, 1]]), F.array([[1, 0, 0]]), window).tolist() != [0]
    posdig = F.array([H(c) for c in range(1, 6)])
    hap = F.array([position_digest_sum([1, 2])])
    assert srv.test4_values(F, F.array([build_kpv([1, 2], 5)]), posdig, hap).tolist() == [0]
    assert srv.test4_values(F, F.array([build_kpv([1], 5)]), posdig, hap).tolist() != [0]
    assert srv.test4_values(F, F.array([build_kpv([1, 2, 3], 5)]), posdig, hap).tolist() != [0]


def test_masked_content_opens_only_when_allowed():
    rows = F.array([[7, 8, 9]])
    rn = F.array([5, 6, 7])
    assert masked_content(F, rows, [0], rn).tolist() == [[7, 8, 9]]
    assert masked_content(F, rows, [2], rn).tolist() == [[17, 20, 23]]


def test_scatter_bins():
    out = scatter_bins([[0, 3], [2, 1]], [np.array([0, 1]), np.array([1, 0])], 4)
    assert out.tolist() == [[0, 0, 0, 1], [0, 0, 1, 0]]


# OptInv check on the cleartext fixture (x = 3, y = 4)


@pytest.fixture(scope="module")
def opt_tables():
    return build_structures(optimized_fixture_corpus(), "optimized", {"ana": 2}, seed=OWNER_SEED, y=4)


def _check(t, rows, pos, column=0):
    hashes = optinv_hash_matrix(F, t.params.x, t.params.y)
    return optinv_check(F, hashes, F.array(rows), F.array(pos), int(t["addr"][column, 3]))


def test_optinv_check_accepts_span(opt_tables):
    assert _check(opt_tables, [[1, 0, 0], [1, 0, 0]], [[0, 0, 0, 1], [1, 1, 1, 1]]) == 0


def test_optinv_check_wrong_row(opt_tables):
    got = _check(opt_tables, [[0, 1, 0], [1, 0, 0]], [[0, 0, 0, 1], [1, 1, 1, 1]])
    want = (H(5) + H(6) + H(7) - int(opt_tables["addr"][0, 3])) % F.p
    assert got == want != 0


def test_optinv_check_wrong_positions(opt_tables):
    assert _check(opt_tables, [[1, 0, 0], [1, 0, 0]], [[0, 0, 0, 0], [1, 1, 1, 1]]) == H(4)
    # the second pair cannot smuggle in extra slots either
    assert _check(opt_tables, [[1, 0, 0], [0, 1, 0]], [[0, 0, 0, 1], [0, 1, 1, 1]]) != 0


def test_optinv_fetch_masks_outside_span(opt_tables):
    t = opt_tables
    matrix = t["optinv"].reshape(t.params.x, t.params.y)
    rn = F.array(np.arange(100, 108))
    masked, picked = optinv_fetch(F, matrix, F.array([[1, 0, 0], [1, 0, 0]]),
                                  F.array([[0, 0, 0, 1], [1, 1, 1, 1]]), rn)
    assert masked[0, :3].tolist() == t["optinv"][:3].tolist()
    assert masked[0, 3] == (int(matrix[0, 3]) + 103) % F.p
    assert picked.tolist() == [matrix[0].tolist()] * 2


# sessions against real nodes


@pytest.fixture
def cluster(corpus):
    return make_cluster(corpus, seed=1)


def test_phase2_before_phase1_is_refused(cluster):
    c = start_session(cluster, "Lisa")
    replies = send_vectors(c, MsgType.P2_VECTOR, [build_onehot(5, 0)])
    assert rejected_by(replies) == "sequence"


def test_phase3_without_phase2_is_refused(cluster):
    c = start_session(cluster, "Lisa", seed=2)
    run_phase1(c, "are")
    p = c.params
    replies = send_vectors(c, MsgType.P3_VECTOR, [build_onehot(p.records, 1)] * p.gamma
                           + [build_onehot(window_size(p), 0)] * p.gamma)
    assert rejected_by(replies) == "sequence"


def test_unknown_session_and_client(cluster):
    replies = cluster.request({z: Frame(MsgType.P1_QUERY, bytes(16), [np.array([1])]) for z in cluster.points})
    assert rejected_by(replies) == "request"
    from docstar.client import Client
    from docstar.errors import UnknownClient

    with pytest.raises(UnknownClient):
        Client("Mallory", cluster).run_query("are")


def test_wrong_vector_length_is_a_protocol_error(cluster):
    c = start_session(cluster, "Lisa", seed=3)
    replies = send_vectors(c, MsgType.P1_QUERY, [np.array([1, 2])])
    assert rejected_by(replies) == "request"
    assert "ProtocolError" in json.loads(replies[1].text)["kind"]


@pytest.mark.parametrize("vector, test", [
    ([0, 0, 0, 0, 0], "A"),
    ([1, 1, 0, 0, 0], "A"),
    ([0, 0, 0, 10, -9], "B"),
    ([0, 1, 0, 0, 0], "1"),  # "ana" is denied to Lisa
    ([0, 0, 0, 0, 1], "1"),  # the always-denied fake column
])
def test_phase2_selector_rejections(cluster, vector, test):
    c = start_session(cluster, "Lisa", seed=4)
    assert run_phase1(c, "are") == 0
    replies = send_vectors(c, MsgType.P2_VECTOR, [F.array(vector)])
    assert rejected_by(replies) == test


def _p3_vectors(p, files, slots):
    width = window_size(p)
    sel = [build_onehot(p.records, f) for f in files]
    ids = [build_onehot(width, s) for s in slots]
    return sel + ids


@pytest.mark.parametrize("files, slots, test", [
    ([3, 0], [0, 2], "2"),  # file 3 does not hold "are"
    ([1, 0], [1, 2], "2"),  # file 1 claimed at file 2's slot
    ([0, 0], [0, 2], "2"),  # dummy against a real id
])
def test_phase3_file_selector_rejections(cluster, files, slots, test):
    c = start_session(cluster, "Lisa", seed=5)
    column, fids, window = run_to_phase3(c, "are")
    assert fids == [1, 2]
    replies = send_vectors(c, MsgType.P3_VECTOR, _p3_vectors(c.params, files, slots))
    assert rejected_by(replies) == test


@pytest.mark.parametrize("kpv_positions, test", [
    ([[2], []], "4"),         # file 2 holds positions 1 and 2; one left out
    ([[1, 2, 3], []], "4"),   # extra position
    ([[1, 2], [1]], "4"),     # dummy record has no positions
])
def test_phase3_kpv_rejections(cluster, kpv_positions, test):
    c = start_session(cluster, "Lisa", seed=6)
    run_to_phase3(c, "are")
    p = c.params
    replies = send_vectors(c, MsgType.P3_VECTOR, _p3_vectors(p, [2, 0], [1, window_size(p) - 1]))
    assert replies[1].msg_type == MsgType.P3_POSITIONS
    kpvs = [build_kpv(pos, p.columns) for pos in kpv_positions]
    assert rejected_by(send_vectors(c, MsgType.P3_KPV, kpvs)) == test


def test_phase3_non_binary_kpv_rejected_by_c(cluster):
    c = start_session(cluster, "Lisa", seed=7)
    run_to_phase3(c, "are")
    p = c.params
    send_vectors(c, MsgType.P3_VECTOR, _p3_vectors(p, [1, 0], [0, window_size(p) - 1]))
    kpv = np.zeros(p.columns, dtype=np.int64)
    kpv[0] = 2
    replies = send_vectors(c, MsgType.P3_KPV, [kpv, np.zeros(p.columns, dtype=np.int64)])
    assert rejected_by(replies) == "C"


@pytest.fixture
def opt_cluster():
    return make_cluster(optimized_fixture_corpus(), "optimized", seed=2, reserve={"ana": 2}, y=4)


def _addr(c, keyword):
    from docstar.datamodel.build import keyword_encoding

    column = run_phase1(c, keyword)
    replies = send_vectors(c, MsgType.P2_VECTOR, [build_onehot(c.params.columns, column)])
    assert replies[1].msg_type == MsgType.ADDR_ANS
    (entry,) = c._open(replies, 2, 2)
    assert H(*[int(v) for v in entry[:2]], keyword_encoding(keyword, c.params)) == int(entry[2])
    return [int(v) for v in entry[:2]]


@pytest.mark.parametrize("rows, pos, test", [
    ([[0, 1, 0], [1, 0, 0]], [[0, 0, 0, 1], [1, 1, 1, 1]], "optinv_verify"),
    ([[1, 0, 0], [1, 0, 0]], [[0, 0, 0, 0], [1, 1, 1, 1]], "optinv_verify"),
    ([[1, 0, 0], [1, 0, 0]], [[0, 0, 1, 1], [1, 1, 1, 1]], "optinv_verify"),
    ([[1, 1, 0], [1, 0, 0]], [[0, 0, 0, 1], [1, 1, 1, 1]], "A"),
    ([[0, 10, -9], [1, 0, 0]], [[0, 0, 0, 1], [1, 1, 1, 1]], "B"),
    ([[1, 0, 0], [1, 0, 0]], [[0, 0, 0, 2], [1, 1, 1, 1]], "C"),
])
def test_optinv_vector_rejections(opt_cluster, rows, pos, test):
    c = start_session(opt_cluster, "Lisa", seed=8)
    assert _addr(c, "are") == [1, 3]
    vectors = [F.array(rows[0]), F.array(pos[0]), F.array(rows[1]), F.array(pos[1])]
    assert rejected_by(send_vectors(c, MsgType.OPTINV_VECTORS, vectors)) == test


def test_optinv_honest_vectors_open_span(opt_cluster):
    c = start_session(opt_cluster, "Ava", seed=9)
    sip, cut = _addr(c, "ana")
    assert (sip, cut) == (4, 3)
    # spans positions 4 (row 0) and 5-6 (row 1)
    vectors = [F.array([1, 0, 0]), F.array([1, 1, 1, 0]), F.array([0, 1, 0]), F.array([0, 0, 1, 1])]
    replies = send_vectors(c, MsgType.OPTINV_VECTORS, vectors)
    first, second = c._open(replies, 2, 2)
    assert (int(first[3]), int(second[0])) == (2, 3)


def test_holdback_shares_never_reach_the_client(corpus):
    cluster = make_cluster(corpus, "optimized", seed=3, record=True)
    nodes = cluster.nodes
    from docstar.client import Client

    Client("Lisa", cluster).run_query("are")
    held = set()
    for z, node in nodes.items():
        held.update(int(v) for v in node.bundle["addr"][:, 3])
        held.update(int(v) for v in node.bundle["ap"][:, -1])
    to_client = [f for ph, d, s, dst, f in cluster.meter.transcript if d == "s2c"]
    assert to_client
    for frame in to_client:
        for vec in frame.vectors:
            assert not held.intersection(int(v) for v in np.ravel(vec))


def test_pool_and_window_sizes(corpus):
    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    p = t.params
    assert window_size(p) == p.slots + 1
    assert pool_size(p) == 2 + p.slots + p.gamma + p.gamma * (p.eta + 1)


# updates over the wire


def test_update_frame_round_trip(corpus):
    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    u = make_update("add_keyword", t.params, seed=OWNER_SEED, keyword="you", allowed={"Ava"})
    share = share_update(u)[2]
    back = decode_update(encode_update(share))
    assert back.update_id == share.update_id and back.params == share.params
    for a, b in zip(back.ops, share.ops):
        assert (a.kind, a.table, a.axis, a.index) == (b.kind, b.table, b.axis, b.index)
        assert np.array_equal(a.values, b.values)


def test_update_applied_once_per_id(corpus):
    cluster = make_cluster(corpus, seed=4)
    t = build_structures(corpus, "padded", 0, seed=OWNER_SEED)
    u = make_update("revoke", t.params, seed=OWNER_SEED, client_id="Lisa", keyword="are", column=0)
    shares = share_update(u)
    frames = {z: encode_update(shares[z]) for z in cluster.points}
    cluster.request(frames)
    cluster.request(frames)
    opened, ok = consistent_open({z: n.bundle["caps"][0] for z, n in cluster.nodes.items()}, 1, F)
    assert ok and opened[0] == (t["caps"][0, 0] + int(u.ops[0].values[0, 0])) % F.p


def test_malformed_update_frame():
    with pytest.raises(BadUpdate):
        decode_update(Frame(MsgType.UPDATE, text="{}"))
    with pytest.raises(BadUpdate):
        decode_update(Frame(MsgType.UPDATE, text=json.dumps({"ops": [{}], "id": "x"}), vectors=[]))
