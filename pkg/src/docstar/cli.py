"""``docstar`` command line: outsource, serve, query, administer, benchmark.

Exit codes: 0 ok, 2 access denied or keyword absent, 3 verification failure,
4 protocol abort, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

from . import bench as bench_mod
from .client import Client, Owner
from .codec import tokenize
from .datamodel import Corpus
from .deploy import (
    DeployConfig,
    connect,
    load_node,
    local_cluster,
    outsource,
    owner_seed,
    save_cluster,
    save_node,
)
from .errors import (
    AccessDenied,
    DocStarError,
    MaliciousServerDetected,
    NoAccessOrAbsent,
    PeerTimeout,
    ProtocolAbort,
    ServerMisbehavior,
    TamperedRandomness,
)
from .field import MERSENNE_61

EXIT_OK, EXIT_ERROR, EXIT_DENIED, EXIT_VERIFY, EXIT_ABORT = 0, 1, 2, 3, 4


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (NoAccessOrAbsent, AccessDenied)):
        return EXIT_DENIED
    if isinstance(exc, (ServerMisbehavior, MaliciousServerDetected, TamperedRandomness)):
        return EXIT_VERIFY
    if isinstance(exc, ProtocolAbort):
        return EXIT_ABORT
    return EXIT_ERROR


class _Out:
    def __init__(self, as_json: bool):
        self.as_json = as_json

    def emit(self, data: dict, text: str) -> None:
        print(json.dumps(data, sort_keys=True) if self.as_json else text)

    def error(self, exc: BaseException, code: int) -> None:
        info = {"error": type(exc).__name__, "message": str(exc), "exit": code}
        if isinstance(exc, ProtocolAbort):
            info["test"] = exc.test
        if isinstance(exc, ServerMisbehavior):
            info["phase"] = exc.phase
        if self.as_json:
            print(json.dumps(info, sort_keys=True))
        else:
            print(f"error: {exc}", file=sys.stderr)


@contextmanager
def _servers(args, config: DeployConfig, persist: bool = False):
    """Loopback cluster with ``--local``, TCP connections otherwise."""
    if args.local:
        cluster = local_cluster(args.dir, config)
        yield cluster
        if persist:
            save_cluster(cluster, args.dir)
    else:
        group = connect(config)
        try:
            yield group
        finally:
            group.close()


def _config(args) -> DeployConfig:
    config = DeployConfig.load(args.dir)
    if getattr(args, "verify", False):
        config.verify = True
    return config


# commands


def cmd_outsource(args, out: _Out) -> int:
    corpus = Corpus.load(args.corpus)
    config = DeployConfig(
        p=args.p, layout=args.layout, y=args.y, gamma=args.gamma, eta=args.eta, reserve=args.reserve,
        verify=args.verify, plain_test1=args.plain_test1, full_ap=args.full_ap,
        fake_continue=args.fake_continue, timeout=args.timeout,
    )
    if args.servers:
        config.servers = args.servers.split(",")
    config.addresses()
    seed = bytes.fromhex(args.seed) if args.seed else None
    outsource(corpus, args.dir, config, seed=seed)
    cluster = local_cluster(args.dir, config)
    params = cluster.params
    out.emit(
        {"dir": str(args.dir), "params": params.to_dict()},
        f"wrote 4 bundles to {args.dir}: {params.alpha} clients, {params.beta} keywords, "
        f"{params.delta} files, layout {params.layout}",
    )
    return EXIT_OK


def cmd_serve(args, out: _Out) -> int:
    from .transport.tcp import TcpServer

    config = DeployConfig.load(args.dir)
    addresses = config.addresses()
    node = load_node(args.dir, args.server, config)
    listen = addresses[args.server]
    if args.listen:
        host, _, port = args.listen.rpartition(":")
        listen = (host, int(port))
    peers = {z: a for z, a in addresses.items() if z != args.server}
    server = TcpServer(node, listen, peers, timeout=config.timeout)
    if args.persist:
        server.on_update = lambda n: save_node(n, args.dir)
    logging.getLogger(__name__).info("server %d listening on %s:%d", args.server, *server.address)
    out.emit({"server": args.server, "address": list(server.address)},
             f"server {args.server} listening on {server.address[0]}:{server.address[1]}")
    sys.stdout.flush()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return EXIT_OK


def format_result(result) -> str:
    lines = []
    for fid in result.file_ids:
        if fid in result.delivered:
            lines.append(f"file {fid}: {' '.join(result.delivered[fid])}")
        else:
            lines.append(f"file {fid}: restricted")
    lines.append(f"{len(result.delivered)} delivered, {len(result.restricted)} restricted")
    return "\n".join(lines)


def cmd_query(args, out: _Out) -> int:
    config = _config(args)
    with _servers(args, config) as servers:
        client = Client(args.client, servers, verify=config.verify, fake_continue=config.fake_continue,
                        bins=args.bins)
        result = client.run_query(args.keyword)
    out.emit(result.to_dict(), format_result(result))
    return EXIT_OK


def _owner(args, config: DeployConfig, servers) -> Owner:
    return Owner(servers, owner_seed(args.dir))


def cmd_grant(args, out: _Out, grant: bool = True) -> int:
    config = _config(args)
    with _servers(args, config, persist=True) as servers:
        owner = _owner(args, config, servers)
        (owner.grant if grant else owner.revoke)(args.client, args.keyword)
    verb = "granted" if grant else "revoked"
    out.emit({"client": args.client, "keyword": args.keyword, "action": verb},
             f"{verb} {args.keyword!r} for {args.client}")
    return EXIT_OK


def cmd_revoke(args, out: _Out) -> int:
    return cmd_grant(args, out, grant=False)


def cmd_add_file(args, out: _Out) -> int:
    config = _config(args)
    text = Path(args.file).read_text() if args.file else args.text
    if text is None:
        raise DocStarError("give --text or --file")
    with _servers(args, config, persist=True) as servers:
        linked = _owner(args, config, servers).add_file(args.file_id, tokenize(text))
    out.emit({"file_id": args.file_id, "linked": linked},
             f"added file {args.file_id}, indexed under {len(linked)} keyword(s)")
    return EXIT_OK


def cmd_add_keyword(args, out: _Out) -> int:
    config = _config(args)
    allowed = set(filter(None, (args.allow or "").split(",")))
    with _servers(args, config, persist=True) as servers:
        column = _owner(args, config, servers).add_keyword(args.keyword, allowed)
    out.emit({"keyword": args.keyword, "column": column}, f"added keyword {args.keyword!r}")
    return EXIT_OK


def cmd_del_keyword(args, out: _Out) -> int:
    config = _config(args)
    with _servers(args, config, persist=True) as servers:
        _owner(args, config, servers).delete_keyword(args.keyword, fast=args.fast)
    out.emit({"keyword": args.keyword, "deleted": True}, f"deleted keyword {args.keyword!r}")
    return EXIT_OK


def cmd_del_file(args, out: _Out) -> int:
    config = _config(args)
    with _servers(args, config, persist=True) as servers:
        owner = _owner(args, config, servers)
        if args.keyword:
            owner.delete_fid(args.keyword, args.file_id, fast=args.fast)
            where = [args.keyword]
        else:
            where = owner.delete_file(args.file_id, fast=args.fast)
    out.emit({"file_id": args.file_id, "unlinked": where},
             f"removed file {args.file_id} from {len(where)} posting list(s)")
    return EXIT_OK


def cmd_bench(args, out: _Out) -> int:
    config = bench_mod.BenchConfig(keywords=args.keywords, hot_files=args.hot_files, cold_max=args.cold_max,
                                   queries=args.queries, seed=args.seed)
    skews = ("high", "uniform") if args.skew == "both" else (args.skew,)
    rows = bench_mod.run_bench(config, skews)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = bench_mod.write_csv(rows, outdir / "bench.csv")
    png_path = bench_mod.plot(rows, outdir / "bench.png")
    out.emit({"rows": rows, "csv": str(csv_path), "figure": str(png_path)},
             bench_mod.format_table(rows) + f"\n\nwrote {csv_path} and {png_path}")
    return EXIT_OK


# parser


def _add_dir(p: argparse.ArgumentParser, local: bool = True) -> None:
    p.add_argument("--dir", required=True, type=Path, help="deployment directory")
    if local:
        p.add_argument("--local", action="store_true", help="run the four servers in this process")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="docstar", description="Access-controlled document store over secret shares.")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("outsource", help="build and share a corpus into four bundles")
    _add_dir(p, local=False)
    p.add_argument("--corpus", required=True, type=Path, help="corpus JSON")
    p.add_argument("--layout", choices=("padded", "optimized"), default="padded")
    p.add_argument("--reserve", type=int, default=0, help="spare slots per keyword")
    p.add_argument("--p", type=int, default=MERSENNE_61, help="field modulus")
    p.add_argument("--y", type=int, help="OptInv row width")
    p.add_argument("--gamma", type=int, help="public max files per keyword")
    p.add_argument("--eta", type=int, help="public content width")
    p.add_argument("--servers", help="four comma-separated host:port addresses")
    p.add_argument("--seed", help="owner seed as hex (default: random)")
    p.add_argument("--verify", action="store_true", help="clients cross-check all servers by default")
    p.add_argument("--plain-test1", action="store_true", help="open the access dot product directly")
    p.add_argument("--full-ap", action="store_true", help="full-length AP lists")
    p.add_argument("--fake-continue", action="store_true", help="continue denied queries on the fake column")
    p.add_argument("--timeout", type=float, default=30.0, help="peer timeout in seconds")
    p.set_defaults(func=cmd_outsource)

    p = sub.add_parser("serve", help="run one server")
    _add_dir(p, local=False)
    p.add_argument("--server", type=int, required=True, choices=(1, 2, 3, 4))
    p.add_argument("--listen", help="override the listen address host:port")
    p.add_argument("--persist", action="store_true", help="write the bundle back after each update")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("query", help="search a keyword as a client")
    _add_dir(p)
    p.add_argument("--client", required=True)
    p.add_argument("--keyword", required=True)
    p.add_argument("--verify", action="store_true", help="cross-check all four servers")
    p.add_argument("--bins", type=int, help="fetch through overlapped bins")
    p.set_defaults(func=cmd_query)

    for name, func, text in (("grant", cmd_grant, "allow"), ("revoke", cmd_revoke, "deny")):
        p = sub.add_parser(name, help=f"{text} a client a keyword")
        _add_dir(p)
        p.add_argument("--client", required=True)
        p.add_argument("--keyword", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("add-file", help="store a new file and index it")
    _add_dir(p)
    p.add_argument("--file-id", type=int, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--text")
    group.add_argument("--file", type=Path)
    p.set_defaults(func=cmd_add_file)

    p = sub.add_parser("add-keyword", help="add a keyword column")
    _add_dir(p)
    p.add_argument("--keyword", required=True)
    p.add_argument("--allow", help="comma-separated clients allowed to search it")
    p.set_defaults(func=cmd_add_keyword)

    p = sub.add_parser("del-keyword", help="delete a keyword")
    _add_dir(p)
    p.add_argument("--keyword", required=True)
    p.add_argument("--fast", action="store_true", help="touch only the keyword's column (reveals which)")
    p.set_defaults(func=cmd_del_keyword)

    p = sub.add_parser("del-file", help="remove a file id from posting lists")
    _add_dir(p)
    p.add_argument("--file-id", type=int, required=True)
    p.add_argument("--keyword", help="only this keyword's list (default: every keyword of the file)")
    p.add_argument("--fast", action="store_true", help="touch only the affected rows (reveals which)")
    p.set_defaults(func=cmd_del_file)

    p = sub.add_parser("bench", help="compare layouts; writes CSV and a PNG")
    p.add_argument("--out", default="bench-out", help="output directory")
    p.add_argument("--skew", choices=("high", "uniform", "both"), default="both")
    p.add_argument("--keywords", type=int, default=500)
    p.add_argument("--hot-files", type=int, default=500)
    p.add_argument("--cold-max", type=int, default=5)
    p.add_argument("--queries", type=int, default=3)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = _Out(args.json)
    try:
        return args.func(args, out)
    except PeerTimeout as exc:
        out.error(exc, EXIT_ERROR)
        return EXIT_ERROR
    except (DocStarError, OSError, ValueError, KeyError) as exc:
        code = exit_code(exc)
        out.error(exc, code)
        return code


if __name__ == "__main__":
    sys.exit(main())
