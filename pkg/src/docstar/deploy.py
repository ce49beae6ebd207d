"""Deployment directory: config file, owner key and four server bundles.

Layout of a deployment directory::

    docstar.json      DeployConfig (versioned)
    owner.key         hex seed behind the non-access values
    server1/ .. server4/   one share bundle each
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .datamodel import Corpus, build_structures, load_bundle, save_bundle, share_structures
from .errors import ConfigError
from .field import EVAL_POINTS, MERSENNE_61, Field, FieldRng
from .server import ServerNode
from .transport.loopback import LocalCluster, TrafficMeter
from .transport.tcp import TcpServerGroup, parse_address

CONFIG_NAME = "docstar.json"
KEY_NAME = "owner.key"
CONFIG_VERSION = 1


@dataclass
class DeployConfig:
    """Everything an operator chooses; mirrors every protocol variant as a flag."""

    version: int = CONFIG_VERSION
    p: int = MERSENNE_61
    servers: list[str] = field(default_factory=lambda: [f"127.0.0.1:{7400 + z}" for z in EVAL_POINTS])
    layout: str = "padded"
    y: int | None = None
    gamma: int | None = None
    eta: int | None = None
    reserve: int = 0
    verify: bool = False
    plain_test1: bool = False
    full_ap: bool = False
    fake_continue: bool = False
    timeout: float = 30.0

    def addresses(self) -> dict[int, tuple[str, int]]:
        if len(self.servers) != len(EVAL_POINTS):
            raise ConfigError(f"expected {len(EVAL_POINTS)} server addresses, got {len(self.servers)}")
        try:
            return {z: parse_address(a) for z, a in zip(EVAL_POINTS, self.servers)}
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, directory: str | Path) -> "DeployConfig":
        path = Path(directory) / CONFIG_NAME
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"no {CONFIG_NAME} in {directory}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if data.get("version") != CONFIG_VERSION:
            raise ConfigError(f"{path}: unsupported config version {data.get('version')!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        return cls(**data)

    def save(self, directory: str | Path) -> Path:
        path = Path(directory) / CONFIG_NAME
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def bundle_dir(directory: str | Path, z: int) -> Path:
    return Path(directory) / f"server{z}"


def outsource(corpus: Corpus, directory: str | Path, config: DeployConfig, seed: bytes | None = None,
              rng: FieldRng | None = None) -> Path:
    """Build, share and write every bundle plus the config and owner key."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seed = seed if seed is not None else os.urandom(32)
    structures = build_structures(
        corpus, config.layout, config.reserve, seed=seed, field=Field(config.p),
        ap_mode="full" if config.full_ap else "reduced",
        gamma=config.gamma, eta=config.eta, y=config.y,
    )
    for bundle in share_structures(structures, rng or FieldRng()):
        save_bundle(bundle, bundle_dir(directory, bundle.server_index))
    config.save(directory)
    key = directory / KEY_NAME
    key.write_text(seed.hex() + "\n")
    key.chmod(0o600)
    return directory


def owner_seed(directory: str | Path) -> bytes:
    path = Path(directory) / KEY_NAME
    try:
        return bytes.fromhex(path.read_text().strip())
    except FileNotFoundError as exc:
        raise ConfigError(f"no owner key at {path}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path} is not a hex seed") from exc


def load_node(directory: str | Path, z: int, config: DeployConfig) -> ServerNode:
    bundle = load_bundle(bundle_dir(directory, z))
    if bundle.params.p != config.p:
        raise ConfigError(f"bundle {z} uses p={bundle.params.p}, config says {config.p}")
    if bundle.params.layout != config.layout:
        raise ConfigError(f"bundle {z} has layout {bundle.params.layout}, config says {config.layout}")
    if bundle.server_index != z:
        raise ConfigError(f"bundle in server{z} belongs to server {bundle.server_index}")
    return ServerNode(bundle, plain_test1=config.plain_test1, fake_continue=config.fake_continue)


def local_cluster(directory: str | Path, config: DeployConfig | None = None,
                  meter: TrafficMeter | None = None) -> LocalCluster:
    """All four servers in this process, loaded from the deployment directory."""
    config = config or DeployConfig.load(directory)
    return LocalCluster([load_node(directory, z, config) for z in EVAL_POINTS], meter)


def save_node(node: ServerNode, directory: str | Path) -> None:
    save_bundle(node.bundle, bundle_dir(directory, node.index))


def save_cluster(cluster: LocalCluster, directory: str | Path) -> None:
    """Write every node's current bundle back (after owner updates)."""
    for node in cluster.nodes.values():
        save_node(node, directory)


def connect(config: DeployConfig, meter: TrafficMeter | None = None) -> TcpServerGroup:
    return TcpServerGroup(config.addresses(), timeout=config.timeout, meter=meter)
