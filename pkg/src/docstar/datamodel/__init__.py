"""Owner-side data model: corpus, cleartext tables, share bundles, updates."""

from .audit import check_structures, keyword_columns
from .build import (
    FAKE_ALLOWED_LABEL,
    FAKE_DENIED_LABEL,
    DeployParams,
    ServerBundle,
    Structures,
    access_value,
    build_structures,
    keyword_encoding,
    open_structures,
    share_structures,
)
from .bundle import load_bundle, save_bundle
from .corpus import AccessState, Corpus
from .updates import Update, UpdateOp, apply_update, make_update, share_update

__all__ = [
    "AccessState",
    "Corpus",
    "DeployParams",
    "FAKE_ALLOWED_LABEL",
    "FAKE_DENIED_LABEL",
    "ServerBundle",
    "Structures",
    "Update",
    "UpdateOp",
    "access_value",
    "apply_update",
    "build_structures",
    "check_structures",
    "keyword_columns",
    "keyword_encoding",
    "load_bundle",
    "make_update",
    "open_structures",
    "save_bundle",
    "share_structures",
    "share_update",
]
