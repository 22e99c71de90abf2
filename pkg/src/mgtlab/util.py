"""Shared plumbing: error types, deterministic seed derivation, hashing."""

import hashlib
import json


class DataError(Exception):
    """Input violates a data contract (bad record, missing class, OOV token, ...)."""


class ContractError(Exception):
    """A component broke its interface contract (registry miss, wire mismatch, ...)."""


class UsageError(Exception):
    """Bad command-line invocation."""


def derive_seed(root: int, name: str) -> int:
    """Stable 63-bit sub-seed for a named pipeline stage.

    Never uses Python's per-process string hash, so two runs with the same
    root seed agree across processes and machines.
    """
    digest = hashlib.sha256(f"{root}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def stable_bucket(token: str, seed: int, n_buckets: int) -> int:
    # feature hashing; blake2b keyed by the seed keeps buckets stable across runs
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                        key=str(seed).encode("utf-8")[:64])
    return int.from_bytes(h.digest(), "big") % n_buckets


def content_key(*parts: str) -> str:
    """Content-addressed cache key."""
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable config blob."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
