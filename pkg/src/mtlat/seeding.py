"""Derivation of sub-seeds from one master seed.

``derive_seed(master, *path)`` hashes the master seed and a path of labels
with SHA-256 and keeps the low 63 bits, e.g.::

    derive_seed(7, "train", "batches")
    derive_seed(7, "corrupt", "fog", 3, "img_0012.png")

The result only depends on the arguments, never on process state.
"""
import hashlib


def derive_seed(master: int, *path) -> int:
    key = "/".join([str(int(master))] + [str(p) for p in path]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") & ((1 << 63) - 1)
