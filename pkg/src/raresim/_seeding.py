import hashlib
import struct


def derive_seed(*parts: int) -> int:
    """Deterministic 63-bit seed from a tuple of non-negative integers."""
    payload = b"".join(struct.pack("<Q", int(p) & 0xFFFFFFFFFFFFFFFF) for p in parts)
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return struct.unpack("<Q", digest)[0] >> 1
