"""One master seed, many labeled sub-seeds."""
import hashlib


def derive_seed(master: int, *labels) -> int:
    """Stable 63-bit seed for ``labels`` under ``master`` (e.g. ``derive_seed(0, "inject", "ES")``)."""
    text = "/".join([str(int(master))] + [str(x) for x in labels])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1
