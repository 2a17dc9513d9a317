"""Small shared helpers: seed derivation and byte packing."""

import hashlib

# Upper bound keeps derived seeds inside torch.Generator.manual_seed range.
_SEED_SPACE = 2**63


def derive_seed(*parts) -> int:
    """Map a tuple of ints/strings to a stable 63-bit seed.

    Uses sha256 rather than hash() so the result does not depend on
    PYTHONHASHSEED. Any change in part order or content changes the seed.
    """
    token = "\x1f".join(_canon(p) for p in parts)
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % _SEED_SPACE


def _canon(part) -> str:
    if isinstance(part, bool):
        return f"b:{int(part)}"
    if isinstance(part, int):
        return f"i:{part}"
    if isinstance(part, str):
        return f"s:{part}"
    raise TypeError(f"unsupported seed part type: {type(part).__name__}")
