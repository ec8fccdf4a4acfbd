import hashlib
import json


def derive_seed(root: int, label: str, counter: int = 0) -> int:
    """Labeled sub-seed: components stay reproducible independently of each other."""
    h = hashlib.sha256(f"{int(root)}:{label}:{int(counter)}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
