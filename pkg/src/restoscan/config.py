"""Plain-text configuration: one `key = value` per line, `#` comments."""

from __future__ import annotations

from .errors import ConfigError


def parse_kv_text(text, source="<config>"):
    """Parse key = value lines into a string->string dict.

    Blank lines and `#` comments are ignored; duplicate or malformed lines
    raise ConfigError naming the line.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not eq or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv_file(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_kv_text(text, source=str(path))


def split_settings(d, *key_families):
    """Partition a flat dict by known key families; unknown keys are errors.

    ``key_families`` are (name, keys) pairs; returns one dict per family in
    the same order.
    """
    buckets = [dict() for _ in key_families]
    for key, value in d.items():
        for bucket, (_, keys) in zip(buckets, key_families):
            if key in keys:
                bucket[key] = value
                break
        else:
            known = sorted(k for _, keys in key_families for k in keys)
            raise ConfigError(f"unknown config key {key!r}; known keys: "
                              + ", ".join(known))
    return buckets
