"""Plain key=value config text, shared by every CLI --config flag.

Format:
  - one ``key = value`` pair per line (spaces around ``=`` optional)
  - ``#`` starts a comment, full-line or trailing
  - blank lines are ignored
  - keys are identifiers; a duplicate key is an error, not a silent override

Values are kept as strings; each consumer casts and validates through its
own ``from_mapping``, which is also where unknown keys are rejected.
"""

import re

_KEY_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not _KEY_RE.match(key):
            raise ConfigError(f"line {lineno}: invalid key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: empty value for key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str) -> dict:
    try:
        with open(path) as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)
