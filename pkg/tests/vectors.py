"""Readers for the checked-in test vector files."""

from pathlib import Path

VECTORS = Path(__file__).parent / "fixtures" / "vectors"


def read_blocks(name: str):
    """Yield ``(section, fields)`` for each blank-line separated record.

    Handles the CAVS ``.rsp`` layout: ``[section]`` headers, ``key = value``
    lines and ``#`` comments.  Keys keep their original case.
    """
    section = {}
    fields = {}
    for raw in (VECTORS / name).read_text().splitlines():
        line = raw.strip()
        if line.startswith("#"):
            continue
        if not line:
            if fields:
                yield dict(section), fields
                fields = {}
            continue
        if line.startswith("[") and line.endswith("]"):
            if fields:
                yield dict(section), fields
                fields = {}
            body = line[1:-1]
            key, sep, value = body.partition("=")
            section[key.strip() if sep else "title"] = value.strip() if sep else body
            continue
        key, sep, value = line.partition("=")
        if sep:
            fields[key.strip()] = value.strip()
    if fields:
        yield dict(section), fields


def read_pyca_oaep(name: str):
    """Key numbers and (message, ciphertext) examples from a pyca OAEP file.

    Labels map to every value seen in order: ``Exponent`` appears first for
    the public key and again for the private key.
    """
    lines = (VECTORS / name).read_text().splitlines()
    labels = {}
    examples = []
    i = 0
    current = None
    while i < len(lines):
        line = lines[i].strip()
        if line.startswith("# ") and line.endswith(":") and i + 1 < len(lines):
            current = line[2:-1]
            value = lines[i + 1].strip()
            if current in ("Message", "Encryption"):
                if current == "Message":
                    examples.append({"Message": value})
                else:
                    examples[-1]["Encryption"] = value
            else:
                labels.setdefault(current, []).append(value)
            i += 2
            continue
        i += 1
    return labels, examples
