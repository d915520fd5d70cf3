import json
from pathlib import Path


def dump_json(obj, path) -> None:
    """Write ``obj`` as stable, full-precision JSON (floats use repr)."""
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))
