"""Bundled scenario files."""

from importlib import resources
from pathlib import Path


def path(name: str) -> Path:
    """Filesystem path of a bundled scenario, e.g. ``path("trap")``."""
    return Path(str(resources.files(__name__) / f"{name}.json"))


def names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files(__name__).iterdir() if p.name.endswith(".json"))
