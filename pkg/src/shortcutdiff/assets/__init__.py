"""Shipped artifacts: trained checkpoints and the frozen evasion classifier.

Regenerate with scripts/make_assets.py; the training configs live in
configs/ and reproduce these files bit-exactly.
"""

from importlib.resources import files
from pathlib import Path


def asset_path(name: str) -> Path:
    path = Path(str(files(__package__).joinpath(name)))
    if not path.exists():
        raise FileNotFoundError(f"missing shipped asset {name!r}; "
                                "run scripts/make_assets.py")
    return path
