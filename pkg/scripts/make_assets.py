"""Regenerate the shipped assets from the shipped configs.

Run from the repository root:

    python3 scripts/make_assets.py

Produces src/shortcutdiff/assets/{ring8.ckpt, ring24.ckpt,
evasion_classifier.json}. Training the two checkpoints takes a few
minutes; the result is bit-identical across runs.
"""

import shutil
import sys
import tempfile
from pathlib import Path

from shortcutdiff.cli import main
from shortcutdiff.data import Dataset2D
from shortcutdiff.objectives import save_classifier, train_toy_classifier

ROOT = Path(__file__).resolve().parent.parent
ASSETS = ROOT / "src" / "shortcutdiff" / "assets"


def run():
    ASSETS.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        for cfg, name in (("train_ring8.cfg", "ring8.ckpt"),
                          ("train_ring24.cfg", "ring24.ckpt")):
            out = Path(tmp) / name
            code = main(["train", "--config", str(ROOT / "configs" / cfg),
                         "--out", str(out)])
            if code != 0:
                sys.exit(code)
            shutil.copy(out / name, ASSETS / name)
            print(f"wrote {ASSETS / name}")

    # frozen classifier for the evasion task: one hidden layer over the
    # 24-wedge ring; alternating mode labels
    dataset = Dataset2D("gaussian-mixture-ring", seed=300,
                        params={"modes": 24, "radius": 1.0, "noise": 0.05})
    points, labels = dataset.sample(1600)
    clf = train_toy_classifier(points, labels, hidden=128, steps=4000,
                               batch=128, lr=0.02, seed=5)
    save_classifier(ASSETS / "evasion_classifier.json", clf)
    print(f"wrote {ASSETS / 'evasion_classifier.json'} "
          f"(train accuracy {clf.accuracy:.4f})")


if __name__ == "__main__":
    run()
