"""Synthetic 2D datasets (desk-scale stand-ins for image data).

Both generators are deterministic given their seed and return points plus
a two-class label per point (ring modes alternate classes; moons are one
class each) so the same draw can feed generative training and the frozen
classifier used by the evasion task.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("gaussian-mixture-ring", "two-moons")


@dataclass(frozen=True)
class Dataset2D:
    kind: str = "gaussian-mixture-ring"
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")

    def sample(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (points (n,2) float64, labels (n,) int)."""
        rng = np.random.Generator(np.random.PCG64(self.seed))
        if self.kind == "gaussian-mixture-ring":
            return _ring(rng, n, **self.params)
        return _moons(rng, n, **self.params)

    def mode_centers(self) -> np.ndarray:
        """Ring mode centers (for reward targets); moons return arc midpoints."""
        if self.kind == "gaussian-mixture-ring":
            k = int(self.params.get("modes", 8))
            r = float(self.params.get("radius", 1.0))
            ang = 2.0 * np.pi * np.arange(k) / k
            return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        r = float(self.params.get("radius", 1.0))
        gap = float(self.params.get("gap", 0.3))
        return np.array([[0.0, r - gap / 2.0], [0.0, -(r - gap / 2.0)]])


def _ring(rng, n, modes=8, radius=1.0, noise=0.12):
    ang = 2.0 * np.pi * np.arange(int(modes)) / int(modes)
    centers = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    idx = rng.integers(0, int(modes), size=n)
    pts = centers[idx] + noise * rng.standard_normal((n, 2))
    return pts, (idx % 2).astype(np.int64)


def _moons(rng, n, radius=1.0, gap=0.3, noise=0.08):
    """Two interleaved half-circles separated vertically by `gap`."""
    label = rng.integers(0, 2, size=n)
    theta = np.pi * rng.random(n)
    x = np.where(label == 0, radius * np.cos(theta),
                 radius - radius * np.cos(theta))
    y = np.where(label == 0, radius * np.sin(theta) - gap / 2.0,
                 -radius * np.sin(theta) + gap / 2.0)
    pts = np.stack([x - radius / 2.0, y], axis=1)
    pts += noise * rng.standard_normal((n, 2))
    return pts, label.astype(np.int64)
