"""Interactive training data: named sources with runtime-adjustable mixture
weights, replaceable mid-training.

Every example carries a provenance tag (source name + insertion generation)
so a recorded run can be audited for which data actually reached the model.
Mutations happen only at step boundaries on the training-loop thread, so a
batch never mixes pre-update and post-update views of a source.
"""

from __future__ import annotations

from dataclasses import dataclass

from .rng import Xoshiro256StarStar


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    x: float
    y: float
    source: str
    generation: int


class InteractiveDataset:
    """In-memory finite sources sampled by unnormalized non-negative weights."""

    def __init__(self) -> None:
        self._sources: dict[str, list[Example]] = {}
        self._weights: dict[str, float] = {}
        self._generation = 0

    @property
    def generation(self) -> int:
        return self._generation

    def source_names(self) -> list[str]:
        return list(self._sources)

    def weights(self) -> dict[str, float]:
        return dict(self._weights)

    def size(self, source: str) -> int:
        return len(self._sources[source])

    def update_data(self, source: str, examples: list[dict]) -> None:
        """Replace (or create) a source atomically. New sources default to
        weight 1.0; replaced sources keep their weight."""
        if not examples:
            raise DatasetError(f"source {source!r}: example list is empty")
        self._generation += 1
        rows = []
        for i, ex in enumerate(examples):
            if not isinstance(ex, dict) or "x" not in ex or "y" not in ex:
                raise DatasetError(f"source {source!r}: example {i} must have keys x and y")
            x, y = ex["x"], ex["y"]
            if isinstance(x, bool) or isinstance(y, bool):
                raise DatasetError(f"source {source!r}: example {i} has non-numeric x or y")
            if not isinstance(x, (int, float)) or not isinstance(y, (int, float)):
                raise DatasetError(f"source {source!r}: example {i} has non-numeric x or y")
            rows.append(Example(float(x), float(y), source, self._generation))
        self._sources[source] = rows
        self._weights.setdefault(source, 1.0)

    def set_mixture_weights(self, weights: dict[str, float]) -> None:
        """Replace all weights atomically."""
        unknown = set(weights) - set(self._sources)
        if unknown:
            raise DatasetError(f"unknown source(s): {', '.join(sorted(unknown))}")
        cleaned = {}
        for name, value in weights.items():
            if value < 0:
                raise DatasetError(f"weight for {name!r} must be >= 0")
            cleaned[name] = float(value)
        for name in self._sources:
            cleaned.setdefault(name, 0.0)
        if not any(v > 0 for v in cleaned.values()):
            raise DatasetError("at least one source weight must be positive")
        self._weights = cleaned

    def next_batch(self, batch_size: int, rng: Xoshiro256StarStar) -> list[Example]:
        """Draw a batch: per example, a source with probability proportional
        to its weight, then a uniform index within the source."""
        active = [(name, w) for name, w in self._weights.items() if w > 0 and self._sources[name]]
        if not active:
            raise DatasetError("no source with positive weight")
        total = sum(w for _, w in active)
        batch = []
        for _ in range(batch_size):
            r = rng.random() * total
            acc = 0.0
            chosen = active[-1][0]
            for name, w in active:
                acc += w
                if r < acc:
                    chosen = name
                    break
            rows = self._sources[chosen]
            batch.append(rows[rng.randrange(len(rows))])
        return batch


def make_sin_dataset(
    rng: Xoshiro256StarStar,
    train_points: int,
    val_points: int,
    noise_std: float,
) -> tuple[InteractiveDataset, list[Example]]:
    """Synthetic regression task y = sin(3x) + noise, x uniform on [-1, 1].

    Returns the interactive training set (single source "synthetic") and a
    fixed validation list drawn afterwards from the same stream.
    """
    import math

    def draw(n: int) -> list[dict]:
        rows = []
        for _ in range(n):
            x = rng.uniform(-1.0, 1.0)
            y = math.sin(3.0 * x) + rng.normal(0.0, noise_std)
            rows.append({"x": x, "y": y})
        return rows

    ds = InteractiveDataset()
    ds.update_data("synthetic", draw(train_points))
    val = [Example(r["x"], r["y"], "validation", 0) for r in draw(val_points)]
    return ds, val
