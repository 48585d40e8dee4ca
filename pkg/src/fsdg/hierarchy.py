"""Multi-granularity label hierarchies.

A hierarchy is a ``G``-level tree over class ids, fine level first
(``g = 0`` is the finest granularity, ``g = G-1`` the coarsest). Every
level uses dense 0-based ids and ``parent_maps[g]`` sends a level-``g``
id to its level-``g+1`` parent. Instances are validated on construction,
immutable afterwards, and safe to share.

The file format is line-oriented: a ``#levels G`` header, optional
``#order fine_to_coarse|coarse_to_fine`` pragma, then one row per fine
class with ``G`` whitespace-separated tokens (its id at every level).
String tokens are remapped to dense ids per level in first-appearance
order; integer tokens are taken literally and must already be dense.
A single-level file is augmented with an all-to-one root so the result
is still a tree (``G = 2``).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CycleOrLevelMismatch,
    DuplicateClassId,
    HierarchyFormatError,
    InvalidLevel,
    MissingParent,
    NotADistribution,
    OutOfRangeClass,
)

_SUM_TOL = 1e-6


class GranularityHierarchy:
    """Validated label tree over ``G`` granularity levels.

    Parameters
    ----------
    classes_per_level:
        Class counts ``(K_0, ..., K_{G-1})``, fine first, non-increasing.
    parent_maps:
        ``G-1`` sequences; ``parent_maps[g][k]`` is the level-``g+1``
        parent of level-``g`` class ``k``.
    label_names:
        Optional per-level id -> display-name tables (kept only for
        reporting; never used in arithmetic).
    """

    def __init__(
        self,
        classes_per_level: Sequence[int],
        parent_maps: Sequence[Sequence[int]],
        label_names: Sequence[Sequence[str]] | None = None,
    ) -> None:
        self.classes_per_level = tuple(int(k) for k in classes_per_level)
        self.parent_maps = tuple(tuple(int(p) for p in pm) for pm in parent_maps)
        self.label_names = (
            tuple(tuple(str(n) for n in level) for level in label_names)
            if label_names is not None
            else None
        )
        self._validate()
        self._ancestors = self._build_ancestor_table()
        self._fine_counts = self._build_fine_counts()

    # -- construction helpers -------------------------------------------

    def _validate(self) -> None:
        G = len(self.classes_per_level)
        if G < 2:
            raise CycleOrLevelMismatch("a hierarchy needs at least two levels")
        if any(k < 1 for k in self.classes_per_level):
            raise CycleOrLevelMismatch("every level needs at least one class")
        for g in range(G - 1):
            if self.classes_per_level[g + 1] > self.classes_per_level[g]:
                raise CycleOrLevelMismatch(
                    f"level {g + 1} has more classes than level {g}"
                )
        if len(self.parent_maps) != G - 1:
            raise MissingParent(
                f"expected {G - 1} parent maps, got {len(self.parent_maps)}"
            )
        for g, pm in enumerate(self.parent_maps):
            K, K_up = self.classes_per_level[g], self.classes_per_level[g + 1]
            if len(pm) != K:
                raise MissingParent(
                    f"parent map at level {g} covers {len(pm)} of {K} classes"
                )
            for k, parent in enumerate(pm):
                if not 0 <= parent < K_up:
                    raise CycleOrLevelMismatch(
                        f"class {k} at level {g} points to parent {parent}, "
                        f"outside level {g + 1}"
                    )
            if len(set(pm)) != K_up:
                orphans = sorted(set(range(K_up)) - set(pm))
                raise CycleOrLevelMismatch(
                    f"classes {orphans} at level {g + 1} have no children"
                )
        if self.label_names is not None:
            if len(self.label_names) != G:
                raise HierarchyFormatError("label names must cover every level")
            for g, names in enumerate(self.label_names):
                if len(names) != self.classes_per_level[g]:
                    raise HierarchyFormatError(
                        f"level {g} has {self.classes_per_level[g]} classes "
                        f"but {len(names)} names"
                    )

    def _build_ancestor_table(self) -> np.ndarray:
        """(K_0, G) table; column g holds each fine class's level-g id."""
        K0, G = self.classes_per_level[0], self.levels
        table = np.empty((K0, G), dtype=np.int64)
        table[:, 0] = np.arange(K0)
        for g in range(G - 1):
            pm = np.asarray(self.parent_maps[g], dtype=np.int64)
            table[:, g + 1] = pm[table[:, g]]
        return table

    def _build_fine_counts(self) -> tuple[np.ndarray, ...]:
        counts = []
        for g in range(self.levels):
            c = np.bincount(self._ancestors[:, g], minlength=self.classes_per_level[g])
            counts.append(c.astype(np.int64))
        return tuple(counts)

    # -- basic queries ----------------------------------------------------

    @property
    def levels(self) -> int:
        return len(self.classes_per_level)

    @property
    def num_fine(self) -> int:
        return self.classes_per_level[0]

    def _check_level(self, level: int, *, lo: int = 0, hi: int | None = None) -> None:
        hi = self.levels - 1 if hi is None else hi
        if not lo <= level <= hi:
            raise InvalidLevel(f"level {level} outside [{lo}, {hi}]")

    def class_vector(self, fine_id: int) -> np.ndarray:
        """Ancestor ids of a fine class at every level, fine first."""
        if not 0 <= fine_id < self.num_fine:
            raise OutOfRangeClass(f"fine id {fine_id} outside [0, {self.num_fine})")
        return self._ancestors[fine_id].copy()

    def ancestors(self, fine_labels, level: int) -> np.ndarray:
        """Vectorized level-``level`` ids for an array of fine labels."""
        self._check_level(level)
        labels = np.asarray(fine_labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_fine):
            raise OutOfRangeClass("fine label outside the hierarchy")
        return self._ancestors[labels, level]

    def class_distance(self, i: int, j: int) -> int:
        """Granularity similarity: levels on which two fine classes agree.

        ``G`` when ``i == j``, 0 when they split at the root, and the
        count of shared ancestors (including the classes themselves)
        otherwise.
        """
        vi, vj = self.class_vector(i), self.class_vector(j)
        return int(self.levels - np.count_nonzero(vi - vj))

    def descendant_counts(self, level: int) -> np.ndarray:
        """Number of fine classes below each level-``level`` id."""
        self._check_level(level)
        return self._fine_counts[level].copy()

    # -- batch grouping ----------------------------------------------------

    def group_by_parent(self, fine_labels, level: int) -> dict[tuple[int, int], np.ndarray]:
        """Group batch indices by (level+1 parent, level-``level`` class).

        Returns ``{(parent_id, class_id): indices}`` with indices in batch
        order; an empty batch gives ``{}``. ``level`` must have a parent
        level above it (``level <= G-2``).
        """
        self._check_level(level, hi=self.levels - 2)
        labels = np.asarray(fine_labels, dtype=np.int64)
        if labels.ndim != 1:
            raise OutOfRangeClass("fine labels must be one-dimensional")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_fine):
            raise OutOfRangeClass("fine label outside the hierarchy")
        sub = self._ancestors[labels, level]
        parent = self._ancestors[labels, level + 1]
        groups: dict[tuple[int, int], list[int]] = {}
        for idx in range(labels.size):
            groups.setdefault((int(parent[idx]), int(sub[idx])), []).append(idx)
        return {key: np.asarray(val, dtype=np.int64) for key, val in groups.items()}

    # -- distribution expansion ---------------------------------------------

    def expansion_matrix(self, level: int) -> np.ndarray:
        """(K_level, K_0) matrix spreading coarse mass uniformly over descendants."""
        self._check_level(level, lo=1)
        K = self.classes_per_level[level]
        mat = np.zeros((K, self.num_fine), dtype=np.float64)
        anc = self._ancestors[:, level]
        mat[anc, np.arange(self.num_fine)] = 1.0 / self._fine_counts[level][anc]
        return mat

    def expand_coarse_distribution(self, coarse_probs, level: int) -> np.ndarray:
        """Losslessly push a level-``level`` distribution down to the fine level."""
        self._check_level(level, lo=1)
        probs = np.asarray(coarse_probs, dtype=np.float64)
        K = self.classes_per_level[level]
        if probs.shape != (K,):
            raise NotADistribution(
                f"expected {K} probabilities for level {level}, got shape {probs.shape}"
            )
        if probs.min() < -_SUM_TOL or abs(probs.sum() - 1.0) > _SUM_TOL:
            raise NotADistribution("coarse probabilities must be a distribution")
        return probs @ self.expansion_matrix(level)

    # -- identity and persistence ---------------------------------------------

    def content_hash(self) -> str:
        payload = json.dumps(
            {"classes": self.classes_per_level, "parents": self.parent_maps},
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        """Write the canonical fine-to-coarse file representation."""
        lines = [f"#levels {self.levels}", "#order fine_to_coarse"]
        for fine_id in range(self.num_fine):
            lines.append(" ".join(str(v) for v in self._ancestors[fine_id]))
        Path(path).write_text("\n".join(lines) + "\n")

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, GranularityHierarchy)
            and self.classes_per_level == other.classes_per_level
            and self.parent_maps == other.parent_maps
        )

    def __repr__(self) -> str:
        return f"GranularityHierarchy(classes_per_level={self.classes_per_level})"


def from_class_vectors(vectors: Iterable[Sequence[int]]) -> GranularityHierarchy:
    """Build a hierarchy from one full ancestor row per fine class."""
    rows = [list(int(v) for v in row) for row in vectors]
    if not rows:
        raise HierarchyFormatError("no class vectors given")
    G = len(rows[0])
    if any(len(r) != G for r in rows):
        raise CycleOrLevelMismatch("class vectors disagree on the level count")
    return _from_rows(rows, levels=G)


def _from_rows(
    rows: list[list[int]],
    levels: int,
    label_names: Sequence[Sequence[str]] | None = None,
) -> GranularityHierarchy:
    fine = [r[0] for r in rows]
    seen: set[int] = set()
    for f in fine:
        if f in seen:
            raise DuplicateClassId(f"fine class {f} listed twice")
        seen.add(f)
    if seen != set(range(len(rows))):
        raise CycleOrLevelMismatch("fine ids are not dense 0-based")

    if levels == 1:
        # Degenerate flat label set: hang everything off one synthetic root.
        rows = [[r[0], 0] for r in rows]
        levels = 2
        if label_names is not None:
            label_names = [label_names[0], ("root",)]

    by_fine = sorted(rows, key=lambda r: r[0])
    classes_per_level = []
    for g in range(levels):
        ids = {r[g] for r in by_fine}
        if ids != set(range(len(ids))):
            raise CycleOrLevelMismatch(f"level {g} ids are not dense 0-based")
        classes_per_level.append(len(ids))

    parent_maps: list[list[int]] = []
    for g in range(levels - 1):
        pm: list[int] = [-1] * classes_per_level[g]
        for r in by_fine:
            k, parent = r[g], r[g + 1]
            if pm[k] == -1:
                pm[k] = parent
            elif pm[k] != parent:
                raise CycleOrLevelMismatch(
                    f"class {k} at level {g} has conflicting parents {pm[k]} and {parent}"
                )
        parent_maps.append(pm)
    return GranularityHierarchy(classes_per_level, parent_maps, label_names)


def load_hierarchy(path: str | Path) -> GranularityHierarchy:
    """Parse a hierarchy file (see module docstring for the format)."""
    path = Path(path)
    levels: int | None = None
    order = "fine_to_coarse"
    token_rows: list[list[str]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if not parts:
                continue
            if parts[0] == "levels":
                try:
                    levels = int(parts[1])
                except (IndexError, ValueError):
                    raise HierarchyFormatError(f"line {lineno}: bad #levels pragma")
            elif parts[0] == "order":
                if parts[1:] not in (["fine_to_coarse"], ["coarse_to_fine"]):
                    raise HierarchyFormatError(f"line {lineno}: bad #order pragma")
                order = parts[1]
            continue
        token_rows.append(line.split())

    if levels is None:
        raise HierarchyFormatError("missing #levels header")
    if levels < 1:
        raise HierarchyFormatError("#levels must be positive")
    if not token_rows:
        raise HierarchyFormatError("no class rows")
    for row in token_rows:
        if len(row) < levels:
            raise MissingParent(
                f"row {' '.join(row)!r} has {len(row)} of {levels} levels"
            )
        if len(row) > levels:
            raise HierarchyFormatError(
                f"row {' '.join(row)!r} has more entries than declared levels"
            )
    if order == "coarse_to_fine":
        token_rows = [row[::-1] for row in token_rows]

    # Column-wise: integer columns are literal ids, anything else is
    # remapped densely in first-appearance order.
    rows = [[0] * levels for _ in token_rows]
    names: list[tuple[str, ...] | None] = []
    for g in range(levels):
        column = [row[g] for row in token_rows]
        try:
            ids = [int(tok) for tok in column]
            names.append(None)
        except ValueError:
            mapping: dict[str, int] = {}
            ids = [mapping.setdefault(tok, len(mapping)) for tok in column]
            names.append(tuple(sorted(mapping, key=mapping.get)))
        for i, v in enumerate(ids):
            rows[i][g] = v

    label_names = None
    if any(n is not None for n in names):
        label_names = []
        for g, n in enumerate(names):
            if n is None:
                size = len({row[g] for row in rows})
                n = tuple(str(i) for i in range(size))
            label_names.append(n)
    return _from_rows(rows, levels, label_names)
