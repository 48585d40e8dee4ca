"""Shared fixtures and reference hierarchies used across the test modules."""

from __future__ import annotations

import pytest

from fsdg.hierarchy import GranularityHierarchy

# Eight reference fine classes with known 4-level label vectors, embedded in a
# dense 52/37/20/9 hierarchy.  The unconstrained classes are filled in with a
# modular default so that every id at every level keeps at least one child.
REFERENCE_VECTORS = {
    8: [8, 5, 3, 3],
    9: [9, 6, 3, 3],
    10: [10, 5, 3, 3],
    11: [11, 7, 3, 3],
    12: [12, 8, 3, 3],
    28: [28, 19, 12, 3],
    29: [29, 19, 12, 3],
    51: [51, 36, 19, 8],
}


def table_hierarchy() -> GranularityHierarchy:
    fine_to_l1 = {8: 5, 9: 6, 10: 5, 11: 7, 12: 8, 28: 19, 29: 19, 51: 36,
                  41: 28, 42: 29}
    l1_to_l2 = {5: 3, 6: 3, 7: 3, 8: 3, 19: 12, 36: 19}
    l2_to_l3 = {19: 8}
    maps = [
        [fine_to_l1.get(i, i % 37) for i in range(52)],
        [l1_to_l2.get(j, j % 20) for j in range(37)],
        [l2_to_l3.get(j, j % 9) for j in range(20)],
    ]
    return GranularityHierarchy([52, 37, 20, 9], maps)


def toy_hierarchy() -> GranularityHierarchy:
    # 4 fine / 2 coarse, balanced: fine {0,1} under 0, {2,3} under 1.
    return GranularityHierarchy([4, 2], [[0, 0, 1, 1]])


@pytest.fixture(scope="session")
def table_h() -> GranularityHierarchy:
    return table_hierarchy()


@pytest.fixture()
def toy_h() -> GranularityHierarchy:
    return toy_hierarchy()
