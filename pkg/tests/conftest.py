import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tiilstm.dataio import TagTable  # noqa: E402


def make_table(cols: dict, kinds: dict | None = None, labels=None) -> TagTable:
    names = tuple(cols)
    n = len(next(iter(cols.values())))
    kinds = kinds or {}
    return TagTable(
        np.arange(n, dtype=np.float64),
        names,
        tuple(kinds.get(c, "analog") for c in names),
        np.column_stack([np.asarray(cols[c], dtype=np.float64) for c in names]),
        labels,
    )


@pytest.fixture
def table_factory():
    return make_table


@pytest.fixture(scope="session")
def small_bench():
    from tiilstm.synthplant import make_benchmark

    return make_benchmark("small", 0)


@pytest.fixture(scope="session")
def small_model(small_bench):
    from tiilstm.evaluation import train_model
    from tiilstm.synthplant import CANONICAL

    return train_model(small_bench.train, list(CANONICAL), created="1970-01-01T00:00:00Z")
