import io

import numpy as np
import pytest

from symptom_control.model import ITEM_COLUMNS, SymptomSeries


def make_csv(rows):
    """rows: iterable of (patient_id, day, items)."""
    buf = io.StringIO()
    buf.write(",".join(("patient_id", "day") + ITEM_COLUMNS) + "\n")
    for pid, day, items in rows:
        buf.write(",".join([pid, str(day)] + [str(v) for v in items]) + "\n")
    return buf.getvalue().encode()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_series(rng):
    def _make(n_obs=20, pid="p1", seed=None):
        r = np.random.default_rng(seed) if seed is not None else rng
        items = r.integers(0, 4, size=(n_obs, 21))
        days = np.cumsum(r.integers(1, 10, size=n_obs)) - 1
        days = days - days[0]
        return SymptomSeries.from_arrays(pid, days, items)
    return _make
