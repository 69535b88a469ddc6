import numpy as np
import pytest

from mvec import Database


@pytest.fixture
def make_db(tmp_path):
    """Factory for throwaway databases; closes everything at teardown."""
    opened = []

    def factory(name="test.mvec", dimension=8, metric="l2", schema=None, **kw):
        db = Database.open(
            str(tmp_path / name), dimension=dimension, metric=metric, schema=schema, **kw
        )
        opened.append(db)
        return db

    yield factory
    for db in opened:
        try:
            db.close()
        except Exception:
            pass


@pytest.fixture
def small_corpus():
    """(X, asset_ids) of 400 seeded Gaussian rows, D=8."""
    rng = np.random.default_rng(42)
    X = rng.normal(size=(400, 8)).astype(np.float32)
    return X, [f"a:{i}" for i in range(400)]


def load_corpus(db, X, assets, attrs_fn=None):
    """Upsert rows in order; vector ids are then 1..N in row order."""
    db.upsert_many(
        (assets[i], X[i], attrs_fn(i) if attrs_fn else None) for i in range(len(X))
    )
    return db
