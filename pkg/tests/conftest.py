import pathlib

import numpy as np
import pytest

DATA_DIR = pathlib.Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def s2_vectors():
    """Frozen (lat, lon, level, cell_id, center_lat, center_lon) reference rows."""
    import csv

    rows = list(csv.DictReader(open(DATA_DIR / "s2_reference_vectors.csv")))
    return {
        "lat": np.array([float(r["lat_deg"]) for r in rows]),
        "lon": np.array([float(r["lon_deg"]) for r in rows]),
        "level": np.array([int(r["level"]) for r in rows]),
        "cell_id": np.array([int(r["cell_id"]) for r in rows], dtype=np.uint64),
        "center_lat": np.array([float(r["center_lat_deg"]) for r in rows]),
        "center_lon": np.array([float(r["center_lon_deg"]) for r in rows]),
    }
