import numpy as np
import pytest

from descent_planner import dataset as ds
from descent_planner import operators


@pytest.fixture()
def tmp_csv(tmp_path):
    def write(lines, name="data.csv"):
        path = tmp_path / name
        path.write_bytes(b"\n".join(lines) + b"\n")
        return str(path)

    return write


@pytest.fixture()
def small_synth():
    return ds.synthesize("svm", 200, 4, 0.0, seed=3)


def unit(label, features):
    return operators.DataUnit(label=label,
                              features=np.asarray(features, dtype=float))
