import os

import hypothesis
import networkx as nx
import numpy as np
import pytest

from backend.core_pipeline.dataset_io import Dataset, write_dataset
from backend.core_pipeline.graph_core import build_graph
from backend.core_pipeline.synthetic import cycle_graph, path_graph, star_graph

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def p3():
    return path_graph(3)


@pytest.fixture
def triangle():
    return cycle_graph(3)


@pytest.fixture
def star4():
    return star_graph(4)


@pytest.fixture(scope="session")
def karate():
    g = nx.karate_club_graph()
    return build_graph(list(g.edges()), g.number_of_nodes())


@pytest.fixture
def toy_p3_dataset():
    features = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
    return Dataset("toy_p3", path_graph(3), features, np.array([0, 1, 0]), 2)


@pytest.fixture
def toy_p3_dir(tmp_path, toy_p3_dataset):
    directory = tmp_path / "toy_p3"
    write_dataset(str(directory), toy_p3_dataset)
    return directory
