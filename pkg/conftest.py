"""Shared fixtures: synthetic datasets written once per session"""

import pytest

import synthetic_data


def _write(tmp_path_factory, task, n, seed=0):
    out = tmp_path_factory.mktemp(f"synthetic_{task}")
    synthetic_data.write_synthetic(synthetic_data.synth_dataset(task, n, seed), out)
    return out


@pytest.fixture(scope="session")
def attribute_dir(tmp_path_factory):
    return _write(tmp_path_factory, "attribute", 12)


@pytest.fixture(scope="session")
def landmark_dir(tmp_path_factory):
    return _write(tmp_path_factory, "landmark", 12)


@pytest.fixture(scope="session")
def retrieval_dir(tmp_path_factory):
    return _write(tmp_path_factory, "retrieval", 8)


@pytest.fixture(scope="session")
def detection_dir(tmp_path_factory):
    return _write(tmp_path_factory, "detection", 6)


@pytest.fixture(scope="session")
def compat_dir(tmp_path_factory):
    return _write(tmp_path_factory, "compat", 6)
