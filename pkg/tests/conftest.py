import pytest

from ppcn.scenegen import generate_dataset, make_scene_spec, write_dataset


@pytest.fixture(scope="session")
def mixed12_dir(tmp_path_factory):
    """Small mixed-family dataset on disk, shared by training and CLI tests."""
    spec = make_scene_spec("mixed", 32, 32, seed=11)
    ds = generate_dataset(spec, 12)
    path = tmp_path_factory.mktemp("data") / "mixed12"
    write_dataset(path, ds)
    return path


@pytest.fixture(scope="session")
def distinct20_dir(tmp_path_factory):
    """Two-class dataset with enough samples for a val split."""
    spec = make_scene_spec("distinct", 32, 32, seed=3)
    ds = generate_dataset(spec, 20)
    path = tmp_path_factory.mktemp("data") / "distinct20"
    write_dataset(path, ds)
    return path
