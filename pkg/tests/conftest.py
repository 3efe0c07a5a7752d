import pytest

from ddp_workbench.data import SynthConfig, split_corpus, synthesize
from ddp_workbench.models import TrainConfig, build_model, train


@pytest.fixture(scope="session")
def task():
    return synthesize(SynthConfig())


@pytest.fixture(scope="session")
def splits(task):
    return split_corpus(task.corpus)


@pytest.fixture(scope="session")
def train_texts(task, splits):
    return splits["train"].embedded(task.table), splits["train"].labels


@pytest.fixture(scope="session")
def test_texts(task, splits):
    return splits["test"].embedded(task.table), splits["test"].labels


def _trained(arch, task, train_texts):
    texts, labels = train_texts
    return train(build_model(arch, task.table.dim, 2, seed=0), texts, labels, TrainConfig()).model


@pytest.fixture(scope="session")
def bag_model(task, train_texts):
    return _trained("bag", task, train_texts)


@pytest.fixture(scope="session")
def attention_model(task, train_texts):
    return _trained("attention", task, train_texts)
