import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest


@pytest.fixture(scope="session")
def small_corpus():
    from txweak.synthgen import benchmark_config, generate

    return generate(benchmark_config(40, seed=7))


@pytest.fixture(scope="session")
def bundle(small_corpus):
    """An untrained but fully wired model bundle; enough for plumbing tests."""
    from txweak.classifier import ClassifierConfig, DualGRUNet, FeatureScaler
    from txweak.embed import EmbeddingConfig, train_embedding
    from txweak.stream import ModelBundle
    from txweak.taskspec import embedding_corpus
    from txweak.txprep import group

    groups = group(small_corpus.transactions)
    emb = train_embedding(embedding_corpus(groups), EmbeddingConfig(dim=8, epochs=1, min_count=2, bucket_count=4000))
    net = DualGRUNet(ClassifierConfig(ts_hidden=4, text_hidden=4, mlp_hidden=(8,), seed=1), 8)
    return ModelBundle(emb, FeatureScaler().fit(groups), net, model_version="test:v1")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance")
    for line in sorted(mod.RESULTS, key=lambda s: s[6:8]):
        terminalreporter.write_line(line)
