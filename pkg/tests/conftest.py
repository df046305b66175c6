import numpy as np
import pytest

from models.models import CheckIn, Corpus
from numcore.tensor import current_graph
from services.ei import CategoryEmbeddingTable
from utils.config import Config, RunConfig


def checkin(poi, ts, apps=(0,), pois=(0,)):
    return CheckIn(poi_id=poi, timestamp=ts, app_categories=frozenset(apps), poi_categories=frozenset(pois))


@pytest.fixture(autouse=True)
def clean_state(monkeypatch):
    """Fresh tape and no seed override for every test"""
    monkeypatch.delenv("REVAMP_SEED", raising=False)
    monkeypatch.delenv("REVAMP_WORKERS", raising=False)
    Config.reload()
    current_graph().reset()
    yield
    current_graph().reset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_corpus():
    """4 users x 6 check-ins over 8 POIs, 3 app and 3 POI categories"""
    users = []
    for u in range(4):
        seq = []
        for k in range(6):
            poi = (u + 2 * k) % 8
            seq.append(checkin(poi, 1000 * u + 60 * k * (k + 1), apps={k % 3, (k + u) % 3}, pois={poi % 3}))
        users.append(seq)
    return Corpus(user_ids=[10, 11, 12, 13], users=users, num_pois=8, num_app_categories=3, num_poi_categories=3)


@pytest.fixture
def tiny_config():
    return RunConfig(
        D=4, N=5, M_b=1, heads=1, I_a=4, I_l=4, I_t=4,
        epochs_ei=2, epochs_sr=2, batch_size=2, batch_size_ei=8,
        pretrained_dim=6, eval_negatives=5, dropout=0.0, seed=3,
    )


@pytest.fixture
def frozen_table(tiny_corpus, tiny_config):
    return CategoryEmbeddingTable.init(
        tiny_corpus.num_app_categories, tiny_corpus.num_poi_categories, tiny_config.dim, seed=5
    ).freeze()
