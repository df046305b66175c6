import numpy as np
import pytest

from conftest import checkin
from models.models import Corpus
from models.sampling import sample_excluding
from numcore.gradcheck import grad_check
from numcore.optim import Adam
from numcore.tensor import Tensor, backward, no_grad
from services.ei import (
    MF_BIAS_INIT, CategoryEmbeddingTable, EIParams, EmbeddingInitiator, PretrainedVectors,
    fallback_vector, loss_bert, loss_ei, loss_mf, mf_logit, project, train_ei,
)
from services.pipeline import TrainingPipeline
from services.recommender import SequentialRecommender, sample_targets
from utils.errors import CorpusFormatError, PretrainedVectorError
from utils.seeding import SeedUtils


@pytest.fixture
def ei_setup(tiny_corpus):
    table = CategoryEmbeddingTable.init(3, 3, 4, seed=1)
    params = EIParams.init(4, 6, seed=1)
    targets = PretrainedVectors(dim=6).targets(tiny_corpus)
    batch = [c for seq in tiny_corpus.users for c in seq][:8]
    return table, params, targets, batch


def test_fallback_vectors_are_deterministic_unit_norm():
    v = fallback_vector("app:social", 16)
    np.testing.assert_array_equal(v, fallback_vector("app:social", 16))
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert not np.allclose(v, fallback_vector("app:maps", 16))


def test_pretrained_lookup_and_fallback_policy():
    vectors = PretrainedVectors({"a": np.ones(3)}, dim=3)
    np.testing.assert_array_equal(vectors.lookup("a"), np.ones(3))
    vectors.lookup("b")
    assert vectors.fallbacks_used == 1
    strict = PretrainedVectors({"a": np.ones(3)}, dim=3, allow_fallback=False)
    with pytest.raises(PretrainedVectorError):
        strict.lookup("b")
    with pytest.raises(KeyError):
        strict.lookup("b")


def test_pretrained_load(tmp_path):
    path = tmp_path / "vectors.tsv"
    path.write_text("# comment\napp:0\t1 2 3\n\npoi:1\t0 0 1\n")
    vectors = PretrainedVectors.load(path, dim=3)
    assert sorted(vectors.vectors) == ["app:0", "poi:1"]
    path.write_text("app:0\t1 2\n")
    with pytest.raises(CorpusFormatError):
        PretrainedVectors.load(path, dim=3)


def test_mf_logit_is_relu_of_affine(ei_setup):
    table, params, _, _ = ei_setup
    raw = np.concatenate([table.A.data[1], table.S.data[2]]) @ params.w_v.data[:, 0] + params.b_v.data[0]
    assert mf_logit(1, 2, table, params).item() == pytest.approx(max(raw, 0.0))
    assert mf_logit(1, 2, table, params, activation="identity").item() == pytest.approx(raw)
    assert mf_logit(np.array([0, 1]), np.array([2, 2]), table, params).shape == (2,)


def test_mf_bias_starts_positive():
    assert EIParams.init(4, 6, seed=0).b_v.data[0] == MF_BIAS_INIT


def test_loss_mf_has_three_terms_per_pair(ei_setup):
    table, params, _, _ = ei_setup
    batch = [checkin(0, 0, apps={0}, pois={1})]
    rng = np.random.default_rng(0)
    loss = loss_mf(batch, table, params, rng, "identity").item()
    rng = np.random.default_rng(0)
    s_neg = sample_excluding({1}, 3, rng)
    a_neg = sample_excluding({0}, 3, rng)

    def logit(a, s):
        return mf_logit(a, s, table, params, "identity").item()

    def log_sig(x):
        return -np.logaddexp(0.0, -x)

    expected = -(log_sig(logit(0, 1)) + log_sig(-logit(0, s_neg)) + log_sig(-logit(a_neg, 1)))
    assert loss == pytest.approx(expected)


def test_loss_bert_zero_when_embeddings_match_projection(ei_setup):
    table, params, targets, batch = ei_setup
    table.A.data[:] = project(targets.app, params.w1, params.b1).data
    table.S.data[:] = project(targets.poi, params.w2, params.b2).data
    assert loss_bert(batch, table, targets, params).item() == pytest.approx(0.0, abs=1e-20)


def test_loss_bert_normalised_by_batch_size(ei_setup):
    table, params, targets, batch = ei_setup
    single = loss_bert(batch[:1], table, targets, params).item()
    doubled = loss_bert(batch[:1] * 2, table, targets, params).item()
    assert doubled == pytest.approx(single)


def test_gamma_endpoints(ei_setup):
    table, params, targets, batch = ei_setup
    total, mf, bert = loss_ei(batch, table, targets, params, 1.0, np.random.default_rng(2))
    assert total.item() == pytest.approx(mf.item())
    total, mf, bert = loss_ei(batch, table, targets, params, 0.0, np.random.default_rng(2))
    assert total.item() == pytest.approx(bert.item())
    total, mf, bert = loss_ei(batch, table, targets, params, 0.25, np.random.default_rng(2))
    assert total.item() == pytest.approx(0.25 * mf.item() + 0.75 * bert.item(), rel=1e-12)


@pytest.mark.parametrize("activation", ["relu", "identity"])
@pytest.mark.parametrize("which", ["A", "S", "w_v", "b_v", "w1", "b1", "w2", "b2"])
def test_grad_check_ei_loss(ei_setup, which, activation):
    table, params, targets, batch = ei_setup
    point = getattr(table, which) if which in ("A", "S") else getattr(params, which)

    def f():
        total, _, _ = loss_ei(batch, table, targets, params, 0.5, SeedUtils.rng(0, "grad"), activation)
        return total

    assert grad_check(f, point) < 1e-4


def test_training_freezes_tables_and_is_seeded(tiny_corpus, tiny_config):
    table = train_ei(tiny_corpus, tiny_config)
    assert table.frozen
    again = train_ei(tiny_corpus, tiny_config)
    np.testing.assert_array_equal(table.A.data, again.A.data)
    np.testing.assert_array_equal(table.S.data, again.S.data)


def test_training_lowers_loss(tiny_corpus, tiny_config):
    initiator = EmbeddingInitiator(tiny_config.variant(epochs_ei=30, ei_tolerance=0.0), tiny_corpus)
    initiator.train([c for seq in tiny_corpus.users for c in seq])
    assert initiator.history[-1]["loss"] < initiator.history[0]["loss"]


def test_early_exit_on_small_improvement(tiny_corpus, tiny_config):
    initiator = EmbeddingInitiator(tiny_config.variant(epochs_ei=50, ei_tolerance=1.0), tiny_corpus)
    initiator.train([c for seq in tiny_corpus.users for c in seq])
    assert len(initiator.history) < 50


def test_strict_vectors_without_match_fail_before_training(tiny_corpus, tiny_config):
    with pytest.raises(PretrainedVectorError):
        EmbeddingInitiator(tiny_config, tiny_corpus, PretrainedVectors(dim=6, allow_fallback=False))


def test_frozen_table_flag():
    table = CategoryEmbeddingTable(A=Tensor(np.zeros((2, 2)), requires_grad=True), S=Tensor(np.zeros((2, 2))))
    assert not table.frozen
    assert table.freeze().frozen



def test_alignment_only_pulls_rows_onto_projections(tiny_corpus, tiny_config):
    config = tiny_config.variant(gamma=0.0, epochs_ei=300, ei_tolerance=0.0, lr_ei=0.01)
    initiator = EmbeddingInitiator(config, tiny_corpus)

    def distance():
        with no_grad():
            app = project(initiator.targets.app, initiator.params.w1, initiator.params.b1).data
            poi = project(initiator.targets.poi, initiator.params.w2, initiator.params.b2).data
        return np.sum((initiator.table.A.data - app) ** 2) + np.sum((initiator.table.S.data - poi) ** 2)

    before = distance()
    initiator.train([c for seq in tiny_corpus.users for c in seq])
    assert distance() < 0.05 * before
    assert initiator.history[-1]["bert"] < 0.05 * initiator.history[0]["bert"]


def test_mf_prefers_the_co_occurring_category(tiny_config):
    # app category 0 only ever appears with POI category 0; POI category 1 is never a true pair
    users = [[checkin(k % 4, 60 * k, apps={u}, pois={0}) for k in range(6)] for u in range(2)]
    corpus = Corpus(user_ids=[0, 1], users=users, num_pois=4, num_app_categories=2, num_poi_categories=2)
    config = tiny_config.variant(gamma=1.0, epochs_ei=100, ei_tolerance=0.0, mf_activation="identity")
    initiator = EmbeddingInitiator(config, corpus)
    initiator.train([c for seq in users for c in seq])
    assert initiator.logit(0, 0) > initiator.logit(0, 1)
    assert initiator.logit(1, 0) > initiator.logit(1, 1)


def test_sequential_step_leaves_trained_tables_alone(tiny_corpus, tiny_config):
    table = train_ei(tiny_corpus, tiny_config)
    before = table.A.data.copy(), table.S.data.copy()
    model = SequentialRecommender(tiny_config, table, tiny_corpus.num_pois)
    examples = TrainingPipeline(tiny_corpus, tiny_config, table=table).examples(model)
    targets = sample_targets(tiny_corpus, examples, table, np.random.default_rng(0), model.pad_id)

    grads = backward(model.loss(examples, targets, train=True, rng=np.random.default_rng(1)).total)
    assert table.A not in grads and table.S not in grads
    Adam(model.params.trainable(), lr=0.1).step(grads)
    np.testing.assert_array_equal(table.A.data, before[0])
    np.testing.assert_array_equal(table.S.data, before[1])
