from dataclasses import replace

import numpy as np
import pytest

from conftest import checkin
from models.windowing import training_pair, window
from numcore.gradcheck import grad_check
from numcore.tensor import Tensor, backward, no_grad
from services.ei import CategoryEmbeddingTable
from services.recommender import (
    CHANNELS, ForwardContext, ModelParams, SequentialRecommender, SRBatch, TrainingExample, attention,
    attention_scores, channel_clip, forward, layer_norm, loss_sr, predict_scores, sample_targets,
)
from utils.config import RunConfig
from utils.errors import UsageError

GRAD_CONFIG = RunConfig(D=4, N=3, M_b=1, I_a=4, I_l=4, I_t=4)


def make_examples(model, corpus, users, length=None):
    out = []
    for u in users:
        seq = corpus.users[u] if length is None else corpus.users[u][:length]
        inputs, targets = training_pair(seq, model.config.seq_len, model.pad_id)
        out.append(TrainingExample(user=u, inputs=model.encode(inputs), targets=model.encode(targets)))
    return out


def outputs(params, batch, config):
    with no_grad():
        return forward(params, ForwardContext.build(batch, config)).data


def perturb_after(batch, pos, rng, config, num_pois):
    """Copy of the batch with every input of slots > pos redrawn"""
    poi_ids = batch.poi_ids.copy()
    mu_bar = batch.mu_bar.copy()
    indices = {ch: m.copy() for ch, m in batch.indices.items()}
    poi_ids[:, pos + 1:] = rng.integers(0, num_pois, size=poi_ids[:, pos + 1:].shape)
    mu_bar[:, pos + 1:] = rng.normal(size=mu_bar[:, pos + 1:].shape)
    clips = {"J": config.clip_app, "K": config.clip_poi, "T": config.clip_time}
    for ch, m in indices.items():
        fresh = rng.integers(0, clips[ch] + 1, size=m.shape)
        m[:, pos + 1:, :] = fresh[:, pos + 1:, :]
        m[:, :, pos + 1:] = fresh[:, :, pos + 1:]
    return replace(batch, poi_ids=poi_ids, mu_bar=mu_bar, indices=indices)


@pytest.fixture
def model(tiny_config, frozen_table):
    return SequentialRecommender(tiny_config, frozen_table, num_pois=8)


def test_init_shapes_and_pad_row(tiny_config):
    params = ModelParams.init(tiny_config, 8, seed=3)
    shapes = {name: t.shape for name, t in params.named().items()}
    assert shapes == ModelParams.expected_shapes(tiny_config, 8)
    assert not params.L.data[-1].any()
    assert params.pad_id == 8


def test_disabled_channels_have_no_tables(tiny_config):
    params = ModelParams.init(tiny_config.variant(use_K=False, use_abs=False), 8, seed=3)
    assert set(params.relative) == {"J", "T"}
    assert params.P_key is None and "P_key" not in params.named()


def test_init_is_seeded_per_tensor(tiny_config):
    full = ModelParams.init(tiny_config, 8, seed=3)
    ablated = ModelParams.init(tiny_config.variant(use_J=False), 8, seed=3)
    np.testing.assert_array_equal(full.L.data, ablated.L.data)
    np.testing.assert_array_equal(full.relative["T"][1].data, ablated.relative["T"][1].data)
    np.testing.assert_array_equal(full.blocks[0].W_q.data, ablated.blocks[0].W_q.data)


def test_unfrozen_table_is_rejected(tiny_config):
    with pytest.raises(UsageError):
        SequentialRecommender(tiny_config, CategoryEmbeddingTable.init(3, 3, 4, seed=0), num_pois=8)


@pytest.mark.parametrize("kernel", ["bucketed", "dense"])
def test_later_check_ins_never_change_earlier_outputs(tiny_corpus, tiny_config, frozen_table, kernel):
    config = tiny_config.variant(num_blocks=2, heads=2, relative_kernel=kernel)
    model = SequentialRecommender(config, frozen_table, num_pois=8)
    batch = SRBatch.stack([ex.inputs for ex in make_examples(model, tiny_corpus, range(4))])
    base = outputs(model.params, batch, config)
    rng = np.random.default_rng(0)
    for _ in range(25):
        pos = int(rng.integers(0, config.seq_len - 1))
        changed = outputs(model.params, perturb_after(batch, pos, rng, config, 8), config)
        np.testing.assert_array_equal(changed[:, : pos + 1], base[:, : pos + 1])


EARLIER = [
    checkin(1, 0, apps={0}, pois={0}),
    checkin(3, 100, apps={1}, pois={1}),
    checkin(4, 200, apps={0, 1}, pois={2}),
]


@pytest.mark.parametrize("kernel", ["bucketed", "dense"])
@pytest.mark.parametrize("last", [
    checkin(6, 210, apps={0}, pois={0}),
    checkin(6, 300, apps={2}, pois={1}),
    checkin(2, 9000, apps={1, 2}, pois={0, 2}),
])
def test_rebuilt_window_keeps_earlier_outputs(tiny_config, frozen_table, kernel, last):
    config = tiny_config.variant(num_blocks=2, heads=2, relative_kernel=kernel)
    model = SequentialRecommender(config, frozen_table, num_pois=8)
    base = model.encode(window(EARLIER + [checkin(6, 300, apps={0}, pois={0})], config.seq_len, model.pad_id))
    changed = model.encode(window(EARLIER + [last], config.seq_len, model.pad_id))
    # slot 0 is padding, slots 1-3 hold EARLIER and slot 4 the changed check-in
    for ch in CHANNELS:
        np.testing.assert_array_equal(changed.rel.channel(ch)[:4, :4], base.rel.channel(ch)[:4, :4])
    first = outputs(model.params, SRBatch.stack([base]), config)
    second = outputs(model.params, SRBatch.stack([changed]), config)
    np.testing.assert_array_equal(second[:, :4], first[:, :4])


def test_pad_slots_do_not_reach_real_positions(tiny_corpus, tiny_config, frozen_table):
    config = tiny_config.variant(seq_len=8)
    model = SequentialRecommender(config, frozen_table, num_pois=8)
    enc = model.encode(window(tiny_corpus.users[0], config.seq_len, model.pad_id))
    batch = SRBatch.stack([enc])
    assert batch.pad_mask[0].tolist() == [False, False] + [True] * 6
    poi_ids = batch.poi_ids.copy()
    poi_ids[:, :2] = 3
    mu_bar = batch.mu_bar.copy()
    mu_bar[:, :2] = 1.0
    indices = {ch: m.copy() for ch, m in batch.indices.items()}
    for m in indices.values():
        m[:, :2, :] = 2
        m[:, :, :2] = 2
    changed = replace(batch, poi_ids=poi_ids, mu_bar=mu_bar, indices=indices)
    np.testing.assert_array_equal(outputs(model.params, changed, config)[:, 2:],
                                  outputs(model.params, batch, config)[:, 2:])


@pytest.mark.parametrize("kernel", ["bucketed", "dense"])
def test_prepending_pad_slots_keeps_real_outputs(tiny_corpus, tiny_config, frozen_table, kernel):
    short = tiny_config.variant(use_abs=False, num_blocks=2, relative_kernel=kernel)
    long = short.variant(seq_len=9)
    model = SequentialRecommender(short, frozen_table, num_pois=8)
    wide = SequentialRecommender(long, frozen_table, num_pois=8, params=model.params)
    for seq in tiny_corpus.users:
        seq = seq[:4]
        narrow_batch = SRBatch.stack([model.encode(window(seq, short.seq_len, model.pad_id))])
        wide_batch = SRBatch.stack([wide.encode(window(seq, long.seq_len, wide.pad_id))])
        assert wide_batch.pad_mask.sum() == narrow_batch.pad_mask.sum() == 4
        np.testing.assert_allclose(outputs(model.params, wide_batch, long)[:, -4:],
                                   outputs(model.params, narrow_batch, short)[:, -4:], rtol=0, atol=1e-9)
        enc = wide.encode(window(seq, long.seq_len, wide.pad_id))
        np.testing.assert_allclose(wide.score(enc, list(range(8))),
                                   model.score(model.encode(window(seq, short.seq_len, model.pad_id)),
                                               list(range(8))), rtol=0, atol=1e-9)


@pytest.mark.parametrize("kernel", ["bucketed", "dense"])
def test_pad_slots_receive_no_gradient(tiny_corpus, tiny_config, frozen_table, kernel):
    # no L2 penalty, which would touch every row
    config = tiny_config.variant(seq_len=8, num_blocks=2, relative_kernel=kernel, l2=0.0)
    model = SequentialRecommender(config, frozen_table, num_pois=8)
    examples = make_examples(model, tiny_corpus, range(4))
    targets = sample_targets(tiny_corpus, examples, frozen_table, np.random.default_rng(4), model.pad_id)
    batch = SRBatch.stack([ex.inputs for ex in examples])
    # every user has 6 check-ins, so 5 inputs leave slots 0-2 padded in all rows
    assert not batch.pad_mask[:, :3].any()

    def gradients(b):
        found = backward(loss_sr(model.params, b, targets, config).total)
        return {name: found[t].data.copy() for name, t in model.params.named().items()}

    base = gradients(batch)
    assert not base["P_val"][:3].any() and not base["P_key"][:3].any()

    indices = {ch: m.copy() for ch, m in batch.indices.items()}
    for ch, m in indices.items():
        m[:, :3, :] = channel_clip(config, ch)
        m[:, :, :3] = channel_clip(config, ch)
    moved = gradients(replace(batch, indices=indices))
    for ch in CHANNELS:
        for side in ("key", "val"):
            np.testing.assert_allclose(moved[f"{ch}_{side}"], base[f"{ch}_{side}"], rtol=0, atol=1e-12)


@pytest.mark.parametrize("kernel", ["bucketed", "dense"])
def test_relative_tables_are_shared_by_every_head(tiny_corpus, tiny_config, frozen_table, kernel):
    config = tiny_config.variant(heads=2, use_abs=False, relative_kernel=kernel)
    shapes = ModelParams.expected_shapes(config, 8)
    assert shapes["J_key"] == shapes["T_val"] == (config.clip_app + 1, config.dim // 2)

    model = SequentialRecommender(config, frozen_table, num_pois=8)
    block = model.params.blocks[0]
    half = config.dim // 2
    block.W_q.data[:, half:] = block.W_q.data[:, :half]
    block.W_k.data[:, half:] = block.W_k.data[:, :half]
    batch = SRBatch.stack([ex.inputs for ex in make_examples(model, tiny_corpus, range(4))])
    ctx = ForwardContext.build(batch, config)
    with no_grad():
        scores = attention_scores(forward(replace(model.params, blocks=[]), ctx), block, model.params, ctx).data
    np.testing.assert_allclose(scores[:, 0], scores[:, 1], rtol=1e-12, atol=1e-12)


def test_attention_rows_are_normalised_and_masked(tiny_corpus, tiny_config, frozen_table):
    config = tiny_config.variant(seq_len=8, heads=2)
    model = SequentialRecommender(config, frozen_table, num_pois=8)
    seqs = [tiny_corpus.users[0], tiny_corpus.users[1][:3]]
    batch = SRBatch.stack([model.encode(window(s, config.seq_len, model.pad_id)) for s in seqs])
    ctx = ForwardContext.build(batch, config)
    block = model.params.blocks[0]
    z = forward(replace(model.params, blocks=[]), ctx)
    with no_grad():
        _, alpha = attention(layer_norm(z, block.ln_attn_scale, block.ln_attn_bias, config.ln_eps),
                             block, model.params, ctx)
    alpha = alpha.data
    real = batch.pad_mask
    sums = alpha.sum(axis=-1)
    for b in range(2):
        np.testing.assert_allclose(sums[b][:, real[b]], 1.0, atol=1e-9)
        assert np.all(sums[b][:, ~real[b]] == 0.0)
        assert np.all(alpha[b][..., ~real[b]] == 0.0)
    assert np.all(np.triu(np.ones((8, 8)), k=1)[None, None] * alpha == 0.0)


def test_two_equal_keys_split_attention_evenly(tiny_config, frozen_table):
    config = tiny_config.variant(seq_len=2, use_J=False, use_K=False, use_T=False, use_abs=False)
    model = SequentialRecommender(config, frozen_table, num_pois=8)
    seq = [checkin(1, 0), checkin(1, 0)]
    batch = SRBatch.stack([model.encode(window(seq, 2, model.pad_id))])
    ctx = ForwardContext.build(batch, config)
    block = model.params.blocks[0]
    with no_grad():
        h = layer_norm(forward(replace(model.params, blocks=[]), ctx),
                       block.ln_attn_scale, block.ln_attn_bias, config.ln_eps)
        _, alpha = attention(h, block, model.params, ctx)
    np.testing.assert_allclose(alpha.data[0, 0, 1], [0.5, 0.5])


@pytest.fixture
def grad_fixture(tiny_corpus, tiny_config, frozen_table):
    config = tiny_config.variant(seq_len=3, num_blocks=1)
    model = SequentialRecommender(config, frozen_table, num_pois=8)
    examples = make_examples(model, tiny_corpus, [0], length=4)
    targets = sample_targets(tiny_corpus, examples, frozen_table, np.random.default_rng(5), model.pad_id)
    batch = SRBatch.stack([ex.inputs for ex in examples])
    return model, batch, targets


def test_grad_fixture_has_three_real_positions(grad_fixture):
    _, batch, targets = grad_fixture
    assert batch.pad_mask.tolist() == [[True, True, True]]
    assert targets.mask.sum() == 3


@pytest.mark.parametrize("name", list(ModelParams.expected_shapes(GRAD_CONFIG, 8)))
def test_grad_check_full_loss(grad_fixture, name):
    model, batch, targets = grad_fixture
    point = model.params.named()[name]

    def f():
        return loss_sr(model.params, batch, targets, model.config).total

    assert grad_check(f, point) < 1e-4


def test_kernels_agree_on_outputs_and_gradients(tiny_corpus, tiny_config, frozen_table):
    config = tiny_config.variant(heads=2)
    model = SequentialRecommender(config, frozen_table, num_pois=8)
    examples = make_examples(model, tiny_corpus, range(4))
    targets = sample_targets(tiny_corpus, examples, frozen_table, np.random.default_rng(1), model.pad_id)
    batch = SRBatch.stack([ex.inputs for ex in examples])

    grads = {}
    for kernel in ("bucketed", "dense"):
        cfg = config.variant(relative_kernel=kernel)
        loss = loss_sr(model.params, batch, targets, cfg).total
        found = backward(loss)
        grads[kernel] = {name: found[t].data.copy() for name, t in model.params.named().items()}
    for name in model.params.named():
        np.testing.assert_allclose(grads["dense"][name], grads["bucketed"][name], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(outputs(model.params, batch, config.variant(relative_kernel="dense")),
                               outputs(model.params, batch, config), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("kernel", ["bucketed", "dense"])
def test_zero_relative_tables_match_disabled_channels(tiny_corpus, tiny_config, frozen_table, kernel):
    on = tiny_config.variant(relative_kernel=kernel)
    off = on.variant(use_J=False, use_K=False, use_T=False)
    params_on = ModelParams.init(on, 8, seed=3)
    for key, val in params_on.relative.values():
        key.data[0] = 0.0
        val.data[0] = 0.0
    params_off = ModelParams.init(off, 8, seed=3)

    model = SequentialRecommender(off, frozen_table, num_pois=8, params=params_off)
    batch = SRBatch.stack([ex.inputs for ex in make_examples(model, tiny_corpus, range(4))])
    assert all(not batch.indices[ch].any() for ch in CHANNELS)
    np.testing.assert_array_equal(outputs(params_on, batch, on), outputs(params_off, batch, off))


def test_loss_terms_are_finite_and_weighted(tiny_corpus, model, frozen_table):
    examples = make_examples(model, tiny_corpus, range(4))
    targets = sample_targets(tiny_corpus, examples, frozen_table, np.random.default_rng(2), model.pad_id)
    with no_grad():
        loss = model.loss(examples, targets)
    expected = loss.rec.item() + model.config.kappa * (loss.app.item() + loss.poi.item())
    assert loss.total.item() == pytest.approx(expected)
    assert loss.rec.item() > 0


def test_sampled_negatives_avoid_history(tiny_corpus, model, frozen_table):
    examples = make_examples(model, tiny_corpus, range(4))
    targets = sample_targets(tiny_corpus, examples, frozen_table, np.random.default_rng(3), model.pad_id)
    for i, ex in enumerate(examples):
        real = targets.mask[i]
        assert not set(targets.neg_ids[i][real].tolist()) & tiny_corpus.visited[ex.user]
        assert np.all(targets.neg_ids[i][~real] == model.pad_id)


def test_pad_is_never_a_candidate(model):
    with pytest.raises(UsageError):
        predict_scores(Tensor(np.zeros(4)), [0, 8], model.params)


def test_score_matches_dot_with_final_state(tiny_corpus, model):
    enc = model.encode(window(tiny_corpus.users[2], model.config.seq_len, model.pad_id))
    z = model.final_states([enc])[0]
    np.testing.assert_allclose(model.score(enc, [1, 5]), model.params.L.data[[1, 5]] @ z)


def test_recommend_ranks_all_pois_but_pad(tiny_corpus, model):
    rec = model.recommend(window(tiny_corpus.users[1], model.config.seq_len, model.pad_id), top=20)
    ids = [poi for poi, _ in rec.pois]
    assert sorted(ids) == list(range(8))
    scores = [s for _, s in rec.pois]
    assert scores == sorted(scores, reverse=True)
    assert len(rec.app_categories) == 3 and len(rec.poi_categories) == 3
