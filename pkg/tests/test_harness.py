import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hopgraph.encoder import EmbeddingConfig, EncoderConfig, KernelKind, encoder_forward, init_encoder_params, make_input
from hopgraph.errors import ConfigError, ValidationError
from hopgraph.graph import box_contains, graph_to_dict
from hopgraph.harness.choice import init_scorer, score_choices
from hopgraph.harness.longtail import (
    DEFAULT_LOSSES,
    LongTailConfig,
    LossSpec,
    make_split,
    run_longtail_study,
    train_probe,
)
from hopgraph.harness.relational import (
    GridCell,
    RelationalConfig,
    RelationalTable,
    CellResult,
    default_grid,
    relational_data,
    run_relational_task,
)
from hopgraph.harness.synth import (
    ChoiceSample,
    LabelRule,
    SyntheticConfig,
    generate_choices,
    generate_corpus,
    make_world,
    predicate_form,
    predicate_rule,
    render_caption,
)
from hopgraph.numerics import class_balanced_weights
from hopgraph.pretrain import prepare

from conftest import random_graph

# ---------------------------------------------------------------- synthetic data


def _dump(corpus):
    return json.dumps([graph_to_dict(s.graph, s.caption) for s in corpus], sort_keys=True)


def test_same_seed_same_corpus():
    cfg = SyntheticConfig(samples=30, seed=3)
    assert _dump(generate_corpus(cfg)) == _dump(generate_corpus(cfg))
    assert _dump(generate_corpus(cfg)) != _dump(generate_corpus(SyntheticConfig(samples=30, seed=4)))


@given(st.integers(0, 10_000))
@settings(max_examples=25)
def test_predicates_follow_the_neighbour_table(seed):
    cfg = SyntheticConfig(samples=5, seed=seed)
    world = make_world(cfg)
    for s in generate_corpus(cfg, world):
        g = s.graph
        for subj, p, obj in g.triplets:
            assert g.predicates[p].class_id == predicate_rule(world, g.entities[subj].class_id, g.entities[obj].class_id)
            assert box_contains(g.predicates[p].union_bbox, g.entities[subj].bbox)
            assert box_contains(g.predicates[p].union_bbox, g.entities[obj].bbox)


def test_relation_table_is_symmetric():
    t = make_world(SyntheticConfig()).relation_table
    np.testing.assert_array_equal(t, t.T)


def test_graph_sizes_respect_ranges():
    cfg = SyntheticConfig(samples=40, entities_per_graph=(2, 4), predicates_per_graph=(1, 2))
    for s in generate_corpus(cfg):
        assert 2 <= s.graph.num_entities <= 4
        assert 1 <= s.graph.num_predicates <= 2


@pytest.mark.parametrize("kwargs", [
    dict(entities_per_graph=(5, 3)), dict(entities_per_graph=(1, 40)), dict(predicates_per_graph=(0, 2)),
    dict(predicates_per_graph=(1, 19)), dict(entity_class_count=1),
])
def test_infeasible_configs(kwargs):
    with pytest.raises(ConfigError):
        SyntheticConfig(**kwargs)


def test_caption_names_every_triplet():
    s = generate_corpus(SyntheticConfig(samples=1, seed=9))[0]
    assert render_caption(s.graph) == s.caption
    assert s.caption.count(" is ") == len(s.graph.triplets)
    vocab = SyntheticConfig().vocabulary
    assert vocab.decode(vocab.encode(s.caption)) == s.caption


def test_random_rule_breaks_the_table():
    cfg = SyntheticConfig(samples=60, seed=1, label_rule=LabelRule.RANDOM)
    world = make_world(cfg)
    hits = [g.predicates[p].class_id == predicate_rule(world, g.entities[a].class_id, g.entities[b].class_id)
            for g in (s.graph for s in generate_corpus(cfg, world)) for a, p, b in g.triplets]
    assert np.mean(hits) < 0.5
    with pytest.raises(ValidationError):
        relational_data(cfg, 10)


# ---------------------------------------------------------------- choice scoring


def _scorer_setup(seed=0):
    emb = EmbeddingConfig(hidden_dim=16, visual_feature_dim=16, text_vocab_size=len(SyntheticConfig().vocabulary))
    enc = EncoderConfig(layers=1, heads=2)
    rng = np.random.default_rng(seed)
    return emb, enc, init_encoder_params(emb, enc, rng), init_scorer(emb.hidden_dim, rng)


def test_identical_candidates_score_uniformly():
    emb, enc, params, scorer = _scorer_setup()
    s = generate_choices(SyntheticConfig(seed=2), 1)[0]
    same = ChoiceSample(s.graph, s.question, (s.candidates[0],) * 4, 0)
    np.testing.assert_allclose(score_choices(same, params, scorer, emb, enc), [0.25] * 4, rtol=0, atol=1e-15)


def test_choice_probabilities_sum_to_one():
    emb, enc, params, scorer = _scorer_setup(1)
    for s in generate_choices(SyntheticConfig(seed=5), 5):
        p = score_choices(s, params, scorer, emb, enc)
        assert abs(p.sum() - 1.0) < 1e-12 and (p > 0).all()


def test_choice_samples_hold_one_right_answer():
    cfg = SyntheticConfig(seed=3)
    vocab = cfg.vocabulary
    for s in generate_choices(cfg, 40):
        words = [vocab.decode(c) for c in s.candidates]
        right = {predicate_form(p.class_id) for p in s.graph.predicates}
        assert len(set(words)) == 4
        assert words[s.gold] in right
        assert not any(w in right for i, w in enumerate(words) if i != s.gold)


def test_choice_sample_validation():
    s = generate_choices(SyntheticConfig(), 1)[0]
    with pytest.raises(ValidationError):
        ChoiceSample(s.graph, s.question, s.candidates[:3], 0)
    with pytest.raises(ValidationError):
        ChoiceSample(s.graph, s.question, s.candidates, 4)


def test_train_and_validation_choices_differ():
    cfg = SyntheticConfig(seed=0)
    a = generate_choices(cfg, 5, seed_offset=0)
    b = generate_choices(cfg, 5, seed_offset=1)
    assert [graph_to_dict(s.graph) for s in a] != [graph_to_dict(s.graph) for s in b]


# ---------------------------------------------------------------- long tail


def test_exponential_profile():
    counts = LongTailConfig().class_counts()
    assert counts[0] == 500 and counts[-1] == 5
    assert (np.diff(counts) <= 0).all()


def test_neutral_settings_reduce_to_cross_entropy():
    cfg = LongTailConfig(epochs=15)
    (x, y), _, counts = make_split(cfg, 0)
    w_ce, b_ce = train_probe(x, y, LossSpec("CE"), counts, cfg, 0)
    w_0, b_0 = train_probe(x, y, LossSpec("neutral", gamma=0.0, beta=0.0), counts, cfg, 0)
    assert np.abs(w_ce - w_0).max() <= 1e-12 and np.abs(b_ce - b_0).max() <= 1e-12


def test_class_balanced_spec_uses_the_shared_weights():
    counts = LongTailConfig().class_counts()
    spec = LossSpec("CE+CB", beta=0.999)
    np.testing.assert_array_equal(spec.weights(counts), class_balanced_weights(counts, 0.999))
    assert LossSpec("CE").weights(counts) is None


def test_balanced_profile_levels_the_losses():
    cfg = LongTailConfig(epochs=40)
    table = run_longtail_study(cfg, seeds=(0, 1), counts=[200] * cfg.classes)
    accs = [np.mean([r.accuracy for r in table.results if r.loss == s.name]) for s in DEFAULT_LOSSES]
    assert max(accs) - min(accs) < 0.05


def test_longtail_table_layout():
    cfg = LongTailConfig(epochs=5, classes=4, tail_classes=2, head_count=40, imbalance=10)
    text = run_longtail_study(cfg, seeds=(0,)).to_text(cfg.classes)
    lines = text.splitlines()
    assert lines[0].split("\t")[:2] == ["loss", "tail_recall_mean"]
    assert [ln.split("\t")[0] for ln in lines[1:]] == [s.name for s in DEFAULT_LOSSES]
    assert len(lines[0].split("\t")) == 5 + cfg.classes


def test_longtail_config_validation():
    with pytest.raises(ConfigError):
        LongTailConfig(tail_classes=11)
    with pytest.raises(ConfigError):
        LongTailConfig(imbalance=0.5)


# ---------------------------------------------------------------- relational table


def test_default_grid_shape():
    grid = default_grid()
    assert grid[0] == GridCell(None, KernelKind.OFF)
    assert len(grid) == 10
    assert {c.hop_limit for c in grid[1:]} == {1, 3, 6}


def test_zero_hops_rejected():
    with pytest.raises(ConfigError):
        run_relational_task([GridCell(0, KernelKind.RATIONAL_QUADRATIC)], seeds=(0,))


def test_table_text_mirrors_hops_by_kernel():
    results = [CellResult(c, s, 0.5 + 0.01 * s, 1.0, 0.0) for c in default_grid() for s in (0, 1)]
    lines = RelationalTable(results).to_text().splitlines()
    assert lines[0] == "hops\tidentity\tgaussian\trq"
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["no-hop", "1", "3", "6"]
    assert lines[1].split("\t")[2:] == ["-", "-"]
    assert "0.5050±0.0050 (n=2)" in lines[2]


def test_tiny_relational_run():
    cfg = RelationalConfig(samples=20, epochs=1, hidden_dim=8, heads=2, layers=1)
    cells = [GridCell(None, KernelKind.OFF), GridCell(1, KernelKind.GAUSSIAN)]
    table = run_relational_task(cells, SyntheticConfig(), seeds=(0,), cfg=cfg)
    assert [r.cell for r in table.results] == cells
    assert all(0.0 <= r.val_accuracy <= 1.0 for r in table.results)
    again = run_relational_task(cells, SyntheticConfig(), seeds=(0,), cfg=cfg)
    assert [r.val_accuracy for r in again.results] == [r.val_accuracy for r in table.results]


def test_recorded_attention_zero_sets_shrink_as_h_grows():
    rng = np.random.default_rng(12)
    batch = prepare([(random_graph(rng, max_entities=10, max_predicates=4), ()) for _ in range(12)])
    emb = EmbeddingConfig(hidden_dim=16, visual_feature_dim=4)
    inp = make_input([(p.seq, p.graph, p.dist) for p in batch], emb.visual_feature_dim)
    valid = inp.valid[:, :, None] & inp.valid[:, None, :]
    hops = (1, 2, 3, 6)
    zero = {}
    for h in hops:
        enc = EncoderConfig(layers=2, heads=2, hop_limit=h, kernel_kind=KernelKind.RATIONAL_QUADRATIC)
        params = init_encoder_params(emb, enc, np.random.default_rng(0))
        dumps = []
        encoder_forward(inp, params, enc, keep=dumps)
        zero[h] = [a == 0.0 for a in dumps]
    for lo, hi in zip(hops, hops[1:]):
        opened = int((valid & (inp.dist > lo) & (inp.dist <= hi)).sum())
        for z_hi, z_lo in zip(zero[hi], zero[lo]):
            assert (z_hi <= z_lo).all()
            assert z_lo.sum() - z_hi.sum() == 2 * opened  # two heads
    # with every entity in one clique, no visual pair is 4 to 6 hops apart
    assert int((valid & (inp.dist > 3) & (inp.dist <= 6)).sum()) == 0
