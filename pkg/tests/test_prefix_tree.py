from __future__ import annotations

import math
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blendsched.cost_model import (
    comp_flops,
    density,
    load_hardware_config,
    load_model_config,
    prefill_flops,
    request_cost,
)
from blendsched.prefix_tree import (
    Request,
    annotate_density,
    build,
    dfs_order,
    dump_tree,
    estimated_lengths,
    find_outliers,
    load_tree_dump,
    merge_subtrees,
    prepare_tree,
    sample_output_lengths,
    scanner_nodes,
    set_true_lengths,
    sharing_ratio,
    sort_layerwise,
    split_outliers,
    tree_sharing,
)

from conftest import grouped_requests, random_requests

MC = load_model_config()
HC = load_hardware_config()


def _bruteforce_sharing(order, mc):
    """Adjacent-LCP oracle: each prompt reuses its longest common prefix with any earlier prompt."""
    total = sum(comp_flops(r.prompt_len, r.output_len, mc) for r in order)
    saved = 0
    seen = []
    for r in order:
        best = 0
        for q in seen:
            k = 0
            while k < min(len(q), r.prompt_len) and q[k] == r.prompt[k]:
                k += 1
            best = max(best, k)
        saved += prefill_flops(0, best, mc)
        seen.append(r.prompt)
    return saved / total if total else 0.0


def _annotated(reqs, true_lengths=True):
    root = build(reqs)
    if true_lengths:
        set_true_lengths(root)
    else:
        sample_output_lengths(root, 0.5, 0)
    annotate_density(root, MC, HC)
    return root


# -- build ------------------------------------------------------------------

def test_identical_prompts_share_one_leaf():
    root = build([Request(0, (1, 2, 3), 4), Request(1, (1, 2, 3), 5)])
    (leaf,) = root.children
    assert leaf.is_leaf and sorted(r.id for r in leaf.requests) == [0, 1]
    assert leaf.segment == (1, 2, 3)


def test_textbook_trie():
    A, B, C = 1, 2, 3
    root = build([Request(0, (A, B), 1), Request(1, (A, C), 1)])
    (a,) = root.children
    assert a.segment == (A,)
    assert [c.segment for c in a.children] == [(B,), (C,)]


def test_build_is_insertion_order_independent():
    reqs = random_requests(random.Random(5), 40)
    shuffled = reqs[:]
    random.Random(1).shuffle(shuffled)
    assert dump_tree(_annotated(reqs)) == dump_tree(_annotated(shuffled))


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        build([Request(0, (1,), 1), Request(0, (2,), 1)])


def test_empty_prompt_rejected():
    with pytest.raises(ValueError):
        Request(0, (), 1)


def test_common_system_prompt_shared_tokens():
    n, sys_len = 12, 100
    reqs = grouped_requests(1, n, sys_len, 7, 10)
    root = build(reqs)
    full = sum(prefill_flops(0, r.prompt_len, MC) for r in reqs)
    total = sum(comp_flops(r.prompt_len, r.output_len, MC) for r in reqs)
    # the system prompt is prefilled once instead of n times
    expected = (n - 1) * prefill_flops(0, sys_len, MC) / total
    assert tree_sharing(root, MC) == pytest.approx(expected, rel=1e-12)
    assert _bruteforce_sharing(dfs_order(root), MC) == pytest.approx(expected, rel=1e-12)
    assert full > 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_tree_sharing_matches_bruteforce(seed):
    reqs = random_requests(random.Random(seed), 25)
    root = build(reqs)
    assert tree_sharing(root, MC) == pytest.approx(_bruteforce_sharing(dfs_order(root), MC), rel=1e-12)
    assert sharing_ratio(dfs_order(root), MC) == pytest.approx(tree_sharing(root, MC), rel=1e-12)


# -- sampling ---------------------------------------------------------------

def test_full_sampling_gives_exact_means():
    reqs = random_requests(random.Random(2), 60)
    root = build(reqs)
    sample_output_lengths(root, 1.0, 0)
    for node in root.iter_nodes():
        lens = [r.output_len for r in node.iter_requests()]
        if lens:
            assert node.est_output_len == pytest.approx(sum(lens) / len(lens))


def test_unsampled_subtree_uses_sibling_mean():
    a = [Request(i, (1, 10, i + 100), 300, known_output=True) for i in range(3)]
    b = [Request(10 + i, (1, 20, i + 200), 50) for i in range(3)]
    root = build(a + b)
    sample_output_lengths(root, 1e-12, 0)
    est = estimated_lengths(root)
    assert all(est[r.id] == 300 for r in b)


def test_unsampled_tree_falls_back_to_default():
    root = build([Request(0, (1, 2), 9), Request(1, (1, 3), 9)])
    sample_output_lengths(root, 1e-12, 0, default_len=77)
    assert set(estimated_lengths(root).values()) == {77}


def test_sampling_estimate_monte_carlo():
    groups = [grouped_requests(1, 1000, 5, 2, 100 * (g + 1), start_id=g * 1000, base_token=10 + g * 1_000_000)
              for g in range(10)]
    reqs = [r for grp in groups for r in grp]
    truth = sum(r.output_len for r in reqs) / len(reqs)
    root = build(reqs)
    errs = []
    for seed in range(100):
        sample_output_lengths(root, 0.01, seed)
        for child in root.children:
            true = child.requests[0].output_len if child.requests else next(child.iter_requests()).output_len
            # any landed sample makes the identical-length group exact
            assert child.est_output_len == true
        errs.append(abs(root.est_output_len - truth) / truth)
    assert max(errs) < 0.05


def test_bad_sample_prob():
    with pytest.raises(ValueError):
        sample_output_lengths(build([Request(0, (1,), 1)]), 0.0)


# -- density annotation -----------------------------------------------------

def test_single_leaf_density_equals_request_density():
    r = Request(0, tuple(range(700)), 90)
    root = _annotated([r])
    (leaf,) = root.children
    assert leaf.rho == pytest.approx(density(request_cost(700, 90, MC, HC)), rel=1e-12)


def test_identical_prompts_count_prompt_once():
    p, d = 640, 30
    root = _annotated([Request(0, tuple(range(p)), d), Request(1, tuple(range(p)), d)])
    (leaf,) = root.children
    eff = leaf.agg.t_comp * (1 - leaf.agg.sharing_ratio) * HC.flops_per_second
    assert eff == pytest.approx(prefill_flops(0, p, MC) + 2 * 2 * MC.param_count * d, rel=1e-12)


def test_subtree_density_sign_by_output_length():
    mmlu = grouped_requests(1, 20, 400, 200, 2)
    video = grouped_requests(1, 5, 16, 80, 16384, start_id=100, base_token=10_000_000)
    root = _annotated(mmlu + video)
    rho = {next(c.iter_requests()).output_len: c.rho for c in root.children}
    assert rho[2] > 1 > rho[16384]


def test_annotation_requires_estimates():
    with pytest.raises(ValueError):
        annotate_density(build([Request(0, (1,), 1)]), MC, HC)


# -- sorting ----------------------------------------------------------------

def test_children_sorted_by_density_descending():
    reqs = [Request(0, (1, 5), 3000), Request(1, (2, 5), 2), Request(2, (3, 5), 400)]
    tree = sort_layerwise(_annotated(reqs), MC)
    rhos = [c.rho for c in tree.root.children]
    assert rhos == sorted(rhos, reverse=True)
    assert [c.requests[0].id for c in tree.root.children] == [1, 2, 0]


def test_sort_is_fixed_point():
    tree = sort_layerwise(_annotated(random_requests(random.Random(8), 30)), MC)
    again = sort_layerwise(tree.root, MC)
    assert dump_tree(tree) == dump_tree(again)


def test_sort_leaves_input_untouched():
    root = _annotated(random_requests(random.Random(9), 30))
    before = dump_tree(root)
    sort_layerwise(root, MC)
    assert dump_tree(root) == before


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_sort_and_merge_preserve_sharing_and_leaves(seed):
    reqs = random_requests(random.Random(seed), 20, known_frac=0.3)
    root = _annotated(reqs, true_lengths=False)
    base = tree_sharing(root, MC)
    tree = sort_layerwise(root, MC)
    merged = merge_subtrees(tree, MC)
    ids = Counter(r.id for r in reqs)
    for t in (tree, merged):
        assert t.sharing == base
        assert Counter(t.leaf_order) == ids
        assert sharing_ratio(dfs_order(t), MC) == pytest.approx(base, rel=1e-12)


# -- splitting --------------------------------------------------------------

def _design_overview_requests():
    X = tuple(range(10, 60))
    return [
        Request(0, X + tuple(range(100, 900)), 2),
        Request(1, X + tuple(range(1000, 1800)), 2),
        Request(2, X + (5000, 5001, 5002), 5000),
        Request(3, tuple(range(20000, 20100)), 6000),
        Request(4, tuple(range(30000, 30400)), 300),
    ]


def test_memory_outlier_relocated_to_the_right():
    tree = sort_layerwise(_annotated(_design_overview_requests()), MC)
    rho_root = tree.root.rho
    # the long generation sits inside a compute-heavy group before splitting
    group = next(c for c in tree.root.children if any(r.id == 2 for r in c.iter_requests()))
    assert group.rho > rho_root and len(group.children) == 3
    split = split_outliers(tree, MC, HC, waste_threshold=256)
    assert split.relocations == 1
    home = next(c for c in split.root.children if any(r.id == 2 for r in c.iter_requests()))
    assert home.relocated and home.rho < rho_root
    order = [r.id for r in dfs_order(split)]
    assert order.index(2) > order.index(0) and order.index(2) > order.index(4)
    total = sum(comp_flops(r.prompt_len, r.output_len, MC) for r in _design_overview_requests())
    assert tree.sharing - split.sharing == pytest.approx(split.waste_flops / total, rel=1e-9)
    assert split.waste_flops == prefill_flops(0, 50, MC)


def test_zero_threshold_leaves_tree_unchanged():
    tree = sort_layerwise(_annotated(_design_overview_requests()), MC)
    split = split_outliers(tree, MC, HC, waste_threshold=0)
    assert dump_tree(split) == dump_tree(tree)
    assert split.waste_flops == 0 and split.sharing == tree.sharing


def test_infinite_threshold_two_leaf_waste_accounting():
    shared = tuple(range(1, 41))
    reqs = [Request(0, shared + (100,), 2), Request(1, shared + (200,), 9000),
            Request(2, (7,) + tuple(range(500, 600)), 1200)]
    tree = sort_layerwise(_annotated(reqs), MC)
    split = split_outliers(tree, MC, HC, waste_threshold=math.inf)
    total = sum(comp_flops(r.prompt_len, r.output_len, MC) for r in reqs)
    if split.relocations:
        assert split.waste_flops == prefill_flops(0, len(shared), MC)
    assert tree.sharing - split.sharing == pytest.approx(split.waste_flops / total, abs=1e-15)
    assert sorted(split.leaf_order) == [0, 1, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0, 4, 8, math.inf]))
def test_split_changes_sharing_by_accounted_waste(seed, threshold):
    reqs = random_requests(random.Random(seed), 25, max_out=3000)
    tree = sort_layerwise(_annotated(reqs), MC)
    split = split_outliers(tree, MC, HC, threshold)
    total = sum(comp_flops(r.prompt_len, r.output_len, MC) for r in reqs)
    assert Counter(split.leaf_order) == Counter(r.id for r in reqs)
    assert tree.sharing - split.sharing == pytest.approx(split.waste_flops / total, abs=1e-12)
    if not split.relocations:
        assert split.sharing == tree.sharing


def test_find_outliers_none_on_uniform_tree():
    reqs = grouped_requests(3, 4, 8, 3, 100)
    tree = sort_layerwise(_annotated(reqs), MC)
    assert find_outliers(tree, HC) == []


# -- merging ----------------------------------------------------------------

def test_unique_tails_collapse_into_group():
    reqs = [Request(i, (1, 2, 10 + i), 5) for i in range(3)]
    tree = merge_subtrees(sort_layerwise(_annotated(reqs), MC), MC)
    (group,) = tree.root.children
    assert group.merged and group.is_leaf and len(group.requests) == 3
    assert group.segment == (1, 2)


def test_subject_prompt_preserved_when_merging():
    reqs = grouped_requests(2, 6, 300, 40, 2)
    tree = merge_subtrees(sort_layerwise(_annotated(reqs), MC), MC)
    assert len(tree.root.children) == 2
    for subject in tree.root.children:
        assert len(subject.segment) == 300 and subject.merged and len(subject.requests) == 6


def test_merge_keeps_multi_request_children():
    reqs = [Request(0, (1, 2), 5), Request(1, (1, 2), 5), Request(2, (1, 3), 5)]
    tree = merge_subtrees(sort_layerwise(_annotated(reqs), MC), MC)
    assert not any(n.merged for n in tree.root.iter_nodes())


# -- traversal and sharing counter ------------------------------------------

def test_single_chain_order():
    r = Request(0, (1, 2, 3), 4)
    assert dfs_order(_annotated([r])) == [r]


def test_child_order_traversal():
    A, B, C, D = 1, 2, 3, 4
    reqs = [Request(0, (A, B), 1), Request(1, (A, C), 1), Request(2, (D,), 1)]
    assert [r.id for r in dfs_order(build(reqs))] == [0, 1, 2]


def test_dfs_beats_random_orders_with_bounded_cache():
    reqs = grouped_requests(8, 10, 60, 20, 5)
    order = dfs_order(build(reqs))
    cap = 150
    base = sharing_ratio(order, MC, capacity_tokens=cap)
    rng = random.Random(0)
    for _ in range(100):
        shuffled = reqs[:]
        rng.shuffle(shuffled)
        assert base >= sharing_ratio(shuffled, MC, capacity_tokens=cap)


def test_no_shared_first_token_no_sharing():
    reqs = [Request(i, (i + 1, 7, 7), 3) for i in range(5)]
    assert sharing_ratio(reqs, MC) == 0.0


def test_identical_prompts_closed_form():
    n, p = 9, 333
    reqs = [Request(i, tuple(range(p)), 4) for i in range(n)]
    total = n * comp_flops(p, 4, MC)
    expected = (n - 1) * prefill_flops(0, p, MC) / total
    shuffled = reqs[:]
    random.Random(4).shuffle(shuffled)
    assert sharing_ratio(shuffled, MC) == pytest.approx(expected, rel=1e-12)


def test_grouped_workload_reaches_high_sharing():
    reqs = grouped_requests(4, 50, 2000, 10, 2)
    assert sharing_ratio(dfs_order(build(reqs)), MC) >= 0.8


def test_sharing_ratio_validates_permutation():
    reqs = [Request(0, (1,), 1), Request(1, (2,), 1)]
    with pytest.raises(ValueError):
        sharing_ratio([reqs[0], reqs[0]], MC)
    with pytest.raises(ValueError):
        sharing_ratio([reqs[0]], MC, requests=reqs)


# -- pipeline and dump ------------------------------------------------------

def test_prepare_tree_and_dump_roundtrip():
    reqs = random_requests(random.Random(11), 40, max_out=2000)
    tree = prepare_tree(reqs, MC, HC, sample_prob=0.3, seed=1)
    parsed = load_tree_dump(dump_tree(tree))

    def count(rec):
        return len(rec["ids"]) + sum(count(c) for c in rec["children"])

    assert count(parsed) == len(reqs)
    assert scanner_nodes(tree) == tree.root.children
    assert tree.optimal_sharing == pytest.approx(tree_sharing(build(reqs), MC), rel=1e-12)


def test_load_tree_dump_rejects_empty():
    with pytest.raises(ValueError):
        load_tree_dump("\n")
