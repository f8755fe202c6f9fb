import csv
import math

import numpy as np
import pytest

from dih.analysis import (ablation_run, all_masks, capacity_ratio, format_mask, head_stats,
                          head_stats_from_logits, parse_mask, venn_counts, venn_counts_from_logits,
                          write_ablation_csv)
from dih.cohort import attach_heads, fit_heads
from dih.datagen import make_blobs
from dih.distill_math import entropy, softmax_t
from dih.errors import ContractError
from dih.netarch import ParamCount, build_network, network_to_bytes
from dih.optim import TrainConfig
from dih.trainer import train


def _onehot_logits(correct, labels, c):
    """Logits that classify sample i correctly iff i in ``correct``."""
    out = np.zeros((len(labels), c))
    for i, y in enumerate(labels):
        out[i, y if i in correct else (y + 1) % c] = 5.0
    return out


def test_venn_stub_example():
    labels = np.array([0, 1, 2, 0])
    a = _onehot_logits({1, 2}, labels, 3)
    b = _onehot_logits({2, 3}, labels, 3)
    v = venn_counts_from_logits([a, b], labels, ["A", "B"])
    assert v.regions.tolist() == [1, 1, 1, 1]
    assert v.exclusive(0) == 1 and v.exclusive(1) == 1
    assert v.region([0, 1]) == 1 and v.region([]) == 1
    assert v.member_total(0) == 2 and v.member_total(1) == 2
    assert v.total == 4


def test_venn_identical_members_share_one_region():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, 30)
    logits = rng.standard_normal((30, 4))
    v = venn_counts_from_logits([logits, logits, logits], labels)
    n_correct = int(np.sum(logits.argmax(1) == labels))
    assert v.region([0, 1, 2]) == n_correct and v.region([]) == 30 - n_correct
    assert v.total == 30 and sum(v.regions[m] for m in (1, 2, 3, 4, 5, 6)) == 0


def test_venn_refuses_too_many_members():
    logits = np.zeros((2, 2))
    with pytest.raises(ContractError):
        venn_counts_from_logits([logits] * 17, [0, 1])


def test_head_stats_degenerate_member_is_uniform():
    rng = np.random.default_rng(1)
    stats = head_stats_from_logits([np.zeros((10, 5)), rng.standard_normal((10, 5))], 5.0)
    assert stats.avg_entropy[0] == pytest.approx(math.log(5), abs=1e-12)
    assert stats.avg_entropy[1] <= math.log(5) + 1e-12


def test_head_stats_entropy_bounds_and_ensemble_flattening():
    rng = np.random.default_rng(2)
    members = [rng.standard_normal((20, 4)) * 3 for _ in range(3)]
    stats = head_stats_from_logits(members, 1.0)
    assert np.all(stats.avg_entropy >= 0) and np.all(stats.avg_entropy <= math.log(4) + 1e-12)
    # the mean of distributions is at least as uncertain as the members on average (concavity)
    avg = np.mean([softmax_t(m, 1.0) for m in members], axis=0)
    assert np.mean(entropy(avg)) >= stats.avg_entropy.mean() - 1e-12


@pytest.fixture(scope="module")
def fitted_cohort():
    train_set, test_set = make_blobs(3, 60, 4, 4.0, seed=1)
    teacher = build_network(4, [12] * 6, 3, mount_positions=(1, 3, 5), seed=2)
    teacher, _ = train(teacher, None, train_set, TrainConfig(epochs=20, lr0=0.01, batch_size=32))
    cohort, _ = fit_heads(attach_heads(teacher, "identity", seed=3), train_set,
                          TrainConfig(epochs=20, lr0=0.01, batch_size=32))
    return cohort, train_set, test_set


def test_head_stats_on_trained_cohort(fitted_cohort, tmp_path):
    cohort, train_set, _ = fitted_cohort
    stats = head_stats(cohort, train_set)
    assert stats.names == ["H1", "H2", "H3", "Main"]
    assert np.all(np.diag(stats.kl_matrix) == 0)
    off = ~np.eye(4, dtype=bool)
    assert np.all(stats.kl_matrix[off] >= 0)
    assert not np.allclose(stats.kl_matrix, stats.kl_matrix.T)
    stats.write_csv(tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["", "H1", "H2", "H3", "Main"] and rows[1][0] == "Entropy" and len(rows) == 6


def test_venn_on_trained_cohort_reconciles(fitted_cohort):
    cohort, train_set, _ = fitted_cohort
    v = venn_counts(cohort, train_set)
    assert v.total == len(train_set)
    from dih.cohort import cohort_logits
    for j, logits in enumerate(cohort_logits(cohort, train_set.inputs)):
        assert v.member_total(j) == int(np.sum(logits.values.argmax(1) == train_set.labels))


def test_capacity_ratio_examples():
    assert capacity_ratio(21.32, 0.08) == pytest.approx(266.50, abs=0.01)
    assert capacity_ratio(0.28, 0.08) == pytest.approx(3.50, abs=0.01)
    assert capacity_ratio(1.74, 1.48) == pytest.approx(1.17, abs=0.01)
    net = build_network(3, [4], 2)
    assert capacity_ratio(net, net.copy()) == 1.0
    assert capacity_ratio(ParamCount((10,), 10), 5) == 4.0
    with pytest.raises(ContractError):
        capacity_ratio(10, 0)


def test_mask_helpers():
    masks = all_masks(4)
    assert len(masks) == 16 and len(set(masks)) == 16
    assert masks[0] == (False,) * 4 and masks[-1] == (True,) * 4
    assert [sum(m) for m in masks] == sorted(sum(m) for m in masks)
    assert parse_mask("0011", 4) == (False, False, True, True)
    assert format_mask(parse_mask("1010", 4)) == "1010"
    for bad in ("001", "0021"):
        with pytest.raises(ContractError):
            parse_mask(bad, 4)


def test_ablation_degenerate_rows(fitted_cohort, tmp_path):
    cohort, train_set, test_set = fitted_cohort
    student = build_network(4, [6], 3, seed=9)
    cfg = TrainConfig(epochs=3, lr0=0.02, batch_size=32)
    rows = ablation_run(cohort, student, train_set, cfg, [(0, 0, 0, 0), (0, 0, 0, 1)], test_set)
    ce, _ = train(student, None, train_set, cfg.with_(mode="CE"), test_set)
    kd, _ = train(student, cohort.teacher, train_set, cfg.with_(mode="KD"), test_set)
    assert network_to_bytes(rows[0].student) == network_to_bytes(ce)
    assert network_to_bytes(rows[1].student) == network_to_bytes(kd)
    write_ablation_csv(rows, cohort.member_names(), tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "H1,H2,H3,Main,accuracy" and lines[2].startswith("0,0,0,1,")


def test_ablation_full_grid_and_mask_errors(fitted_cohort):
    cohort, train_set, _ = fitted_cohort
    student = build_network(4, [6], 3, seed=9)
    cfg = TrainConfig(epochs=0)
    rows = ablation_run(cohort, student, train_set, cfg, all_masks(cohort.size))
    assert len(rows) == 16
    with pytest.raises(ContractError):
        ablation_run(cohort, student, train_set, cfg, [(1, 1)])
