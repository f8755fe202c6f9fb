"""Acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line; the lines are repeated in the
terminal summary under "acceptance criteria".
"""

import contextlib
import csv
import hashlib
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from _oracles import assert_grads_close, central_difference, loop_cross_entropy, loop_softmax
from conftest import ACCEPTANCE_LINES
from dih import distill_math as dm
from dih.analysis import ablation_run, all_masks, capacity_ratio, venn_counts, venn_counts_from_logits
from dih.autodiff import Tape, Tensor, backward
from dih.cli import EXIT_OK, run
from dih.cohort import attach_heads, cohort_logits, fit_heads
from dih.datagen import make_blobs
from dih.netarch import build_network, forward, load_network, network_to_bytes
from dih.optim import MODES, TrainConfig
from dih.trainer import distillation_targets, mode_loss, train

REPO = Path(__file__).resolve().parents[1]
SPIRALS_CONFIG = REPO / "configs" / "spirals.ini"


@contextlib.contextmanager
def criterion(number, title):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        line = f"criterion {number}: FAIL  {title} ({type(exc).__name__}: {str(exc).splitlines()[0][:120]})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"criterion {number}: PASS  {title} [{time.perf_counter() - start:.1f}s]"
    ACCEPTANCE_LINES.append(line)
    print(line)


SMALL_CONFIG = """\
[experiment]
seeds = 0
out_dir = {out}

[data]
generator = blobs
classes = 3
per_class = 40
dim = 4
spread = 6.0
seed = 3

[teacher]
widths = 10, 10, 10, 10, 10, 10
mounts = 1, 3, 5
head_activation = identity
init_seed = 1

[student]
widths = 5
init_seed = 20

[train.teacher]
epochs = 15
lr0 = 0.01
batch_size = 16

[train.heads]
epochs = 8
lr0 = 0.01
batch_size = 16

[train.student]
epochs = 5
lr0 = 0.02
batch_size = 16
"""


def small_config(directory):
    path = directory / "exp.ini"
    path.write_text(SMALL_CONFIG.format(out=directory / "runs"))
    return str(path)


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_01_gradient_correctness():
    with criterion(1, "analytic gradients match central differences, 20 networks x 4 modes"):
        start = time.perf_counter()
        checked = 0
        for trial in range(20):
            rng = np.random.default_rng(1000 + trial)
            d, c = int(rng.integers(2, 5)), int(rng.integers(2, 5))
            widths = [int(w) for w in rng.integers(3, 8, size=int(rng.integers(1, 3)))]
            student = build_network(d, widths, c, seed=trial)
            n_params = sum(p.size for p in student.parameters())
            assert n_params <= 500, n_params
            teacher = build_network(d, [6, 6, 6], c, mount_positions=(0, 2), seed=500 + trial)
            cohort = attach_heads(teacher, "identity", seed=700 + trial)
            x = rng.standard_normal((6, d))
            y = rng.integers(0, c, 6)
            alpha = float(rng.uniform(0.05, 0.95))
            tau = float(rng.choice([1.0, 2.0, 5.0]))
            for mode in MODES:
                source = teacher if mode == "KD" else cohort
                targets = distillation_targets(mode, source, x, tau)
                params = student.parameters()
                for p in params:
                    p.grad = None
                with Tape() as tape:
                    loss = mode_loss(mode, forward(student, x), targets, y, alpha, tau)
                backward(loss, tape)

                def value():
                    return mode_loss(mode, forward(student, x), targets, y, alpha, tau).item()

                numeric = central_difference(value, params)
                assert_grads_close([p.grad for p in params], numeric, rel=1e-4, abs_floor=1e-6)
                checked += 1
        assert checked == 80
        assert time.perf_counter() - start < 60


# -- 2 ---------------------------------------------------------------------------------


def test_criterion_02_loss_identities():
    with criterion(2, "CE = KL + H, singleton DIH = KD, alpha=0 gives CE, tau^2 factor"):
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(1000):
            c = int(rng.integers(2, 12))
            p, q = rng.dirichlet(np.ones(c)), rng.dirichlet(np.ones(c))
            worst = max(worst, abs(dm.cross_entropy(p, q) - dm.kl_divergence(p, q) - dm.entropy(p)))
        assert worst <= 1e-10, worst
        for _ in range(50):
            c = int(rng.integers(2, 8))
            t, s = rng.standard_normal(c) * 3, rng.standard_normal(c) * 3
            tau = float(rng.uniform(1, 10))
            assert dm.dih_loss([t], s, tau) == dm.kd_loss(t, s, tau)
            label = int(rng.integers(0, c))
            plain_ce = -math.log(loop_softmax(list(s))[label])
            members = [rng.standard_normal(c) for _ in range(3)]
            assert dm.student_dih_loss(members, s, label, 0.0, tau) == pytest.approx(plain_ce, rel=1e-13)
            inner = loop_cross_entropy(loop_softmax(list(t), tau), loop_softmax(list(s), tau))
            assert dm.kd_loss(t, s, tau) == pytest.approx(tau * tau * inner, rel=1e-12)
        # batch form: one-member distillation equals KD bit for bit
        target = dm.softmax_t(rng.standard_normal((8, 4)), 5.0)
        z = Tensor(rng.standard_normal((8, 4)))
        assert dm.batch_distill_loss([target], z, 5.0).values.tobytes() == \
            dm.batch_kd_loss(target, z, 5.0).values.tobytes()


# -- 3 ---------------------------------------------------------------------------------


def test_criterion_03_temperature_properties():
    with criterion(3, "entropy non-decreasing and argmax invariant over tau in {1,2,4,5,8}"):
        rng = np.random.default_rng(3)
        taus = (1.0, 2.0, 4.0, 5.0, 8.0)
        for _ in range(1000):
            z = rng.standard_normal(int(rng.integers(2, 20))) * rng.uniform(0.1, 20)
            dists = [dm.softmax_t(z, tau) for tau in taus]
            ents = [dm.entropy(p) for p in dists]
            assert all(b >= a - 1e-12 for a, b in zip(ents, ents[1:])), ents
            assert len({int(dm.argmax_class(p)) for p in dists}) == 1


# -- 4 ---------------------------------------------------------------------------------


def test_criterion_04_frozen_backbone(tmp_path):
    with criterion(4, "fit-heads leaves teacher checkpoint and logits bit-identical"):
        cfg = small_config(tmp_path)
        assert run(["gen-data", "--config", cfg]) == EXIT_OK
        assert run(["train-teacher", "--config", cfg]) == EXIT_OK
        teacher_file = tmp_path / "runs" / "teacher" / "teacher.ckpt"
        before = teacher_file.read_bytes()
        probe = np.random.default_rng(4).standard_normal((100, 4))
        logits_before = forward(load_network(teacher_file), probe).values.tobytes()
        assert run(["fit-heads", "--config", cfg]) == EXIT_OK
        assert teacher_file.read_bytes() == before
        assert forward(load_network(teacher_file), probe).values.tobytes() == logits_before


# -- 5 ---------------------------------------------------------------------------------


def test_criterion_05_head_parameter_count():
    with criterion(5, "head parameters equal (N+1)*C for 10 random (N, C)"):
        rng = np.random.default_rng(5)
        for _ in range(10):
            width, c = int(rng.integers(1, 300)), int(rng.integers(2, 120))
            teacher = build_network(3, [width], c, mount_positions=(0,), seed=0)
            (head,) = attach_heads(teacher).heads
            enumerated = sum(1 for p in head.parameters() for _ in np.nditer(p.values))
            assert enumerated == (width + 1) * c


# -- 6 ---------------------------------------------------------------------------------


def test_criterion_06_capacity_ratio():
    with criterion(6, "capacity ratio reproduces 266.50, 3.50, 1.17"):
        for teacher, student, want in ((21.32, 0.08, 266.50), (0.28, 0.08, 3.50), (1.74, 1.48, 1.17)):
            assert abs(capacity_ratio(teacher, student) - want) <= 0.01


# -- 7 ---------------------------------------------------------------------------------


def test_criterion_07_ablation_identities(tmp_path):
    with criterion(7, "all-off mask = CE, Main-only = KD bit for bit, k=3 grid has 16 rows"):
        start = time.perf_counter()
        train_set, test_set = make_blobs(3, 50, 4, 5.0, seed=7)
        teacher = build_network(4, [10] * 6, 3, mount_positions=(1, 3, 5), seed=1)
        teacher, _ = train(teacher, None, train_set, TrainConfig(epochs=15, lr0=0.01, batch_size=16))
        cohort, _ = fit_heads(attach_heads(teacher, "identity", seed=2), train_set,
                              TrainConfig(epochs=8, lr0=0.01, batch_size=16))
        student = build_network(4, [5], 3, seed=9)
        cfg = TrainConfig(epochs=5, lr0=0.02, batch_size=16, seed=3)
        masks = all_masks(cohort.size)
        rows = ablation_run(cohort, student, train_set, cfg, masks, test_set)
        assert len(rows) == 16 and len(set(r.mask for r in rows)) == 16
        ce, _ = train(student, None, train_set, cfg.with_(mode="CE"), test_set)
        kd, _ = train(student, teacher, train_set, cfg.with_(mode="KD"), test_set)
        by_mask = {r.mask: r for r in rows}
        assert network_to_bytes(by_mask[(False,) * 4].student) == network_to_bytes(ce)
        assert network_to_bytes(by_mask[(False, False, False, True)].student) == network_to_bytes(kd)
        # the CLI grid has the same shape
        cli_cfg = small_config(tmp_path)
        for cmd in ("gen-data", "train-teacher", "fit-heads", "ablate"):
            assert run([cmd, "--config", cli_cfg]) == EXIT_OK
        with open(tmp_path / "runs" / "ablation" / "ablation.csv") as fh:
            assert len(list(csv.reader(fh))) == 1 + 16
        assert time.perf_counter() - start < 600


# -- 8 ---------------------------------------------------------------------------------


def test_criterion_08_venn_accounting():
    with criterion(8, "Venn regions sum to dataset size, member totals reconcile"):
        labels = np.array([0, 1, 2, 0])
        a = np.eye(3)[[1, 1, 2, 1]] * 4  # right on samples 1, 2
        b = np.eye(3)[[1, 2, 2, 0]] * 4  # right on samples 2, 3
        stub = venn_counts_from_logits([a, b], labels)
        assert stub.regions.tolist() == [1, 1, 1, 1] and stub.total == 4
        assert stub.member_total(0) == 2 and stub.member_total(1) == 2

        train_set, _ = make_blobs(3, 50, 4, 3.0, seed=8)
        teacher = build_network(4, [10] * 6, 3, mount_positions=(0, 2, 4), seed=1)
        teacher, _ = train(teacher, None, train_set, TrainConfig(epochs=10, lr0=0.01, batch_size=16))
        cohort, _ = fit_heads(attach_heads(teacher, "identity", seed=2), train_set,
                              TrainConfig(epochs=5, lr0=0.01, batch_size=16))
        v = venn_counts(cohort, train_set)
        assert v.total == len(train_set)
        for j, logits in enumerate(cohort_logits(cohort, train_set.inputs)):
            assert v.member_total(j) == int(np.sum(np.argmax(logits.values, axis=1) == train_set.labels))


# -- 9 ---------------------------------------------------------------------------------


def _final_test_acc(path):
    with open(path) as fh:
        return float(list(csv.reader(fh))[-1][4])


@pytest.mark.slow
def test_criterion_09_desk_scale_effectiveness(tmp_path):
    with criterion(9, "spirals, 5 seeds: mean DIH >= mean CE and DIH >= KD in >= 3 seeds"):
        start = time.perf_counter()
        cfg = tmp_path / "spirals.ini"
        shutil.copy(SPIRALS_CONFIG, cfg)
        out = tmp_path / "runs"
        common = ["--config", str(cfg), "--out-dir", str(out)]
        for cmd in ("gen-data", "train-teacher", "fit-heads"):
            assert run([cmd] + common) == EXIT_OK
        teacher = load_network(out / "teacher" / "teacher.ckpt")
        assert len(teacher.blocks) >= 6
        seeds = [0, 1, 2, 3, 4]
        acc = {}
        for mode in ("CE", "KD", "DIH"):
            assert run(["distill", "--mode", mode, "--seed-list", "0,1,2,3,4"] + common) == EXIT_OK
            acc[mode] = np.array([_final_test_acc(out / "distill" / mode / f"seed_{s}" / "metrics.csv")
                                  for s in seeds])
        student = load_network(out / "distill" / "DIH" / "seed_0" / "student.ckpt")
        assert len(student.blocks) <= 2
        wins = int(np.sum(acc["DIH"] >= acc["KD"]))
        print(f"  CE {acc['CE'].tolist()} mean {acc['CE'].mean():.2f}")
        print(f"  KD {acc['KD'].tolist()} mean {acc['KD'].mean():.2f}")
        print(f"  DIH {acc['DIH'].tolist()} mean {acc['DIH'].mean():.2f}; DIH >= KD in {wins}/5")
        assert time.perf_counter() - start < 20 * 60
        assert acc["DIH"].mean() >= acc["CE"].mean(), (acc["DIH"].mean(), acc["CE"].mean())
        assert wins >= 3, f"DIH >= KD in only {wins}/5 seeds (DIH {acc['DIH'].tolist()}, KD {acc['KD'].tolist()})"


# -- 10 --------------------------------------------------------------------------------


def _digest_tree(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(tmp_path):
    with criterion(10, "repeated pipeline gives byte-identical checkpoints and CSVs"):
        cfg = small_config(tmp_path)
        runs = tmp_path / "runs"
        assert run(["pipeline", "--config", cfg, "--mode", "CE,KD,DIH,ENSEMBLE"]) == EXIT_OK
        first = _digest_tree(runs)
        shutil.rmtree(runs)
        assert run(["pipeline", "--config", cfg, "--mode", "CE,KD,DIH,ENSEMBLE"]) == EXIT_OK
        second = _digest_tree(runs)
        assert any(k.endswith(".ckpt") for k in first) and any(k.endswith(".csv") for k in first)
        assert first == second
