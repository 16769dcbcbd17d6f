"""Acceptance suite: one pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s``.  Criteria 4-6 perform
full desk-scale distillation runs and dominate the runtime; their shared
world (corpus, vocabulary, embeddings) is built once per session.
"""

import json
import os
import time

import numpy as np
import pytest
from scipy import stats as sstats

from textdistill import Tensor, backward, tape, using_dtype
from textdistill import cli
from textdistill import distill as D
from textdistill import evaluate as E
from textdistill import model as M
from textdistill import ops
from textdistill import textdata as td

from conftest import fd_grad, rel_err
from gradcheck_cases import CASE_NAMES, check_case


def report(num, ok, detail):
    line = f"ACCEPTANCE {num} {'PASS' if ok else 'FAIL'}: {detail}"
    print(f"\n{line}")
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_criterion_1_gradient_suite():
    started = time.time()
    worst = {}
    with using_dtype(np.float64):
        for name in CASE_NAMES:
            worst[name] = max(check_case(name, seed) for seed in range(20))
    bad = {k: v for k, v in worst.items() if v >= 1e-5}

    # full pipeline: loss gradient wrt the input batch and every parameter
    pipeline_worst = 0.0
    with using_dtype(np.float64):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            cfg = M.ModelConfig(embedding_dim=5, num_classes=3, widths=(2, 3),
                                channels=4, max_len=7)
            params = M.init_params(cfg, seed=seed)
            batch = rng.normal(size=(2, 7, 5)) * 1.3
            labels = rng.integers(0, 3, size=2)
            arrays = [batch] + [t.data.copy() for t in params.tensors()]

            def numeric(arrs):
                q = params.replace([Tensor(a) for a in arrs[1:]])
                return M.loss(q, Tensor(arrs[0]), labels).item()

            with tape():
                x = Tensor(batch, requires_grad=True)
                grads = backward(M.loss(params, x, labels), [x] + params.tensors())
            for i in range(len(arrays)):
                pipeline_worst = max(
                    pipeline_worst, rel_err(grads[i].data, fd_grad(numeric, arrays, i)))
    elapsed = time.time() - started
    ok = not bad and pipeline_worst < 1e-5 and elapsed < 120
    report(1, ok,
           f"primitives worst rel err {max(worst.values()):.2e}, pipeline "
           f"{pipeline_worst:.2e} (20 cases each, {elapsed:.0f}s < 120s)")


# ---------------------------------------------------------------------------
# 2. meta-gradient oracle equivalence


def _tiny_problem(seed, inner_steps):
    """vocab<=20, d<=4, L<=6, C=2, m<=2, <=500 parameters."""
    rng = np.random.default_rng(seed)
    mcfg = M.ModelConfig(embedding_dim=3, num_classes=2, widths=(2,),
                         channels=3, max_len=5)
    cfg = D.DistillConfig(per_class=2, seq_len=5, embedding_dim=3,
                          alpha_inner=0.1, inner_epochs=inner_steps,
                          inner_batch=4, outer_steps=0, real_batch=4, seed=seed)
    theta0 = M.init_params(mcfg, seed=seed)
    dset = D.init_distilled(cfg, 2, (0.0, 0.5), seed=seed)
    real_x = Tensor(rng.normal(size=(4, 5, 3)))
    real_y = rng.integers(0, 2, size=4)
    return cfg, theta0, dset, real_x, real_y


def test_criterion_2_meta_gradient_oracle():
    started = time.time()
    with using_dtype(np.float64):
        worst = 0.0
        for seed in range(10):
            inner_steps = 1 + seed % 3
            cfg, theta0, dset, real_x, real_y = _tiny_problem(seed, inner_steps)
            assert theta0.num_values() <= 500
            grad, _ = D.meta_gradient(dset, theta0, real_x, real_y, cfg, batch_seed=seed)
            fd = D.meta_grad_fd_oracle(dset, theta0, (real_x, real_y), cfg,
                                       batch_seed=seed)
            worst = max(worst, rel_err(grad, fd))

        # analytic one-step case: linear classifier, single gradient step
        rng = np.random.default_rng(123)
        b_syn, b_real, dim, classes = 2, 4, 3, 2
        alpha = 0.05
        x_syn = rng.normal(size=(b_syn, dim))
        y_syn = np.array([0, 1])
        x_real = rng.normal(size=(b_real, dim))
        y_real = rng.integers(0, classes, size=b_real)
        w0 = rng.normal(size=(dim, classes)) * 0.3

        def onehot(y, c):
            out = np.zeros((len(y), c))
            out[np.arange(len(y)), y] = 1.0
            return out

        def softmax(z):
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)

        # closed form: d/dX of CE(x_real @ (w0 - a*g(X)), y_real) with
        # g(X) = X^T (S - Y)/B; two terms, one through S
        s_syn = softmax(x_syn @ w0)
        w1 = w0 - alpha * x_syn.T @ (s_syn - onehot(y_syn, classes)) / b_syn
        p = x_real.T @ (softmax(x_real @ w1) - onehot(y_real, classes)) / b_real
        term1 = (s_syn - onehot(y_syn, classes)) @ p.T
        xp = x_syn @ p
        term2 = np.stack([
            w0 @ ((np.diag(s_syn[i]) - np.outer(s_syn[i], s_syn[i])) @ xp[i])
            for i in range(b_syn)
        ])
        analytic = -(alpha / b_syn) * (term1 + term2)

        with tape():
            x = Tensor(x_syn, requires_grad=True)
            w = Tensor(w0, requires_grad=True)
            inner = ops.softmax_cross_entropy(ops.matmul(x, w), y_syn)
            (gw,) = backward(inner, [w], create_graph=True)
            w1_t = ops.sub(w, ops.smul(gw, alpha))
            outer = ops.softmax_cross_entropy(ops.matmul(Tensor(x_real), w1_t), y_real)
            (gx,) = backward(outer, [x])
        linear_err = rel_err(gx.data, analytic)
    elapsed = time.time() - started
    ok = worst < 1e-3 and linear_err < 1e-6 and elapsed < 300
    report(2, ok,
           f"10 tiny instances worst rel err {worst:.2e} < 1e-3; analytic "
           f"one-step linear case rel err {linear_err:.2e} < 1e-6 ({elapsed:.0f}s < 300s)")


# ---------------------------------------------------------------------------
# 3. zero cases (exact)


def test_criterion_3_zero_cases():
    with using_dtype(np.float64):
        cfg, theta0, dset, real_x, real_y = _tiny_problem(0, 2)

        frozen = D.inner_train(theta0, dset, 0.0, 2, 4)
        theta_exact = all(
            np.array_equal(a.data, b.data)
            for a, b in zip(theta0.tensors(), frozen.tensors()))

        zcfg = D.DistillConfig(**{**cfg.to_dict(), "alpha_inner": 0.0})
        grad, _ = D.meta_gradient(dset, theta0, real_x, real_y, zcfg)
        grad_zero = np.array_equal(grad, np.zeros_like(grad))
        stepped, _ = D.distill_step(dset, theta0, (real_x, real_y), zcfg)
        inner_fixed = np.array_equal(stepped.matrices, dset.matrices)

        ocfg = D.DistillConfig(**{**cfg.to_dict(), "alpha_outer": 0.0})
        stepped2, _ = D.distill_step(dset, theta0, (real_x, real_y), ocfg)
        outer_fixed = np.array_equal(stepped2.matrices, dset.matrices)

    ok = theta_exact and grad_zero and inner_fixed and outer_fixed
    report(3, ok,
           "alpha_inner=0 gives exactly-zero meta-gradient and fixed matrices; "
           "alpha_outer=0 fixes matrices; zero-step training returns theta0 bitwise")


# ---------------------------------------------------------------------------
# 4-6. desk-scale efficacy, convergence speed, size sweep

CORPUS_SPEC = E.SyntheticSpec(num_classes=4, n_train=2000, n_test=400, seed=0)
MODEL_KW = dict(embedding_dim=16, num_classes=4, widths=(3, 4, 5),
                channels=16, max_len=40)
DISTILL_KW = dict(per_class=10, seq_len=40, embedding_dim=16,
                  alpha_inner=0.2, alpha_outer=0.01, inner_epochs=10,
                  inner_batch=20, outer_steps=350, real_batch=32,
                  init_mode="real", outer_optimizer="adam")
EVAL_KW = dict(epochs=10, batch_size=20, alpha=0.2)
SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def world():
    tr_x, tr_y, te_x, te_y = E.synthetic_corpus(CORPUS_SPEC)
    vocab = td.build_vocab(tr_x)
    table = td.random_embedding_table(vocab, dim=MODEL_KW["embedding_dim"], seed=0)
    train = td.Dataset.from_texts(tr_x, tr_y, vocab, MODEL_KW["max_len"], 4)
    test = td.Dataset.from_texts(te_x, te_y, vocab, MODEL_KW["max_len"], 4)
    return train, test, table, M.ModelConfig(**MODEL_KW)


@pytest.fixture(scope="session")
def protocol_runs(world):
    """Per seed: distill, then train/evaluate all three sources."""
    train, test, table, mcfg = world
    started = time.time()
    rows = {}
    for seed in SEEDS:
        cfg = D.DistillConfig(**{**DISTILL_KW, "seed": seed})
        dset = D.run_distillation(train, table, mcfg, cfg)
        seed_rows = {}
        for name, source in (
            ("full", train),
            ("random", E.random_subset(train, DISTILL_KW["per_class"], seed)),
            ("distilled", dset),
        ):
            spec = E.TrainSpec(name, EVAL_KW["epochs"], EVAL_KW["batch_size"],
                               EVAL_KW["alpha"], seed)
            _, rep = E.train_model(spec, mcfg, source, table, test)
            seed_rows[name] = rep
        rows[seed] = seed_rows
    return rows, time.time() - started


def test_criterion_4_distillation_efficacy(protocol_runs):
    rows, elapsed = protocol_runs
    full = [rows[s]["full"].final_accuracy for s in SEEDS]
    dist = [rows[s]["distilled"].final_accuracy for s in SEEDS]
    rand = [rows[s]["random"].final_accuracy for s in SEEDS]
    margins = [d - r for d, r in zip(dist, rand)]
    cond_a = np.mean(full) >= 0.95
    cond_b = np.mean(dist) >= 0.80 * np.mean(full)
    cond_c = all(m >= 0.05 for m in margins)
    ok = cond_a and cond_b and cond_c and elapsed < 1800
    report(4, ok,
           f"full={np.mean(full):.4f} (>=0.95: {cond_a}); "
           f"distilled={np.mean(dist):.4f} vs 0.80*full={0.80 * np.mean(full):.4f} "
           f"({cond_b}); per-seed margins over random "
           f"{[f'{m:+.3f}' for m in margins]} all >= +0.05 ({cond_c}); "
           f"runtime {elapsed:.0f}s < 1800s")


def test_criterion_5_fast_convergence(protocol_runs):
    rows, _ = protocol_runs
    dist_epochs = [E.epochs_to_fraction_of_final(rows[s]["distilled"].per_epoch)
                   for s in SEEDS]
    rand_epochs = [E.epochs_to_fraction_of_final(rows[s]["random"].per_epoch)
                   for s in SEEDS]
    med_d, med_r = np.median(dist_epochs), np.median(rand_epochs)
    ok = med_d <= med_r
    report(5, ok,
           f"median epochs to 95% of own final accuracy: distilled {med_d} "
           f"(per-seed {dist_epochs}) <= random {med_r} (per-seed {rand_epochs})")


def test_criterion_6_size_sweep(world):
    train, test, table, mcfg = world
    started = time.time()
    dcfg = D.DistillConfig(**{**DISTILL_KW, "outer_steps": 220})
    ecfg = E.EvalConfig(seeds=SEEDS, **EVAL_KW)
    sweep_rows = E.size_sweep(train, test, [1, 2, 5, 10], dcfg, ecfg, mcfg, table)
    elapsed = time.time() - started
    means = [np.mean([r["accuracy"] for r in sweep_rows if r["m"] == m])
             for m in (1, 2, 5, 10)]
    rho = sstats.spearmanr([1, 2, 5, 10], means).statistic
    ok = rho >= 0 and elapsed < 2700
    report(6, ok,
           f"mean accuracy per m {dict(zip((1, 2, 5, 10), [round(a, 4) for a in means]))},"
           f" Spearman rho={rho:.3f} >= 0; runtime {elapsed:.0f}s < 2700s")


# ---------------------------------------------------------------------------
# 7. determinism and formats


def test_criterion_7_determinism_and_formats(tmp_path):
    started = time.time()
    cfg = {
        "seed": 3,
        "out_dir": str(tmp_path / "out"),
        "data": {"train_csv": str(tmp_path / "out" / "train.csv"),
                 "test_csv": str(tmp_path / "out" / "test.csv")},
        "model": {"embedding_dim": 4, "widths": [2, 3], "channels": 4, "max_len": 10},
        "distill": {"per_class": 2, "inner_epochs": 1, "inner_batch": 4,
                    "outer_steps": 3, "real_batch": 8},
        "eval": {"epochs": 2, "batch_size": 4, "alpha": 0.1, "seeds": [0, 1]},
        "synthetic": {"num_classes": 2, "n_train": 40, "n_test": 16,
                      "signature_per_class": 2, "background_vocab": 30,
                      "min_len": 5, "max_len": 8},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["gen-synthetic", "--config", str(path)]) == 0
    assert cli.main(["distill", "--config", str(path)]) == 0
    assert cli.main(["eval", "--config", str(path)]) == 0
    out = tmp_path / "out"
    watched = ["distilled.ddtc", "distill_metrics.csv", "comparison.csv",
               "curves.csv", "run_manifest.json"]
    first = {}
    for name in watched:
        first[name] = (out / name).read_bytes()
    assert cli.main(["distill", "--config", str(path)]) == 0
    assert cli.main(["eval", "--config", str(path)]) == 0
    identical = all((out / n).read_bytes() == first[n] for n in watched)

    dset, emb_hash = D.load_distilled(out / "distilled.ddtc")
    payload = json.loads(json.dumps(D.to_json_dict(dset, emb_hash)))
    loaded, h2 = D.from_json_dict(payload)
    round_trip = (h2 == emb_hash
                  and np.array_equal(loaded.matrices, dset.matrices)
                  and np.array_equal(loaded.labels, dset.labels))

    broken = tmp_path / "broken.ddtc"
    broken.write_bytes((out / "distilled.ddtc").read_bytes()[:-5])
    corrupt_code = cli.main(["export", "--artifact", str(broken)])
    elapsed = time.time() - started
    ok = identical and round_trip and corrupt_code == 5 and elapsed < 120
    report(7, ok,
           f"rerun byte-identical={identical}; DDTC<->JSON lossless={round_trip}; "
           f"corrupt artifact exit={corrupt_code} (want 5); {elapsed:.0f}s < 120s")


# ---------------------------------------------------------------------------
# 8. optional extended check (not gating)


AGNEWS_DIR = os.environ.get("TEXTDISTILL_AGNEWS_DIR")


@pytest.mark.skipif(not AGNEWS_DIR, reason="set TEXTDISTILL_AGNEWS_DIR to a "
                    "directory holding AG's News train.csv/test.csv and "
                    "glove.twitter.27B.100d.txt to run the extended check")
def test_criterion_8_agnews_subsample():
    started = time.time()
    train_texts, train_labels, c = td.load_csv_texts(
        os.path.join(AGNEWS_DIR, "train.csv"), num_classes=4)
    test_texts, test_labels, _ = td.load_csv_texts(
        os.path.join(AGNEWS_DIR, "test.csv"), num_classes=4)
    rng = np.random.default_rng(0)
    keep = []
    for cls in range(4):
        pool = np.flatnonzero(train_labels == cls)
        keep.append(rng.choice(pool, size=2000, replace=False))
    keep = np.concatenate(keep)
    texts = [train_texts[i] for i in keep]
    labels = train_labels[keep]
    vocab = td.build_vocab(texts, min_count=2)
    glove = os.path.join(AGNEWS_DIR, "glove.twitter.27B.100d.txt")
    if os.path.exists(glove):
        table = td.load_embeddings(glove, vocab, dim=100, seed=0)
        dim = 100
    else:
        dim = 32
        table = td.random_embedding_table(vocab, dim=dim, seed=0)
    mcfg = M.ModelConfig(embedding_dim=dim, num_classes=4, widths=(3, 4, 5),
                         channels=16, max_len=48)
    train = td.Dataset.from_texts(texts, labels, vocab, 48, 4)
    test_idx = np.arange(min(2000, len(test_texts)))
    test = td.Dataset.from_texts([test_texts[i] for i in test_idx],
                                 test_labels[test_idx], vocab, 48, 4)
    margins = []
    for seed in SEEDS:
        cfg = D.DistillConfig(per_class=20, seq_len=48, embedding_dim=dim,
                              alpha_inner=0.2, alpha_outer=0.01, inner_epochs=5,
                              inner_batch=20, outer_steps=300, real_batch=32,
                              init_mode="real", outer_optimizer="adam", seed=seed)
        dset = D.run_distillation(train, table, mcfg, cfg)
        spec = E.TrainSpec("distilled", 10, 20, 0.2, seed)
        _, rep_d = E.train_model(spec, mcfg, dset, table, test)
        sub = E.random_subset(train, 20, seed)
        _, rep_r = E.train_model(E.TrainSpec("random", 10, 20, 0.2, seed),
                                 mcfg, sub, table, test)
        margins.append(rep_d.final_accuracy - rep_r.final_accuracy)
    elapsed = time.time() - started
    ok = all(m >= 0.03 for m in margins) and elapsed < 7200
    report(8, ok, f"margins over random {margins} all >= +0.03; {elapsed:.0f}s")
