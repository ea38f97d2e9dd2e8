"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1 to 8 gate the build.  Criterion 9 is a best-effort reproduction on
the public Amazon Movies/Books dumps; it runs only when ``CROSSREC_AMAZON_DIR``
points at ``movies.tsv`` and ``books.tsv`` and never fails the suite.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from crossrec import data, eval as ev, gcmf, sed, synthetic
from crossrec.cli import parse_config, run_experiment
from crossrec.data import PUBLISHED_K, REMOVED, TARGET, TEST, TRAIN, VALID, ProtocolSpec
from crossrec.neucdcf import TrainConfig, init_model, objective, train, training_index

from conftest import central_differences, max_relative_error


def _all_train(triples_s, triples_t):
    src = data.ratings_from_triples(triples_s, 1, 5)
    tgt = data.ratings_from_triples(triples_t, 1, 5)
    return data.split(data.align_domains(src, tgt), fractions=(1.0, 0.0, 0.0))


def test_criterion_1_gradients(criterion):
    t0 = time.perf_counter()
    base = synthetic.cross_domain(m=6, n_s=5, n_t=5, density_s=0.6, density_t=0.6, seed=1)
    ds = data.apply_protocol(base, ProtocolSpec("sparse", 0, 3))
    assert (ds.m, ds.n_s, ds.n_t) == (6, 5, 5)
    errors = {}
    for kind in ("gcmf", "sed", "neucdcf"):
        model = init_model(kind, ds, TrainConfig(k=4, layers=2, alpha=0.4, init_std=0.5, seed=21))
        idx = training_index(model, ds)
        _, grads, _ = objective(model, ds, idx, l2=0.001)
        numeric = central_differences(lambda: objective(model, ds, idx, l2=0.001)[0], model.params, h=1e-5)
        errors[kind] = max_relative_error(grads, numeric)
    elapsed = time.perf_counter() - t0
    ok = max(errors.values()) <= 1e-5 and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"; {elapsed:.2f}s"
    criterion(1, "analytic gradients match central differences", ok, detail)


def _pmf_sgd_oracle(P, Q, users, items, ratings, orders, batch, lr, steps):
    """Plain PMF: minimize mean (p_u . q_j - r)^2 per batch by gradient steps."""
    P, Q = P.copy(), Q.copy()
    done = 0
    for order in orders:
        for s in range(0, len(order), batch):
            if done == steps:
                return P, Q
            b = order[s : s + batch]
            u, j, r = users[b], items[b], ratings[b]
            err = (P[u] * Q[j]).sum(axis=1) - r
            g = 2.0 * err / len(b)
            gP = np.zeros_like(P)
            gQ = np.zeros_like(Q)
            np.add.at(gP, u, g[:, None] * Q[j])
            np.add.at(gQ, j, g[:, None] * P[u])
            P -= lr * gP
            Q -= lr * gQ
            done += 1
    return P, Q


def test_criterion_2_pmf_reduction(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    src = [(f"u{u}", f"s{u % 3}", 3) for u in range(20)]
    tgt = [(f"u{u}", f"t{j}", int(rng.integers(1, 6))) for u in range(20) for j in range(10)]
    ds = _all_train(src, tgt)
    steps, batch, lr, epochs = 100, 20, 0.01, 10
    cfg = TrainConfig(k=4, batch_size=batch, lr=lr, l2=0.0, epochs=epochs, patience=epochs, optimizer="sgd", init_std=0.3, seed=8)
    start = init_model("pmf", ds, cfg)
    fitted, log = train("pmf", ds, cfg, model=start.copy())

    idx = training_index(start, ds)
    assert len(idx) == 200 and len(log.records) * len(idx) // batch == steps
    orders = [idx[np.random.default_rng([cfg.seed, 200, e]).permutation(len(idx))] for e in range(epochs)]
    P, Q = _pmf_sgd_oracle(
        start.params["P_zeta"], start.params["Q_G"], ds.users, ds.items, ds.ratings, orders, batch, lr, steps
    )
    elapsed = time.perf_counter() - t0
    same = np.array_equal(P, fitted.params["P_zeta"]) and np.array_equal(Q, fitted.params["Q_G"])
    moved = not np.array_equal(P, start.params["P_zeta"])
    criterion(2, "pmf mode is bit-identical to a plain PMF trainer", same and moved and elapsed < 5, f"{elapsed:.2f}s")


def test_criterion_3_fusion_limits(criterion):
    base = synthetic.cross_domain(m=8, n_s=6, n_t=6, density_s=0.5, density_t=0.5, seed=2)
    ds = data.apply_protocol(base, ProtocolSpec("sparse", 0, 0))
    users = np.repeat(np.arange(ds.m), ds.n_items)
    items = np.tile(np.arange(ds.n_items), ds.m)
    domains = (items >= ds.n_s).astype(np.int8)
    worst = 0.0
    for draw in range(1000):
        cfg = TrainConfig(k=3, layers=2, init_std=0.8, seed=draw)
        m0 = init_model("neucdcf", ds, TrainConfig(**{**cfg.to_dict(), "alpha": 0.0}))
        m1 = init_model("neucdcf", ds, TrainConfig(**{**cfg.to_dict(), "alpha": 1.0}))
        d0 = np.abs(m0.predict(ds, users, items) - gcmf.predict(m0.gcmf_params(), users, items, domains, ds.gamma_max))
        d1 = np.abs(m1.predict(ds, users, items) - sed.predict(m1.sed_params(), ds, users, items))
        worst = max(worst, float(d0.max()), float(d1.max()))
    criterion(3, "alpha=0 and alpha=1 reproduce each network exactly", worst == 0.0, f"max gap {worst}")


def test_criterion_4_masking(criterion):
    base = synthetic.cross_domain(m=40, n_s=15, n_t=15, density_s=0.4, density_t=0.3, seed=3)
    ds = data.apply_protocol(base, ProtocolSpec("sparse", 20, 1))
    model = init_model("sed", ds, TrainConfig(k=4, layers=2, init_std=0.5))
    users = np.arange(ds.m)
    P, _ = sed.encode(model.params, sed.source_input(ds, users))
    recon, _ = sed.decode(model.params, P, ds.gamma_max)
    target = ds.target_train_rows.toarray()
    n_obs = ds.target_train_rows.nnz
    before = sed.s2t_from_reconstruction(recon, target, n_obs)
    unobserved = np.flatnonzero(target.ravel() == 0)
    rng = np.random.default_rng(0)
    pick = rng.choice(unobserved, size=100, replace=False)
    perturbed = recon.copy().ravel()
    perturbed[pick] += rng.normal(0, 10.0, 100)
    after = sed.s2t_from_reconstruction(perturbed.reshape(recon.shape), target, n_obs)
    consistent = before == sed.s2t_loss(model.params, ds, users)
    criterion(4, "unobserved reconstructions do not touch the S2T loss", after - before == 0.0 and consistent,
              f"delta {after - before}")


def _protocol_failures(base, kind, K, seed):
    fails = []
    split = data.split(base, seed=seed)
    tmask = split.domain == TARGET
    labels = split.labels[tmask]
    if not np.all(np.isin(labels, (TRAIN, VALID, TEST))):
        fails.append("split labels outside train/validation/test")
    n = int(tmask.sum())
    counts = np.bincount(labels, minlength=3)
    if counts.sum() != n or counts[VALID] != round(0.15 * n) or counts[TRAIN] < round(0.65 * n):
        fails.append(f"split counts {counts.tolist()} for {n} ratings")
    if np.any(split.labels[~tmask] != TRAIN):
        fails.append("source ratings relabelled")
    tr = split.target_index(TRAIN)
    if len(np.unique(split.users[tr])) != split.m or len(np.unique(split.items[tr])) != split.n_t:
        fails.append("entity without a train rating")
    out = data.apply_protocol(base, ProtocolSpec(kind, K, seed))
    if not np.array_equal(out.labels == VALID, split.labels == VALID) or not np.array_equal(
        out.labels == TEST, split.labels == TEST
    ):
        fails.append("protocol touched validation/test")
    if kind == "full_cold_start":
        chosen = out.focus_users
        if len(chosen) != math.floor(K / 100 * base.m) or np.any(out.target_train_counts[chosen] != 0):
            fails.append("full cold-start users keep target train ratings")
        others = np.setdiff1d(np.arange(out.m), chosen)
        if not np.array_equal(out.target_train_counts[others], split.target_train_counts[others]):
            fails.append("full cold start touched other users")
    else:
        removed = int(np.sum(out.labels == REMOVED))
        if removed != math.floor(K / 100 * len(tr)):
            fails.append(f"sparsify removed {removed}")
        if kind == "cold_start" and np.any(out.target_train_counts[out.focus_users] >= 5):
            fails.append("cold-start user with >= 5 train ratings")
    return fails


def test_criterion_5_protocol_invariants(criterion):
    t0 = time.perf_counter()
    base = synthetic.cross_domain(m=500, n_s=60, n_t=60, density_s=0.2, density_t=0.12, seed=4)
    assert base.m == 500
    fails = []
    for kind, grid in PUBLISHED_K.items():
        for K in grid:
            fails += [f"{kind} K={K}: {f}" for f in _protocol_failures(base, kind, K, seed=K + 1)]
    elapsed = time.perf_counter() - t0
    criterion(5, "split, sparsify and cold-start invariants on 500 users", not fails and elapsed < 5,
              "; ".join(fails) or f"{elapsed:.2f}s")


def _transfer_trial(seed):
    base = synthetic.cross_domain(m=300, n_s=80, n_t=80, density_s=0.3, density_t=0.15, seed=seed)
    cfg = TrainConfig(k=8, alpha=0.5, batch_size=32, epochs=120, patience=10, seed=seed)
    sparse = data.apply_protocol(base, ProtocolSpec("sparse", 80, seed))
    _, log_n = train("neucdcf", sparse, cfg)
    _, log_g = train("gcmf", sparse, cfg)
    cold = data.apply_protocol(base, ProtocolSpec("cold_start", 80, seed))
    mae_g = ev.evaluate(train("gcmf", cold, cfg)[0], cold).mae[0]
    mae_p = ev.evaluate(train("pmf", cold, cfg)[0], cold).mae[0]
    return log_n.best_val_mae, log_g.best_val_mae, mae_g, mae_p


@pytest.mark.slow
def test_criterion_6_synthetic_transfer(criterion):
    t0 = time.perf_counter()
    wins_deep, wins_cross, notes = 0, 0, []
    for seed in range(5):
        val_n, val_g, cold_g, cold_p = _transfer_trial(seed)
        wins_deep += val_n <= val_g
        wins_cross += cold_g <= cold_p
        notes.append(f"s{seed}: {val_n:.3f}/{val_g:.3f} {cold_g:.3f}/{cold_p:.3f}")
    elapsed = time.perf_counter() - t0
    ok = wins_deep >= 3 and wins_cross >= 3 and elapsed < 300
    detail = f"neucdcf<=gcmf {wins_deep}/5, gcmf<=pmf cold {wins_cross}/5, {elapsed:.0f}s; " + "; ".join(notes)
    criterion(6, "deep side helps at 80% sparsity and transfer helps cold users", ok, detail)


def test_criterion_7_descent(criterion):
    rng = np.random.default_rng(6)
    src = [(f"u{u}", f"s{j}", int(rng.integers(1, 6))) for u in range(10) for j in range(5)]
    tgt = [(f"u{u}", f"t{j}", int(rng.integers(1, 6))) for u in range(10) for j in range(5)]
    ds = _all_train(src, tgt)
    assert len(ds.train_index) == 100
    worst = -math.inf
    for kind in ("gcmf", "sed", "neucdcf"):
        cfg = TrainConfig(k=4, layers=2, lr=1e-3, batch_size=100, dropout=0.0, epochs=50, patience=50,
                          optimizer="sgd", init_std=0.3, seed=2)
        _, log = train(kind, ds, cfg)
        losses = np.array([r.loss for r in log.records])
        assert len(losses) == 50
        worst = max(worst, float(np.max(np.diff(losses))))
    criterion(7, "full-batch gradient descent never increases the loss", worst <= 1e-9, f"max rise {worst:.2e}")


def test_criterion_8_determinism(criterion, tmp_path):
    src, tgt = synthetic.generate(m=40, n_s=15, n_t=15, density_s=0.5, density_t=0.4, seed=9)
    paths = []
    for name, r in (("source.tsv", src), ("target.tsv", tgt)):
        path = tmp_path / name
        path.write_text("".join(f"{r.user_ids[u]}\t{r.item_ids[i]}\t{x:g}\n" for u, i, x in zip(r.users, r.items, r.ratings)))
        paths.append(str(path))
    outputs = []
    for run in ("a", "b"):
        cfg = parse_config(flags={
            "source": paths[0], "target": paths[1], "min_ratings": 1, "model": "neucdcf", "repeats": 5, "seed": 3,
            "train.k": 4, "train.layers": 2, "train.epochs": 4, "train.batch_size": 64, "out": str(tmp_path / run),
        }, env={})
        _, failures = run_experiment(cfg)
        assert not failures
        outputs.append((tmp_path / run / "summary.csv").read_bytes())
    criterion(8, "repeated run_experiment gives byte-identical summary.csv", outputs[0] == outputs[1])


def test_criterion_9_reproduction(criterion):
    root = os.environ.get("CROSSREC_AMAZON_DIR")
    files = [Path(root or ".") / "movies.tsv", Path(root or ".") / "books.tsv"]
    if not root or not all(f.exists() for f in files):
        criterion(9, "Amazon Movies->Books reproduction (best effort)", False, "CROSSREC_AMAZON_DIR unset",
                  gating=False, skipped=True)
        pytest.skip("Amazon Movies/Books dumps not available")
    src = data.load_ratings(files[0], 1, 5)
    tgt = data.load_ratings(files[1], 1, 5)
    base = data.align_domains(src, tgt, min_ratings=10)
    best = None
    for k in (8, 32, 64):
        for alpha in (0.2, 0.5, 0.8):
            ds = data.apply_protocol(base, ProtocolSpec("sparse", 0, 0))
            model, log = train("neucdcf", ds, TrainConfig(k=k, alpha=alpha, seed=0))
            if best is None or log.best_val_mae < best[0]:
                best = (log.best_val_mae, k, alpha)
    _, k, alpha = best
    maes = []
    for seed in range(5):
        ds = data.apply_protocol(base, ProtocolSpec("sparse", 0, seed))
        model, log = train("neucdcf", ds, TrainConfig(k=k, alpha=alpha, seed=seed))
        maes.append(ev.evaluate(model, ds).mae[0])
    got = float(np.mean(maes))
    criterion(9, "Amazon Movies->Books reproduction (best effort)", abs(got - 0.6640) <= 0.03,
              f"MAE {got:.4f} with k={k}, alpha={alpha}", gating=False)
