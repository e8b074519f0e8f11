"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-5 and 9 verify formulas, gradients, clustering, balancing, and
reproducibility against independent oracles at fixed tolerances. Criteria
6-8 are end-to-end trend reproductions; on CPU they run a reduced-epoch
profile (sanctioned by criterion 6), with the nominal 2k-image / 50-epoch
recipe available via MGCL_ACCEPT_FULL=1. Runs are cached per (config hash,
seed) inside the session cache directory; set MGCL_ACCEPT_CACHE to reuse
runs across sessions.
"""

import math
import os
import statistics
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import tiny_config, unit_rows
from gradcheck import assert_grads_match
from mgcl.cluster import (
    Centroids,
    PrototypeBank,
    ce_strategy_loss,
    km_loss,
    minibatch_kmeans,
    sinkhorn_codes,
    swapped_prediction_loss,
)
from mgcl.config import config_from_dict
from mgcl.experiments import run_pretrain_and_probe
from mgcl.losses import info_nce, neighbor_loss, pixel_loss, triplet_loss
from mgcl.synthdata import generate_dataset
from mgcl.trainer import canonical_metrics_lines, fit, read_metrics, total_loss
from oracles import (
    ce_loss_oracle,
    km_loss_oracle,
    kmeans_exhaustive_objective,
    nce_oracle,
    neighbor_loss_oracle,
    pixel_loss_oracle,
    swapped_loss_oracle,
    triplet_loss_oracle,
)


def report(number: int, name: str, ok: bool) -> None:
    print(f"[acceptance] criterion {number} ({name}): {'PASS' if ok else 'FAIL'}")
    assert ok, f"criterion {number} ({name}) failed"


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


# -- criterion 1: loss formula suite ------------------------------------------


class TestCriterion1LossFormulas:
    TOL = 1e-6

    def rand_dense_instance(self, rng):
        b = int(rng.integers(1, 3))
        p = int(rng.integers(2, 7))
        nn = int(rng.integers(1, min(4, p)))
        nq = int(rng.integers(0, 6))
        d = int(rng.integers(2, 6))
        rows_a = t64(unit_rows(rng, b * p, d).reshape(b, p, d))
        rows_b = t64(unit_rows(rng, b * p, d).reshape(b, p, d))
        corr = torch.as_tensor(rng.integers(0, p, size=(b, p)))
        nbrs = torch.as_tensor(
            np.stack(
                [
                    np.stack(
                        [
                            rng.choice([j for j in range(p) if j != i], nn, replace=False)
                            for i in range(p)
                        ]
                    )
                    for _ in range(b)
                ]
            )
        )
        negs = t64(unit_rows(rng, nq, d)) if nq else torch.zeros(0, d, dtype=torch.float64)
        tau = float(rng.uniform(0.05, 1.0))
        return rows_a, rows_b, corr, nbrs, negs, tau

    def test_criterion_1(self):
        rng = np.random.default_rng(1001)
        ok = True
        for _ in range(120):
            pos = float(rng.uniform(-1, 1))
            negs = rng.uniform(-1, 1, size=int(rng.integers(0, 9))).tolist()
            tau = float(rng.uniform(0.05, 1.0))
            got = info_nce(pos, negs, tau).item()
            ok &= abs(got - nce_oracle(pos, [], negs, tau)) < self.TOL

        for _ in range(120):
            rows_a, rows_b, corr, nbrs, negs, tau = self.rand_dense_instance(rng)
            got = pixel_loss(rows_a, rows_b, corr, negs, tau).item()
            want = pixel_loss_oracle(
                rows_a.numpy(), rows_b.numpy(), corr.tolist(), negs.numpy(), tau
            )
            ok &= abs(got - want) < self.TOL

            got = neighbor_loss(rows_a, rows_b, corr, nbrs, negs, tau).item()
            want = neighbor_loss_oracle(
                rows_a.numpy(), rows_b.numpy(), corr.tolist(), nbrs.tolist(),
                negs.numpy(), tau,
            )
            ok &= abs(got - want) < self.TOL

            alpha = float(rng.uniform(0.0, 0.6))
            for orientation in ("as_written", "corrected"):
                got = triplet_loss(rows_a, rows_b, corr, nbrs, alpha, orientation).item()
                want = triplet_loss_oracle(
                    rows_a.numpy(), rows_b.numpy(), corr.tolist(), nbrs.tolist(),
                    alpha, orientation,
                )
                ok &= abs(got - want) < self.TOL

        for _ in range(120):
            k = int(rng.integers(2, 6))
            d = int(rng.integers(2, 6))
            a = Centroids(t64(unit_rows(rng, k, d)), torch.ones(k, dtype=torch.long))
            b = Centroids(t64(unit_rows(rng, k, d)), torch.ones(k, dtype=torch.long))
            pairing = torch.as_tensor(rng.permutation(k))
            nq = int(rng.integers(0, 4))
            negs = t64(unit_rows(rng, nq, d)) if nq else torch.zeros(0, d, dtype=torch.float64)
            tau = float(rng.uniform(0.05, 1.0))
            got = km_loss(a, b, pairing, negs, tau).item()
            want = km_loss_oracle(
                a.vectors.numpy(), b.vectors.numpy(), pairing.tolist(), negs.numpy(), tau
            )
            ok &= abs(got - want) < self.TOL

        for _ in range(120):
            p = int(rng.integers(2, 8))
            k = int(rng.integers(2, 5))
            d = int(rng.integers(2, 6))
            bank = PrototypeBank(k, d, seed=int(rng.integers(1 << 30))).double()
            va, vb = t64(unit_rows(rng, p, d)), t64(unit_rows(rng, p, d))
            qa = sinkhorn_codes(bank.scores(va), 0.5, 3)
            qb = sinkhorn_codes(bank.scores(vb), 0.5, 3)
            temp = float(rng.uniform(0.05, 1.0))
            protos = bank.vectors.detach().numpy()
            got = swapped_prediction_loss(va, vb, qa, qb, bank, temp).item()
            want = swapped_loss_oracle(va.numpy(), vb.numpy(), qa.numpy(), qb.numpy(), protos, temp)
            ok &= abs(got - want) < self.TOL

            got = ce_strategy_loss(va, bank, qa, temp).item()
            want = ce_loss_oracle(va.numpy(), protos, qa.numpy(), temp)
            ok &= abs(got - want) < self.TOL

        report(1, "loss formula suite vs scalar oracles", ok)


# -- criterion 2: gradient suite -----------------------------------------------


class TestCriterion2Gradients:
    def test_criterion_2(self):
        rng = np.random.default_rng(2002)
        ok = True
        try:
            for trial in range(3):
                d = int(rng.integers(3, 9))  # D <= 8
                p = int(rng.integers(3, 9))
                rows_a = t64(unit_rows(rng, p, d).reshape(1, p, d)).requires_grad_(True)
                rows_b = t64(unit_rows(rng, p, d).reshape(1, p, d))
                corr = torch.as_tensor(rng.integers(0, p, size=(1, p)))
                nbrs = torch.as_tensor(
                    np.stack(
                        [rng.choice([j for j in range(p) if j != i], 2, replace=False)
                         for i in range(p)]
                    )[None]
                )
                negs = t64(unit_rows(rng, 4, d))

                rows_a.grad = None
                assert_grads_match(lambda: pixel_loss(rows_a, rows_b, corr, negs, 0.2), [rows_a])
                rows_a.grad = None
                assert_grads_match(
                    lambda: neighbor_loss(rows_a, rows_b, corr, nbrs, negs, 0.2), [rows_a]
                )
                for orientation in ("as_written", "corrected"):
                    rows_a.grad = None
                    assert_grads_match(
                        lambda: triplet_loss(rows_a, rows_b, corr, nbrs, 0.3, orientation),
                        [rows_a],
                    )

                z_a = t64(unit_rows(rng, 4, d)).requires_grad_(True)
                z_b = t64(unit_rows(rng, 4, d))
                from mgcl.losses import instance_loss

                assert_grads_match(lambda: instance_loss(z_a, z_b, negs, 0.2), [z_a])

                k = int(rng.integers(2, 5))  # K <= 4
                cent_a = t64(unit_rows(rng, k, d)).requires_grad_(True)
                cent_b = Centroids(t64(unit_rows(rng, k, d)), torch.ones(k, dtype=torch.long))
                pairing = torch.as_tensor(rng.permutation(k))

                def km_fn():
                    ca = Centroids(cent_a, torch.ones(k, dtype=torch.long))
                    return km_loss(ca, cent_b, pairing, negs, 0.2)

                assert_grads_match(km_fn, [cent_a])

                bank = PrototypeBank(k, d, seed=trial).double()
                va = t64(unit_rows(rng, p, d)).requires_grad_(True)
                vb = t64(unit_rows(rng, p, d)).requires_grad_(True)
                qa = sinkhorn_codes(bank.scores(va.detach()), 0.5, 3)
                qb = sinkhorn_codes(bank.scores(vb.detach()), 0.5, 3)
                assert_grads_match(
                    lambda: swapped_prediction_loss(va, vb, qa, qb, bank, 0.1),
                    [va, vb, bank.vectors],
                )
                bank.vectors.grad = None
                va2 = t64(unit_rows(rng, p, d)).requires_grad_(True)
                assert_grads_match(
                    lambda: ce_strategy_loss(va2, bank, qa, 0.2), [va2, bank.vectors]
                )
        except AssertionError:
            ok = False
        report(2, "analytic gradients vs central finite differences", ok)


# -- criterion 3: clustering suite ---------------------------------------------


class TestCriterion3Clustering:
    def test_criterion_3(self):
        rng = np.random.default_rng(3003)
        ok = True
        # inertia non-increasing + nearest-centroid, 1000 random instances
        for _ in range(1000):
            p = int(rng.integers(6, 36))
            k = int(rng.integers(2, min(9, p)))
            pts = t64(unit_rows(rng, p, int(rng.integers(2, 6))))
            res = minibatch_kmeans(pts, k, init=int(rng.integers(1 << 30)), iters=5)
            hist = res.inertia_history
            ok &= all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
            sims = pts @ res.centroids.vectors.T
            best = sims.max(dim=1).values
            chosen = sims.gather(1, res.assignments.unsqueeze(1)).squeeze(1)
            ok &= bool(torch.equal(chosen, best) or (chosen >= best - 1e-12).all())

        # exhaustive-partition oracle on small instances
        hits = trials = 0
        for trial in range(40):
            k = int(rng.integers(2, 4))
            p = int(rng.integers(k + 2, 11))
            if trial % 2:
                pts = unit_rows(rng, p, 3)
            else:
                centers = unit_rows(rng, k, 4)
                raw = centers[rng.integers(0, k, size=p)] + 0.25 * rng.normal(size=(p, 4))
                pts = raw / np.linalg.norm(raw, axis=1, keepdims=True)
            res = minibatch_kmeans(
                t64(pts), k, init=int(rng.integers(1 << 30)), iters=25, restarts=8
            )
            opt = kmeans_exhaustive_objective(pts, k)
            got = res.inertia_history[-1]
            ok &= got >= opt - 1e-9
            trials += 1
            hits += got <= opt * 1.05 + 1e-9
        ok &= hits >= 0.9 * trials
        report(3, "k-means inertia, nearest-centroid, oracle objective", ok)


# -- criterion 4: sinkhorn suite -------------------------------------------------


class TestCriterion4Sinkhorn:
    def test_criterion_4(self):
        rng = np.random.default_rng(4004)
        ok = True
        # row sums = 1 within 1e-6 always, including the training regime
        for _ in range(200):
            p = int(rng.integers(2, 80))
            k = int(rng.integers(2, 17))
            scores = t64(rng.uniform(-1, 1, size=(p, k)))
            eps = float(rng.choice([0.05, 0.1, 0.5, 4.0]))
            iters = int(rng.integers(1, 6))
            q = sinkhorn_codes(scores, eps, iters)
            ok &= float(np.abs(q.sum(dim=1).numpy() - 1.0).max()) < 1e-6
            ok &= bool((q >= 0).all())

        # column equipartition after 3 iterations on bounded scores
        # (cosine-bounded scores with eps=4.0, i.e. scores/eps in [-0.25, 0.25])
        for _ in range(200):
            p = int(rng.integers(8, 120))
            k = int(rng.integers(2, 17))
            scores = t64(rng.uniform(-1, 1, size=(p, k)))
            q = sinkhorn_codes(scores, 4.0, 3)
            ok &= float(np.abs(q.sum(dim=0).numpy() - p / k).max()) < 1e-4

        # uniform scores -> exactly the uniform matrix
        q = sinkhorn_codes(torch.full((16, 4), 0.123, dtype=torch.float64), 0.05, 3)
        ok &= bool(torch.equal(q, torch.full((16, 4), 0.25, dtype=torch.float64)))
        report(4, "sinkhorn row sums, column balance, uniform symmetry", ok)


# -- criterion 5: reduction identities -------------------------------------------


class TestCriterion5Reductions:
    def test_criterion_5(self, tiny_dataset, tmp_path):
        rng = np.random.default_rng(5005)
        ok = True
        # neighbor with no neighbors == pixel, bit for bit
        for _ in range(50):
            b, p, d = 2, 5, 4
            rows_a = t64(unit_rows(rng, b * p, d).reshape(b, p, d))
            rows_b = t64(unit_rows(rng, b * p, d).reshape(b, p, d))
            corr = torch.as_tensor(rng.integers(0, p, size=(b, p)))
            negs = t64(unit_rows(rng, 3, d))
            empty = torch.zeros(b, p, 0, dtype=torch.long)
            ok &= (
                neighbor_loss(rows_a, rows_b, corr, empty, negs, 0.2).item()
                == pixel_loss(rows_a, rows_b, corr, negs, 0.2).item()
            )

        # w_sem = 0 reduces the total to the two-granularity baseline
        for _ in range(50):
            ins, pix, sem = rng.uniform(0, 5, size=3)
            ok &= total_loss(ins, pix, sem, (1.0, 1.0, 0.0)) == ins + pix
            ok &= total_loss(ins, pix, 0.0, (1.0, 1.0, 1.0)) == pytest.approx(
                ins + pix, abs=1e-12
            )

        # bookkeeping identity on every logged step of a real run
        config = tiny_config(**{"loss.strategy": "km", "loss.w_sem": "0.7",
                                "loss.w_pix": "1.3", "train.epochs": "2"})
        result = fit(config, tiny_dataset, tmp_path / "bookkeeping")
        for rec in read_metrics(result.metrics_path):
            weighted = (
                config.loss.w_ins * rec.loss_ins
                + config.loss.w_pix * rec.loss_pix
                + config.loss.w_sem * rec.loss_sem
            )
            ok &= abs(rec.loss_total - weighted) < 1e-6
        report(5, "reduction identities and loss bookkeeping", ok)


# -- criterion 9: reproducibility ------------------------------------------------


class TestCriterion9Reproducibility:
    def test_criterion_9(self, tmp_path):
        dataset = generate_dataset(24, 3, 32, rng_seed=11)
        config = tiny_config(**{"train.epochs": "2", "train.checkpoint_interval": "3"})
        ok = True

        r1 = fit(config, dataset, tmp_path / "a")
        r2 = fit(config, dataset, tmp_path / "b")
        ok &= canonical_metrics_lines(r1.metrics_path) == canonical_metrics_lines(
            r2.metrics_path
        )

        # checkpoint-resume continuation equals the uninterrupted run:
        # emulate an interruption after step 3 by truncating the run dir to
        # the interval checkpoint and the first three log records
        partial_dir = tmp_path / "partial"
        fit(config, dataset, partial_dir)
        metrics_path = partial_dir / "metrics.jsonl"
        lines = metrics_path.read_text().splitlines()
        metrics_path.write_text("\n".join(lines[:4]) + "\n")
        (partial_dir / "ckpt_00000006").unlink()
        resumed = fit(
            config, dataset, partial_dir, resume_from=partial_dir / "ckpt_00000003"
        )
        full = read_metrics(r1.metrics_path)
        combined = read_metrics(resumed.metrics_path)
        ok &= len(full) == len(combined) == 6
        for a, b in zip(full, combined):
            ok &= (
                a.step == b.step
                and a.epoch == b.epoch
                and a.lr == b.lr
                and a.loss_total == b.loss_total
                and a.loss_ins == b.loss_ins
                and a.loss_pix == b.loss_pix
                and a.loss_sem == b.loss_sem
            )
        report(9, "bit-identical logs and exact resume", ok)


# -- criteria 6-8: end-to-end trends ---------------------------------------------

# reduced CPU profile; the nominal recipe (2k images, 50 epochs, batch 64)
# runs with MGCL_ACCEPT_FULL=1 on a faster host
REDUCED_PROFILE = {
    "data.n_samples": "384",
    "data.num_classes": "4",
    "data.image_size": "64",
    "aug.output_size": "64",
    "aug.crop_min": "0.6",
    "model.width": "16",
    "model.embed_dim": "16",
    "train.batch_size": "32",
    "train.epochs": "20",
    "train.lr0": "0.05",
    "train.ema_m": "0.99",
    "queue.global_capacity": "256",
    "queue.dense_capacity": "1024",
    "kmeans.k": "8",
    "kmeans.iters": "8",
    "kmeans.restarts": "2",
    "proto.k": "12",
    "probe.epochs": "20",
}

FULL_PROFILE = {
    "data.n_samples": "2000",
    "data.num_classes": "4",
    "data.image_size": "64",
    "aug.crop_min": "0.6",
    "train.batch_size": "64",
    "train.epochs": "50",
    "train.lr0": "0.05",
    "kmeans.k": "16",
    "proto.k": "24",
    "queue.dense_capacity": "4096",
}

SEEDS = (0, 1, 2)
SWEEP_K_VALUES = (2, 4, 8, 16, 32)
MIN_SEPARATION = 0.01


def profile() -> dict:
    return dict(FULL_PROFILE if os.environ.get("MGCL_ACCEPT_FULL") else REDUCED_PROFILE)


@pytest.fixture(scope="session")
def accept_cache(tmp_path_factory):
    env = os.environ.get("MGCL_ACCEPT_CACHE")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("acceptance_runs")


def run_arm(base: dict, extra: dict, seeds, cache: Path, jobs: int = 2) -> list[float]:
    from concurrent.futures import ProcessPoolExecutor

    values = dict(base)
    values.update(extra)
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(run_pretrain_and_probe, values, s, cache) for s in seeds]
            return [f.result()["miou"] for f in futs]
    return [run_pretrain_and_probe(values, s, cache)["miou"] for s in seeds]


ARM_OVERRIDES = {
    "ins_only": {"loss.strategy": "none", "loss.w_pix": "0", "loss.w_sem": "0"},
    "baseline": {"loss.strategy": "none"},
    "neighbor": {"loss.strategy": "neighbor"},
    "km": {"loss.strategy": "km"},
    "pm": {"loss.strategy": "pm"},
    "ce": {"loss.strategy": "ce"},
}


@pytest.fixture(scope="session")
def trend_medians(accept_cache):
    base = profile()
    medians = {}
    for arm in ("ins_only", "baseline", "pm", "neighbor", "km", "ce"):
        mious = run_arm(base, ARM_OVERRIDES[arm], SEEDS, accept_cache)
        medians[arm] = statistics.median(mious)
        print(f"[acceptance] trend arm {arm}: per-seed "
              + " ".join(f"{m:.4f}" for m in mious)
              + f" median {medians[arm]:.4f}")
    return medians


class TestCriterion6GranularityTrend:
    def test_criterion_6(self, trend_medians):
        ok = (
            trend_medians["ins_only"] + MIN_SEPARATION <= trend_medians["baseline"]
            and trend_medians["baseline"] + MIN_SEPARATION <= trend_medians["pm"]
        )
        print(
            f"[acceptance] granularity rungs: instance-only {trend_medians['ins_only']:.4f}"
            f" < +pixel {trend_medians['baseline']:.4f} < +semantic(pm) {trend_medians['pm']:.4f}"
        )
        report(6, "granularity trend with 0.01 separations", ok)


class TestCriterion7StrategyOrdering:
    def test_criterion_7(self, trend_medians):
        base = trend_medians["baseline"]
        ok = all(
            trend_medians[arm] > base for arm in ("neighbor", "km", "pm", "ce")
        )
        for arm in ("neighbor", "km", "pm", "ce"):
            print(f"[acceptance] strategy {arm}: {trend_medians[arm]:.4f} vs baseline {base:.4f}")
        report(7, "semantic strategies beat the no-semantics baseline", ok)


class TestCriterion8KSweep:
    def test_criterion_8(self, accept_cache):
        base = profile()
        base.update({"loss.strategy": "km", "kmeans.iters": "20", "kmeans.restarts": "3"})
        rows = []
        for k in SWEEP_K_VALUES:
            values = dict(base)
            values["kmeans.k"] = str(k)
            results = []
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=2) as pool:
                futs = [
                    pool.submit(run_pretrain_and_probe, values, s, accept_cache)
                    for s in SEEDS
                ]
                results = [f.result() for f in futs]
            rows.append(
                {
                    "k": k,
                    "miou": statistics.median(r["miou"] for r in results),
                    "wall": statistics.median(r["wall_time"] for r in results),
                }
            )
            print(f"[acceptance] sweep K={k}: miou {rows[-1]['miou']:.4f} wall {rows[-1]['wall']:.1f}s")
        walls = [r["wall"] for r in rows]
        ok = all(b >= a for a, b in zip(walls, walls[1:]))
        best_large = max(r["miou"] for r in rows if r["k"] in (4, 8, 16, 32))
        k2 = next(r["miou"] for r in rows if r["k"] == 2)
        ok &= best_large > k2
        report(8, "K-sweep wall-time monotone and best K beats K=2", ok)
