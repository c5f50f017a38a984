"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed in the session summary.

Criteria 9-11 train real models and take several minutes on one core.
"""
import contextlib
import json
import math
import os
import time
import warnings

import numpy as np
import pytest

from a2f import cli, gradsuite
from a2f import metrics as M
from a2f.dataset import SynthSpec, generate_synthetic
from a2f.ipca import fit_exact, fit_incremental, principal_angles
from a2f.model import ModelConfig, adapt_frequency
from a2f.numerics import Tensor, no_grad, precision
from a2f.training import (
    DataCache,
    GridSpec,
    LossWeights,
    TrainPlan,
    build_model,
    compute_loss,
    finetune_unseen,
    fit_bases,
    mean_predictor_reports,
    run_training,
    stability_grid,
    train,
    validation_loss,
)


@contextlib.contextmanager
def criterion(request, number, title):
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as err:
        msg = str(err).splitlines()[0] if str(err) else type(err).__name__
        lines.append(f"FAIL  criterion {number:>2} {title}: {msg}")
        raise
    lines.append(f"PASS  criterion {number:>2} {title}: {info['detail']} [{time.perf_counter() - t0:.1f}s]")


def _quiet_synth(spec, out):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_synthetic(spec, out)


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    """A2F-mini: 3 conventions, 4 identities each, 40 sequences x 3 s, seed 7."""
    return _quiet_synth(SynthSpec(seed=7), tmp_path_factory.mktemp("a2f_mini"))


@pytest.fixture(scope="module")
def converged(mini):
    """The 100-epoch desk schedule on A2F-mini, with epoch-1 validation loss captured."""
    first = {}
    cache = DataCache(mini, {}, True)

    def on_epoch(epoch, row, model):
        if epoch == 1:
            cache.pca = model.pca
            first["val_loss"] = validation_loss(model, mini, cache, LossWeights())

    t0 = time.perf_counter()
    result = train(mini, ModelConfig(), TrainPlan(total_epochs=100, warmup_epochs=10, seed=0), on_epoch=on_epoch)
    seconds = time.perf_counter() - t0
    final = validation_loss(result.checkpoint.model, mini, cache, LossWeights())
    return result, seconds, first["val_loss"], final


# -- 1 ------------------------------------------------------------------------------------
def test_c01_gradient_suite(request):
    with criterion(request, 1, "gradient suite") as info:
        t0 = time.perf_counter()
        results = gradsuite.run_suite(seeds=20)
        seconds = time.perf_counter() - t0
        worst_layer = max(r.max_rel_error for r in results if r.name != "end_to_end")
        e2e = next(r for r in results if r.name == "end_to_end")
        info["detail"] = f"layers max rel err {worst_layer:.2e} (<1e-4), end-to-end {e2e.max_rel_error:.2e} (<1e-3), {seconds:.1f}s"
        assert {r.name for r in results} >= set(gradsuite.LAYER_KINDS)
        assert all(r.seeds >= 20 for r in results)
        assert all(r.passed for r in results), gradsuite.format_table(results)
        assert seconds < 60


# -- 2 ------------------------------------------------------------------------------------
def test_c02_ipca_oracle(request):
    with criterion(request, 2, "IPCA oracle equivalence") as info:
        t0 = time.perf_counter()
        g = np.random.default_rng(0)
        basis = np.linalg.qr(g.standard_normal((120, 10)))[0].T
        signal = (g.standard_normal((1000, 10)) * np.linspace(3.0, 1.0, 10)) @ basis
        X = signal + 0.01 * signal.std() * g.standard_normal(signal.shape)
        inc = fit_incremental(X[g.permutation(1000)], 10, 64)
        ex = fit_exact(X, 10)
        angle = principal_angles(inc.components, ex.components).max()
        mse_inc = np.mean((X - inc.reconstruct(inc.project(X))) ** 2)
        mse_ex = np.mean((X - ex.reconstruct(ex.project(X))) ** 2)
        seconds = time.perf_counter() - t0
        rel = abs(mse_inc - mse_ex) / mse_ex
        info["detail"] = f"max angle {angle:.3f} deg (<5), recon MSE rel diff {rel:.2e} (<0.05), {seconds:.2f}s"
        assert angle < 5.0 and rel < 0.05 and seconds < 10


# -- 3 ------------------------------------------------------------------------------------
def test_c03_pca_round_trip(request, mini):
    with criterion(request, 3, "PCA round trip bound") as info:
        worst, exact_gap = 0.0, 0.0
        for L in (2, 8):
            bases = fit_bases(mini, L, 64, 0)
            for cid, b in bases.items():
                X = np.concatenate([mini.load_motion(r).frames.astype(np.float64)
                                    for r in mini.records_for("train", cid)])
                full = fit_exact(X, X.shape[1])
                energy = (X.shape[0] - 1) * full.explained_variance[L:].sum()
                res = np.sum((X - b.reconstruct(b.project(X))) ** 2, axis=1)
                assert np.all(res <= (1 + 1e-6) * energy)
                worst = max(worst, res.max() / energy)
                ex = fit_exact(X, L)
                total = np.sum((X - ex.reconstruct(ex.project(X))) ** 2)
                exact_gap = max(exact_gap, abs(total - energy) / energy)
        info["detail"] = f"max frame residual / discarded energy {worst:.2e}; exact-oracle total rel gap {exact_gap:.1e}"
        assert exact_gap < 1e-6


# -- 4 ------------------------------------------------------------------------------------
def test_c04_loss_arithmetic(request):
    with criterion(request, 4, "loss arithmetic") as info:
        with precision(np.float64):
            z = np.zeros((2, 3, 4, 3))
            n0 = np.zeros((2, 3, 5))
            ones_v, ones_n = Tensor(np.ones_like(z)), Tensor(np.ones_like(n0))
            vals = [compute_loss(Tensor(z), z, Tensor(n0), n0, "vertex").item(),
                    compute_loss(ones_v, z, ones_n, n0, "vertex").item(),
                    compute_loss(ones_v, z, ones_n, n0, "blendshape").item()]
            for got, want in zip(vals, (0.0, 1.01, 1.0001)):
                assert abs(got - want) < 1e-9
            g = np.random.default_rng(4)
            pv, pn = Tensor(g.standard_normal(z.shape), requires_grad=True), Tensor(g.standard_normal(n0.shape), requires_grad=True)
            gv, gn = g.standard_normal(z.shape), g.standard_normal(n0.shape)
            err = max(gradsuite._check_case([pv, pn], lambda: compute_loss(pv, gv, pn, gn, k), g)
                      for k in ("vertex", "skeleton"))
        info["detail"] = f"examples {vals}; loss gradient rel err {err:.1e}"
        assert err < 1e-4


# -- 5 ------------------------------------------------------------------------------------
def test_c05_head_routing_and_freeze(request, mini):
    with criterion(request, 5, "head routing and warm-up freeze") as info:
        model = build_model(mini, ModelConfig(), fit_bases(mini, 8, 64, 0), 0)
        start = {n: p.data.copy() for n, p in model.params.items()}
        checked = []
        for cid in sorted(mini.conventions):
            m = model.clone()
            run_training(m, mini, TrainPlan(total_epochs=1, warmup_epochs=0, batch_size=1),
                         train_records=mini.records_for("train", cid)[:1], eval_metrics=False)
            for n, p in m.params.items():
                if n.startswith("head.") and not n.startswith(f"head.{cid}."):
                    assert np.array_equal(p.data, start[n]), n
                    checked.append(n)
            assert not np.array_equal(m.params[f"head.{cid}.weight"].data, start[f"head.{cid}.weight"])

        m = model.clone()
        stages = []

        def frozen_check(epoch, row, mm):
            stages.append(row.stage)
            if row.stage == "warmup":
                for n in mm.encoder_names():
                    assert np.array_equal(mm.params[n].data, start[n]), n

        run_training(m, mini, TrainPlan(total_epochs=3, warmup_epochs=2), on_epoch=frozen_check, eval_metrics=False)
        assert stages == ["warmup", "warmup", "joint"]
        info["detail"] = (f"{len(checked)} foreign-head tensors bitwise unchanged; "
                          f"{len(m.encoder_names())} encoder tensors bitwise frozen for 2 warm-up epochs")


# -- 6 ------------------------------------------------------------------------------------
def test_c06_pie(request, mini, converged):
    with criterion(request, 6, "pivot identity embedding") as info:
        model = converged[0].checkpoint.model
        eff = model.effective_labels(np.zeros(10_000, dtype=np.int64), "train", np.random.default_rng(123))
        frac = float(np.mean(eff == model.config.pivot))
        assert 0.09 <= frac <= 0.11
        audio = (np.random.default_rng(6).standard_normal(40_000) * 0.3).astype(np.float32)
        heads = 0
        with no_grad():
            for cid in model.config.heads:
                out, verts, _ = model.forward(audio[None], [model.config.pivot], cid)
                assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(verts.data))
                heads += 1
        info["detail"] = f"replacement fraction {frac:.4f} in [0.09, 0.11]; pivot outputs finite on {heads} heads"


# -- 7 ------------------------------------------------------------------------------------
def test_c07_frequency_adaptor(request):
    with criterion(request, 7, "frequency adaptor") as info:
        g = np.random.default_rng(7)
        with precision(np.float64):
            x = Tensor(g.standard_normal((2, 100, 6)))
            assert np.array_equal(adapt_frequency(x, 50.0).data, x.data)
            for fps in (25.0, 30.0):
                y = adapt_frequency(x, fps).data
                np.testing.assert_allclose(y[:, 0], x.data[:, 0], atol=1e-12)
                np.testing.assert_allclose(y[:, -1], x.data[:, -1], atol=1e-12)
            for _ in range(50):
                count, fps = int(g.integers(2, 500)), float(g.uniform(5.0, 120.0))
                y = adapt_frequency(Tensor(g.standard_normal((1, count, 2))), fps)
                assert y.shape[1] == int(np.round(count * fps / 50))
        info["detail"] = "identity at 50 Hz, endpoints kept at 25/30 fps, 50 random lengths match round(count*fps/50)"


# -- 8 ------------------------------------------------------------------------------------
def test_c08_metrics(request):
    with criterion(request, 8, "metric unit tests") as info:
        g = np.random.default_rng(8)
        x = g.standard_normal((6, 5, 3))
        lip, up = np.array([0, 1]), np.arange(5)
        assert [M.lve(x, x, lip), M.mve(x, x), M.ufve(x, x, up), M.fdd(x, x, up), M.lvd(x, x, lip)] == [0.0] * 5
        gt = np.zeros((2, 2, 3))
        pred = gt.copy()
        pred[0, 0, 0], pred[1, 1, 1] = 0.002, 0.001
        assert abs(M.lve(pred, gt, [0, 1]) - 2.5e-6) < 1e-12
        gt = np.zeros((3, 4, 3))
        assert abs(M.mve(gt + [0.001, 0, 0], gt) - 1e-3) < 1e-12
        pred = gt.copy()
        pred[:, 0, 2] = 0.002
        assert abs(M.lvd(pred, gt, [0, 1]) - 2e-3) < 1e-12
        n = 100
        t = np.arange(n) * 2 * np.pi / n
        pc, gs = np.zeros((n, 4, 3)), np.zeros((n, 4, 3))
        pc[:, :, 0] = 1e-3 * np.cos(t)[:, None]
        gs[:, :, 0] = 1e-3 * np.sin(t)[:, None]
        ufve, fdd = M.ufve(pc, gs, np.arange(4)), M.fdd(pc, gs, np.arange(4))
        info["detail"] = f"zeros ok, hand examples ok, cos/sin UFVE {ufve:.3e} m, |FDD| {abs(fdd):.1e} m"
        assert ufve > 0 and abs(fdd) < 1e-3 * ufve


# -- 9 ------------------------------------------------------------------------------------
def test_c09_convergence(request, mini, converged):
    with criterion(request, 9, "convergence analog") as info:
        result, seconds, _, _ = converged
        base = mean_predictor_reports(mini)
        ratios = {mini.convention(c).name: result.val_reports[c].lve / base[c].lve for c in sorted(base)}
        info["detail"] = ", ".join(f"{k} {v:.3f}" for k, v in ratios.items()) + f" of baseline LVE; train {seconds:.0f}s"
        assert len(ratios) == 3 and all(r < 0.10 for r in ratios.values())
        assert seconds < 15 * 60


def test_training_validation_loss_drop(converged):
    # training-module convergence property: final val loss below 10% of the epoch-1 value
    _, _, first, final = converged
    print(f"epoch-1 val loss {first:.4e}, final {final:.4e}, ratio {final / first:.3f}")
    assert final < 0.10 * first


# -- 10 -----------------------------------------------------------------------------------
def test_c10_stability_grid(request, tmp_path_factory):
    with criterion(request, 10, "stability grid") as info:
        root = tmp_path_factory.mktemp("grid")
        ds = _quiet_synth(SynthSpec(conventions=["vertex", "blendshape"], seed=7), root / "ds")
        workers = min(4, os.cpu_count() or 1)
        t0 = time.perf_counter()
        rows = stability_grid(ds.root / "manifest.tsv", GridSpec(channels=(64, 128, 256, 512)), ModelConfig(),
                              TrainPlan(total_epochs=30, warmup_epochs=3), workers=workers,
                              out_csv=root / "grid.csv")
        seconds = time.perf_counter() - t0
        lines = (root / "grid.csv").read_text().splitlines()
        info["detail"] = (", ".join(f"ch{r['channels']} {r['status']} ({r['val_lve'] / r['baseline_lve']:.3f})"
                                    for r in rows) + f"; {workers} worker(s), {seconds:.0f}s")
        assert len(lines) == 1 + len(rows) == 5
        assert all(r["status"] == "converged" for r in rows)
        assert seconds < 30 * 60


# -- 11 -----------------------------------------------------------------------------------
def test_c11_transfer(request, mini):
    with criterion(request, 11, "transfer analog") as info:
        pre_lve, scratch_lve = [], []
        for seed in range(3):
            src = train(mini.subset([0, 1]), ModelConfig(), TrainPlan(total_epochs=30, warmup_epochs=3, seed=seed))
            _, rows = finetune_unseen(src.checkpoint, mini.subset([2]), [0.5],
                                      TrainPlan(total_epochs=20, warmup_epochs=2, seed=seed), scratch_control=True)
            arms = {r.arm: r.val_lve for r in rows}
            pre_lve.append(arms["pretrained"])
            scratch_lve.append(arms["scratch"])
        pre, scr = float(np.mean(pre_lve)), float(np.mean(scratch_lve))
        info["detail"] = f"pretrained {pre:.3e} vs scratch {scr:.3e} (ratio {pre / scr:.3f}, need <= 1.05)"
        assert pre <= 1.05 * scr


# -- 12 -----------------------------------------------------------------------------------
def test_c12_determinism(request, mini, tmp_path):
    with criterion(request, 12, "determinism") as info:
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"plan": {"total_epochs": 3, "warmup_epochs": 1, "seed": 12}}))
        for name in ("a", "b"):
            assert cli.main(["train", "--config", str(cfg), "--manifest", str(mini.root / "manifest.tsv"),
                             "--run-dir", str(tmp_path / name)]) == 0
        compared = []
        for f in sorted((tmp_path / "a").iterdir()):
            if f.suffix in (".ckpt", ".csv"):
                assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name
                compared.append(f.name)
        assert {"final.ckpt", "curves.csv"} <= set(compared)
        info["detail"] = "byte-identical " + ", ".join(compared)
