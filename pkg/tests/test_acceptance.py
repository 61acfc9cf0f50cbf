"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line; the lines are also
collected into the terminal summary by ``conftest.py``.
"""
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from neubrdf.brdf_data import (MERL_RES, GgxParams, MerlTable, build_dataset, halfdiff_to_io,
                               theta_half_from_index)
from neubrdf.healpix import HealpixGrid, SphereCoord, hemisphere_point_count, \
    hemisphere_point_count_excl_equator
from neubrdf.metrics import render_sphere, ssim
from neubrdf.model import load, save
from neubrdf.sphgrid import compression_ratio, dense_parameter_count, packed_grid_bits, prune
from neubrdf import train as train_mod
from neubrdf.train import ModelConfig, TrainConfig, Trainer, fit, fit_shared, init_model

FIXTURES = Path(__file__).parent / "fixtures"

pytestmark = pytest.mark.slow


def test_1_counting_identities(criterion):
    bad = []
    for nside in (1, 2, 4, 8, 16, 64):
        g = HealpixGrid(nside)
        got = (g.pixel_count, g.vertex_count_full, hemisphere_point_count(nside),
               hemisphere_point_count_excl_equator(nside), np.unique(g.pixel_corner_table).size)
        want = (12 * nside ** 2, 12 * nside ** 2 + 2, 6 * nside ** 2 + 6 * nside + 1,
                6 * nside ** 2 - 2 * nside + 1, 12 * nside ** 2 + 2)
        if got != want:
            bad.append(nside)
    criterion(1, "counting identities", not bad, f"mismatched nside: {bad or 'none'}")


def test_2_equal_area(criterion):
    rng = np.random.default_rng(2024)
    n = 1_000_000
    theta, phi = np.arccos(rng.uniform(-1, 1, n)), rng.uniform(0, 2 * np.pi, n)
    details, ok = [], True
    for nside in (1, 2, 4, 8):
        g = HealpixGrid(nside)
        counts = np.bincount(g.ang2pix(theta, phi), minlength=g.pixel_count)
        expected = n / g.pixel_count
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        dof = g.pixel_count - 1
        z = (chi2 - dof) / math.sqrt(2 * dof)
        ok &= abs(z) < 5
        details.append(f"nside {nside}: z={z:+.2f}")
    criterion(2, "equal-area chi-square within 5 sigma", ok, ", ".join(details))


def test_3_compression_accounting(criterion):
    dense = dense_parameter_count(64, 16)
    ratio = compression_ratio(64, 16, 9)
    ok = dense == 798_752 and abs(ratio - 22.0) <= 0.1
    exact = 16 * dense == 12_780_032 and packed_grid_bits(64, 16, 9) == 580_370
    criterion(3, "compression accounting", ok and exact,
              f"dense params {dense}, ratio {ratio:.4f}")


def test_4_quantization_ablation(criterion):
    train, held = build_dataset(GgxParams(alpha=0.3), count=200_000, seed=2)
    tc = TrainConfig(epochs=20, seed=2)
    mse, mem = {}, {}
    for quantize in (False, True):
        mc = ModelConfig(nside=64, quantize=quantize)
        _, report = fit(train, mc, tc, heldout=held)
        mse[quantize] = report.final_mse
        mem[quantize] = (packed_grid_bits(64, mc.k, mc.bitwidth) if quantize
                         else 16 * dense_parameter_count(64, mc.k))
    ratio = mem[True] / mem[False]
    ok = mse[False] <= mse[True] and ratio < 0.05
    criterion(4, "quantization ablation trend", ok,
              f"fit MSE dense {mse[False]:.5g} <= codebook {mse[True]:.5g}, "
              f"memory ratio {ratio:.4f} < 0.05")


def test_5_fit_quality(criterion):
    pilot = json.loads((FIXTURES / "ggx_fit_pilot.json").read_text())
    oracle = GgxParams(**pilot["oracle"])
    train, held = build_dataset(oracle, count=pilot["samples"], split=pilot["split"],
                                seed=pilot["data_seed"])
    model, report = fit(train, ModelConfig(**pilot["model"]), TrainConfig(**pilot["train"]),
                        heldout=held)
    size = pilot["render_size"]
    score = ssim(render_sphere(oracle, size=size), render_sphere(model, size=size))
    log_mae = report.heldout_log_mae
    tol = pilot["relative_tolerance"]
    meets = log_mae < 0.02 and score > 0.98
    matches = (abs(log_mae - pilot["heldout_log_mae"]) <= tol * pilot["heldout_log_mae"]
               and abs((1 - score) - (1 - pilot["ssim"])) <= tol * (1 - pilot["ssim"]))
    criterion(5, "GGX fit quality", meets and matches,
              f"held-out log MAE {log_mae:.5f} < 0.02, SSIM {score:.5f} > 0.98, "
              f"pilot {pilot['heldout_log_mae']:.5f}/{pilot['ssim']:.5f} within {tol:.0%}")


def synthetic_merl(params: GgxParams) -> MerlTable:
    i, j, k = np.meshgrid(np.arange(90), np.arange(90), np.arange(180), indexing="ij")
    th = theta_half_from_index(i.ravel())
    td = (j.ravel() + 0.5) / 90 * (np.pi / 2)
    pd = (k.ravel() + 0.5) / 180 * np.pi
    wi, wo = halfdiff_to_io(th, td, pd)
    valid = (wi.theta <= np.pi / 2) & (wo.theta <= np.pi / 2)
    rgb = np.zeros((th.size, 3))
    rgb[valid] = params.eval(wi[valid], wo[valid])
    return MerlTable.from_rgb(rgb.T.reshape((3,) + MERL_RES))


def test_6_isotropic_pruning(criterion):
    table = synthetic_merl(GgxParams(alpha=0.3))
    train, _ = build_dataset(table, isotropic=True, seed=0)
    model, _ = fit(train, ModelConfig(nside=64, isotropic=True),
                   TrainConfig(epochs=1, seed=0))
    grid = prune(model.grid, train.wi, train.wo)
    kept = grid.kept_fraction
    criterion(6, "isotropic pruning keeps about a quarter", abs(kept - 0.25) <= 0.10,
              f"kept {100 * kept:.2f}% of {grid.size} positions, target 25 +- 10 points")


def _loss_with_pattern(trainer, batch, tau):
    """Soft-path loss plus the sign pattern of every ReLU and |r| kink it passed."""
    seen = []
    forward, loss_and_grad = train_mod._mlp.forward, train_mod._loss_and_grad

    def spy_forward(x, params, return_cache=False):
        y, cache = forward(x, params, return_cache=True)
        seen.extend([cache[1] > 0, cache[3] > 0])
        return (y, cache) if return_cache else y

    def spy_loss(y, target, kind, transform):
        value, dy = loss_and_grad(y, target, kind, transform)
        seen.append(dy > 0)
        return value, dy

    train_mod._mlp.forward, train_mod._loss_and_grad = spy_forward, spy_loss
    try:
        value = trainer.loss_and_grads(batch, tau, soft=True)[0]
    finally:
        train_mod._mlp.forward, train_mod._loss_and_grad = forward, loss_and_grad
    return value, seen


def _central_difference(trainer, batch, tau, name, idx, h):
    """Central difference, or ``None`` when a kink lies between the two probes."""
    arr = trainer.params[name]
    old = arr[idx]
    arr[idx] = old + h
    up, pat_up = _loss_with_pattern(trainer, batch, tau)
    arr[idx] = old - h
    down, pat_down = _loss_with_pattern(trainer, batch, tau)
    arr[idx] = old
    if any(not np.array_equal(a, b) for a, b in zip(pat_up, pat_down)):
        return None
    return (up - down) / (2 * h)


def test_7_gradient_check(criterion):
    rng = np.random.default_rng(7)
    h = 1e-4
    worst, checked, kinks = 0.0, 0, 0
    for _ in range(100):
        quantize = bool(rng.random() < 0.8)
        texture = (2, 3, int(rng.integers(1, 3))) if rng.random() < 0.3 else None
        mc = ModelConfig(nside=int(rng.choice([1, 2, 4])), k=int(rng.integers(1, 5)),
                         bitwidth=int(rng.integers(1, 5)), quantize=quantize,
                         isotropic=bool(rng.random() < 0.3), texture_shape=texture,
                         output_transform=str(rng.choice(["log1p", "none"])))
        loss = str(rng.choice(["log_l1", "log_l2", "l1", "l2"]))
        seed = int(rng.integers(1 << 30))
        model = init_model(mc, seed, dtype="float64")
        trainer = Trainer([model], TrainConfig(loss=loss, dtype="float64"))
        p = trainer.params
        if quantize:
            p["codebook"][:] = rng.normal(size=p["codebook"].shape)
            p["logits"][:] = rng.normal(size=p["logits"].shape)
        else:
            p["features"][:] = rng.normal(size=p["features"].shape)
        if mc.output_transform == "none":
            # keep predictions inside the log domain
            p["b3"][:] = 1.0
        data, _ = build_dataset(GgxParams(alpha=float(rng.uniform(0.2, 0.8))), count=12,
                                split=1.0, seed=seed)
        if texture:
            data.uv = rng.uniform(0, 1, (len(data), 2))
        batch = trainer.prepare([data])
        tau = float(rng.uniform(0.5, 1.0))
        _, grads = trainer.loss_and_grads(batch, tau, soft=True)
        for name in trainer.trainable:
            g = grads[name]
            dense = np.zeros_like(p[name])
            if isinstance(g, tuple):
                dense[g[0]] = g[1]
            else:
                dense = g
            for idx in map(tuple, rng.integers(0, p[name].shape, size=(2, p[name].ndim))):
                num = _central_difference(trainer, batch, tau, name, idx, h)
                if num is None:
                    kinks += 1
                    continue
                err = abs(num - dense[idx]) / max(abs(num), abs(dense[idx]), 1e-4)
                worst = max(worst, err)
                checked += 1
    criterion(7, "soft-path gradients match finite differences", worst < 1e-4,
              f"max relative error {worst:.2e} over {checked} coordinates in 100 "
              f"configurations, {kinks} kink crossings skipped")


def test_8_shared_codebook_trend(criterion):
    colours = [(0.6, 0.2, 0.1), (0.1, 0.5, 0.2), (0.2, 0.2, 0.6), (0.5, 0.5, 0.1)]
    data = [build_dataset(GgxParams(alpha=0.5, albedo=c, f0=tuple(0.8 * np.array(c))),
                          count=20_000, split=1.0, seed=j)[0] for j, c in enumerate(colours)]
    mc = ModelConfig(nside=8, k=4, bitwidth=3)
    tc = TrainConfig(epochs=40, batch_size=4096, seed=0)
    mean_mse = {}
    for m in (1, 2, 4):
        errs = []
        for start in range(0, 4, m):
            cluster = fit_shared(data[start:start + m], mc, tc)
            errs += [r.final_mse for r in cluster.reports]
        mean_mse[m] = float(np.mean(errs))
    ok = mean_mse[1] <= mean_mse[2] <= mean_mse[4]
    criterion(8, "shared-codebook MSE non-decreasing in cluster size", ok,
              ", ".join(f"m={m}: {v:.5g}" for m, v in mean_mse.items()))


def test_9_totality_determinism(criterion, tmp_path):
    tol = json.loads((FIXTURES / "fp16_roundtrip.json").read_text())["log_abs_tolerance"]
    train, _ = build_dataset(GgxParams(alpha=0.3), count=100_000, seed=3)
    model, _ = fit(train, ModelConfig(nside=16), TrainConfig(epochs=10, seed=3))
    # prune to a narrow cone so fallback and zero-feature paths are exercised too
    cone = train.wi.theta < 0.6
    pruned = model.copy()
    pruned.grid = prune(model.grid, train.wi[cone], train.wo[cone])
    rng = np.random.default_rng(9)
    n = 1_000_000
    ti, to = np.arccos(rng.uniform(0, 1, (2, n)))
    pi, po = rng.uniform(0, 2 * np.pi, (2, n))
    # poles, the equator, just above it, and phi at and just below 2 pi
    edges = np.array([0.0, np.pi / 2, np.pi / 2 - 1e-15, 1e-300])
    ti[:4], to[4:8] = edges, edges
    pi[8:12] = [0.0, 2 * np.pi, 2 * np.pi - 1e-15, np.pi]
    po[12:16] = [0.0, 2 * np.pi, 2 * np.pi - 1e-15, np.pi]
    wi, wo = SphereCoord(ti, pi), SphereCoord(to, po)
    ok, details = True, []
    for label, m in (("dense", model), ("pruned", pruned)):
        a, b = m.eval(wi, wo), m.eval(wi, wo)
        back = load(save(m, tmp_path / f"{label}.nbrd"))
        c = back.eval(wi, wo)
        drift = float(np.max(np.abs(np.log1p(a) - np.log1p(c))))
        finite = bool(np.all(np.isfinite(a)) and np.all(a >= 0))
        ok &= finite and np.array_equal(a, b) and drift <= tol
        details.append(f"{label}: finite {finite}, repeatable {np.array_equal(a, b)}, "
                       f"fp16 log drift {drift:.2e} <= {tol:g}")
    criterion(9, "totality, determinism, fp16 round trip", ok, "; ".join(details))


def test_10_benchmark_shape(criterion, tmp_path):
    model = init_model(ModelConfig(), 0)
    model.grid.drop_soft_logits()
    path = save(model, tmp_path / "default.nbrd")
    out = subprocess.run([sys.executable, "-m", "neubrdf", "bench", str(path), "--repeats", "5"],
                         capture_output=True, text=True, check=True).stdout
    ms = {}
    for line in out.splitlines():
        parts = line.split()
        if parts and parts[0] in ("ang2pix", "gather", "mlp", "total"):
            ms[parts[0]] = float(parts[1])
        if parts and parts[0] == "ang2pix_lookups_per_s":
            lookups = float(parts[1])
        if parts and parts[0] == "queries":
            queries = int(parts[1])
    per_query = queries / (ms["ang2pix"] / 1e3)
    ok = ms["mlp"] > ms["gather"] > ms["ang2pix"] and lookups >= 1e7
    criterion(10, "benchmark breakdown", ok,
              f"mlp {ms['mlp']:.0f} ms > gather {ms['gather']:.0f} ms > ang2pix "
              f"{ms['ang2pix']:.0f} ms; ang2pix {lookups:.3g} lookups/s "
              f"({per_query:.3g} bidirectional queries/s)")
