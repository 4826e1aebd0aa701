"""Acceptance criteria 1-10, one test each.

Every test records a PASS/FAIL line (printed in the terminal summary and
to stdout) before asserting, so a failing criterion still reports its
measured values.
"""

import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import enumerate_marginals, gaussian_product_quadrature, random_spd, textbook_kalman
from ssltrack.array import load_preset
from ssltrack.bench import cached_tables
from ssltrack.cli import main
from ssltrack.evaluation import azimuth_pairs, tracking_metrics
from ssltrack.frontend import FrameSpec, frame_and_window, stft
from ssltrack.geometry import build_octagon, build_sphere_grid
from ssltrack.pipeline import localize_signal, track_potentials, tracker_params_for
from ssltrack.scene import SceneSpec, SourceSpec, Waypoint, render_source, static_source, synthesize_scene
from ssltrack.ssl import Localizer, evaluate_rmse
from ssltrack.sst import (
    TrackedSource,
    TrackerParams,
    log_coherent_likelihood,
    new_track,
    normalize_state,
    posteriors_from_table,
    predict,
    update,
)
from ssltrack.tdoa import calibrate_msw

ELEVATION = float(np.degrees(np.arctan2(1.15, 3.0)))


def record(number, title, ok, detail):
    ACCEPTANCE[number] = (bool(ok), title, detail)
    print(f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    assert ok, f"criterion {number} ({title}) failed: {detail}"


@pytest.fixture(scope="module")
def oma_cached(oma):
    return cached_tables(oma)


def test_criterion_01_grid_cardinality():
    t0 = time.perf_counter()
    ks = [len(build_sphere_grid(level).points) for level in range(5)]
    es = [build_octagon([0.0, 0.0, 1.0], 0.1, d).count for d in range(3)]
    elapsed = time.perf_counter() - t0
    ok = ks == [12, 42, 162, 642, 2562] and es == [9, 25, 81] and elapsed < 1.0
    record(1, "grid cardinality", ok, f"K={ks} E={es} in {elapsed:.3f}s")


def test_criterion_02_gaussian_product_quadrature():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        si = random_spd(rng, 10 ** rng.uniform(-3.5, -1.5))
        sv = random_spd(rng, 10 ** rng.uniform(-3.5, -1.5))
        mi = rng.standard_normal(3)
        mi /= np.linalg.norm(mi)
        mv = mi + rng.normal(0.0, 0.05, 3)
        ref = gaussian_product_quadrature(mi, si, mv, sv)
        got = np.exp(log_coherent_likelihood(mi, si, mv, sv))
        worst = max(worst, abs(got - ref) / ref)
    elapsed = time.perf_counter() - t0
    record(2, "coherent likelihood vs 3D quadrature", worst <= 1e-3 and elapsed < 30,
           f"max relative error {worst:.2e} over 100 cases in {elapsed:.1f}s")


def test_criterion_03_posterior_identities():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst_norm = worst_obs = worst_brute = 0.0
    brute_cases = 0
    for k in range(1000):
        n_obs = int(rng.integers(1, 5))
        n_tracks = int(rng.integers(0, 11))
        table = rng.uniform(-40.0, 5.0, (n_obs, n_tracks + 2))
        dist = posteriors_from_table(table)
        worst_norm = max(worst_norm, abs(dist.posterior.sum() - 1.0))
        per_v = dist.false_given_obs + dist.new_given_obs + dist.track_given_obs.sum(axis=0)
        worst_obs = max(worst_obs, np.abs(per_v - 1.0).max())
    for k in range(300):
        n_obs = int(rng.integers(1, 3))
        n_tracks = int(rng.integers(0, 4))
        prob = rng.uniform(1e-3, 10.0, (n_obs, n_tracks + 2))
        dist = posteriors_from_table(np.log(prob))
        per_obs, observed = enumerate_marginals(prob)
        mine = np.column_stack([dist.false_given_obs, dist.new_given_obs, dist.track_given_obs.T])
        worst_brute = max(worst_brute, np.abs(mine - per_obs).max(),
                          np.abs(dist.track_observed - observed).max(initial=0.0))
        brute_cases += 1
    elapsed = time.perf_counter() - t0
    ok = worst_norm <= 1e-9 and worst_obs <= 1e-9 and worst_brute <= 1e-12 and elapsed < 60
    record(3, "posterior identities", ok,
           f"sum error {worst_norm:.1e}, marginal error {worst_obs:.1e} (1000 tables); "
           f"brute-force gap {worst_brute:.1e} ({brute_cases} tables); {elapsed:.1f}s")


def test_criterion_04_kalman_reductions():
    rng = np.random.default_rng(4)
    params = TrackerParams()
    worst_w1 = worst_w0 = 0.0
    for _ in range(200):
        d = rng.standard_normal(3)
        t = TrackedSource(1, np.concatenate([d / np.linalg.norm(d), 0.1 * rng.standard_normal(3)]),
                          random_spd(rng, 10 ** rng.uniform(-4, -2), 6), rng.choice(["probation", "active"]))
        z = t.direction + rng.normal(0, 0.05, 3)
        got = update(t, z, 1.0, params)
        x, cov = textbook_kalman(t.mean, t.cov, z, params.R(t.status))
        worst_w1 = max(worst_w1, np.abs(got.mean - x).max(), np.abs(got.cov - 0.5 * (cov + cov.T)).max())
        same = update(t, z, 0.0, params)
        worst_w0 = max(worst_w0, np.abs(same.mean - t.mean).max(), np.abs(same.cov - t.cov).max())
    track = new_track(1, [1.0, 0.0, 0.0], params)
    min_eig, asym = np.inf, 0.0
    for step in range(100_000):
        track = normalize_state(predict(track, params))
        if step % 50 == 0:
            track.status = "active" if track.status == "probation" else "probation"
        obs = track.direction + rng.normal(0, 0.05, 3)
        track = update(track, obs, float(rng.uniform()), params)
        asym = max(asym, np.abs(track.cov - track.cov.T).max())
        if step % 100 == 0:
            min_eig = min(min_eig, np.linalg.eigvalsh(track.cov).min())
    min_eig = min(min_eig, np.linalg.eigvalsh(track.cov).min())
    ok = worst_w1 <= 1e-12 and worst_w0 <= 1e-12 and asym == 0.0 and min_eig >= 0.0
    record(4, "Kalman reductions", ok,
           f"w=1 gap {worst_w1:.1e}, w=0 gap {worst_w0:.1e}, 1e5 steps: asymmetry {asym:.0e}, "
           f"min eigenvalue {min_eig:.2e}")


def test_criterion_05_calibration(oma, cma):
    t0 = time.perf_counter()
    parts, ok = [], True
    for name, cfg in (("OMA", oma), ("CMA", cma)):
        for level in (2, 4):
            res = calibrate_msw(cfg, build_sphere_grid(level), octagon_depth=1, threshold=0.3, frame_size=256)
            monotone = bool(np.all(np.diff(res.history) >= -1e-12))
            ok &= res.min_probability >= 0.3 and monotone and res.half_widths.max() <= 128
            parts.append(f"{name} L={level}: min {res.min_probability:.3f}, max width {res.half_widths.max()}, "
                         f"{res.iterations} steps, monotone={monotone}")
    elapsed = time.perf_counter() - t0
    record(5, "MSW calibration", ok and elapsed < 300, "; ".join(parts) + f"; {elapsed:.1f}s")


def test_criterion_06_hierarchical_fidelity(oma, oma_cached):
    t0 = time.perf_counter()
    hsda, single = Localizer(oma_cached, 1, "hsda"), Localizer(oma_cached, 1, "single")
    agree, visited = [], []
    for k in range(36):
        scene = SceneSpec(duration=2.0, sources=[static_source(10.0 * k)], seed=600 + k)
        signal, _ = synthesize_scene(scene, oma)
        for frame in frame_and_window(signal, FrameSpec()):
            spectra = stft(frame)
            a = hsda.scan(hsda.compute_gcc(spectra, oma.pairs))
            b = single.scan(single.compute_gcc(spectra, oma.pairs))
            agree.append(a.index == b.index)
            visited.append(a.visited)
    elapsed = time.perf_counter() - t0
    rate, mean_visited = float(np.mean(agree)), float(np.mean(visited))
    ok = rate >= 0.95 and abs(mean_visited - 320) <= 64 and elapsed < 300
    record(6, "hierarchical fidelity", ok,
           f"agreement {rate:.2%} over {len(agree)} frames, mean visited {mean_visited:.1f} "
           f"(single grid 2562), {elapsed:.1f}s")


def test_criterion_07_localization_accuracy(oma, oma_cached):
    t0 = time.perf_counter()
    renders = {10.0 * k: render_source(static_source(10.0 * k), oma, 1.0, np.random.default_rng(700 + k))
               for k in range(36)}
    locs = {m: Localizer(oma_cached, 4, m) for m in ("hsda", "single")}
    per_perm = {m: [] for m in locs}
    for a, b in azimuth_pairs(36, 126):
        frames = frame_and_window(renders[a] + renders[b], FrameSpec())
        for m, loc in locs.items():
            errs = [evaluate_rmse(loc.process_frame(f, oma.pairs, l), [a, b]) for l, f in enumerate(frames)]
            per_perm[m].append(np.mean(errs))
    elapsed = time.perf_counter() - t0
    h, s = float(np.mean(per_perm["hsda"])), float(np.mean(per_perm["single"]))
    ok = h <= 0.10 and abs(h - s) <= 0.02 and elapsed < 900
    record(7, "two-source localization RMSE", ok,
           f"hsda {h:.4f}, single grid {s:.4f}, gap {abs(h - s):.4f}, worst permutation "
           f"{max(per_perm['hsda']):.4f} over 126 permutations, {elapsed:.1f}s")


def _run_tracking(scene, oma, tables):
    signal, truth = synthesize_scene(scene, oma)
    pots = localize_signal(signal, Localizer(tables, 4, "hsda"), oma.pairs)
    tracked = track_potentials(pots, tracker_params_for(tables))
    return tracking_metrics(tracked, truth), truth


def _moving(a0, a1, duration):
    return SourceSpec(trajectory=[Waypoint(0.0, a0, ELEVATION), Waypoint(duration, a1, ELEVATION)])


def test_criterion_08_tracking_scenarios(oma, oma_cached):
    t0 = time.perf_counter()
    fps = 16000 / 128
    static, _ = _run_tracking(
        SceneSpec(duration=6.0, sources=[static_source(a) for a in (10.0, 100.0, 190.0, 280.0)], seed=81),
        oma, oma_cached)
    latencies = [s.latency_frames for s in static.sources]
    ok_a = (static.confirmed_tracks == 4 and static.identity_switches == 0
            and all(lat is not None and lat <= fps for lat in latencies)
            and all(len(s.matched_ids) == 1 for s in static.sources))

    duration = 8.0
    crossing, _ = _run_tracking(
        SceneSpec(duration=duration, seed=82, sources=[
            _moving(0.0, 90.0, duration), _moving(90.0, 0.0, duration),
            _moving(180.0, 270.0, duration), _moving(270.0, 180.0, duration)]),
        oma, oma_cached)
    ok_b = crossing.separated_switches == 0 and crossing.confirmed_tracks == 4

    params = TrackerParams()
    silent, _ = _run_tracking(
        SceneSpec(duration=5.0, seed=83, sources=[static_source(30.0), static_source(200.0, offset=2.0)]),
        oma, oma_cached)
    delay = silent.sources[1].deletion_delay_frames
    ok_c = delay is not None and delay <= params.n_dead + 10
    elapsed = time.perf_counter() - t0
    record(8, "tracking scenarios", ok_a and ok_b and ok_c and elapsed < 600,
           f"(a) {static.confirmed_tracks} tracks, {static.identity_switches} switches, latency {latencies} frames; "
           f"(b) {crossing.separated_switches} swaps across crossings ({crossing.identity_switches} frame-wise "
           f"flips while sources overlap), {crossing.confirmed_tracks} tracks; "
           f"(c) deleted {delay} frames after silence (limit {params.n_dead + 10}); {elapsed:.1f}s")


def test_criterion_09_performance(tmp_path, oma_cached):
    out = tmp_path / "bench.json"
    assert main(["bench", "--mics", "16", "--frames", "1000", "--out", str(out)]) == 0
    rows = {r["mode"]: r for r in json.loads(out.read_text())["rows"]}
    h, s = rows["hsda"], rows["single"]
    speedup = s["mean_ms"] / h["mean_ms"]
    ok = speedup >= 2.0 and h["mean_ms"] < 16.0 and h["frames"] >= 1000
    record(9, "HSDA speedup and real-time budget", ok,
           f"hsda {h['mean_ms']:.3f} ms/frame (p95 {h['p95_ms']:.3f}), single {s['mean_ms']:.3f} ms/frame, "
           f"speedup {speedup:.2f}x, visited {h['visited']:.0f} vs {s['visited']:.0f}, {h['frames']} frames")


def test_criterion_10_determinism(tmp_path, oma_cached):
    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps({"duration": 2.0, "seed": 10, "sources": [
        {"trajectory": [[0.0, 60.0, ELEVATION]]}, {"trajectory": [[0.0, 220.0, ELEVATION]]}]}))
    assert main(["simulate", str(scene), "--out", str(tmp_path / "s")]) == 0
    digests = []
    for k in range(2):
        pots, trk = tmp_path / f"p{k}.jsonl", tmp_path / f"t{k}.jsonl"
        assert main(["localize", str(tmp_path / "s.wav"), "--out", str(pots)]) == 0
        assert main(["track", str(pots), "--out", str(trk)]) == 0
        digests.append((pots.read_bytes(), trk.read_bytes()))
    same = digests[0] == digests[1]
    n_lines = digests[0][0].count(b"\n")
    record(10, "determinism", same and n_lines > 0,
           f"localize+track records byte-identical across two runs: {same} ({n_lines} frames)")
