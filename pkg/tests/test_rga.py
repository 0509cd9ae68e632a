import numpy as np
import pytest

from realitygap.adaptation import AdaptationConfig
from realitygap.errors import SchemaInsufficient, ShapeMismatch, SimulatorUnavailable
from realitygap.repository import Repository, RepositoryRecord
from realitygap.rga import (IN_SYNC, OUT_OF_SYNC, WARMING_UP, GapWindow, RgaConfig, RgaMonitor,
                            SyncState, compute_gap, gate_repository_insert, initialize, step,
                            trigger_recalibration, update_sync)
from realitygap.truss import CONTEXT_NAMES, ContextRanges, pratt_truss, sample_contexts, solve_many


def run_detector(gaps, size=50, k=3.0, warmup=10, p=2):
    """Flag times for a gap stream, resetting the streak after each flag the
    way the monitor does when recalibration is disabled."""
    window = GapWindow(gaps.shape[1], size, k, warmup)
    state = SyncState(p)
    flags = []
    for t, g in enumerate(gaps):
        update_sync(g, window, state)
        if state.status == OUT_OF_SYNC:
            flags.append(t)
            state.streak = 0
    return flags


# -- gap and window ----------------------------------------------------------

def test_compute_gap_examples():
    assert compute_gap([1.0, 2.0], [1.0, 2.0]).values.tolist() == [0.0, 0.0]
    np.testing.assert_array_equal(compute_gap([1.0, 2.0], [0.5, 0.0]).values, [0.25, 4.0])
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=12), rng.normal(size=12)
    np.testing.assert_array_equal(compute_gap(a, b, 3).values, [(x - y) ** 2 for x, y in zip(a, b)])
    with pytest.raises(ShapeMismatch):
        compute_gap([1.0], [1.0, 2.0])


def test_window_threshold_example():
    w = GapWindow(1, size=50, k=3.0, warmup_min=2)
    for v in [1, 2, 3, 4, 5]:
        w.push([v])
    assert w.mean[0] == pytest.approx(3.0)
    assert w.std[0] == pytest.approx(np.sqrt(2.5))
    assert w.thresholds()[0] == pytest.approx(7.7434, abs=5e-5)

    for value, expect in ((7.8, True), (7.6, False)):
        win = GapWindow(1, size=50, k=3.0, warmup_min=2)
        for v in [1, 2, 3, 4, 5]:
            win.push([v])
        violation, _ = update_sync([value], win, SyncState(1))
        assert violation is expect


def test_window_stats_exact_after_evictions():
    rng = np.random.default_rng(1)
    w = GapWindow(4, size=17)
    for _ in range(300):
        w.push(rng.exponential(size=4) * rng.choice([1e-3, 1.0, 1e3]))
        buf = w.contents()
        assert len(buf) <= 17
        if len(buf) < 2:
            continue
        np.testing.assert_allclose(w.mean, buf.mean(axis=0), rtol=1e-12, atol=0)
        np.testing.assert_allclose(w.std, buf.std(axis=0, ddof=1), rtol=1e-12, atol=0)


def test_config_invariants():
    with pytest.raises(ValueError):
        RgaConfig(window=5, warmup_min=10)
    with pytest.raises(ValueError):
        RgaConfig(warmup_min=1)
    with pytest.raises(ValueError):
        RgaConfig(k=0)
    with pytest.raises(ValueError):
        RgaConfig(tau_ctx=-0.1)


# -- detector ------------------------------------------------------------------

def test_warmup_never_out_of_sync():
    window, state = GapWindow(3, 50, 3.0, 10), SyncState(1)
    for _ in range(10):
        update_sync([1e6, 1e6, 1e6], window, state)
        assert state.status == WARMING_UP
    update_sync([1e6, 1e6, 1e6], window, state)
    assert state.status == IN_SYNC


def test_persistence_requires_consecutive_violations():
    window, state = GapWindow(1, 50, 3.0, 10), SyncState(2)
    for v in np.linspace(1, 2, 20):
        update_sync([v], window, state)
    update_sync([100.0], window, state)
    assert state.status == IN_SYNC and state.streak == 1
    update_sync([1.5], window, state)
    assert state.streak == 0
    update_sync([1000.0], window, state)
    update_sync([1e5], window, state)
    assert state.status == OUT_OF_SYNC


def test_single_sensor_drift_detected():
    """Only sensor 7 drifts; the other eleven stay stationary."""
    rng = np.random.default_rng(2)
    gaps = rng.normal(5.0, 1.0, size=(400, 12))
    gaps[200:, 7] += 8.0
    flags = run_detector(gaps)
    assert any(200 <= f < 210 for f in flags)


def test_null_false_alarm_rate():
    rng = np.random.default_rng(3)
    gaps = rng.normal(5.0, 1.0, size=(100_000, 12))
    rate = len(run_detector(gaps)) / len(gaps)
    assert rate < 0.005


def test_step_drift_detected_in_95_of_100_trials():
    rng = np.random.default_rng(4)
    hits = 0
    for _ in range(100):
        gaps = rng.normal(5.0, 1.0, size=(300, 12))
        gaps[150:] += 3.0
        hits += any(f >= 150 for f in run_detector(gaps))
    assert hits >= 95


# -- step and recalibration with a trained model ----------------------------------

def test_step_uses_full_solver(trained_model, plan):
    sim = plan.simulator()
    c = sample_contexts(plan.design_ranges, np.random.default_rng(6), 12)
    ys = solve_many(sim, c)
    window, state = GapWindow(sim.d, 50, 3.0, 10), SyncState(2)
    for t, y in enumerate(ys):
        out = step(y, trained_model, sim, window, state, t)
        np.testing.assert_allclose(out.y_sim, solve_many(sim, out.context)[0], rtol=1e-12)
        np.testing.assert_allclose(out.delta, (y - out.y_sim) ** 2)
        assert out.status == (WARMING_UP if t < 10 else IN_SYNC) or out.violation
    assert len(window) == 12


def _labelled_repo(corpus, sim, n=300):
    repo = Repository(sim.ranges, sim.d)
    repo.extend_labeled(corpus.source_c[:n], corpus.source_x[:n])
    return repo


def test_trigger_recalibration_cooldown(trained_model, small_corpus, plan):
    sim = plan.simulator()
    repo = _labelled_repo(small_corpus, sim)
    model = trained_model.copy()
    cfg = RgaConfig(cooldown=100)
    window, state = GapWindow(sim.d), SyncState(2)
    for g in np.ones((20, sim.d)):
        window.push(g)
    recent = small_corpus.target_x[:60]
    acfg = AdaptationConfig(ft_epochs=2)
    rng = np.random.default_rng(0)

    first = trigger_recalibration(state, model, recent, repo, window, sim, cfg, acfg, 700, rng)
    assert not first.suppressed and np.isfinite(first.rg_before) and np.isfinite(first.rg_after)
    assert len(window) == 0 and state.streak == 0 and state.last_trigger == 700

    snap = model.snapshot()
    state.streak = 5
    second = trigger_recalibration(state, model, recent, repo, window, sim, cfg, acfg, 750, rng)
    assert second.suppressed and state.streak == 0 and state.last_trigger == 700
    assert all(np.array_equal(a, b) for a, b in zip(snap, model.snapshot()))

    third = trigger_recalibration(state, model, recent, repo, window, sim, cfg, acfg, 800, rng)
    assert not third.suppressed


def test_monitor_without_recalibration_never_fine_tunes(trained_model, small_corpus, plan, tmp_path):
    sim = plan.simulator()
    repo = _labelled_repo(small_corpus, sim)
    model = trained_model.copy()
    snap = model.snapshot()
    mon = RgaMonitor(model, sim, repo, RgaConfig(), AdaptationConfig(), np.random.default_rng(0),
                     recalibrate=False, log_path=tmp_path / "events.jsonl")
    stream = small_corpus.target_x[:80] * np.r_[np.ones(40), 1.5 * np.ones(40)][:, None]
    for t, y in enumerate(stream):
        mon.process(y, t)
    mon.close()
    assert mon.events == []
    assert all(np.array_equal(a, b) for a, b in zip(snap, model.snapshot()))
    assert len((tmp_path / "events.jsonl").read_text().splitlines()) == 80


# -- initialisation --------------------------------------------------------------

def _schema(sim, **drop):
    s = {"context_variables": CONTEXT_NAMES, "ranges": sim.ranges, "sensor_count": sim.d}
    for key in drop:
        s.pop(key)
    return s


def test_initialize_schema_missing_sensor_count():
    sim = pratt_truss()
    repo = Repository(sim.ranges, sim.d)
    with pytest.raises(SchemaInsufficient):
        initialize(_schema(sim, sensor_count=None), repo, sim, RgaConfig(), np.random.default_rng(0))
    assert repo.count() == 0


def test_initialize_generates_shortfall_then_is_idempotent():
    sim = pratt_truss()
    repo = Repository(sim.ranges, sim.d)
    cfg = RgaConfig(min_design_pairs=5000)
    report = initialize(_schema(sim), repo, sim, cfg, np.random.default_rng(0))
    assert report.generated == 5000 and repo.count() == 5000
    assert [e["query"][:2] for e in report.entries] == ["Q1", "Q2", "Q3", "Q4"]
    assert len(report.corpus.source_x) == 5000

    again = initialize(_schema(sim), repo, sim, cfg, np.random.default_rng(1))
    assert again.generated == 0 and repo.count() == 5000
    np.testing.assert_array_equal(again.corpus.source_x, report.corpus.source_x)


def test_initialize_uses_real_rows_from_repository():
    sim = pratt_truss()
    repo = Repository(sim.ranges, sim.d)
    for t in range(5):
        repo.append(RepositoryRecord(t, "real_measurement", np.full(sim.d, t)))
    report = initialize(_schema(sim), repo, sim, RgaConfig(min_design_pairs=20), np.random.default_rng(0))
    assert report.corpus.target_x.shape == (5, sim.d)


def test_initialize_without_simulator():
    sim = pratt_truss()
    with pytest.raises(SimulatorUnavailable):
        initialize(_schema(sim), Repository(sim.ranges, sim.d), None, RgaConfig(min_design_pairs=10),
                   np.random.default_rng(0))


# -- gate ----------------------------------------------------------------------

def _gate_repo(d=3):
    ranges = ContextRanges(tuple((0.0, 1.0, "-") for _ in CONTEXT_NAMES))
    repo = Repository(ranges, d)
    repo.extend_labeled([[0, 0, 0, 0], [1, 1, 1, 1]], np.zeros((2, d)))
    rng = np.random.default_rng(0)
    for t, g in enumerate(rng.uniform(0.5, 1.5, size=(100, d))):
        repo.record_gap(g, t)
    return repo


def test_gate_example_insert():
    repo = _gate_repo()
    cfg = RgaConfig(tau_ctx=0.3)
    before = repo.gap_stats().count
    dec = gate_repository_insert(np.ones(3), np.full(4, 0.5), np.full(3, 2.0), repo, cfg, t=200)
    assert dec.action == "insert" and dec.distance == pytest.approx(1.0)
    rec = repo.records[dec.record_id]
    assert rec.kind == "inferred_pair" and rec.context == (0.5,) * 4 and rec.sensors == (2.0,) * 3
    assert repo.gap_stats().count == before + 1


def test_gate_rejects_duplicate():
    repo = _gate_repo()
    dec = gate_repository_insert(np.ones(3), np.ones(4), np.zeros(3), repo, RgaConfig(tau_ctx=0.3))
    assert dec.action == "reject_duplicate" and dec.distance == 0.0


@pytest.mark.parametrize("sensor", range(3))
def test_gate_rejects_any_single_sensor_gap(sensor):
    repo = _gate_repo()
    bound = repo.gap_stats().upper_bound(3.0)
    delta = np.ones(3)
    delta[sensor] = bound[sensor] + 1e-9
    n = len(repo)
    dec = gate_repository_insert(delta, np.full(4, 0.5), np.zeros(3), repo, RgaConfig(tau_ctx=0.3))
    assert dec.action == "reject_gap" and len(repo) == n


def test_gate_property_against_brute_force():
    rng = np.random.default_rng(7)
    repo = _gate_repo()
    cfg = RgaConfig(tau_ctx=0.25, k_repo=2.0)
    stored = [np.zeros(4), np.ones(4)]
    history = list(repo.gap_history())
    inserts = 0
    for t in range(400):
        delta = rng.uniform(0.0, 2.5, size=3)
        ctx = rng.random(4)
        hist = np.array(history)
        bound = hist.mean(axis=0) + 2.0 * hist.std(axis=0, ddof=1)
        dist = min(np.linalg.norm(ctx - s) for s in stored)
        expect = ("reject_gap" if np.any(delta > bound)
                  else "reject_duplicate" if dist <= 0.25 else "insert")
        dec = gate_repository_insert(delta, ctx, np.zeros(3), repo, cfg, t=200 + t)
        assert dec.action == expect
        if expect == "insert":
            stored.append(ctx)
            history.append(delta)
            inserts += 1
    assert 0 < inserts <= 400
    assert repo.count() == 2 + inserts
