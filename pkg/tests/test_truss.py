import numpy as np
import pytest

from realitygap.errors import ContextOutOfRange, ShapeMismatch, SingularStiffness
from realitygap.truss import (ContextRanges, ContextVector, NoiseSpec, TrussModel, apply_noise,
                              measure_real, pratt_truss, read_sensor_csv, sample_context,
                              sample_contexts, solve, solve_displacements, solve_many,
                              truss_from_config, two_bar_truss, write_sensor_csv)

NOMINAL = np.array([100.0, 0.5, 1.0, 1.0])


def virtual_work_oracle(model: TrussModel, context):
    """Sensor displacements (mm) of a statically determinate truss by the
    unit-load method: member forces from joint equilibrium only, then
    delta = sum(N * n * L / (E A))."""
    load, pos, thermal, support = context
    nodes = model.nodes
    n_nodes = len(nodes)
    reactions = [(nd, ax) for nd, fx, fy, _ in model.supports for ax, on in ((0, fx), (1, fy)) if on]
    support_nodes = {s[0] for s in model.supports if s[3]}
    m = len(model.members)
    eq = np.zeros((2 * n_nodes, m + len(reactions)))
    flex = np.zeros(m)
    for k, (i, j, area, modulus) in enumerate(model.members):
        d = nodes[j] - nodes[i]
        length = np.hypot(*d)
        c, s = d / length
        # tension positive: pulls node i towards j
        eq[2 * i, k] += c
        eq[2 * i + 1, k] += s
        eq[2 * j, k] -= c
        eq[2 * j + 1, k] -= s
        e = modulus * thermal * (support if (i in support_nodes or j in support_nodes) else 1.0)
        flex[k] = length / (e * area)
    for r, (nd, ax) in enumerate(reactions):
        eq[2 * nd + ax, m + r] = 1.0
    assert eq.shape[0] == eq.shape[1], "oracle needs a statically determinate truss"

    # external load: split between the bracketing chord nodes
    f = np.zeros(2 * n_nodes)
    xs = nodes[model.load_chord, 0]
    frac = (xs - xs[0]) / (xs[-1] - xs[0])
    k = min(max(np.searchsorted(frac, pos, side="right") - 1, 0), len(frac) - 2)
    w = (pos - frac[k]) / (frac[k + 1] - frac[k])
    f[2 * model.load_chord[k] + 1] -= (1 - w) * load * 1e3
    f[2 * model.load_chord[k + 1] + 1] -= w * load * 1e3
    forces = np.linalg.solve(eq, -f)[:m]

    out = []
    for nd, ax in model.sensor_nodes:
        unit = np.zeros(2 * n_nodes)
        unit[2 * nd + ax] = 1.0
        virtual = np.linalg.solve(eq, -unit)[:m]
        out.append(1e3 * np.sum(forces * virtual * flex))
    return np.array(out)


def test_two_bar_matches_closed_form():
    model = two_bar_truss()
    got = solve(model, NOMINAL).values[0]
    # v = P L / (2 E A sin^2 theta), downward
    expected = -100e3 * 5.0 / (2 * 200e9 * 0.005 * np.sin(np.pi / 4) ** 2) * 1e3
    assert expected == pytest.approx(-0.5, rel=1e-12)
    assert got == pytest.approx(expected, rel=1e-9)


@pytest.mark.parametrize("context", [
    NOMINAL,
    [60.0, 0.3, 0.9, 0.7],
    [120.0, 0.77, 0.8, 0.5],
    [20.0, 0.2, 1.0, 0.95],
])
def test_pratt_matches_virtual_work(context):
    model = pratt_truss()
    np.testing.assert_allclose(solve(model, context).values, virtual_work_oracle(model, context),
                               rtol=1e-9, atol=1e-12)


def test_pratt_all_vertical_layout_matches_oracle():
    model = pratt_truss(n_panels=22, sensors="all_vertical")
    assert model.d == 42
    np.testing.assert_allclose(solve(model, NOMINAL).values, virtual_work_oracle(model, NOMINAL),
                               rtol=1e-9)


def test_default_layout_has_twelve_channels():
    model = pratt_truss()
    assert model.d == 12
    assert len(model.members) == 2 * len(model.nodes) - 3


def test_zero_load_gives_zero_readings():
    ranges = ContextRanges(((0.0, 120.0, "kN"), (0.2, 0.8, "-"), (0.8, 1.0, "-"), (0.5, 1.0, "-")))
    model = pratt_truss(ranges=ranges)
    assert np.all(solve(model, [0.0, 0.4, 0.9, 0.8]).values == 0.0)


def test_load_linearity():
    model = pratt_truss()
    for c in ([50.0, 0.35, 0.85, 0.6], [30.0, 0.62, 1.0, 1.0]):
        one = solve(model, c).values
        two = solve(model, [2 * c[0]] + c[1:]).values
        np.testing.assert_allclose(two, 2 * one, rtol=1e-10)


def test_symmetry_at_midspan():
    model = pratt_truss()
    y = solve(model, [80.0, 0.5, 0.9, 0.7]).values
    lower, upper = y[:7], y[7:]
    np.testing.assert_allclose(lower, lower[::-1], rtol=1e-9)
    np.testing.assert_allclose(upper, upper[::-1], rtol=1e-9)


def test_mirror_positions_give_mirrored_readings():
    model = pratt_truss()
    a = solve(model, [80.0, 0.3, 0.9, 0.7]).values
    b = solve(model, [80.0, 0.7, 0.9, 0.7]).values
    np.testing.assert_allclose(a[:7], b[:7][::-1], rtol=1e-9)
    np.testing.assert_allclose(a[7:], b[7:][::-1], rtol=1e-9)


def test_monotonic_softening_with_thermal_factor():
    model = pratt_truss()
    peaks = [np.abs(solve(model, [100.0, 0.4, th, 0.8]).values).max() for th in np.linspace(1.0, 0.8, 6)]
    assert np.all(np.diff(peaks) > 0)


def test_support_factor_softens():
    model = pratt_truss()
    stiff = solve(model, [100.0, 0.5, 1.0, 1.0]).values
    soft = solve(model, [100.0, 0.5, 1.0, 0.7]).values
    assert np.all(soft < stiff)  # readings are signed, positive up


def test_load_at_node_matches_nearest_node_application():
    model = pratt_truss()
    u = solve_displacements(model, [100.0, 0.375, 1.0, 1.0])  # lower node 3 of 8
    f = np.zeros(model.ndof)
    f[2 * 3 + 1] = -100e3
    free = model._free
    k = model.stiffness()[np.ix_(free, free)]
    np.testing.assert_allclose(u[free], np.linalg.solve(k, f[free]), rtol=1e-10)


def test_reduced_stiffness_is_spd_and_symmetric():
    model = pratt_truss()
    k = model.stiffness(0.9, 0.6)[np.ix_(model._free, model._free)]
    np.testing.assert_allclose(k, k.T)
    assert np.linalg.eigvalsh(k).min() > 0


def test_mechanism_raises_singular_stiffness():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    members = [(0, 1, 0.005, 200e9), (1, 2, 0.005, 200e9)]
    model = TrussModel(nodes, members, [(0, True, True, True), (2, False, True, True)], [(1, 1)], [1])
    with pytest.raises(SingularStiffness):
        solve(model, NOMINAL)


def test_out_of_range_context_raises():
    model = pratt_truss()
    with pytest.raises(ContextOutOfRange):
        solve(model, [150.0, 0.5, 1.0, 1.0])
    with pytest.raises(ShapeMismatch):
        solve(model, [100.0, 0.5, 1.0])


def test_invalid_models_rejected():
    with pytest.raises(ValueError):
        TrussModel(np.zeros((2, 2)), [(0, 1, 1.0, 1.0)], [], [(0, 1)], [0])
    with pytest.raises(ValueError):
        TrussModel(np.array([[0.0, 0.0], [1.0, 0.0]]), [(0, 1, 1.0, 1.0)], [], [(5, 1)], [0])
    with pytest.raises(ValueError):
        TrussModel(np.array([[0.0, 0.0], [1.0, 0.0]]), [(0, 1, 1.0, 1.0)], [], [], [0])


def test_measure_real_noiseless_is_bit_exact():
    model = pratt_truss()
    clean = solve(model, NOMINAL)
    real = measure_real(model, NOMINAL, NoiseSpec(0.0, 1.0, 0.0), t=3)
    assert np.array_equal(real.values, clean.values)
    assert real.domain_tag == "real" and clean.domain_tag == "simulated"


def test_measure_real_affine_arithmetic():
    out = apply_noise(np.array([1.0]), NoiseSpec(0.0, 1.02, 0.1), 0)
    assert out[0] == pytest.approx(1.12, abs=1e-12)


def test_measure_real_deterministic_per_seed_and_t():
    model = pratt_truss()
    noise = NoiseSpec(rng_seed=11)
    a = measure_real(model, NOMINAL, noise, 5).values
    b = measure_real(model, NOMINAL, noise, 5).values
    c = measure_real(model, NOMINAL, noise, 6).values
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sample_context_statistics():
    ranges = ContextRanges()
    rng = np.random.default_rng(0)
    s = sample_contexts(ranges, rng, 10_000)
    assert np.all(s >= ranges.lows) and np.all(s <= ranges.highs)
    se = ranges.widths / np.sqrt(12 * 10_000)
    assert np.all(np.abs(s.mean(axis=0) - (ranges.lows + ranges.highs) / 2) < 3 * se)
    one = sample_context(ranges, np.random.default_rng(4))
    assert one == sample_context(ranges, np.random.default_rng(4))


def test_degenerate_range_sampling():
    eps = 1e-9
    ranges = ContextRanges(((50.0, 50.0 + eps, "kN"), (0.2, 0.8, "-"), (0.8, 1.0, "-"), (0.5, 1.0, "-")))
    s = sample_contexts(ranges, np.random.default_rng(1), 100)
    assert np.all(np.abs(s[:, 0] - 50.0) <= eps)


def test_ranges_normalize_roundtrip_and_validation():
    ranges = ContextRanges()
    c = np.array([70.0, 0.5, 0.9, 0.75])
    np.testing.assert_allclose(ranges.normalize(c), [0.5, 0.5, 0.5, 0.5])
    np.testing.assert_allclose(ranges.denormalize(ranges.normalize(c)), c)
    clipped, mask = ranges.clip([130.0, 0.5, 0.9, 0.4])
    assert clipped[0] == 120.0 and clipped[3] == 0.5 and mask.tolist() == [True, False, False, True]
    with pytest.raises(ValueError):
        ContextRanges(((1.0, 1.0, "kN"), (0, 1, "-"), (0, 1, "-"), (0, 1, "-")))
    assert ContextRanges.from_mapping(ranges.to_mapping()) == ranges


def test_context_vector_roundtrip():
    cv = ContextVector.from_array(NOMINAL)
    assert np.array_equal(cv.as_array(), NOMINAL)
    assert np.array_equal(solve(pratt_truss(), cv).values, solve(pratt_truss(), NOMINAL).values)


def test_solve_many_matches_loop():
    model = pratt_truss()
    cs = sample_contexts(model.ranges, np.random.default_rng(2), 5)
    np.testing.assert_array_equal(solve_many(model, cs), np.stack([solve(model, c).values for c in cs]))


def test_config_and_csv_roundtrip(tmp_path):
    model = truss_from_config({"n_panels": 10, "sensors": "all_vertical"})
    assert model.d == 18
    vectors = [measure_real(model, NOMINAL, NoiseSpec(), t) for t in range(3)]
    path = tmp_path / "s.csv"
    write_sensor_csv(path, vectors)
    back = read_sensor_csv(path)
    assert [v.timestamp for v in back] == [0, 1, 2]
    for a, b in zip(vectors, back):
        assert np.array_equal(a.values, b.values) and b.domain_tag == "real"
