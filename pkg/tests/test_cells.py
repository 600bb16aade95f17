"""Cell-family forward semantics against an independent loop transcription."""

import math

import numpy as np
import pytest

from taurnn.cells import (
    CellKind,
    CellParams,
    CellVariant,
    HiddenHistory,
    dead_param_groups,
    effective_param_count,
    init_params,
    load_params,
    param_shapes,
    run_batch,
    run_sequence,
    save_params,
    step_simple_delay_gru,
    step_taugru,
)
from taurnn.rng import SplitMix64


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def reference_run(params, variant, xs):
    """Scalar-loop transcription of the update rule; the engine's oracle.

    Keeps the whole state history in a plain list; delayed reads at or before
    step 0 return zeros (the zero initial function).
    """
    d = params.d
    T = xs.shape[0]
    hs = [np.zeros(d)]
    for n in range(T):
        x = xs[n]
        h = hs[-1]
        idx = n - variant.delay_m
        hd = hs[idx] if idx >= 0 else np.zeros(d)
        if variant.kind == CellKind.SIMPLE_DELAY_GRU:
            cand = np.array([
                math.tanh(params.W1[i] @ h + params.W2[i] @ hd
                          + params.U1[i] @ x + params.b1[i])
                for i in range(d)])
            g = np.array([_sigmoid(params.W3[i] @ h + params.U3[i] @ x
                                   + params.b3[i]) for i in range(d)])
            hs.append((1.0 - g) * h + g * cand)
            continue
        u = np.array([math.tanh(params.W1[i] @ h + params.U1[i] @ x
                                + params.b1[i]) for i in range(d)])
        z = np.array([math.tanh(params.W2[i] @ hd + params.U2[i] @ x
                                + params.b2[i]) for i in range(d)])
        g = np.array([_sigmoid(params.W3[i] @ h + params.U3[i] @ x
                               + params.b3[i]) for i in range(d)])
        if variant.use_weighting_a:
            a = np.array([_sigmoid(params.W4[i] @ h + params.U4[i] @ x
                                   + params.b4[i]) for i in range(d)])
            weighted = a * z
        else:
            weighted = z
        cand = variant.beta * u + variant.alpha * weighted
        hs.append((1.0 - g) * h + g * cand)
    hs = np.array(hs[1:])
    ys = hs @ params.V.T + params.c
    return hs, ys


def _random_inputs(seed, T, p):
    rng = SplitMix64(seed)
    xs = np.empty((T, p))
    rng.fill(xs, -1.5, 1.5)
    return xs


VARIANTS = [
    ("full", dict(kind=CellKind.TAU_GRU)),
    ("alpha0", dict(kind=CellKind.TAU_GRU, alpha=0.0)),
    ("beta0", dict(kind=CellKind.TAU_GRU, beta=0.0)),
    ("halfmix", dict(kind=CellKind.TAU_GRU, alpha=0.5, beta=0.25)),
    ("noweight", dict(kind=CellKind.TAU_GRU, use_weighting_a=False)),
    ("simple", dict(kind=CellKind.SIMPLE_DELAY_GRU)),
]


@pytest.mark.parametrize("name,kwargs", VARIANTS)
@pytest.mark.parametrize("m", [0, 1, 4])
def test_engine_matches_loop_transcription(name, kwargs, m):
    variant = CellVariant(delay_m=m, **kwargs)
    params = init_params(5, 3, 2, seed=900 + m)
    xs = _random_inputs(77 + m, T=12, p=3)
    hs, ys, _ = run_sequence(params, variant, xs)
    want_h, want_y = reference_run(params, variant, xs)
    assert np.max(np.abs(hs - want_h)) < 1e-14
    assert np.max(np.abs(ys - want_y)) < 1e-14


def test_batch_engine_matches_per_sequence_runs():
    variant = CellVariant(kind=CellKind.TAU_GRU, delay_m=3)
    params = init_params(6, 2, 1, seed=4)
    B, T = 5, 15
    rng = SplitMix64(21)
    xs = np.empty((T, 2, B))
    rng.fill(xs, -1.0, 1.0)
    states, ys, _ = run_batch(params, variant, xs)
    assert states.shape == (T + 1, 6, B)
    assert np.all(states[0] == 0.0)
    for b in range(B):
        hs_b, ys_b, _ = run_sequence(params, variant, xs[:, :, b])
        assert np.max(np.abs(states[1:, :, b] - hs_b)) < 1e-13
        assert np.max(np.abs(ys[:, :, b] - ys_b)) < 1e-13


def test_step_functions_match_engine():
    variant = CellVariant(kind=CellKind.TAU_GRU, delay_m=2)
    params = init_params(4, 2, 1, seed=10)
    xs = _random_inputs(30, T=6, p=2)
    hist = HiddenHistory(variant.delay_m, 4)
    stepped = []
    for n in range(6):
        act = step_taugru(params, variant, xs[n], hist)
        stepped.append(act.h_out)
    hs, _, _ = run_sequence(params, variant, xs)
    assert np.max(np.abs(np.array(stepped) - hs)) < 1e-14

    variant = CellVariant(kind=CellKind.SIMPLE_DELAY_GRU, delay_m=2)
    hist = HiddenHistory(variant.delay_m, 4)
    stepped = [step_simple_delay_gru(params, variant, xs[n], hist).h_out
               for n in range(6)]
    hs, _, _ = run_sequence(params, variant, xs)
    assert np.max(np.abs(np.array(stepped) - hs)) < 1e-14


def test_step_kind_mismatch_rejected():
    params = init_params(3, 1, 1, seed=0)
    hist = HiddenHistory(1, 3)
    with pytest.raises(ValueError):
        step_taugru(params, CellVariant(kind=CellKind.SIMPLE_DELAY_GRU),
                    np.zeros(1), hist)
    with pytest.raises(ValueError):
        step_simple_delay_gru(params, CellVariant(kind=CellKind.TAU_GRU),
                              np.zeros(1), hist)


class TestHiddenHistory:
    def test_zero_initial_function(self):
        hist = HiddenHistory(3, 2)
        for j in range(4):
            assert np.all(hist.lookup(j) == 0.0)

    def test_lookup_tracks_pushes(self):
        hist = HiddenHistory(2, 1)
        hist.push(np.array([1.0]))
        hist.push(np.array([2.0]))
        hist.push(np.array([3.0]))
        assert hist.lookup(0)[0] == 3.0
        assert hist.lookup(1)[0] == 2.0
        assert hist.lookup(2)[0] == 1.0
        hist.push(np.array([4.0]))
        assert hist.lookup(2)[0] == 2.0

    def test_reaching_before_step_zero_returns_zeros(self):
        hist = HiddenHistory(5, 2)
        hist.push(np.ones(2))
        assert np.all(hist.lookup(1) == 0.0)   # h_0
        assert np.all(hist.lookup(4) == 0.0)   # before the start

    def test_depth_out_of_range(self):
        hist = HiddenHistory(2, 1)
        with pytest.raises(ValueError):
            hist.lookup(3)
        with pytest.raises(ValueError):
            hist.lookup(-1)

    def test_explicit_initial_state(self):
        hist = HiddenHistory(1, 2, initial_state=np.array([0.5, -0.5]))
        assert np.array_equal(hist.lookup(0), [0.5, -0.5])

    def test_negative_delay_rejected(self):
        with pytest.raises(ValueError):
            HiddenHistory(-1, 2)


def test_delay_zero_reads_current_state():
    variant = CellVariant(kind=CellKind.TAU_GRU, delay_m=0)
    params = init_params(3, 1, 1, seed=3)
    xs = _random_inputs(8, T=5, p=1)
    _, _, tape = run_sequence(params, variant, xs)
    for n in range(5):
        assert np.array_equal(tape.h_delay_at(n), tape.states[n])


def test_delay_zero_with_tied_weights_makes_z_equal_u():
    params = init_params(4, 2, 1, seed=6)
    for name in ("W", "U", "b"):
        getattr(params, name + "2")[...] = getattr(params, name + "1")
    variant = CellVariant(kind=CellKind.TAU_GRU, delay_m=0)
    xs = _random_inputs(9, T=7, p=2)
    _, _, tape = run_sequence(params, variant, xs)
    assert np.array_equal(tape.z, tape.u)


def test_gate_ranges_and_state_bound():
    variant = CellVariant(kind=CellKind.TAU_GRU, delay_m=5)
    params = init_params(6, 1, 1, seed=12)
    for _, arr in params.arrays():
        arr *= 3.0  # push well past the init scale
    xs = _random_inputs(44, T=200, p=1)
    hs, _, tape = run_sequence(params, variant, xs)
    assert np.all((tape.g > 0.0) & (tape.g < 1.0))
    assert np.all((tape.a > 0.0) & (tape.a < 1.0))
    assert np.all(np.abs(tape.u) < 1.0)
    assert np.all(np.abs(tape.z) < 1.0)
    assert np.max(np.abs(hs)) <= 2.0


@pytest.mark.parametrize("dead_setup,mutate", [
    (dict(kind=CellKind.TAU_GRU, alpha=0.0),
     ("W2", "U2", "b2", "W4", "U4", "b4")),
    (dict(kind=CellKind.TAU_GRU, beta=0.0), ("W1", "U1", "b1")),
    (dict(kind=CellKind.TAU_GRU, use_weighting_a=False), ("W4", "U4", "b4")),
    (dict(kind=CellKind.SIMPLE_DELAY_GRU), ("W4", "U4", "b4", "U2", "b2")),
])
def test_dead_groups_cannot_influence_outputs(dead_setup, mutate):
    variant = CellVariant(delay_m=2, **dead_setup)
    assert set(mutate) <= dead_param_groups(variant)
    params = init_params(4, 2, 2, seed=31)
    xs = _random_inputs(65, T=9, p=2)
    hs0, ys0, _ = run_sequence(params, variant, xs)
    scrambled = params.copy()
    for name in mutate:
        getattr(scrambled, name)[...] = 17.5
    hs1, ys1, _ = run_sequence(scrambled, variant, xs)
    assert np.array_equal(hs0, hs1)
    assert np.array_equal(ys0, ys1)


def test_live_groups_do_influence_outputs():
    variant = CellVariant(kind=CellKind.TAU_GRU, delay_m=2)
    params = init_params(4, 2, 2, seed=31)
    xs = _random_inputs(65, T=9, p=2)
    _, ys0, _ = run_sequence(params, variant, xs)
    for name in ("W1", "W2", "W3", "W4", "V"):
        bumped = params.copy()
        getattr(bumped, name)[...] += 0.3
        _, ys1, _ = run_sequence(bumped, variant, xs)
        assert not np.array_equal(ys0, ys1), name


def test_param_counts_at_paper_sizes():
    # 4d^2 + 4dp + 4d + qd + q at d=16, p=q=1
    params = init_params(16, 1, 1, seed=1)
    assert params.param_count() == 1169
    full = CellVariant(kind=CellKind.TAU_GRU, delay_m=10)
    assert effective_param_count(params, full) == 1169
    simple = CellVariant(kind=CellKind.SIMPLE_DELAY_GRU, delay_m=10)
    assert effective_param_count(params, simple) == 849
    alpha0 = CellVariant(kind=CellKind.TAU_GRU, alpha=0.0, delay_m=10)
    assert effective_param_count(params, alpha0) == 593
    beta0 = CellVariant(kind=CellKind.TAU_GRU, beta=0.0, delay_m=10)
    assert effective_param_count(params, beta0) == 881


def test_param_shapes_table():
    shapes = param_shapes(4, 2, 3)
    assert shapes["W1"] == (4, 4)
    assert shapes["U2"] == (4, 2)
    assert shapes["b3"] == (4,)
    assert shapes["V"] == (3, 4)
    assert shapes["c"] == (3,)
    assert sum(int(np.prod(s)) for s in shapes.values()) == \
        4 * 16 + 4 * 8 + 4 * 4 + 12 + 3


def test_init_is_deterministic_and_fan_in_scaled():
    a = init_params(8, 3, 2, seed=42)
    b = init_params(8, 3, 2, seed=42)
    for (_, arr_a), (_, arr_b) in zip(a.arrays(), b.arrays()):
        assert np.array_equal(arr_a, arr_b)
    c = init_params(8, 3, 2, seed=43)
    assert not np.array_equal(a.W1, c.W1)
    lim_w, lim_u = 1.0 / np.sqrt(8), 1.0 / np.sqrt(3)
    for name, arr in a.arrays():
        if name.startswith("W") or name == "V":
            assert np.max(np.abs(arr)) < lim_w
        elif name.startswith("U"):
            assert np.max(np.abs(arr)) < lim_u
        else:
            assert np.all(arr == 0.0)


def test_init_rejects_bad_sizes():
    with pytest.raises(ValueError):
        init_params(0, 1, 1, seed=0)
    with pytest.raises(ValueError):
        init_params(4, -1, 1, seed=0)


def test_variant_validation():
    with pytest.raises(ValueError):
        CellVariant(alpha=1.5)
    with pytest.raises(ValueError):
        CellVariant(beta=-0.1)
    with pytest.raises(ValueError):
        CellVariant(delay_m=-2)
    with pytest.raises(ValueError):
        CellVariant(kind="taugru")  # must be the enum, not a string


def test_cell_params_shape_check():
    good = init_params(3, 2, 1, seed=0)
    with pytest.raises(ValueError, match="W2"):
        CellParams(**{name: (np.zeros((2, 2)) if name == "W2" else arr)
                      for name, arr in good.arrays()})


def test_run_batch_validates_input_shape():
    params = init_params(3, 2, 1, seed=0)
    variant = CellVariant(kind=CellKind.TAU_GRU)
    with pytest.raises(ValueError):
        run_batch(params, variant, np.zeros((5, 3, 2)))  # p mismatch
    with pytest.raises(ValueError):
        run_batch(params, variant, np.zeros((5, 2)))     # missing batch axis


def test_run_batch_rejects_linear_kind():
    params = init_params(3, 2, 1, seed=0)
    with pytest.raises(ValueError, match="step_linear"):
        run_batch(params, CellVariant(kind=CellKind.LINEAR_DELAYED),
                  np.zeros((5, 2, 1)))


def test_explicit_initial_state_is_used():
    params = init_params(3, 1, 1, seed=5)
    variant = CellVariant(kind=CellKind.TAU_GRU, delay_m=1)
    xs = _random_inputs(2, T=4, p=1)
    h0 = np.full(3, 0.25)
    _, _, tape = run_sequence(params, variant, xs, h0=h0)
    assert np.array_equal(tape.states[0], np.tile(h0[:, None], (1, 1)).reshape(3, 1))


def test_save_load_round_trip(tmp_path):
    params = init_params(5, 2, 3, seed=77)
    path = tmp_path / "params.bin"
    save_params(path, params, CellKind.TAU_GRU)
    loaded, kind = load_params(path)
    assert kind == CellKind.TAU_GRU
    for (_, a), (_, b) in zip(params.arrays(), loaded.arrays()):
        assert np.array_equal(a, b)

    save_params(path, params, CellKind.SIMPLE_DELAY_GRU)
    _, kind = load_params(path)
    assert kind == CellKind.SIMPLE_DELAY_GRU


def test_load_rejects_corrupt_files(tmp_path):
    params = init_params(3, 1, 1, seed=7)
    path = tmp_path / "params.bin"
    save_params(path, params, CellKind.TAU_GRU)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "magic.bin"
    corrupted = bytearray(raw)
    corrupted[0] ^= 0xFF
    bad_magic.write_bytes(bytes(corrupted))
    with pytest.raises(ValueError, match="magic"):
        load_params(bad_magic)

    truncated = tmp_path / "short.bin"
    truncated.write_bytes(bytes(raw[:-8]))
    with pytest.raises(ValueError):
        load_params(truncated)

    bad_code = tmp_path / "code.bin"
    corrupted = bytearray(raw)
    corrupted[20] = 99
    bad_code.write_bytes(bytes(corrupted))
    with pytest.raises(ValueError, match="kind"):
        load_params(bad_code)


def test_tape_records_activations_consistently():
    variant = CellVariant(kind=CellKind.TAU_GRU, delay_m=2)
    params = init_params(4, 2, 1, seed=14)
    xs = _random_inputs(50, T=8, p=2)
    _, _, tape = run_sequence(params, variant, xs)
    assert tape.T == 8
    assert tape.batch == 1
    act = tape.step(3)
    assert np.allclose(act.u_n, np.tanh(act.pre_u), atol=1e-15)
    assert np.allclose(act.h_out,
                       (1.0 - act.g_n) * act.h_in
                       + act.g_n * (act.u_n + act.a_n * act.z_n), atol=1e-15)
    with pytest.raises(ValueError):
        tape.step(8)
