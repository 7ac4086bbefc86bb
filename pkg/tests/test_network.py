import numpy as np
import pytest

from cyclempc.network import (INPUT_NAMES, OUTPUT_NAMES, LstmState,
                              ModelInput, ModelOutput, default_network_spec,
                              model_jacobians, model_step, random_weights,
                              zero_weights)
from oracles import fd_jacobian, make_test_weights, plausible_normalization


def test_default_spec_shapes():
    spec = default_network_spec()
    assert spec.layers[0].input_width == 5
    assert spec.layers[-1].output_width == 4
    assert spec.layers[-1].activation == "linear"
    lstm = [l for l in spec.layers if l.kind == "lstm"]
    assert len(lstm) == 1 and lstm[0].output_width == 4
    widths = [(l.input_width, l.output_width) for l in spec.layers]
    assert widths == [(5, 24), (24, 24), (24, 16), (16, 4),
                      (4, 24), (24, 24), (24, 4)]


def test_parameter_count_default_architecture():
    w = random_weights(default_network_spec(), seed=0)
    assert w.parameter_count == 2300
    # sized like the reference controller network, within 5%
    assert 2147 <= w.parameter_count <= 2373


def test_vector_round_trip():
    spec = default_network_spec()
    w = random_weights(spec, seed=4)
    vec = w.to_vector()
    assert vec.shape == (2300,)
    w2 = zero_weights(spec)
    w2.from_vector(vec)
    assert np.array_equal(w2.to_vector(), vec)
    with pytest.raises(ValueError):
        w2.from_vector(vec[:-1])


def test_random_weights_seeded():
    spec = default_network_spec()
    a = random_weights(spec, seed=9).to_vector()
    b = random_weights(spec, seed=9).to_vector()
    c = random_weights(spec, seed=10).to_vector()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_zero_weights_output_is_normalization_offset():
    # linear output head on all-zero weights reduces to the denorm offset
    norm = plausible_normalization()
    w = zero_weights(default_network_spec(), norm=norm)
    _, y = model_step(w, LstmState.zeros(), ModelInput(3.0, 8.0, 0.7, 0.4, 250.0))
    assert np.allclose(y.to_array(), norm.output_offset, atol=0.0)


def test_zero_weights_lstm_fixed_values():
    # with zero weights every gate preactivation is 0: forget/input/output
    # gates all sit at sigmoid(0) = 1/2 and the candidate at tanh(0) = 0,
    # so c' = c/2 and h' = tanh(c')/2 exactly
    w = zero_weights(default_network_spec())
    state = LstmState(c=np.array([1.0, 0.0, 0.0, 0.0]), h=np.zeros(4))
    nxt, _ = model_step(w, state, ModelInput(0.0, 0.0, 0.0, 0.0, 0.0))
    assert np.array_equal(nxt.c, [0.5, 0.0, 0.0, 0.0])
    assert nxt.h[0] == pytest.approx(0.23105857863000487, abs=1e-16)
    assert np.array_equal(nxt.h[1:], [0.0, 0.0, 0.0])


def test_model_step_pure():
    w = make_test_weights(seed=2)
    state = LstmState(c=np.full(4, 0.2), h=np.full(4, -0.1))
    c_before = state.c.copy()
    h_before = state.h.copy()
    s1, y1 = model_step(w, state, ModelInput(3.0, 8.0, 0.7, 0.4, 250.0))
    s2, y2 = model_step(w, state, ModelInput(3.0, 8.0, 0.7, 0.4, 250.0))
    assert np.array_equal(state.c, c_before)
    assert np.array_equal(state.h, h_before)
    assert np.array_equal(s1.as_vector(), s2.as_vector())
    assert y1.to_array() == pytest.approx(y2.to_array(), abs=0.0)


def test_model_io_names_and_round_trip():
    assert INPUT_NAMES == ("imep_prev", "ca50_prev", "doi_fuel",
                           "doi_water", "nvo")
    assert OUTPUT_NAMES == ("imep", "ca50", "nox", "mprr")
    u = ModelInput.from_array(np.array([3.0, 8.0, 0.7, 0.4, 250.0]))
    assert (u.imep_prev, u.ca50_prev) == (3.0, 8.0)
    y = ModelOutput(4.0, 7.0, 150.0, 5.0)
    assert np.array_equal(y.to_array(), [4.0, 7.0, 150.0, 5.0])


def test_jacobians_match_finite_differences_spot_check():
    # a handful of points here; the wide battery runs in the acceptance suite
    w = make_test_weights(seed=7)
    rng = np.random.default_rng(21)
    for _ in range(5):
        state = LstmState(c=rng.normal(scale=0.3, size=4),
                          h=rng.normal(scale=0.3, size=4))
        u_vec = np.array([3.0, 8.0, 0.75, 0.5, 255.0]) + \
            rng.normal(size=5) * np.array([1.0, 3.0, 0.3, 0.2, 40.0])
        jac = model_jacobians(w, state, ModelInput.from_array(u_vec))

        def step_state(x):
            s = LstmState(c=x[:4].copy(), h=x[4:].copy())
            nxt, y = model_step(w, s, ModelInput.from_array(u_vec))
            return np.concatenate([nxt.as_vector(), y.to_array()])

        def step_input(uv):
            nxt, y = model_step(w, state, ModelInput.from_array(uv))
            return np.concatenate([nxt.as_vector(), y.to_array()])

        fd_x = fd_jacobian(step_state, state.as_vector())
        fd_u = fd_jacobian(step_input, u_vec)
        assert np.max(np.abs(fd_x[:8] - jac.d_state_next_d_state)) < 1e-6
        assert np.max(np.abs(fd_x[8:] - jac.d_output_d_state)) < 1e-6
        assert np.max(np.abs(fd_u[:8] - jac.d_state_next_d_input)) < 1e-6
        assert np.max(np.abs(fd_u[8:] - jac.d_output_d_input)) < 1e-6
