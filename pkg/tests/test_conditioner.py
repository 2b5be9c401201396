import json
import math

import numpy as np
import pytest

from mfcflow.conditioner import (Architecture, conditioner_forward, index_map,
                                 init_model_params, load_params, mlp_forward,
                                 param_count, save_params, unpack_params)


def test_default_architecture_parameter_count_is_stable():
    # 2 layers x [conditioner(1->16->16->14) + conditioner(2->16->16->14)]
    # = 2 x (542 + 558); fixed by the two-hidden-layer width-16 stack
    arch = Architecture()
    assert param_count(arch) == 2200
    assert param_count(Architecture()) == 2200


def test_index_map_is_bijective():
    arch = Architecture(dim=3, hidden=(5, 4), n_bins=3)
    entries, total = index_map(arch)
    seen = np.zeros(total, dtype=bool)
    for e in entries:
        size = int(np.prod(e["shape"]))
        sl = slice(e["offset"], e["offset"] + size)
        assert not seen[sl].any()
        seen[sl] = True
    assert seen.all()


def test_zero_final_layer_gives_zero_theta():
    arch = Architecture()
    params = init_model_params(arch, seed=0)
    nets = unpack_params(arch, params)
    out = conditioner_forward(nets[0][1], np.array([0.7]), 0.3)
    assert np.allclose(out, 0.0)
    out = conditioner_forward(nets[1][0], np.zeros(0), 0.9)
    assert out.shape == (arch.theta_dim,)
    assert np.allclose(out, 0.0)


def test_init_reproducible_from_seed():
    arch = Architecture()
    a = init_model_params(arch, seed=42)
    b = init_model_params(arch, seed=42)
    c = init_model_params(arch, seed=43)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_hand_evaluated_tiny_network():
    # one hidden unit everywhere, all weights/biases = 1, input 0:
    # h = tanh(0*1 + 1); out = h*1 + 1
    arch = Architecture(dim=1, n_layers=1, hidden=(1,), n_bins=1)
    entries, total = index_map(arch)
    params = np.ones(total)
    nets = unpack_params(arch, params)
    got = conditioner_forward(nets[0][0], np.zeros(0), 0.0)
    expected = math.tanh(1.0) * 1.0 + 1.0
    assert np.allclose(got, expected)


def test_conditioner_time_continuity():
    arch = Architecture()
    rng = np.random.default_rng(0)
    params = init_model_params(arch, seed=1) + 0.5 * rng.standard_normal(param_count(arch))
    nets = unpack_params(arch, params)
    x = np.array([0.4])
    base = conditioner_forward(nets[0][1], x, 0.5)
    deltas = []
    for h in (1e-2, 1e-4):
        deltas.append(np.abs(conditioner_forward(nets[0][1], x, 0.5 + h) - base).max())
    ratio = deltas[0] / deltas[1]
    assert 50.0 <= ratio <= 200.0  # first-order smoothness in t


def test_prefix_dimension_checked():
    arch = Architecture()
    nets = unpack_params(arch, init_model_params(arch))
    with pytest.raises(ValueError):
        conditioner_forward(nets[0][1], np.array([1.0, 2.0]), 0.0)


def test_serialization_roundtrip(tmp_path):
    arch = Architecture(dim=2, hidden=(6, 5), n_bins=4)
    params = init_model_params(arch, seed=9)
    params += np.linspace(-1, 1, params.size)
    prefix = tmp_path / "ckpt"
    save_params(prefix, arch, params)
    arch2, params2 = load_params(prefix)
    assert arch2 == arch
    assert np.array_equal(params, params2)
    # sidecar documents the layout
    sidecar = json.loads((tmp_path / "ckpt.json").read_text())
    assert sidecar["count"] == params.size
    assert sidecar["architecture"]["hidden"] == [6, 5]
    # flat file is little-endian float64
    raw = np.frombuffer((tmp_path / "ckpt.bin").read_bytes(), dtype="<f8")
    assert np.array_equal(raw, params)


def test_load_rejects_mismatched_length(tmp_path):
    arch = Architecture()
    params = init_model_params(arch)
    save_params(tmp_path / "ckpt", arch, params)
    (tmp_path / "ckpt.bin").write_bytes(params[:-1].astype("<f8").tobytes())
    with pytest.raises(ValueError):
        load_params(tmp_path / "ckpt")
