import json
import math

import numpy as np
import pytest
import torch

from helpers import FIXTURES, SMALL, box_mask, fd_directional_error, fd_relative_error, probe_constraint
from unifyedit import (
    AlphaSchedule,
    CaptureConfig,
    ConstraintDescriptor,
    LatentGrid,
    compute_attention,
    make_toy_backend,
)
from unifyedit.backend import ToyBackendConfig, load_backend, register_adapter
from unifyedit.errors import ConfigError, RangeError, ShapeError, ValidationError
from unifyedit.rawio import load_array, save_array


def test_attention_identical_keys_is_uniform():
    out, attn = compute_attention([[1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]], [[1.0], [3.0]], 2)
    np.testing.assert_allclose(attn, [[0.5, 0.5]])
    np.testing.assert_allclose(out, [[2.0]])


def test_attention_two_key_softmax():
    # hand softmax of logits (1/sqrt(2), 0)
    e = math.exp(1 / math.sqrt(2))
    expected = [e / (e + 1), 1 / (e + 1)]
    _, attn = compute_attention([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], np.eye(2), 2)
    np.testing.assert_allclose(attn[0], expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(attn[0], [0.669762, 0.330238], atol=1e-6)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(1)
    _, attn = compute_attention(rng.standard_normal((7, 3)), rng.standard_normal((5, 3)), rng.standard_normal((5, 2)), 3)
    np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-12)
    assert attn.min() >= 0 and attn.max() <= 1


def test_attention_tensor_in_tensor_out():
    q = torch.ones((1, 2), dtype=torch.float64, requires_grad=True)
    out, attn = compute_attention(q, torch.eye(2, dtype=torch.float64), torch.eye(2, dtype=torch.float64), 2)
    assert isinstance(out, torch.Tensor) and out.requires_grad


@pytest.mark.parametrize("q,k,v,d", [
    ([[1.0, 0.0]], [[1.0, 0.0]], [[1.0], [1.0]], 2),
    ([[1.0, 0.0]], [[1.0, 0.0, 0.0]], [[1.0]], 2),
    ([1.0, 0.0], [[1.0, 0.0]], [[1.0]], 2),
])
def test_attention_shape_errors(q, k, v, d):
    with pytest.raises(ShapeError):
        compute_attention(q, k, v, d)


def test_golden_noise_prediction():
    meta = json.loads((FIXTURES / "golden_config.json").read_text())
    backend = make_toy_backend(meta["seed"], meta["backend"])
    prompt = backend.encode_prompt(meta["prompt"])
    assert prompt.token_count == 4
    eps, _ = backend.predict_noise(np.zeros(backend.latent_shape), meta["t"], prompt)
    golden = load_array(FIXTURES / "golden_eps_seed7_t25.f64")
    np.testing.assert_array_equal(eps, golden)


def test_predict_noise_deterministic_across_instances():
    a, b = make_toy_backend(5, SMALL), make_toy_backend(5, SMALL)
    z = np.random.default_rng(0).standard_normal(a.latent_shape)
    cap = CaptureConfig({8, 4}, {8})
    ea, ba = a.predict_noise(z, 17, a.encode_prompt("a dog"), cap)
    eb, bb = b.predict_noise(z, 17, b.encode_prompt("a dog"), cap)
    assert ea.tobytes() == eb.tobytes()
    for ma, mb in zip(ba.sa_layers + ba.ca_layers, bb.sa_layers + bb.ca_layers):
        assert ma.map.tobytes() == mb.map.tobytes()


def test_different_seeds_differ():
    z = np.ones((4, 8, 8))
    e1, _ = make_toy_backend(1, SMALL).predict_noise(z, 10, make_toy_backend(1, SMALL).encode_prompt("a"))
    b2 = make_toy_backend(2, SMALL)
    e2, _ = b2.predict_noise(z, 10, b2.encode_prompt("a"))
    assert not np.array_equal(e1, e2)


def test_bundle_layer_counts_and_normalization(toy):
    prompt = toy.encode_prompt("a wooden cat")
    z = np.random.default_rng(2).standard_normal(toy.latent_shape)
    eps, bundle = toy.predict_noise(z, 30, prompt, CaptureConfig({16, 8, 4}, {16, 8}))
    assert np.all(np.isfinite(eps))
    assert len(bundle.ca(16)) == 5
    assert len(bundle.sa([16])) == 5
    bundle.validate(L=5)
    for m in bundle.sa_layers:
        assert m.map.shape == (m.resolution ** 2, m.resolution ** 2)
    for m in bundle.ca_layers:
        assert m.map.shape == (m.resolution ** 2, prompt.token_count)
    assert bundle.source_pass == "conditional"


def test_capture_pass_is_reported(small_toy):
    z = np.zeros(small_toy.latent_shape)
    _, b = small_toy.predict_noise(z, 5, small_toy.encode_prompt(""), CaptureConfig({8}, set(), "unconditional"))
    assert b.source_pass == "unconditional"


def test_no_capture_returns_no_maps(small_toy):
    _, b = small_toy.predict_noise(np.zeros(small_toy.latent_shape), 5, small_toy.encode_prompt("x"))
    assert b.sa_layers == [] and b.ca_layers == []


def test_predict_noise_rejects_bad_inputs(small_toy):
    prompt = small_toy.encode_prompt("a")
    with pytest.raises(ShapeError):
        small_toy.predict_noise(np.zeros((4, 16, 16)), 5, prompt)
    with pytest.raises(RangeError):
        small_toy.predict_noise(np.zeros(small_toy.latent_shape), 51, prompt)
    with pytest.raises(ConfigError):
        small_toy.predict_noise(np.zeros(small_toy.latent_shape), 5, prompt, CaptureConfig({16}))
    z = np.zeros(small_toy.latent_shape)
    z[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        small_toy.predict_noise(z, 5, prompt)


def test_config_validation():
    with pytest.raises(ConfigError):
        ToyBackendConfig(spatial=16, sa_resolutions=(16, 6))
    with pytest.raises(ConfigError):
        ToyBackendConfig(L=0)
    with pytest.raises(ConfigError):
        ToyBackendConfig.from_dict({"spatial": 16, "bogus": 1})
    cfg = ToyBackendConfig.from_dict(SMALL)
    assert ToyBackendConfig.from_dict(cfg.to_dict()) == cfg


def test_load_backend_registry():
    assert load_backend("toy", seed=1, config=SMALL).latent_shape == (4, 8, 8)
    with pytest.raises(ConfigError):
        load_backend("adapter:nope")
    with pytest.raises(ConfigError):
        load_backend("sd15")
    register_adapter("tiny-test", lambda seed, config: make_toy_backend(seed, SMALL))
    assert load_backend("adapter:tiny-test", seed=2).seed == 2


def test_gradient_zero_when_reference_equals_current(small_toy):
    prompt = small_toy.encode_prompt("a cat")
    z = np.random.default_rng(3).standard_normal(small_toy.latent_shape)
    _, bundle = small_toy.predict_noise(z, 20, prompt, CaptureConfig({8, 4}))
    g = small_toy.latent_gradient(z, 20, prompt, ConstraintDescriptor("sap", reference_sa=bundle.sa_layers))
    assert np.max(np.abs(g)) < 1e-12


def test_caa_gradient_nonzero_and_finite(small_toy):
    prompt = small_toy.encode_prompt("a wooden cat")
    z = np.random.default_rng(4).standard_normal(small_toy.latent_shape)
    desc = ConstraintDescriptor("caa", mask=box_mask(8, 8, slice(0, 4), slice(0, 4)), token_indices=[2],
                                ca_resolution=8)
    g = small_toy.latent_gradient(z, 30, prompt, desc)
    assert np.all(np.isfinite(g)) and np.linalg.norm(g) > 0


def test_malformed_constraints_rejected(small_toy):
    prompt = small_toy.encode_prompt("a")
    z = np.zeros(small_toy.latent_shape)
    for desc in (ConstraintDescriptor("sap"), ConstraintDescriptor("caa", token_indices=[1]),
                 ConstraintDescriptor("region_sap", reference_sa=[]), ConstraintDescriptor("other")):
        with pytest.raises(ValidationError):
            small_toy.latent_gradient(z, 3, prompt, desc)


def test_latent_gradients_match_single_queries(small_toy):
    rng = np.random.default_rng(8)
    prompt, sap = probe_constraint(small_toy, "sap", rng)
    _, caa = probe_constraint(small_toy, "caa", rng)
    z = rng.standard_normal(small_toy.latent_shape)
    (l1, g1), (l2, g2) = small_toy.latent_gradients(z, 33, prompt, [sap, caa])
    np.testing.assert_array_equal(g1, small_toy.latent_gradient(z, 33, prompt, sap))
    np.testing.assert_array_equal(g2, small_toy.latent_gradient(z, 33, prompt, caa))
    assert l1 == pytest.approx(small_toy.constraint_loss(z, 33, prompt, sap), rel=1e-12)


@pytest.mark.parametrize("kind", ["sap", "region_sap", "caa"])
def test_gradient_matches_finite_differences(small_toy, kind):
    rng = np.random.default_rng({"sap": 1, "region_sap": 2, "caa": 3}[kind])
    for _ in range(5):
        prompt, desc = probe_constraint(small_toy, kind, rng)
        z = rng.standard_normal(small_toy.latent_shape)
        t = int(rng.integers(1, small_toy.T + 1))
        assert fd_relative_error(small_toy, z, t, prompt, desc, rng) < 1e-4
        assert fd_directional_error(small_toy, z, t, prompt, desc, rng) < 1e-4


def test_alpha_schedule_default():
    s = AlphaSchedule.default(50)
    assert s.T == 50 and s[0] == 1.0
    assert np.all(np.diff(s.alphas) < 0)
    # first sampled training step of the scaled-linear schedule
    beta1 = (0.00085 ** 0.5 + (0.012 ** 0.5 - 0.00085 ** 0.5) / 999) ** 2
    assert s[1] == pytest.approx((1 - 0.00085) * (1 - beta1), rel=1e-12)


def test_alpha_schedule_validation(tmp_path):
    with pytest.raises(ValueError):
        AlphaSchedule(np.array([1.0, 0.9, 0.95]))
    with pytest.raises(ValueError):
        AlphaSchedule(np.array([0.5, 0.4]))
    s = AlphaSchedule.default(10)
    s.to_file(tmp_path / "alphas.txt")
    assert np.array_equal(AlphaSchedule.from_file(tmp_path / "alphas.txt").alphas, s.alphas)


def test_rawio_roundtrip(tmp_path):
    a = np.random.default_rng(0).standard_normal((2, 3, 4))
    save_array(tmp_path / "a.f64", a)
    raw = (tmp_path / "a.f64").read_bytes()
    header, _, payload = raw.partition(b"\n")
    assert json.loads(header) == {"dtype": "<f8", "shape": [2, 3, 4]}
    assert len(payload) == a.size * 8
    assert np.array_equal(load_array(tmp_path / "a.f64"), a)
    np.save(tmp_path / "b.npy", a)
    assert np.array_equal(load_array(tmp_path / "b.npy"), a)


def test_latent_grid_rejects_non_finite():
    with pytest.raises(ValueError):
        LatentGrid(np.array([[[np.inf]]]), 0)
