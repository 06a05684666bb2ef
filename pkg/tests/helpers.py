"""Shared builders and the finite-difference oracle used across test modules."""
from pathlib import Path

import numpy as np

from unifyedit import BinaryMask, CaptureConfig, ConstraintDescriptor, EditSpec, LatentGrid

FIXTURES = Path(__file__).parent / "fixtures"
BENCH_MANIFEST = FIXTURES / "bench" / "manifest.jsonl"

# small configuration used wherever the full 16x16 toy is not needed
SMALL = {"channels": 4, "spatial": 8, "sa_resolutions": [8, 4], "ca_resolutions": [8, 4], "L": 2,
         "embed_dim": 16, "T": 50}


def box_mask(h, w, rows, cols):
    m = np.zeros((h, w))
    m[rows, cols] = 1
    return BinaryMask(m)


def wooden_spec(hw=16, edit_type="texture"):
    return EditSpec("a cat sitting on a bench", "a wooden cat sitting on a bench", ["wooden"],
                    box_mask(hw, hw, slice(3, 11), slice(4, 12)), edit_type)


def clean_latent(backend, seed=0):
    rng = np.random.default_rng(seed)
    return LatentGrid(rng.standard_normal(backend.latent_shape), 0)


def probe_constraint(backend, kind, rng):
    """Random constraint of ``kind`` plus the prompt it applies to."""
    prompt = backend.encode_prompt("a wooden cat sitting on a bench")
    _, s, _ = backend.latent_shape
    r0, c0 = rng.integers(0, s // 2, size=2)
    mask = box_mask(s, s, slice(r0, r0 + s // 2), slice(c0, c0 + s // 2))
    if kind == "caa":
        return prompt, ConstraintDescriptor("caa", mask=mask, token_indices=[int(rng.integers(1, prompt.token_count))],
                                            ca_resolution=max(backend.ca_resolutions))
    z_ref = rng.standard_normal(backend.latent_shape)
    t_ref = int(rng.integers(1, backend.T + 1))
    _, bundle = backend.predict_noise(z_ref, t_ref, prompt, CaptureConfig(frozenset(backend.sa_resolutions)))
    return prompt, ConstraintDescriptor(kind, reference_sa=bundle.sa_layers, mask=mask)


def fd_relative_error(backend, z, t, prompt, desc, rng, h=1e-4, n_coords=24):
    """max|g_ad - g_fd| / max|g_fd| over random coordinates plus the largest-gradient one."""
    g = backend.latent_gradient(z, t, prompt, desc)
    flat = g.reshape(-1)
    idx = set(rng.choice(flat.size, size=n_coords, replace=False).tolist())
    idx.add(int(np.argmax(np.abs(flat))))
    ad, fd = [], []
    for i in sorted(idx):
        zp, zm = z.copy().reshape(-1), z.copy().reshape(-1)
        zp[i] += h
        zm[i] -= h
        lp = backend.constraint_loss(zp.reshape(z.shape), t, prompt, desc)
        lm = backend.constraint_loss(zm.reshape(z.shape), t, prompt, desc)
        fd.append((lp - lm) / (2 * h))
        ad.append(flat[i])
    ad, fd = np.array(ad), np.array(fd)
    return float(np.max(np.abs(ad - fd)) / max(np.max(np.abs(fd)), 1e-300))


def fd_directional_error(backend, z, t, prompt, desc, rng, h=1e-4):
    """Relative mismatch of the directional derivative along a random unit direction."""
    g = backend.latent_gradient(z, t, prompt, desc)
    v = rng.standard_normal(z.shape)
    v /= np.linalg.norm(v)
    fd = (backend.constraint_loss(z + h * v, t, prompt, desc) - backend.constraint_loss(z - h * v, t, prompt, desc)) / (2 * h)
    ad = float(np.sum(g * v))
    return abs(ad - fd) / max(abs(fd), np.linalg.norm(g) * 1e-3)
