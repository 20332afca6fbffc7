import math
from dataclasses import replace

import numpy as np
import pytest

from evenet.phantom import (DWIProtocol, Jitter, LesionBoundsError, LesionSpec, PhantomSpec, ProtocolError, Region,
                            brain_mask, build_sample, components_to_tensor, default_protocol, default_spec,
                            derive_params, eigvals_sym3, fibonacci_hemisphere, fit_dti, generate_phantom,
                            inject_lesion, jittered_specs, make_dataset, normalize_channels, simulate_dwi,
                            split_counts, tensor_from_eigen, tensor_to_components)
from evenet.volume import Volume

MS = 1e-3


def _constant_field(d, shape=(2, 3, 4)):
    comps = tensor_to_components(np.asarray(d))
    return Volume(np.broadcast_to(comps[:, None, None, None], (6,) + shape).copy())


def _random_spd(rng, k):
    q, _ = np.linalg.qr(rng.normal(size=(k, 3, 3)))
    lam = rng.uniform(0.1, 3.0, (k, 3)) * MS
    return q @ (lam[:, :, None] * np.swapaxes(q, 1, 2))


class TestGeometry:
    def test_single_region(self):
        spec = PhantomSpec((5, 4, 3), (Region("bg", "fill", eigenvalues=(1 * MS, 0.5 * MS, 0.5 * MS)),))
        lm, t = generate_phantom(spec)
        assert lm.dims == (5, 4, 3) and not lm.labels.any()
        np.testing.assert_array_equal(t.data, t.data[:, :1, :1, :1] * np.ones((1, 3, 4, 5)))

    def test_nested_spheres_contain(self):
        spec = PhantomSpec((21, 21, 21), (
            Region("bg", "fill"),
            Region("outer", radii=(0.4, 0.4, 0.4)),
            Region("inner", radii=(0.2, 0.2, 0.2)),
        ))
        lab = generate_phantom(spec)[0].labels
        # every ray from the centre passes inner -> outer -> background and never back
        for axis in range(3):
            line = np.take(lab, 10, axis=(axis + 1) % 3)
            line = np.take(line, 10, axis=axis % 2)
            half = line[10:]
            assert (np.diff(half.astype(int)) <= 0).all()
            assert half[0] == 2 and half[-1] == 0

    def test_shell_and_box(self):
        spec = PhantomSpec((20, 20, 20), (
            Region("bg", "fill"),
            Region("shell", "shell", radii=(0.4, 0.4, 0.4), inner=0.5),
            Region("box", "box", center=(0.25, 0.25, 0.25), radii=(0.1, 0.1, 0.1)),
        ))
        lab = generate_phantom(spec)[0].labels
        assert lab[10, 10, 10] == 0  # hollow centre of the shell
        assert lab[10, 10, 16] == 1
        assert (lab[3:7, 3:7, 3:7] == 2).all()
        assert (lab == 2).sum() == 4**3

    def test_deterministic(self):
        spec = default_spec((16, 16, 8), seed=3)
        a, b = generate_phantom(spec), generate_phantom(spec)
        assert a[0] == b[0] and a[1] == b[1]

    def test_default_layout(self):
        lm, _ = generate_phantom(default_spec())
        assert lm.n_classes == 6 and lm.dims == (48, 48, 32)
        counts = np.bincount(lm.labels.ravel(), minlength=6)
        assert (counts > 500).all()

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PhantomSpec((4, 4, 4), (Region("a"),))
        with pytest.raises(ValueError):
            Region("a", eigenvalues=(1.0, 0.0, 1.0))
        with pytest.raises(ValueError):
            Region("a", shape="torus")


class TestTensors:
    def test_tensor_from_eigen(self):
        d = tensor_from_eigen((3.0, 2.0, 1.0), (1, 1, 0))
        w, v = np.linalg.eigh(d)
        np.testing.assert_allclose(w, [1, 2, 3], atol=1e-14)
        np.testing.assert_allclose(abs(v[:, 2] @ np.array([1, 1, 0]) / math.sqrt(2)), 1.0, atol=1e-14)

    def test_component_roundtrip(self):
        d = _random_spd(np.random.default_rng(42), 10)
        d = (d + np.swapaxes(d, 1, 2)) / 2
        np.testing.assert_array_equal(components_to_tensor(tensor_to_components(d)), d)

    def test_eigvals_against_numpy(self):
        d = _random_spd(np.random.default_rng(42), 2000)
        got = eigvals_sym3(tensor_to_components(d))
        ref = np.linalg.eigvalsh(d)[:, ::-1].T
        np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-15)

    def test_eigvals_degenerate(self):
        d = np.stack([np.eye(3) * 1e-3, np.diag([2e-3, 1e-3, 1e-3]), np.diag([2e-3, 2e-3, 1e-3]),
                      np.zeros((3, 3)), tensor_from_eigen((1.5e-3, 1.5e-3, 0.2e-3), (1, 2, 3))])
        got = eigvals_sym3(tensor_to_components(d))
        np.testing.assert_allclose(got, np.linalg.eigvalsh(d)[:, ::-1].T, atol=1e-15)


class TestSignal:
    def test_b0_is_s0(self):
        prot = default_protocol(sigma=0.0)
        dwi = simulate_dwi(_constant_field(np.diag([1.7, 0.3, 0.3]) * MS), prot, s0=0.8)
        np.testing.assert_array_equal(dwi.data[prot.bvals == 0], np.float32(0.8))

    def test_isotropic(self):
        prot = default_protocol(sigma=0.0)
        dwi = simulate_dwi(_constant_field(np.eye(3) * 0.9 * MS), prot)
        np.testing.assert_allclose(dwi.data[prot.bvals > 0], math.exp(-0.9), rtol=1e-6)

    def test_worked_anisotropic(self):
        prot = DWIProtocol(np.array([0.0, 1000.0]), np.array([[0, 0, 0], [1.0, 0, 0]]))
        dwi = simulate_dwi(_constant_field(np.diag([1.7, 0.3, 0.3]) * MS), prot, s0=2.0)
        np.testing.assert_allclose(dwi.data[1], 2.0 * math.exp(-1.7), rtol=1e-7)

    def test_rician_noise_is_seeded_and_positive(self):
        prot = default_protocol(sigma=0.05)
        t = _constant_field(np.eye(3) * MS)
        a, b, c = simulate_dwi(t, prot, seed=1), simulate_dwi(t, prot, seed=1), simulate_dwi(t, prot, seed=2)
        assert a == b and not a == c
        assert (a.data >= 0).all()

    def test_protocol_validation(self):
        with pytest.raises(ProtocolError):
            DWIProtocol(np.array([0.0, 1000.0]), np.array([[0, 0, 0], [1.0, 1.0, 0]]))
        with pytest.raises(ProtocolError):
            DWIProtocol(np.array([0.0]), np.zeros((2, 3)))
        np.testing.assert_allclose(np.linalg.norm(fibonacci_hemisphere(30), axis=1), 1.0)


class TestFit:
    def test_noiseless_roundtrip(self):
        rng = np.random.default_rng(42)
        d = _random_spd(rng, 60).reshape(3, 4, 5, 3, 3)
        t = Volume(tensor_to_components(d))
        prot = default_protocol(sigma=0.0)
        fitted = fit_dti(simulate_dwi(t, prot), prot)
        np.testing.assert_allclose(fitted.data, t.data, rtol=0, atol=1e-8)
        np.testing.assert_allclose(derive_params(fitted).data, derive_params(t).data, rtol=0, atol=1e-7)

    def test_b0_only_protocol(self):
        prot = DWIProtocol(np.zeros(3), np.zeros((3, 3)))
        with pytest.raises(ProtocolError):
            fit_dti(Volume(np.ones((3, 1, 1, 1))), prot)

    def test_collinear_directions(self):
        g = np.array([[0, 0, 0]] + [[1.0, 0, 0]] * 3 + [[0, 1.0, 0]] * 3)
        prot = DWIProtocol(np.array([0.0] + [1000.0] * 6), g)
        with pytest.raises(ProtocolError):
            fit_dti(Volume(np.ones((7, 1, 1, 1))), prot)

    def test_noisy_rmse(self):
        prot = default_protocol(n_directions=30, sigma=0.01)
        d = np.diag([1.7, 0.3, 0.3]) * MS
        t = _constant_field(d, (8, 16, 16))
        fitted = fit_dti(simulate_dwi(t, prot, seed=42), prot)
        rmse = np.sqrt(((fitted.data.astype(np.float64) - t.data.astype(np.float64)) ** 2).mean(axis=(1, 2, 3)))
        assert rmse.max() < 5e-5

    def test_non_positive_signal_is_floored(self):
        prot = default_protocol(sigma=0.0)
        data = np.ones((prot.n_measurements, 1, 1, 1))
        data[prot.bvals > 0] = 0.0
        out = fit_dti(Volume(data), prot)
        assert np.isfinite(out.data).all()


class TestDerive:
    def test_isotropic(self):
        p = derive_params(_constant_field(np.eye(3) * 0.8 * MS))
        np.testing.assert_allclose(p.data[0], 0.0, atol=1e-7)
        np.testing.assert_allclose(p.data[1:], 0.8 * MS, rtol=1e-6)

    def test_stick(self):
        p = derive_params(_constant_field(np.diag([1.0, 0, 0]) * MS))
        np.testing.assert_allclose(p.data[0], 1.0, rtol=1e-7)

    def test_worked_values(self):
        p = derive_params(_constant_field(np.diag([1.7, 0.3, 0.3]) * MS))
        # sum (l - md)^2 = 1.96/1.5 and sum l^2 = 3.07, so FA = 1.4 / sqrt(3.07)
        assert p.data[0].ravel()[0] == pytest.approx(1.4 / math.sqrt(3.07), abs=1e-7)
        assert p.data[0].ravel()[0] == pytest.approx(0.799022, abs=1e-6)
        assert p.data[1].ravel()[0] == pytest.approx(7.667e-4, rel=1e-4)
        lam = np.array([1.7, 0.3, 0.3])
        fa = math.sqrt(1.5) * np.linalg.norm(lam - lam.mean()) / np.linalg.norm(lam)
        assert p.data[0].ravel()[0] == pytest.approx(fa, rel=1e-7)

    def test_zero_tensor(self):
        p = derive_params(_constant_field(np.zeros((3, 3))))
        assert (p.data == 0).all()

    def test_ranges(self):
        d = _random_spd(np.random.default_rng(3), 500).reshape(5, 10, 10, 3, 3)
        p = derive_params(Volume(tensor_to_components(d))).data
        assert (p[0] >= 0).all() and (p[0] <= 1).all()
        assert (p[2] >= p[3]).all() and (p[3] >= p[4]).all()


class TestLesion:
    def test_empty_mask_leaves_volume(self):
        v = Volume(np.random.default_rng(0).normal(size=(6, 5, 5, 5)))
        out, mask = inject_lesion(v, LesionSpec((2.3, 2.3, 2.3), radius=0.1))
        assert not mask.any() and out == v

    def test_outside_is_bit_identical(self):
        v = Volume(np.random.default_rng(0).normal(size=(6, 10, 12, 14)))
        out, mask = inject_lesion(v, LesionSpec.tensor((7, 6, 5), 3, (2e-3, 2e-3, 2e-3)))
        assert mask.any()
        assert out.data[:, ~mask].tobytes() == v.data[:, ~mask].tobytes()
        np.testing.assert_allclose(out.data[0, mask], 2e-3)

    def test_sphere_count(self):
        r = 5.0
        mask = LesionSpec((15, 15, 15), r).mask((31, 31, 31))
        # voxels whose centre is within r, versus the analytic volume +- a one-voxel shell
        vol = 4 / 3 * math.pi * r**3
        shell = 4 * math.pi * r**2
        assert abs(mask.sum() - vol) <= shell

    def test_out_of_bounds(self):
        with pytest.raises(LesionBoundsError):
            LesionSpec((1, 5, 5), 3).mask((10, 10, 10))

    def test_scale_lesion(self):
        v = Volume(np.ones((2, 5, 5, 5)))
        out, mask = inject_lesion(v, LesionSpec((2, 2, 2), 1, shape="box", scale=3.0))
        assert mask.sum() == 27
        np.testing.assert_array_equal(out.data[:, mask], 3.0)

    def test_isotropic_lesion_drops_fa(self):
        spec = default_spec((32, 32, 16))
        lm, t = generate_phantom(spec)
        white = spec.regions[4]
        centre = tuple(c * d - 0.5 for c, d in zip(white.center, spec.dims))
        t2, mask = inject_lesion(t, LesionSpec.tensor(centre, 2.0, (2.2e-3, 2.0e-3, 1.8e-3)))
        fa = derive_params(t2).data[0]
        around = (lm.labels == 4) & ~mask
        assert fa[mask].max() < fa[around].min()


class TestDataset:
    def test_split_counts(self):
        assert split_counts(10, (0.6, 0.2, 0.2)) == (6, 2, 2)
        with pytest.raises(ValueError):
            split_counts(10, (0.5, 0.5))

    def test_jitter_differs(self):
        specs = jittered_specs(default_spec(), 6, seed=1)
        for i in range(6):
            for j in range(i + 1, 6):
                assert specs[i].regions[1:] != specs[j].regions[1:]
                assert specs[i].seed != specs[j].seed
        assert jittered_specs(default_spec(), 6, seed=1) == specs

    def test_make_dataset(self):
        base = default_spec((16, 16, 8))
        prot = default_protocol(n_directions=12, sigma=0.02)
        specs = jittered_specs(base, 5, seed=2, jitter=Jitter(center=0.5))
        a = make_dataset(specs, prot, (0.6, 0.2, 0.2), seed=3)
        b = make_dataset(specs, prot, (0.6, 0.2, 0.2), seed=3)
        assert [len(a.train), len(a.val), len(a.test)] == [3, 1, 1]
        assert [s.spec.seed for s in a.train + a.val + a.test] == [s.spec.seed for s in b.train + b.val + b.test]
        for s in a.train:
            assert s.inputs.channels == 5 and s.inputs.spatial_shape == (8, 16, 16)
        with pytest.raises(ValueError):
            make_dataset(specs[:2], prot)

    def test_normalized_channels(self):
        s = build_sample(default_spec((24, 24, 12), seed=4), default_protocol())
        mask = s.inputs.data[1] != 0
        for c in range(5):
            vals = s.inputs.data[c][mask].astype(np.float64)
            assert abs(vals.mean()) < 1e-3
            assert abs(vals.std() - 1) < 1e-3
        # background is outside the brain mask
        assert (s.inputs.data[:, s.labelmap.labels == 0] == 0).mean() > 0.95

    def test_brain_mask(self):
        prot = default_protocol(sigma=0.0)
        spec = default_spec((16, 16, 8))
        lm, t = generate_phantom(spec)
        from evenet.phantom import s0_map
        dwi = simulate_dwi(t, prot, s0_map(spec, lm))
        np.testing.assert_array_equal(brain_mask(dwi, prot), lm.labels > 0)
        with pytest.raises(ValueError):
            normalize_channels(dwi, np.zeros(lm.spatial_shape, dtype=bool))
