import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from splatstream import gaussians as gs
from splatstream import tensor as tn
from splatstream.errors import ContractError, FormatError, NumericError
from splatstream.tensor import Tensor


def raw_map(rng, h=2, w=3, d=1):
    return rng.normal(size=(h, w, 8 + 3 * gs.n_coeffs(d)))


def random_field(rng, n=5, d=1, frame=0):
    raw = raw_map(rng, 1, n, d)
    return gs.activate(raw, rng.normal(size=(1, n, 3)), 1 + rng.uniform(0, 3, (1, n)), d, frame=frame)


def one_pixel(raw_vals, d=1):
    raw = np.zeros((1, 1, 8 + 3 * gs.n_coeffs(d)))
    for i, v in raw_vals.items():
        raw[0, 0, i] = v
    return gs.activate(raw, np.zeros((1, 1, 3)), np.ones((1, 1)), d)[0]


# -- activate ---------------------------------------------------------------------


def test_quaternion_normalized():
    np.testing.assert_allclose(one_pixel({3: 2.0}).rot, [1, 0, 0, 0])


def test_zero_quaternion_is_identity():
    np.testing.assert_array_equal(one_pixel({}).rot, [1, 0, 0, 0])


def test_opacity_logit_zero_is_half():
    assert one_pixel({}).opacity == 0.5


def test_log_scale_zero_clamped_to_half():
    np.testing.assert_allclose(np.exp(one_pixel({}).log_scale), 0.5, rtol=1e-6)


def test_log_scale_lower_clamp():
    p = one_pixel({0: -50.0, 1: -50.0, 2: -50.0})
    np.testing.assert_allclose(np.exp(p.log_scale), 1e-4, rtol=1e-5)


def test_activate_copies_pointmap_and_confidence(rng):
    pm, conf = rng.normal(size=(2, 3, 3)), 1 + rng.uniform(size=(2, 3))
    f = gs.activate(raw_map(rng), pm, conf, 1, frame=4)
    assert len(f) == 6
    np.testing.assert_allclose(f.mu, pm.reshape(-1, 3), rtol=1e-6)
    np.testing.assert_allclose(f.confidence, conf.reshape(-1), rtol=1e-6)
    assert f.source_frame.tolist() == [4] * 6


def test_activate_nonfinite_names_pixel(rng):
    raw = raw_map(rng)
    raw[1, 2, 5] = np.nan
    with pytest.raises(NumericError, match=r"\(1, 2\)"):
        gs.activate(raw, np.zeros((2, 3, 3)), np.ones((2, 3)))


def test_activate_channel_mismatch(rng):
    with pytest.raises(ContractError):
        gs.activate(raw_map(rng, d=0), np.zeros((2, 3, 3)), np.ones((2, 3)), sh_degree=1)


def test_activate_tensors_matches_numpy(rng):
    raw, pm, conf = raw_map(rng), rng.normal(size=(2, 3, 3)), 1 + rng.uniform(size=(2, 3))
    with tn.precision(np.float64):
        p = gs.activate_tensors(Tensor(raw), Tensor(pm), Tensor(conf), 1)
    f = gs.params_to_field(p)
    ref = gs.activate(raw, pm, conf, 1)
    for name in ("mu", "log_scale", "rot", "sh", "confidence"):
        np.testing.assert_allclose(getattr(f, name), getattr(ref, name), atol=1e-6)
    np.testing.assert_allclose(f.opacity, ref.opacity, atol=1e-6)


@given(hnp.arrays(np.float64, (2, 2, 20), elements=st.floats(-1e3, 1e3)))
def test_activate_invariants_fuzz(raw):
    f = gs.activate(raw, np.zeros((2, 2, 3)), np.ones((2, 2)), 1)
    np.testing.assert_allclose(np.linalg.norm(f.rot, axis=1), 1.0, atol=1e-6)
    assert np.all((f.opacity >= 0) & (f.opacity <= 1))
    for i in range(len(f)):
        cov = f[i].covariance
        np.testing.assert_allclose(cov, cov.T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(cov) > 0)


# -- prune / accumulate ---------------------------------------------------------------


def test_prune_filter_semantics(rng):
    f = random_field(rng, 3)
    f.confidence[:] = [1.2, 3.0, 1.7]
    kept = gs.prune(f, 1.5)
    assert kept.confidence.tolist() == pytest.approx([3.0, 1.7])


def test_prune_threshold_one_keeps_all(rng):
    f = random_field(rng, 8)
    assert len(gs.prune(f, 1.0)) == 8


def test_prune_zero_is_identity(rng):
    f = random_field(rng, 4)
    assert gs.prune(f, 0.0).equals(f)


def test_prune_negative_threshold(rng):
    with pytest.raises(ContractError):
        gs.prune(random_field(rng), -1.0)


@given(st.floats(0, 5), st.integers(0, 2**16))
def test_prune_idempotent(th, seed):
    f = random_field(np.random.default_rng(seed), 10)
    once = gs.prune(f, th)
    assert gs.prune(once, th).equals(once)


def test_accumulate_counts_and_empty(rng):
    a = random_field(rng, 4)
    assert gs.accumulate(gs.GaussianField.empty(), a).equals(a)
    b = random_field(rng, 6, frame=1)
    assert len(gs.accumulate(a, b)) == 10


def test_accumulate_t_frames_count(rng):
    g = gs.GaussianField.empty()
    for t in range(5):
        g = gs.accumulate(g, gs.activate(raw_map(rng, 4, 4), np.zeros((4, 4, 3)), np.ones((4, 4)), 1, frame=t))
    assert len(g) == 5 * 16
    assert g.source_frame.tolist() == sorted(g.source_frame.tolist())


def test_accumulate_associative(rng):
    a, b, c = (random_field(rng, n, frame=i) for i, n in enumerate((2, 3, 4)))
    left = gs.accumulate(gs.accumulate(a, b), c)
    right = gs.accumulate(a, gs.accumulate(b, c))
    assert left.equals(right)


def test_accumulate_frame_mismatch(rng):
    a = random_field(rng)
    b = random_field(rng)
    b.canonical_frame = 3
    with pytest.raises(ContractError):
        gs.accumulate(a, b)


# -- SH ------------------------------------------------------------------------------


def test_sh_degree0_constant():
    rgb = gs.sh_eval(np.ones((3, 1)), np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(rgb, 1 / (2 * np.sqrt(np.pi)) + 0.5, atol=1e-12)


@given(hnp.arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 0.1))
def test_sh_degree0_isotropic(v):
    d = v / np.linalg.norm(v)
    np.testing.assert_allclose(gs.sh_eval(np.full((3, 1), 0.3), d), 0.3 * gs.C0 + 0.5, atol=1e-12)


def _real_sh_reference(l, m, d):
    """Real SH from associated Legendre polynomials (scipy), graphics sign convention."""
    from scipy.special import sph_harm_y

    theta = np.arccos(np.clip(d[2], -1, 1))
    phi = np.arctan2(d[1], d[0])
    if m == 0:
        return sph_harm_y(l, 0, theta, phi).real
    y = sph_harm_y(l, abs(m), theta, phi)
    v = np.sqrt(2) * (-1) ** m * (y.imag if m < 0 else y.real)
    # graphics convention flips the sign of odd-m terms relative to Condon-Shortley real SH
    return v * (-1) ** m


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_sh_matches_scipy_basis(degree):
    rng = np.random.default_rng(degree)
    dirs = rng.normal(size=(10, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ours = gs.sh_basis(dirs, degree)
    for n, d in enumerate(dirs):
        col = 0
        for l in range(degree + 1):
            for m in range(-l, l + 1):
                assert ours[n, col] == pytest.approx(_real_sh_reference(l, m, d), abs=1e-9), (l, m)
                col += 1


def test_sh_degree1_against_direct_sum(rng):
    sh = rng.normal(size=(3, 4)) * 0.3
    for _ in range(10):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        x, y, z = d
        basis = np.array([gs.C0, -gs.C1 * y, gs.C1 * z, -gs.C1 * x])
        ref = np.maximum(sh @ basis + 0.5, 0)
        np.testing.assert_allclose(gs.sh_eval(sh, d), ref, atol=1e-6)


def test_sh_rejects_degree4_and_non_unit():
    with pytest.raises(ContractError):
        gs.sh_basis(np.array([[0, 0, 1.0]]), 4)
    with pytest.raises(ContractError):
        gs.sh_eval(np.ones((3, 25)), np.array([0, 0, 1.0]))
    with pytest.raises(ContractError):
        gs.sh_eval(np.ones((3, 4)), np.array([0, 0, 2.0]))


def test_sh_basis_jacobian_matches_fd(rng):
    d = rng.normal(size=(4, 3))
    eps = 1e-6
    jac = gs.sh_basis_jacobian(d, 3)
    for c in range(3):
        e = np.zeros(3)
        e[c] = eps
        fd = (gs.sh_basis(d + e, 3) - gs.sh_basis(d - e, 3)) / (2 * eps)
        np.testing.assert_allclose(jac[:, :, c], fd, atol=1e-6)


# -- PLY ------------------------------------------------------------------------------


@pytest.mark.parametrize("d", [0, 1, 3])
def test_ply_round_trip_bitwise(tmp_path, rng, d):
    f = random_field(rng, 7, d=d, frame=2)
    p = tmp_path / "f.ply"
    gs.export_ply(f, p)
    assert gs.import_ply(p).equals(f)


def test_ply_empty_field(tmp_path):
    p = tmp_path / "e.ply"
    gs.export_ply(gs.GaussianField.empty(), p)
    assert b"element vertex 0" in p.read_bytes()
    assert len(gs.import_ply(p)) == 0


def test_ply_header_property_count(tmp_path, rng):
    p = tmp_path / "one.ply"
    gs.export_ply(random_field(rng, 1), p)
    header = p.read_bytes().split(b"end_header")[0].decode()
    assert header.count("property float") == 26
    assert "format binary_little_endian 1.0" in header


def test_ply_opacity_stored_as_logit(tmp_path):
    raw = np.zeros((1, 1, 20))
    raw[0, 0, 7] = 1.25
    f = gs.activate(raw, np.zeros((1, 1, 3)), np.ones((1, 1)))
    p = tmp_path / "o.ply"
    gs.export_ply(f, p, sidecar=False)
    vals = np.frombuffer(p.read_bytes().split(b"end_header\n")[1], dtype="<f4")
    assert vals[gs.ply_property_names(1).index("opacity")] == np.float32(1.25)


def test_ply_sidecar(tmp_path, rng):
    f = random_field(rng, 3, frame=1)
    p = tmp_path / "s.ply"
    gs.export_ply(f, p)
    meta = json.loads((tmp_path / "s.ply.json").read_text())
    assert meta["count"] == 3 and meta["sh_degree"] == 1 and meta["canonical_frame"] == 0


def test_ply_malformed_header(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 1\nend_header\n")
    with pytest.raises(FormatError) as e:
        gs.import_ply(p)
    assert e.value.offset is not None
    p.write_bytes(b"not a ply")
    with pytest.raises(FormatError):
        gs.import_ply(p)


def test_ply_truncated_body(tmp_path, rng):
    p = tmp_path / "t.ply"
    gs.export_ply(random_field(rng, 3), p, sidecar=False)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(FormatError):
        gs.import_ply(p)
