import struct

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import shapes
from nerfpipe.errors import ConfigError, NoDataError, ParseError, ValidationError
from nerfpipe.pcq import (
    FEATURES,
    LinearModel,
    aggregate,
    cloud_metrics,
    compute_features,
    format_table,
    histogram_entropy,
    local_eigenvalues,
    overall_score,
    read_point_cloud,
    write_ply,
    write_xyz,
)
from nerfpipe.pcq.features import feature_vector, neighbor_indices
from nerfpipe.pcq.io import read_ply, read_xyz
from nerfpipe.pcq.metrics import STAT_NAMES


def rng(seed=0):
    return np.random.default_rng(seed)


# --- independent oracle ------------------------------------------------------


def brute_neighbors(pts, k):
    """Self plus the k nearest others, ordered by (distance, index), by full scan."""
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    out = []
    for i in range(len(pts)):
        order = [j for j in np.lexsort((np.arange(len(pts)), d[i])) if j != i]
        out.append([i] + order[:k])
    return np.array(out)


def oracle_eigenvalues(block):
    """Covariance eigenvalues as roots of the characteristic cubic, 40 digits."""
    mpmath.mp.dps = 40
    n = len(block)
    rows = [[mpmath.mpf(float(x)) for x in p] for p in block]
    mean = [sum(r[i] for r in rows) / n for i in range(3)]
    c = [[sum((r[i] - mean[i]) * (r[j] - mean[j]) for r in rows) / n for j in range(3)] for i in range(3)]
    m = mpmath.matrix(c)
    tr = c[0][0] + c[1][1] + c[2][2]
    minors = c[0][0] * c[1][1] - c[0][1] ** 2 + c[0][0] * c[2][2] - c[0][2] ** 2 + c[1][1] * c[2][2] - c[1][2] ** 2
    roots = mpmath.polyroots([1, -tr, minors, -mpmath.det(m)], maxsteps=200, extraprec=200)
    return sorted((float(mpmath.re(r)) for r in roots), reverse=True)


# --- I/O ---------------------------------------------------------------------


class TestIO:
    @pytest.mark.parametrize("binary", [False, True])
    def test_ply_round_trip(self, tmp_path, binary):
        pts = rng().normal(size=(100, 3)) * 1e3
        p = tmp_path / "c.ply"
        write_ply(p, pts, binary=binary)
        assert np.array_equal(read_point_cloud(p), pts)

    def test_xyz_round_trip(self, tmp_path):
        pts = rng().normal(size=(50, 3))
        p = tmp_path / "c.xyz"
        write_xyz(p, pts)
        assert np.array_equal(read_point_cloud(p), pts)

    def test_xyz_extras_and_comments(self, tmp_path):
        p = tmp_path / "c.xyz"
        p.write_text("# header\n1 2 3 255 0 0\n\n4,5,6\n")
        assert read_xyz(p).tolist() == [[1, 2, 3], [4, 5, 6]]

    def test_xyz_bad_line_number(self, tmp_path):
        p = tmp_path / "c.xyz"
        p.write_text("1 2 3\n4 5\n")
        with pytest.raises(ParseError) as err:
            read_xyz(p)
        assert err.value.line == 2

    def test_xyz_non_numeric(self, tmp_path):
        p = tmp_path / "c.xyz"
        p.write_text("1 2 3\n1 2 3\na b c\n")
        with pytest.raises(ParseError) as err:
            read_xyz(p)
        assert err.value.line == 3

    def test_ply_extra_props_and_faces(self, tmp_path):
        p = tmp_path / "c.ply"
        p.write_text(
            "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty float y\n"
            "property float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\n"
            "end_header\n0 0 0 1\n1 2 3 4\n3 0 1 1\n"
        )
        assert read_ply(p).tolist() == [[0, 0, 0], [1, 2, 3]]

    def test_ply_binary_float32(self, tmp_path):
        p = tmp_path / "c.ply"
        head = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
        p.write_bytes(head + struct.pack("<6f", 1, 2, 3, 4, 5, 6))
        assert read_ply(p).tolist() == [[1, 2, 3], [4, 5, 6]]

    def test_ply_count_mismatch(self, tmp_path):
        p = tmp_path / "c.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n")
        with pytest.raises(ParseError, match="declares 3"):
            read_ply(p)

    def test_ply_truncated_binary(self, tmp_path):
        p = tmp_path / "c.ply"
        head = b"ply\nformat binary_little_endian 1.0\nelement vertex 5\nproperty double x\nproperty double y\nproperty double z\nend_header\n"
        p.write_bytes(head + bytes(24))
        with pytest.raises(ParseError):
            read_ply(p)

    @pytest.mark.parametrize(
        "header",
        [
            "ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n",
        ],
    )
    def test_ply_bad_headers(self, tmp_path, header):
        p = tmp_path / "c.ply"
        p.write_text(header + "0 0 0\n")
        with pytest.raises(ParseError):
            read_ply(p)

    def test_bad_ply_line(self, tmp_path):
        p = tmp_path / "c.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 2\n")
        with pytest.raises(ParseError) as err:
            read_ply(p)
        assert err.value.line == 9

    def test_non_finite(self, tmp_path):
        p = tmp_path / "c.xyz"
        p.write_text("1 2 nan\n")
        with pytest.raises(ParseError):
            read_xyz(p)
        with pytest.raises(ParseError):
            write_xyz(tmp_path / "o.xyz", [[1, 2, np.inf]])


# --- neighbourhoods and eigenvalues ----------------------------------------


class TestEigenvalues:
    def test_against_characteristic_polynomial(self):
        pts = rng(3).normal(size=(60, 3)) * [3.0, 1.0, 0.2]
        k = 8
        eig = local_eigenvalues(pts, k)
        nb = brute_neighbors(pts, k)
        for i in range(0, 60, 3):
            want = oracle_eigenvalues(pts[nb[i]])
            assert eig.values[i] == pytest.approx(want, abs=1e-9, rel=1e-9)

    def test_neighbours_match_brute_force_with_ties(self):
        g = np.arange(6.0)
        grid = np.array(np.meshgrid(g, g, g, indexing="ij")).reshape(3, -1).T
        perm = rng(1).permutation(len(grid))
        pts = grid[perm]
        for k in (4, 6, 18, 26):
            assert np.array_equal(neighbor_indices(pts, k), brute_neighbors(pts, k))

    def test_duplicates(self):
        pts = np.vstack([np.zeros((20, 3)), rng().random((40, 3))])
        nb = neighbor_indices(pts, 5)
        assert np.array_equal(nb, brute_neighbors(pts, 5))

    def test_k_limits(self):
        pts = rng().random((10, 3))
        with pytest.raises(ValidationError):
            neighbor_indices(pts, 2)
        with pytest.raises(ValidationError):
            neighbor_indices(pts, 10)

    def test_rigid_motion_and_scale(self):
        pts = rng(5).normal(size=(400, 3))
        q, _ = np.linalg.qr(rng(6).normal(size=(3, 3)))
        moved = 7.5 * pts @ q.T + [100.0, -3.0, 42.0]
        a = compute_features(local_eigenvalues(pts, 10))
        b = compute_features(local_eigenvalues(moved, 10))
        for f in FEATURES:
            assert np.allclose(a[f], b[f], atol=1e-9)

    def test_point_order(self):
        pts = rng(7).random((300, 3))
        perm = rng(8).permutation(300)
        a = compute_features(local_eigenvalues(pts, 12))
        b = compute_features(local_eigenvalues(pts[perm], 12))
        for f in FEATURES:
            assert np.allclose(a[f][perm], b[f], atol=1e-12)

    def test_degenerate_neighbourhoods(self):
        pts = np.vstack([np.zeros((10, 3)), rng().random((50, 3))])
        eig = local_eigenvalues(pts, 5)
        assert eig.degenerate[:10].all() and not eig.degenerate[10:].any()
        feats = compute_features(eig)
        assert all((feats[f][:10] == 0).all() for f in FEATURES)
        stats = cloud_metrics(pts, 5)
        assert stats.n_degenerate == 10 and stats.n_points == 50

    def test_all_degenerate(self):
        with pytest.raises(NoDataError):
            cloud_metrics(np.ones((40, 3)), 5)


# --- identities ----------------------------------------------------------------


class TestIdentities:
    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (40, 3), elements=st.floats(-1e3, 1e3, allow_nan=False)), st.integers(3, 10))
    def test_per_point(self, pts, k):
        eig = local_eigenvalues(pts, k)
        f = compute_features(eig)
        ok = ~eig.degenerate
        assert np.allclose((f["linearity"] + f["planarity"] + f["sphericity"])[ok], 1.0, atol=1e-9)
        assert np.allclose((f["anisotropy"] + f["sphericity"])[ok], 1.0, atol=1e-9)
        for name in FEATURES:
            assert ((f[name] >= -1e-12) & (f[name] <= 1 + 1e-12)).all()
        assert (f["curvature"] <= 1 / 3 + 1e-12).all()

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
    def test_feature_vector(self, a, b, c):
        l1, l2, l3 = sorted((a, b, c), reverse=True)
        v = feature_vector(l1, l2, l3)
        if l1 > 0:
            assert v.linearity + v.planarity + v.sphericity == pytest.approx(1.0, abs=1e-9)
            assert v.anisotropy == pytest.approx(1 - v.sphericity, abs=1e-12)

    def test_unsorted(self):
        with pytest.raises(ValidationError):
            feature_vector(0, 1, 0)

    def test_identities_on_means(self):
        stats = cloud_metrics(rng(2).normal(size=(2000, 3)), 20)
        m = {f: stats.features[f].mean for f in FEATURES}
        assert m["linearity"] + m["planarity"] + m["sphericity"] == pytest.approx(1, abs=1e-9)
        assert m["anisotropy"] + m["sphericity"] == pytest.approx(1, abs=1e-9)


# --- synthetic shapes ----------------------------------------------------------


class TestShapes:
    def test_line(self):
        stats = cloud_metrics(shapes.line(5000, rng()), 30)
        assert stats.features["linearity"].mean == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("dim,make,feature", [(2, shapes.disc, "planarity"), (3, shapes.ball, "sphericity"), (3, shapes.ball, "curvature")])
    def test_interior_matches_monte_carlo_oracle(self, dim, make, feature):
        pts = make(20000, rng(11))
        f = compute_features(local_eigenvalues(pts, 30))
        interior = np.linalg.norm(pts, axis=1) < 0.6
        want = shapes.interior_oracle(dim, 30, 4000, rng(12))[feature]
        assert f[feature][interior].mean() == pytest.approx(want, abs=0.01)

    @pytest.mark.parametrize("dim", [2, 3])
    def test_whole_cloud_neighbourhood_reaches_analytic_limit(self, dim):
        # lattice points inside a disc/ball have an exactly isotropic covariance
        g = np.arange(-7.0, 8.0)
        axes = np.meshgrid(*([g] * dim), indexing="ij")
        pts = np.zeros((axes[0].size, 3))
        pts[:, :dim] = np.stack([a.ravel() for a in axes], axis=1)
        pts = pts[np.linalg.norm(pts, axis=1) <= 7]
        f = compute_features(local_eigenvalues(pts, len(pts) - 1))
        if dim == 2:
            assert np.allclose(f["planarity"], 1.0, atol=1e-9)
        else:
            assert np.allclose(f["curvature"], 1 / 3, atol=1e-9)
            assert np.allclose(f["sphericity"], 1.0, atol=1e-9)


# --- aggregation, entropy and the score model ------------------------------------


class TestMetrics:
    def test_entropy_values(self):
        assert histogram_entropy([0.0] * 100) == 0.0
        assert histogram_entropy([0.0, 1.0]) == 1.0
        assert histogram_entropy((np.arange(256) + 0.5) / 256) == 8.0
        assert histogram_entropy(np.linspace(0, 1, 1000), 4) == pytest.approx(2.0, abs=1e-2)

    def test_entropy_errors(self):
        with pytest.raises(NoDataError):
            histogram_entropy([])
        with pytest.raises(ValidationError):
            histogram_entropy([0.5], 0)

    def test_aggregate(self):
        feats = {f: np.array([0.0, 1.0]) for f in FEATURES}
        s = aggregate(feats)
        assert s.features["linearity"].mean == 0.5 and s.features["linearity"].std == 0.5
        assert s.vector().shape == (15,)
        with pytest.raises(ValidationError):
            aggregate({"linearity": [1.0]})

    def test_model_forms(self, tmp_path):
        stats = aggregate({f: [0.25, 0.75] for f in FEATURES})
        listed = LinearModel.from_dict({"weights": [1.0] * 15, "intercept": 1})
        assert overall_score(stats, listed) == pytest.approx(1 + 5 * (0.5 + 0.25 + 1.0))
        p = tmp_path / "m.yaml"
        p.write_text("weights: {linearity.mean: 2}\nintercept: 0.1\n")
        assert overall_score(stats, LinearModel.load(p)) == pytest.approx(1.1)
        assert set(STAT_NAMES) == {f"{f}.{s}" for f in FEATURES for s in ("mean", "std", "entropy")}

    @pytest.mark.parametrize(
        "bad",
        [
            {"weights": [1.0] * 14},
            {"weights": {"linearity.median": 1}},
            {"weights": {"linearity.mean": float("nan")}},
            {"weights": {}, "bias": 1},
            {"weights": "x"},
            [1, 2],
        ],
    )
    def test_model_errors(self, bad):
        with pytest.raises(ConfigError):
            LinearModel.from_dict(bad)

    def test_table(self):
        stats = aggregate({f: [0.25, 0.75] for f in FEATURES})
        stats.overall = 0.5
        text = format_table({"cloud-a": stats, "cloud-b": stats})
        assert "Linearity" in text and "(entropy: 1.00)" in text and "0.500" in text
