import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.stats import multivariate_normal, norm

from synfuse.batch import ModalityBatch
from synfuse.data import (
    SyntheticSpec,
    dumps_csv,
    gaussian_mi,
    gen_gaussian_pair,
    gen_multimodal,
    gen_xor_triple,
    load_csv,
    loads_csv,
    save_csv,
    select_modalities,
    split_indices,
)
from synfuse.errors import ConfigError, ParseError, ShapeError


def numeric_gaussian_mi(rho):
    """MI of a standard bivariate normal by 2-D quadrature of p log(p / (p_x p_y))."""
    joint = multivariate_normal(mean=[0, 0], cov=[[1, rho], [rho, 1]])

    def integrand(y, x):
        p = joint.pdf([x, y])
        return p * math.log(p / (norm.pdf(x) * norm.pdf(y))) if p > 0 else 0.0

    return integrate.dblquad(integrand, -8, 8, -8, 8, epsabs=1e-8)[0]


def fit_predict(x_tr, y_tr, x_te):
    """Least-squares affine fit on the training rows, applied to ``x_te``."""
    a = np.hstack([x_tr, np.ones((len(x_tr), 1))])
    w = np.linalg.lstsq(a, y_tr, rcond=None)[0]
    return np.hstack([x_te, np.ones((len(x_te), 1))]) @ w


def link_probe_mae(x_tr, y_tr, x_te, y_te):
    """Linear probe in the label's link space: fit atanh(y/3), predict 3 tanh(.)."""
    pred = 3.0 * np.tanh(fit_predict(x_tr, np.arctanh(y_tr / 3.0), x_te))
    return float(np.mean(np.abs(pred - y_te)))


def latent_probe_mae(batch, views, tr, te):
    """Recover the latent from ``views`` linearly, add the sign-product feature, then link-probe."""
    x = np.hstack(views)
    u_hat = fit_predict(x[tr], batch.meta["latent"][tr], x)
    inter = np.sign(u_hat[:, 0]) * np.sign(u_hat[:, 1]) * np.abs(u_hat[:, 2])
    f = np.hstack([u_hat, inter[:, None]])
    return link_probe_mae(f[tr], batch.labels[tr], f[te], batch.labels[te])


class TestSyntheticSpec:
    @pytest.mark.parametrize("kw", [
        {"variant": "gaussian_pair", "rho": 1.0},
        {"variant": "gaussian_pair", "rho": -1.0},
        {"variant": "xor_triple", "flip_prob": 0.6},
        {"variant": "xor_triple", "dither_sd": 0.0},
        {"variant": "multimodal_regression", "modality_dims": (12, 3, 12)},
        {"variant": "multimodal_regression", "synergy_strength": -1.0},
        {"variant": "nope"},
        {"n": 7},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SyntheticSpec(**kw).validate()


class TestGaussianPair:
    def test_independent_correlation(self):
        s = gen_gaussian_pair(SyntheticSpec("gaussian_pair", n=10000, rho=0.0, seed=1))
        assert abs(np.corrcoef(s.x[:, 0], s.y[:, 0])[0, 1]) < 0.05

    def test_analytic_mi_matches_quadrature(self):
        assert gaussian_mi(0.8) == pytest.approx(0.5108256, abs=1e-6)
        assert numeric_gaussian_mi(0.8) == pytest.approx(gaussian_mi(0.8), abs=1e-5)

    def test_dim_scaling(self):
        assert gaussian_mi(0.6, dim=3) == pytest.approx(3 * gaussian_mi(0.6))

    def test_reproducible(self):
        spec = SyntheticSpec("gaussian_pair", n=50, seed=3)
        assert np.array_equal(gen_gaussian_pair(spec).y, gen_gaussian_pair(spec).y)

    def test_per_dimension_correlation(self):
        s = gen_gaussian_pair(SyntheticSpec("gaussian_pair", n=20000, rho=0.6, dim=3, seed=2))
        c = np.corrcoef(np.hstack([s.x, s.y]).T)
        assert np.allclose(np.diag(c[:3, 3:]), 0.6, atol=0.03)
        assert np.max(np.abs(c[:3, 3:] - np.diag(np.diag(c[:3, 3:])))) < 0.03


class TestXorTriple:
    def _cells(self, batch):
        bits = (np.hstack(batch.modalities) > 0.5).astype(int)
        return bits

    def test_no_odd_parity_mass(self):
        b = gen_xor_triple(SyntheticSpec("xor_triple", n=20000, seed=0))
        bits = self._cells(b)
        assert np.mean(bits.sum(axis=1) % 2 == 1) < 0.01

    def test_fair_marginals(self):
        bits = self._cells(gen_xor_triple(SyntheticSpec("xor_triple", n=20000, seed=1)))
        assert np.all(np.abs(bits.mean(axis=0) - 0.5) < 0.02)

    def test_full_flip_makes_third_bit_independent(self):
        bits = self._cells(gen_xor_triple(SyntheticSpec("xor_triple", n=20000, seed=2, flip_prob=0.5)))
        # exact plug-in MI between b3 and (b1, b2) over the empirical cells
        key = bits[:, 0] * 2 + bits[:, 1]
        mi = 0.0
        for k in range(4):
            for b in range(2):
                p = np.mean((key == k) & (bits[:, 2] == b))
                if p > 0:
                    mi += p * math.log(p / (np.mean(key == k) * np.mean(bits[:, 2] == b)))
        assert mi < 0.002


class TestMultimodal:
    def test_labels_in_range(self):
        b = gen_multimodal(SyntheticSpec(n=3000, seed=0, synergy_strength=5.0))
        assert np.all(np.abs(b.labels) <= 3.0)
        assert b.names == ("a", "v", "t") and b.widths == (12, 12, 12)

    @staticmethod
    def _probe_gap(beta):
        b = gen_multimodal(SyntheticSpec(n=6000, seed=0, synergy_strength=beta, noise_sd=0.1))
        tr, _, te = split_indices(6000, seed=0)
        single = min(latent_probe_mae(b, [m], tr, te) for m in b.modalities)
        return single - latent_probe_mae(b, b.modalities, tr, te)

    def test_linear_probe_without_synergy(self):
        b = gen_multimodal(SyntheticSpec(n=4000, seed=1, synergy_strength=0.0, noise_sd=0.1))
        tr, _, te = split_indices(4000, seed=1)
        x = np.hstack(b.modalities)
        assert link_probe_mae(x[tr], b.labels[tr], x[te], b.labels[te]) < 0.3

    def test_synergy_makes_fusion_necessary(self):
        assert self._probe_gap(0.0) < 0.1
        assert self._probe_gap(2.0) > 0.3

    def test_reproducible(self):
        spec = SyntheticSpec(n=30, seed=4)
        assert np.array_equal(gen_multimodal(spec).labels, gen_multimodal(spec).labels)


class TestSplits:
    def test_disjoint_cover(self):
        tr, va, te = split_indices(4000, seed=0)
        assert len(tr) == 2800 and len(va) == 600 and len(te) == 600
        assert len(set(tr) | set(va) | set(te)) == 4000

    def test_bad_fractions(self):
        with pytest.raises(ConfigError):
            split_indices(10, (0.5, 0.2, 0.2))


class TestCsv:
    def _batch(self, seed=0, n=10):
        g = np.random.default_rng(seed)
        return ModalityBatch([g.normal(size=(n, 2)), g.normal(size=(n, 3)), g.normal(size=(n, 1))],
                             g.uniform(-3, 3, n), ("a", "v", "t"))

    def test_round_trip_bit_exact(self, tmp_path):
        b = self._batch()
        save_csv(b, tmp_path / "d.csv")
        back = load_csv(tmp_path / "d.csv")
        assert back.names == b.names and back.widths == b.widths
        for m1, m2 in zip(b.modalities, back.modalities):
            assert np.array_equal(m1, m2)
        assert np.array_equal(back.labels, b.labels)
        assert np.array_equal(back.ids, b.ids)

    @settings(max_examples=30, deadline=None)
    @given(vals=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=2, max_size=12))
    def test_round_trip_any_float(self, vals):
        x = np.array(vals)
        b = ModalityBatch([x[:, None], x[::-1, None]], x, ("a", "v"))
        back = loads_csv(dumps_csv(b))
        assert np.array_equal(back.modalities[0][:, 0], x) and np.array_equal(back.labels, x)

    def test_generator_round_trip(self, tmp_path):
        b = gen_multimodal(SyntheticSpec(n=50, seed=9))
        save_csv(b, tmp_path / "m.csv")
        back = load_csv(tmp_path / "m.csv")
        assert all(np.array_equal(p, q) for p, q in zip(b.modalities, back.modalities))

    def test_header(self):
        text = dumps_csv(self._batch(n=2))
        assert text.splitlines()[0] == "id,a_0,a_1,v_0,v_1,v_2,t_0,label"

    def test_missing_label(self):
        with pytest.raises(ParseError, match="label") as info:
            loads_csv("id,a_0,v_0\n0,1,2\n")
        assert info.value.line == 1

    def test_empty_file(self):
        with pytest.raises(ParseError) as info:
            loads_csv("")
        assert info.value.line == 1

    def test_ragged_row(self):
        with pytest.raises(ParseError) as info:
            loads_csv("id,a_0,v_0,label\n0,1,2,3\n1,1,2\n")
        assert info.value.line == 3

    def test_bad_float(self):
        with pytest.raises(ParseError) as info:
            loads_csv("id,a_0,v_0,label\n0,1,x,3\n")
        assert info.value.line == 2

    def test_non_finite(self):
        with pytest.raises(ParseError):
            loads_csv("id,a_0,v_0,label\n0,1,nan,3\n")

    def test_noncontiguous_modality(self):
        with pytest.raises(ParseError, match="contiguous"):
            loads_csv("id,a_0,v_0,a_1,label\n0,1,2,3,4\n")

    def test_message_has_line(self):
        with pytest.raises(ParseError, match="line 2"):
            loads_csv("id,a_0,v_0,label\n0,1,x,3\n", path="f.csv")

    def test_select_modalities(self):
        b = self._batch()
        sub = select_modalities(b, ["t", "a"])
        assert sub.names == ("t", "a") and np.array_equal(sub.modalities[1], b.modalities[0])
        with pytest.raises(ConfigError):
            select_modalities(b, ["x"])


class TestBatch:
    def test_row_mismatch(self):
        with pytest.raises(ShapeError):
            ModalityBatch([np.zeros((3, 1)), np.zeros((4, 1))])

    def test_label_mismatch(self):
        with pytest.raises(ShapeError):
            ModalityBatch([np.zeros((3, 1))], np.zeros(2))

    def test_rows_keep_ids(self):
        b = ModalityBatch([np.arange(5.0)], np.arange(5.0))
        sub = b.rows(np.array([4, 1]))
        assert list(sub.ids) == [4, 1] and list(sub.labels) == [4.0, 1.0]
