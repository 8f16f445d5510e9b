import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_scan, direct_s, trig_channel
from scrloc.codec import (
    DECODER_TOL,
    PRESETS,
    FrequencySet,
    RationalFrequencySet,
    SearchDomain,
    decode_channel,
    decode_channels,
    decode_point,
    decode_points,
    encode_channel,
    encode_point,
    exact_period,
    injectivity_probe,
    make_frequency_set,
    normalize_pairs,
    objective_s,
    objective_s_prime,
    reg_loss,
    sample_frequency_set,
    scr_loss,
    scr_loss_from_reg,
)
from scrloc.errors import (
    DegeneratePairError,
    DimensionMismatchError,
    InfeasibleConstraintError,
    InvalidParameterError,
)

FS6 = PRESETS[6]
DOM300 = SearchDomain.interval(0.0, 300.0)

# cos/sin of f_i * 42.0 for the F=6 preset, evaluated one scalar at a time with the math module.
ENC_42 = [
    0.7303697918443064, 0.6830519505581581, -0.9381860954631033, 0.3461312616330644,
    -0.6108974093185271, -0.7917097670787647, 0.8048748856219929, 0.5934445369998647,
    -0.716908412547231, -0.6971673601216635, 0.7487241994210132, -0.6628816434336999,
]


class TestFrequencySet:
    def test_f6_row_periods(self):
        fs = make_frequency_set(0.017903170262351338, 3.7079736887249526, 6)
        assert round(fs.lowest_period) == 351
        assert fs.highest_period == pytest.approx(0.50, abs=0.005)
        assert fs.channel_dim == 12 and fs.dim == 36

    def test_f8_row_periods(self):
        fs = make_frequency_set(0.031278470093268460, 2.5735254599557535, 8)
        assert round(fs.lowest_period) == 201
        assert fs.highest_period == pytest.approx(0.27, abs=0.005)

    def test_f4_row_periods(self):
        fs = PRESETS[4]
        assert round(fs.lowest_period) == 302
        assert fs.highest_period == pytest.approx(1.59, abs=0.005)

    def test_single_frequency(self):
        fs = make_frequency_set(2 * math.pi, 2, 1)
        assert fs.frequencies.tolist() == [2 * math.pi]
        assert fs.lowest_period == pytest.approx(1.0, abs=1e-15)

    def test_strictly_increasing(self):
        for fs in PRESETS.values():
            assert np.all(np.diff(fs.frequencies) > 0)
            assert fs.lowest_period > fs.highest_period

    @pytest.mark.parametrize("args", [(0.0, 2.0, 3), (-1.0, 2.0, 3), (1.0, 1.0, 3), (1.0, 0.5, 3), (1.0, 2.0, 0)])
    def test_invalid(self, args):
        with pytest.raises(InvalidParameterError):
            make_frequency_set(*args)

    def test_json_round_trip_is_bit_exact(self):
        for fs in PRESETS.values():
            text = fs.to_json()
            doc = json.loads(text)
            assert set(doc) == {"f1", "gamma", "F"}
            assert FrequencySet.from_json(text) == fs
        assert '"f1": 0.017903170262351338' in FS6.to_json()


class TestSampleFrequencySet:
    def test_ranges_respected(self):
        for seed in range(50):
            fs = sample_frequency_set(seed, (200, 500), (0.2, 2), 6)
            assert 200 <= fs.lowest_period <= 500 * (1 + 1e-12)
            assert 0.2 * (1 - 1e-12) <= fs.highest_period <= 2 * (1 + 1e-12)

    def test_deterministic(self):
        assert sample_frequency_set(0, (200, 500), (0.2, 2), 6) == sample_frequency_set(0, (200, 500), (0.2, 2), 6)
        assert sample_frequency_set(0, (200, 500), (0.2, 2), 6) != sample_frequency_set(1, (200, 500), (0.2, 2), 6)

    def test_single_frequency_degenerate_range(self):
        fs = sample_frequency_set(3, (10, 10), (10, 10), 1)
        assert fs.F == 1
        assert fs.lowest_period == pytest.approx(10.0)

    def test_infeasible(self):
        with pytest.raises(InfeasibleConstraintError):
            sample_frequency_set(0, (1, 2), (5, 8), 4)
        with pytest.raises(InfeasibleConstraintError):
            sample_frequency_set(0, (1, 2), (5, 8), 1)


class TestEncode:
    def test_zero(self):
        assert encode_channel(0.0, FS6).tolist() == [1.0, 0.0] * 6

    def test_full_period(self):
        fs = make_frequency_set(0.3, 2.0, 1)
        np.testing.assert_allclose(encode_channel(fs.lowest_period, fs), [1.0, 0.0], atol=1e-15)

    def test_frozen_trig_values(self):
        np.testing.assert_allclose(encode_channel(42.0, FS6), ENC_42, rtol=0, atol=1e-15)
        np.testing.assert_allclose(encode_channel(42.0, FS6), trig_channel(42.0, FS6.frequencies), atol=1e-15)

    def test_pairs_unit_norm(self):
        y = encode_channel(np.linspace(-1e3, 1e3, 777), FS6)
        np.testing.assert_allclose(np.hypot(y[:, 0::2], y[:, 1::2]), 1.0, atol=1e-12)

    def test_point_zero_and_axis(self):
        assert encode_point([0, 0, 0], FS6).tolist() == [1.0, 0.0] * 18
        y = encode_point([7.25, 0, 0], FS6)
        assert y.shape == (36,)
        assert y[12:].tolist() == [1.0, 0.0] * 12

    def test_point_matches_per_channel_oracle(self):
        f = FS6.frequencies
        expected = trig_channel(1.5, f) + trig_channel(-2.0, f) + trig_channel(10.0, f)
        np.testing.assert_allclose(encode_point([1.5, -2.0, 10.0], FS6), expected, atol=1e-15)

    def test_point_dimension_check(self):
        with pytest.raises(DimensionMismatchError):
            encode_point([1.0, 2.0], FS6)


class TestNormalizePairs:
    def test_examples(self):
        assert normalize_pairs([2, 0, 0, 3]).tolist() == [1, 0, 0, 1]
        r = 1 / math.sqrt(2)
        np.testing.assert_allclose(normalize_pairs([0.6, 0.8, -1, -1]), [0.6, 0.8, -r, -r], atol=1e-15)

    def test_already_normalized(self):
        y = encode_channel(3.3, FS6)
        np.testing.assert_allclose(normalize_pairs(y), y, atol=1e-12)

    @given(st.lists(st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3), min_size=2, max_size=24).filter(lambda l: len(l) % 2 == 0))
    def test_idempotent(self, values):
        once = normalize_pairs(values)
        np.testing.assert_allclose(normalize_pairs(once), once, atol=1e-12)
        np.testing.assert_allclose(np.hypot(once[0::2], once[1::2]), 1.0, atol=1e-9)

    def test_degenerate(self):
        with pytest.raises(DegeneratePairError):
            normalize_pairs([1.0, 0.0, 0.0, 0.0])
        with pytest.raises(DegeneratePairError):
            normalize_pairs([1.0, 0.0, 1e-13, -1e-13])


class TestObjective:
    def test_zero_at_preimage(self):
        y = encode_channel(17.3, FS6)
        assert abs(objective_s(17.3, y, FS6)) < 1e-9
        assert abs(objective_s_prime(17.3, y, FS6)) < 1e-9

    def test_matches_squared_distance(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            y = encode_channel(rng.uniform(-50, 50), FS6)
            t = rng.uniform(-100, 100)
            assert objective_s(t, y, FS6) == pytest.approx(direct_s(t, y, FS6.frequencies), abs=1e-11)

    def test_matches_squared_distance_unnormalized(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            y = rng.normal(size=12)
            t = rng.uniform(-100, 100)
            assert objective_s(t, y, FS6) == pytest.approx(direct_s(t, y, FS6.frequencies), abs=1e-10)

    def test_antipodal(self):
        fs = make_frequency_set(0.7, 2.0, 1)
        assert objective_s(math.pi / 0.7, [1.0, 0.0], fs) == pytest.approx(4.0, abs=1e-12)

    def test_derivative_quarter_period(self):
        fs = make_frequency_set(0.7, 2.0, 1)
        assert objective_s_prime(math.pi / (2 * 0.7), [1.0, 0.0], fs) == pytest.approx(2 * 0.7, abs=1e-12)

    def test_derivative_matches_central_differences(self):
        rng = np.random.default_rng(7)
        t = rng.uniform(-300, 300, 1000)
        y = normalize_pairs(rng.normal(size=(1000, 12)))
        h = 1e-6
        fd = (objective_s(t + h, y, FS6) - objective_s(t - h, y, FS6)) / (2 * h)
        an = objective_s_prime(t, y, FS6)
        # relative error against the gradient scale, which guards points where S' ~ 0
        scale = np.maximum(np.abs(an), 1.0)
        assert np.max(np.abs(fd - an) / scale) < 1e-4

    def test_nonnegative(self):
        rng = np.random.default_rng(8)
        y = normalize_pairs(rng.normal(size=(500, 12)))
        assert np.all(objective_s(rng.uniform(-1e3, 1e3, 500), y, FS6) >= -1e-12)


class TestDecodeChannel:
    def test_exact_value(self):
        y = encode_channel(123.456, FS6)
        assert abs(decode_channel(y, FS6, DOM300) - 123.456) < DECODER_TOL
        # the 1 mm dense scan lands on the same point
        t, s = dense_scan(y, FS6.frequencies, 0, 300, 1e-3)
        assert abs(t[0] - 123.456) < 1e-6 and s[0] < 1e-9

    def test_noisy_matches_dense_scan_basin(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(0, 300, 1000)
        y = encode_channel(x, FS6) + rng.normal(0, 0.1, (1000, 12))
        dec, s = decode_channels(y, FS6, DOM300, return_objective=True)
        res = 1e-3
        ot, os_ = dense_scan(y, FS6.frequencies, 0, 300, res)
        # never a worse objective than the scan, and always the scan's basin
        assert np.all(s <= os_ + 1e-9)
        assert np.max(np.abs(dec - ot)) <= res / 2 + 1e-9
        assert np.median(np.abs(dec - x)) <= np.median(np.abs(ot - x)) + res

    def test_single_point_domain(self):
        x0 = 4.2
        y = encode_channel(x0 + 0.1, FS6)
        assert decode_channel(y, FS6, SearchDomain.interval(x0, x0)) == x0

    def test_degenerate(self):
        with pytest.raises(DegeneratePairError):
            decode_channel(np.zeros(12), FS6, DOM300)

    def test_batch_degenerate_row_is_nan(self):
        y = encode_channel(np.array([1.0, 2.0, 3.0]), FS6)
        y[1] = 0
        out = decode_channels(y, FS6, DOM300)
        assert np.isnan(out[1])
        np.testing.assert_allclose(out[[0, 2]], [1.0, 3.0], atol=DECODER_TOL)

    def test_multi_interval_domain(self):
        dom = SearchDomain.union([(0, 10), (50, 60), (5, 12)])
        assert dom.intervals == ((0.0, 12.0), (50.0, 60.0))
        x = np.array([1.0, 11.5, 55.5, 60.0])
        np.testing.assert_allclose(decode_channels(encode_channel(x, FS6), FS6, dom), x, atol=DECODER_TOL)

    def test_outside_domain_is_clamped_minimizer(self):
        dom = SearchDomain.interval(0.0, 20.0)
        y = encode_channel(25.0, FS6)
        out, s = decode_channels(y, FS6, dom, return_objective=True)
        assert 0 <= out <= 20
        ot, os_ = dense_scan(y, FS6.frequencies, 0, 20, 1e-4)
        assert s <= os_[0] + 1e-9
        assert abs(out - ot[0]) <= 1e-4


class TestDecodePoint:
    def test_round_trip(self):
        doms = [SearchDomain.interval(-20, 20)] * 3
        v = np.array([10.0, -5.0, 2.5])
        np.testing.assert_allclose(decode_point(encode_point(v, FS6), FS6, doms), v, atol=DECODER_TOL)

    def test_round_trip_matches_oracle_per_channel(self):
        v = [10.0, -5.0, 2.5]
        y = encode_point(v, FS6)
        for k in range(3):
            t, _ = dense_scan(y[12 * k : 12 * (k + 1)], FS6.frequencies, -20, 20, 1e-3)
            assert abs(t[0] - v[k]) < 1e-6

    def test_zero_vector(self):
        with pytest.raises(DegeneratePairError):
            decode_point(np.zeros(36), FS6, DOM300)

    def test_batch_marks_whole_point_invalid(self):
        y = encode_point(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), FS6)
        y[0, 20:22] = 0.0
        out = decode_points(y, FS6, [DOM300] * 3)
        assert np.all(np.isnan(out[0]))
        np.testing.assert_allclose(out[1], [4, 5, 6], atol=DECODER_TOL)


class TestRoundTripProperties:
    @pytest.mark.parametrize("fs", [PRESETS[4], PRESETS[6], PRESETS[8], sample_frequency_set(4, (200, 500), (0.2, 2), 5)])
    def test_ten_thousand_points(self, fs):
        rng = np.random.default_rng(fs.F)
        v = rng.uniform(0, 150, (10_000, 3))
        dom = SearchDomain.interval(0, 150)
        out = decode_points(encode_point(v, fs), fs, [dom] * 3)
        assert np.max(np.abs(out - v)) < DECODER_TOL

    def test_oracle_equivalence_fine_resolution(self):
        rng = np.random.default_rng(12)
        res = FS6.highest_period / 1000
        x = rng.uniform(0, 15, 150)
        for sigma in (0.0, 0.15, 0.4):
            y = encode_channel(x, FS6) + rng.normal(0, sigma, (150, 12))
            _, s = decode_channels(y, FS6, SearchDomain.interval(0, 15), return_objective=True)
            _, os_ = dense_scan(y, FS6.frequencies, 0, 15, res)
            assert np.all(s <= os_ + 1e-9)

    def test_noise_ordering_f6_vs_f4(self):
        rng = np.random.default_rng(21)
        x = rng.uniform(0, 300, 1000)
        med = {}
        for F in (4, 6):
            noise = np.random.default_rng(22).normal(0, 0.2, (1000, 2 * F))
            y = encode_channel(x, PRESETS[F]) + noise
            med[F] = np.median(np.abs(decode_channels(y, PRESETS[F], DOM300) - x))
        assert med[6] <= med[4]

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-1000, 1000))
    def test_translation_coverage(self, offset):
        rng = np.random.default_rng(abs(int(offset * 1000)) % 2**32)
        dom = SearchDomain.interval(0, 30).shifted(offset)
        x = offset + rng.uniform(0, 30, 200)
        np.testing.assert_allclose(decode_channels(encode_channel(x, FS6), FS6, dom), x, atol=DECODER_TOL)


class TestExactPeriod:
    def test_small_examples(self):
        assert exact_period(RationalFrequencySet.from_pairs([(1, 2), (1, 3)])) == 6  # 12 pi
        assert exact_period(RationalFrequencySet.from_pairs([(3, 4)])) == Fraction(4, 3)  # 8 pi / 3

    def test_two_fifths_four_sevenths(self):
        rfs = RationalFrequencySet.from_pairs([(2, 5), (4, 7)])
        q = exact_period(rfs)
        assert q == Fraction(35, 2)  # 35 pi
        freqs = [float(f) for f in rfs.fractions]
        P = 2 * math.pi * float(q)
        t = np.random.default_rng(0).uniform(-50, 50, 10_000)
        enc = lambda s: np.concatenate([np.cos(np.outer(s, freqs)), np.sin(np.outer(s, freqs))], axis=1)
        np.testing.assert_allclose(enc([0.0]), enc([P]), atol=1e-12)
        np.testing.assert_allclose(enc(t), enc(t + P), atol=1e-9)
        half = np.linalg.norm(enc(t) - enc(t + P / 2), axis=1)
        assert np.all(half > 1e-3)

    def test_rejects_non_coprime(self):
        with pytest.raises(InvalidParameterError):
            RationalFrequencySet.from_pairs([(2, 4)])

    def test_huge_periods_from_doubles(self):
        rfs = RationalFrequencySet.from_floats(FS6.frequencies)
        q = exact_period(rfs)
        # period in meters is astronomically large; Python ints do not overflow
        assert 2 * math.pi * q > 1e12


class TestInjectivityProbe:
    def test_single_period(self):
        fs = make_frequency_set(2 * math.pi / 10, 2.0, 1)
        rep = injectivity_probe(fs, (0, 9.5), 0.01, 0.5)
        assert rep.min_distance > 0.1

    def test_rational_ratio_subset_collides(self):
        fs = make_frequency_set(2 * math.pi / 4.0, 2.0, 3)
        rep = injectivity_probe(fs, (0, 20), 0.01, 1.0, subset=[0, 2])
        assert rep.min_distance < 1e-9
        assert rep.at_separation == pytest.approx(4.0)
        # full set also repeats with the lowest period when gamma is an integer
        assert injectivity_probe(fs, (0, 20), 0.01, 1.0).min_distance < 1e-9

    def test_table_row_positive(self):
        rep = injectivity_probe(FS6, (0, 300), 0.01, 0.25)
        assert rep.grid_points == 30001
        assert rep.min_distance > 0

    def test_matches_pairwise_brute_force(self):
        fs = sample_frequency_set(9, (20, 30), (0.5, 1), 4)
        grid = np.arange(0, 40.0001, 0.05)
        enc = encode_channel(grid, fs)
        d = np.linalg.norm(enc[:, None, :] - enc[None, :, :], axis=2)
        sep = np.abs(grid[:, None] - grid[None, :]) > 0.3
        expected = d[sep].min()
        rep = injectivity_probe(fs, (0, 40), 0.05, 0.3)
        assert rep.min_distance == pytest.approx(expected, abs=1e-9)


class TestLosses:
    def test_zero_at_truth(self):
        v = [3.0, -1.0, 7.5]
        assert reg_loss(v, encode_point(v, FS6), FS6) == pytest.approx(0, abs=1e-12)

    def test_sign_flip(self):
        v = [3.0, -1.0, 7.5]
        y = encode_point(v, FS6)
        assert reg_loss(v, -y, FS6) == pytest.approx(2 * np.sum(np.abs(y)), rel=1e-12)

    def test_matches_elementwise_sum(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            v = rng.uniform(-10, 10, 3)
            y = rng.normal(size=36)
            yn = y.copy()
            for i in range(0, 36, 2):
                n = math.hypot(y[i], y[i + 1])
                yn[i], yn[i + 1] = y[i] / n, y[i + 1] / n
            tgt = []
            for c in v:
                tgt += trig_channel(c, FS6.frequencies)
            expected = sum(abs(a - b) for a, b in zip(tgt, yn))
            assert reg_loss(v, y, FS6) == pytest.approx(expected, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            reg_loss([0, 0, 0], np.ones(24), FS6)

    def test_scr_values(self):
        assert scr_loss_from_reg(0.0, 1.0) == 0.0
        assert scr_loss_from_reg(2.0, 0.5) == pytest.approx(1 - math.log(0.5))
        assert scr_loss_from_reg(2.0, 0.5) == pytest.approx(1.6931, abs=1e-4)
        v = [1.0, 2.0, 3.0]
        assert scr_loss(v, encode_point(v, FS6), 1.0, FS6) == pytest.approx(0.0, abs=1e-12)

    def test_scr_minimizer(self):
        L = 0.37
        taus = np.linspace(0.01, 10, 100_000)
        vals = [scr_loss_from_reg(L, t) for t in taus[::10]]
        best = taus[::10][int(np.argmin(vals))]
        assert abs(best - 1 / L) <= 10 * (taus[1] - taus[0])

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_nonpositive_tau(self, tau):
        with pytest.raises(InvalidParameterError):
            scr_loss([0, 0, 0], encode_point([0, 0, 0], FS6), tau, FS6)
