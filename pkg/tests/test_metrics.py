import numpy as np
import pytest
import scipy.linalg
import scipy.signal
from hypothesis import given, settings, strategies as st

from cyclediff.autoencoder import IdentityAutoencoder
from cyclediff.conditions import Condition, ConditionBatch, Sex
from cyclediff.diffusion import make_schedule
from cyclediff.metrics import (FrechetError, GenerativeModel, MetricsReport, Predictor, PredictorGateError,
                               PredictorPair, age_mae, age_sweep, check_gate, comparison_summary,
                               counterfactual_table, direct_generation_eval, fit_predictor, frechet_distance,
                               mean_pairwise_ms_ssim, ms_ssim, ms_ssim_weights, sex_accuracy, sweep_specs,
                               table3_csv, train_predictors, write_report)
from cyclediff.ndtensor import Rng, Tensor
from cyclediff.phantom import PhantomSpec, render_array, render_batch, sample_dataset


# -- independent MS-SSIM reference (2-D correlation, reshape pooling) ------------

def ref_window():
    x = np.arange(11) - 5.0
    g = np.exp(-x ** 2 / (2 * 1.5 ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ref_ms_ssim(a, b, scales=3):
    w2 = ref_window()
    weights = np.array([0.0448, 0.2856, 0.3001][:scales])
    weights /= weights.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    a, b = np.asarray(a, float), np.asarray(b, float)
    out = 1.0
    for s in range(scales):
        if s:
            h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
            a = a[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
            b = b[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        f = lambda x: scipy.signal.correlate2d(x, w2, mode="valid")
        ma, mb = f(a), f(b)
        va, vb, cov = f(a * a) - ma ** 2, f(b * b) - mb ** 2, f(a * b) - ma * mb
        cs = (2 * cov + c2) / (va + vb + c2)
        if s == scales - 1:
            cs = cs * (2 * ma * mb + c1) / (ma ** 2 + mb ** 2 + c1)
        out *= max(cs.mean(), 0.0) ** weights[s]
    return out


@pytest.fixture(scope="module")
def phantoms():
    return render_batch(sample_dataset(6, 21))[:, 0]


def test_ms_ssim_self_is_one(phantoms):
    for x in phantoms:
        assert abs(ms_ssim(x, x) - 1.0) <= 1e-6


def test_ms_ssim_matches_reference(phantoms):
    for i in range(len(phantoms) - 1):
        assert ms_ssim(phantoms[i], phantoms[i + 1]) == pytest.approx(ref_ms_ssim(phantoms[i], phantoms[i + 1]),
                                                                      abs=1e-10)
    noise = Rng(0).uniform(size=(64, 64))
    assert ms_ssim(phantoms[0], noise) == pytest.approx(ref_ms_ssim(phantoms[0], noise), abs=1e-10)


def test_ms_ssim_negative_image_low(phantoms):
    x = phantoms[0]
    assert ms_ssim(x, 1 - x) < 0.5
    ramp = np.tile(np.linspace(0, 1, 64), (64, 1))
    assert ms_ssim(ramp, 1 - ramp) < 0.5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_ms_ssim_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((64, 64)), r.random((64, 64))
    v = ms_ssim(a, b)
    assert abs(v - ms_ssim(b, a)) <= 1e-6
    assert 0.0 <= v <= 1.0


def test_ms_ssim_errors():
    with pytest.raises(ValueError):
        ms_ssim(np.zeros((40, 40)), np.zeros((40, 40)))
    with pytest.raises(ValueError):
        ms_ssim(np.zeros((64, 64)), np.zeros((64, 48)))
    assert ms_ssim(np.zeros((11, 11)), np.zeros((11, 11)), scales=1) == pytest.approx(1.0)


def test_weights_renormalised():
    w = ms_ssim_weights(3)
    assert w.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(w, np.array([0.0448, 0.2856, 0.3001]) / 0.6305)


def test_pairwise_mean_matches_brute_force_bit_exact(phantoms):
    total, n = 0.0, len(phantoms)
    for i in range(n):
        for j in range(i + 1, n):
            total += ms_ssim(phantoms[i], phantoms[j])
    assert mean_pairwise_ms_ssim(phantoms) == total / (n * (n - 1) // 2)
    with pytest.raises(ValueError):
        mean_pairwise_ms_ssim(phantoms[:1])


def test_pairwise_mean_rises_with_duplicates(phantoms):
    assert mean_pairwise_ms_ssim(np.concatenate([phantoms, phantoms[:2]])) > mean_pairwise_ms_ssim(phantoms)


# -- Fréchet distance ------------------------------------------------------------------

def ref_frechet(a, b):
    ma, mb = a.mean(0), b.mean(0)
    sa, sb = np.atleast_2d(np.cov(a, rowvar=False)), np.atleast_2d(np.cov(b, rowvar=False))
    root = scipy.linalg.sqrtm(sa @ sb).real
    return float((ma - mb) @ (ma - mb) + np.trace(sa + sb - 2 * root))


def standardized(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    return (x - x.mean()) / x.std(ddof=1)


def test_frechet_identical_sets_zero():
    f = np.random.default_rng(0).standard_normal((200, 16))
    assert abs(frechet_distance(f, f)) <= 1e-4


def test_frechet_one_dimensional_closed_form():
    a = standardized(500, 1)
    assert frechet_distance(a, a + 1.0) == pytest.approx(1.0, rel=0.05)
    # (mu1 - mu2)^2 + (sigma1 - sigma2)^2 = 1 + 1
    assert frechet_distance(a, 2 * standardized(500, 2) + 1.0) == pytest.approx(2.0, rel=0.05)


def test_frechet_matches_sqrtm_reference():
    r = np.random.default_rng(3)
    a = r.standard_normal((300, 8)) @ r.standard_normal((8, 8))
    b = r.standard_normal((300, 8)) @ r.standard_normal((8, 8)) + 0.5
    assert frechet_distance(a, b) == pytest.approx(ref_frechet(a, b), rel=1e-6)


def test_frechet_symmetric_and_rotation_invariant():
    r = np.random.default_rng(4)
    a = r.standard_normal((256, 6))
    b = 1.3 * r.standard_normal((256, 6)) + 0.2
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) <= 1e-4
    q, _ = np.linalg.qr(r.standard_normal((6, 6)))
    assert abs(frechet_distance(a @ q, b @ q) - frechet_distance(a, b)) <= 1e-3


def test_frechet_errors():
    with pytest.raises(ValueError):
        frechet_distance(np.zeros((10, 16)), np.zeros((10, 16)))
    with pytest.raises(ValueError):
        frechet_distance(np.zeros((50, 3)), np.zeros((50, 4)))
    assert issubclass(FrechetError, ValueError)


def test_frechet_rank_deficient_is_clamped():
    r = np.random.default_rng(5)
    a = r.standard_normal((100, 2))
    a = np.concatenate([a, a[:, :1]], axis=1)  # exactly singular covariance
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-4)


# -- predictors and simple metrics ------------------------------------------------------

class Const:
    def __init__(self, values):
        self.values = np.asarray(values, float)

    def predict(self, images):
        return self.values


def test_age_mae_exact_and_shift():
    t = np.array([10.0, 40.0, 90.0])
    assert age_mae(Const(t), None, t) == 0.0
    for k in (10.0, -3.5):
        assert age_mae(Const(t + k), None, t) == abs(k)
    assert age_mae(lambda x: t, None, t) == 0.0
    with pytest.raises(ValueError):
        age_mae(Const([]), None, [])


def test_constant_regressor_baseline_near_25():
    ages = np.array([s.condition.age for s in sample_dataset(10000, 3)])
    assert age_mae(Const(np.full(len(ages), 50.0)), None, ages) == pytest.approx(25.0, abs=0.5)


def test_sex_accuracy():
    s = np.array([0, 1, 1, 0])
    assert sex_accuracy(Const([0.1, 0.9, 0.5, 0.49]), None, s) == 1.0
    assert sex_accuracy(Const([0.9, 0.1, 0.2, 0.7]), None, s) == 0.0
    with pytest.raises(ValueError):
        sex_accuracy(Const([]), None, [])


def test_predictor_shapes_and_heads():
    x = render_batch(sample_dataset(3, 1))
    age = Predictor.init("age", Rng(0))
    assert age.features(x).shape == (3, 64) and age.feature_dim == 64
    assert age.predict(x).shape == (3,)
    p = Predictor.init("sex", Rng(1)).predict(x)
    assert np.all((p > 0) & (p < 1))
    with pytest.raises(ValueError):
        Predictor.init("height", Rng(0))


def test_fit_predictor_reduces_loss():
    specs = sample_dataset(64, 2)
    x = render_batch(specs)
    cond = ConditionBatch.of(s.condition for s in specs)
    _, losses = fit_predictor(Predictor.init("age", Rng(0)), x, cond, 40, Rng(1), batch_size=16)
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_gate_failure_raises_with_diagnostics():
    specs = sample_dataset(16, 2)
    x = render_batch(specs)
    cond = ConditionBatch.of(s.condition for s in specs)
    with pytest.raises(PredictorGateError) as info:
        train_predictors(x, cond, x, cond, Rng(0), steps=1, max_rounds=2, batch_size=4)
    assert info.value.diagnostics["rounds"] == 2 and "val_mae" in info.value.diagnostics
    with pytest.raises(PredictorGateError):
        check_gate(PredictorPair(None, None, {"val_mae": 6.0, "val_accuracy": 0.95}))
    check_gate(PredictorPair(None, None, {"val_mae": 4.0, "val_accuracy": 0.95}))


# -- evaluation pipelines with stub models ---------------------------------------------

class OracleAgePredictor:
    """Stand-in regressor: phantom oracle for ages, pixel statistics as features."""

    def predict(self, images):
        from cyclediff.phantom import oracle_age
        return np.array([oracle_age(im) or 0.0 for im in images])

    def features(self, images):
        im = np.asarray(images).reshape(len(images), -1)
        return np.stack([im.mean(1), im.std(1), (im > 0.5).mean(1)], axis=1)


class HalfSex:
    def predict(self, images):
        return np.full(len(images), 0.7)


def stub_pair():
    return PredictorPair(OracleAgePredictor(), HalfSex(), {"val_mae": 1.0, "val_accuracy": 1.0})


def stub_model(T=4):
    return GenerativeModel(lambda z, t, c: Tensor(np.zeros(z.shape)), make_schedule("cosine", T),
                           IdentityAutoencoder(64))


def test_age_sweep_arithmetic():
    c = age_sweep(20)
    np.testing.assert_allclose(c.ages, np.arange(5, 101, 5))
    assert list(c.sexes) == [0, 1] * 10
    assert len(sweep_specs(50, 0)) == 50 and sweep_specs(5, 1) == sweep_specs(5, 1)


def test_counterfactual_table_skips_out_of_range():
    specs = [PhantomSpec(Condition(95, Sex.MALE), 1), PhantomSpec(Condition(50, Sex.FEMALE), 2)]
    rep = counterfactual_table(stub_model(), specs, stub_pair(), name="stub", fingerprint="abc")
    deltas_95 = sorted(r["delta"] for r in rep.rows if r["index"] == 0)
    assert deltas_95 == [-60, -30, -10]
    assert sorted(r["delta"] for r in rep.rows if r["index"] == 1) == [-30, -10, 10, 30]
    assert rep.counts == {"sources": 2, "excluded_sources": 0, "pairs": 7}
    assert set(rep.per_delta) == {-60, -30, -10, 10, 30}
    assert rep.per_delta[-10]["n"] == 2
    csv_text = table3_csv([rep])
    assert csv_text.splitlines()[0] == "model,delta,mae_regressor,mae_oracle,n"
    assert len(csv_text.splitlines()) == 6


def test_counterfactual_table_identity_model_reproduces_source():
    # eps = 0 with T steps inverts and resamples exactly, so each output is its source image
    spec = PhantomSpec(Condition(50, Sex.FEMALE), 7)
    rep = counterfactual_table(stub_model(), [spec], stub_pair(), deltas=(0,))
    from cyclediff.phantom import oracle_age
    assert rep.rows[0]["oracle_age"] == pytest.approx(oracle_age(render_array(spec)), abs=1e-3)


def test_counterfactual_table_requires_gate():
    with pytest.raises(PredictorGateError):
        counterfactual_table(stub_model(), sweep_specs(2, 0), PredictorPair(None, None, {}))


def test_direct_generation_eval_stub(tmp_path):
    pair = stub_pair()
    a = direct_generation_eval(stub_model(), pair, n=8, seed=3, name="stub", fingerprint="f")
    b = direct_generation_eval(stub_model(), pair, n=8, seed=3, name="stub", fingerprint="f")
    assert a.summary() == b.summary() and a.samples_csv() == b.samples_csv()
    assert a.sex_accuracy == 0.5 and a.counts["direct_samples"] == 8
    assert a.fid >= -1e-4 and a.fid_floor >= -1e-4 and 0 <= a.ms_ssim <= 1
    assert "fingerprint: f" in a.summary() and "direct=3" in a.summary()
    paths = write_report(a, tmp_path, "direct")
    assert open(paths["summary"]).read() == a.summary()


def test_report_invariants_and_comparison():
    with pytest.raises(ValueError):
        MetricsReport("m", "f", {}, sex_accuracy=1.2)
    with pytest.raises(ValueError):
        MetricsReport("m", "f", {}, ms_ssim=-0.1)
    with pytest.raises(ValueError):
        MetricsReport("m", "f", {}, fid=-1.0)
    base = MetricsReport("ldm", "f", {}, per_delta={10: {"mae_regressor": 5.0, "mae_oracle": 6.0, "n": 3},
                                                     -10: {"mae_regressor": 5.0, "mae_oracle": 4.0, "n": 3}})
    other = MetricsReport("cdm", "f", {}, per_delta={10: {"mae_regressor": 4.0, "mae_oracle": 5.0, "n": 3},
                                                      -10: {"mae_regressor": 6.0, "mae_oracle": 4.5, "n": 3}})
    text = comparison_summary(base, other)
    assert "10,6.0000,5.0000,-1.0000" in text
    assert text.strip().endswith("cdm lower oracle MAE on 1 of 2 deltas")
    merged = base.merge(MetricsReport("ldm", "f", {"direct": 1}, age_mae=3.0))
    assert merged.age_mae == 3.0 and merged.per_delta == base.per_delta and merged.seeds == {"direct": 1}
