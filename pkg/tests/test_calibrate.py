import pytest

from sramlab.calibrate import CalibrationError, StartTargets, calibrate, fit_start, start_metrics
from sramlab.model import ModelParams


def test_round_trip_recovers_parameters():
    t = start_metrics(3.0, 10.0)
    mu, s, _ = fit_start(t)
    assert mu == pytest.approx(3.0, rel=0.05)
    assert s == pytest.approx(10.0, rel=0.05)


def test_paper_targets_fit():
    res = calibrate(check=False)
    assert abs(res.predicted.fhw - 0.627) < 0.01
    assert abs(res.predicted.wchd - 0.0249) < 0.001
    assert abs(res.predicted.stable_ratio - 0.859) < 0.005
    assert abs(res.predicted.noise_entropy - 0.0305) < 0.001
    # shipped defaults are the rounded fit
    d = ModelParams()
    assert res.params.mu_m == pytest.approx(d.mu_m, abs=0.01)
    assert res.params.s_m == pytest.approx(d.s_m, abs=0.01)


def test_seeded_check_passes_at_reduced_size():
    res = calibrate(devices=4, n=2048, seed=3)
    assert set(res.residuals) == {"predicted", "simulated"}


def test_noiseless_limit():
    res = calibrate(StartTargets(stable_ratio=1.0), devices=2, n=512)
    assert res.params.sigma == 0.0
    assert res.simulated.wchd == 0.0 and res.simulated.stable_ratio == 1.0
    assert res.simulated.noise_entropy == 0.0


def test_unreachable_targets_raise_with_residuals():
    with pytest.raises(CalibrationError) as err:
        calibrate(StartTargets(fhw=0.5, wchd=0.2, stable_ratio=0.99, noise_entropy=0.001), devices=2, n=512)
    assert "simulated" in err.value.residuals


def test_closed_form_start_metrics():
    t = start_metrics(0.0, 1e-9)
    assert t.fhw == pytest.approx(0.5)
    assert t.wchd == pytest.approx(0.5 * 999 / 1000)
