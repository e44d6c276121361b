import math

import pytest

from decolab.scenarios import ScenarioError, chsh_direct, run_chsh, run_epr, run_frauchiger_renner, run_scenario, run_wigner


def test_epr_anticorrelated_and_consistent():
    rep = run_epr()
    assert rep.passed
    assert rep.values["joint_probabilities"] == pytest.approx({"M+,N-": 0.5, "M-,N+": 0.5})
    assert rep.values["consistency"]["consistent"]


def test_wigner_at_quarter_pi_recoheres():
    rep = run_wigner()
    assert rep.passed
    assert not rep.values["consistency"]["joint_decoherent"]


def test_wigner_with_aligned_spin():
    rep = run_wigner(0.0)
    assert rep.passed
    assert rep.values["F_step1"] == pytest.approx({"F+": 1.0})
    assert rep.values["consistency"]["consistent"]
    assert rep.values["F+W_max_violation"] == 0.0


def test_chsh_extremes():
    s0, violated0, _ = run_chsh(0.0)
    assert s0 == pytest.approx(2.0, abs=1e-9) and not violated0
    s, violated, rep = run_chsh()
    assert s == pytest.approx(2 * math.sqrt(2), abs=1e-9) and violated
    assert s == pytest.approx(chsh_direct(math.pi / 8), abs=1e-9)


def test_frauchiger_renner_predictions():
    rep = run_frauchiger_renner()
    v = rep.values
    assert rep.passed
    assert v["p(W1-,W2-)"] == pytest.approx(1 / 12, abs=1e-9)
    assert v["p(F1-,F2+)"] == pytest.approx(0.0, abs=1e-12)
    assert v["p(F1-|W2-)"] == pytest.approx(1.0) and v["p(F2+|W1-)"] == pytest.approx(1.0)
    assert not v["consistency"]["consistent"]


def test_report_serializes():
    rep = run_scenario("epr")
    doc = rep.to_dict()
    assert doc["passed"] and doc["scenario"] == rep.name
    assert "PASS" in rep.summary()


def test_unknown_scenario():
    with pytest.raises(ScenarioError):
        run_scenario("schrodinger")
