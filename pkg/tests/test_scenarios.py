import json

import numpy as np
import pytest
import yaml

from srnmr import cli
from srnmr.scenarios import (
    ConfigurationError,
    analyze_series,
    build_protocol,
    bundled_scenarios,
    dump_scenario,
    load_scenario,
    parse_scenario,
    report,
    run_scenario,
    run_sweep,
    scenario_hash,
    simulate_averaged,
)
from srnmr.spectral import periodogram, preprocess
from srnmr.sr import SRTimeSeries

BUNDLED = {"fig1-demo", "fig2-downscaled", "fig3b-glycerol", "fig3c-sweep", "fig3d-trio", "fig4a-tmp",
           "fig4b-xylene", "suppS1-sensitivity", "suppS3-lock", "suppS4-sweeps", "suppS5-backaction"}


def small_water(**over):
    data = {
        "name": "small-water",
        "seed": 4,
        "n_averages": 3,
        "sample": {"name": "water", "line_offset_hz": 300.0, "line_scale_tesla": 5e-8},
        "protocol": {"f0_hz": 3.74065e6, "target_tau_s": 24.06e-6, "n_iterations": 20000},
        "sensor": {"preset": "paper-ensemble"},
        "analysis": {"n_peaks": 1, "checks": [{"metric": "fwhm_hz", "target": 9.0, "tolerance": 2.0}]},
    }
    data.update(over)
    return parse_scenario(data)


def test_all_scenarios_are_bundled():
    assert set(bundled_scenarios()) == BUNDLED


@pytest.mark.parametrize("name", sorted(BUNDLED))
def test_config_round_trip(name):
    scn = load_scenario(name)
    again = parse_scenario(yaml.safe_load(dump_scenario(scn)))
    assert again == scn
    assert scenario_hash(again) == scenario_hash(scn)


@pytest.mark.parametrize("name", sorted(BUNDLED))
def test_full_scale_variant_differs(name):
    scn = load_scenario(name, paper_scale=True)
    assert scenario_hash(scn) != scenario_hash(load_scenario(name))


@pytest.mark.parametrize("name", sorted(BUNDLED))
def test_bundled_protocols_sit_on_the_clock_grid(name):
    scn = load_scenario(name)
    if scn.protocol is None:
        return
    p = build_protocol(scn.protocol)
    assert p.period_ticks % 4 == 0
    assert p.tau_ticks == p.k * p.period_ticks
    assert np.all(p.iteration_ticks() % p.period_ticks == 0)
    assert np.all(p.pulse_offsets_ticks() * 4 % p.period_ticks == 0)


def test_validation_errors_name_the_field():
    with pytest.raises(ConfigurationError, match=r"protocol\.duty"):
        small_water(protocol={"f0_hz": 3.74065e6, "duty": 1.5})
    with pytest.raises(ConfigurationError, match=r"sample"):
        small_water(sample={"name": "water", "line_scale_tesla": 1e-9})
    with pytest.raises(ConfigurationError, match=r"n_avg"):
        small_water(n_avg=3)


def test_seed_changes_the_hash():
    assert scenario_hash(small_water()) != scenario_hash(small_water(seed=5))


def _artifact_bytes(run_dir):
    return {p.name: p.read_bytes() for p in sorted(run_dir.iterdir()) if p.suffix in (".csv", ".txt")}


def test_runs_are_byte_identical_across_workers(tmp_path):
    scn = small_water()
    a = run_scenario(scn, tmp_path / "a", workers=1)
    b = run_scenario(scn, tmp_path / "b", workers=3)
    assert a["hash"] == b["hash"]
    assert _artifact_bytes(tmp_path / "a" / a["hash"]) == _artifact_bytes(tmp_path / "b" / b["hash"])
    c = run_scenario(small_water(seed=5), tmp_path / "c")
    assert (tmp_path / "c" / c["hash"] / "series.csv").read_bytes() != (tmp_path / "a" / a["hash"] /
                                                                       "series.csv").read_bytes()


def test_record_contents(tmp_path):
    rec = run_scenario(small_water(), tmp_path, plots=True)
    saved = json.loads((tmp_path / rec["hash"] / "record.json").read_text())
    assert saved["hash"] == rec["hash"]
    for key in ("series", "spectrum", "fit", "plot", "scenario"):
        assert key in saved["artifacts"]
    assert "numpy" in saved["versions"]
    assert saved["checks"][0]["passed"]


def test_scenario_outputs_preserve_parseval(tmp_path):
    rec = run_scenario(small_water(), tmp_path)
    series = SRTimeSeries.from_csv(tmp_path / rec["hash"] / "series.csv")
    pre = preprocess(series)
    assert periodogram(pre).power_sum() == pytest.approx(np.sum(pre.samples**2), rel=1e-9)


def test_sweep_continues_after_a_failed_point(tmp_path):
    scn = small_water(sweep={"variants": {"ok": {}, "broken": {"analysis": {"n_peaks": 60}}}})
    rec, points = run_sweep(scn, tmp_path)
    assert len(points) == 1
    summary = (tmp_path / rec["hash"] / "summary.csv").read_text()
    assert "ok,ok" in summary and "broken,\"error" in summary


def test_glycerol_fid_visible_at_desk_scale():
    scn = load_scenario("fig3b-glycerol").model_copy(update={"n_averages": 100})
    series, protocol, _ = simulate_averaged(scn, np.random.SeedSequence(scn.seed), workers=4)
    pre, spec, fit, _ = analyze_series(series, scn.analysis, 700.0)
    assert pre.samples.size == series.samples.size - 20
    noise = spec.window(3000.0, 8000.0).magnitudes
    assert fit.peaks[0].amplitude / np.sqrt(np.mean(noise**2)) > 10


def test_report_sections_and_empty_error(tmp_path):
    rec = run_scenario(small_water(), tmp_path)
    text, csv = report([rec])
    assert text.count("==") == 2
    assert csv.splitlines()[0].startswith("scenario,hash")
    with pytest.raises(ValueError):
        report([])


def test_cli_geometry(capsys):
    assert cli.main(["geometry", "ac-zeeman", "rabi=15e6", "detuning=400e6"]) == 0
    assert capsys.readouterr().out.startswith("ac-zeeman = 1.29")


def test_cli_errors_are_one_parsable_line(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\nkind: nmr\nprotocol: {duty: 2}\n")
    assert cli.main(["simulate", str(bad), "--out-dir", str(tmp_path)]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ConfigurationError: ")
    assert cli.main(["report", str(tmp_path / "nothing")]) != 0
    assert capsys.readouterr().err.startswith("error: ValueError: ")


def test_cli_simulate_analyze_report(tmp_path, capsys):
    cfg = tmp_path / "water.yaml"
    cfg.write_text(dump_scenario(small_water()))
    assert cli.main(["simulate", str(cfg), "--out-dir", str(tmp_path / "runs"), "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    run_dir = next((tmp_path / "runs").iterdir())
    assert cli.main(["analyze", str(run_dir / "series.csv"), "--fit-range", "260", "340",
                     "--out-dir", str(tmp_path / "an")]) == 0
    assert "fwhm_hz" in capsys.readouterr().out
    assert (tmp_path / "an" / "spectrum.csv").exists()
    assert cli.main(["report", str(tmp_path / "runs"), "--out-dir", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "report.csv").exists()


def test_cli_lock_requires_lock_kind(tmp_path, capsys):
    assert cli.main(["lock", "fig4a-tmp", "--out-dir", str(tmp_path)]) == 2
    assert "kind" in capsys.readouterr().err
    assert cli.main(["lock", "suppS3-lock", "--out-dir", str(tmp_path)]) == 0
