import hashlib
import json

import numpy as np
import pytest

from ssmarw import cli
from ssmarw import experiments as ex
from ssmarw.cli import ExperimentConfig, main
from ssmarw.lattice import box, cycle

TORUS_SMOKE_SHA = "a172cb6efa923fbfee4bc73a8376049be116001feb18819442e30ec98f1e0b46"

SMALL = {
    "fixation-scan": ["--mus", "0.3,1.2", "--Ls", "5,10", "--trials", "30"],
    "torus-time": ["--ns", "6,8,10", "--trials", "30"],
    "weak-probe": ["--L", "5", "--trials", "300"],
    "domination": ["--A", "0,1,2,3,4", "--eta", "2,1,1,1,0,0", "--trials", "200"],
    "confinement-probe": ["--trials", "2000"],
    "hierarchy-check": ["--instances", "8"],
    "parity-probe": ["--steps", "2"],
    "ghost-probe": ["--L", "4", "--trials", "300"],
    "lemma-checks": ["--windows", "5"],
    "selfcheck": ["--fast"],
}


def _run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("sub", sorted(SMALL))
def test_threads_do_not_change_output(sub, capsys):
    argv = [sub, *SMALL[sub], "--seed", "5", "--no-timestamp"]
    c1, o1, _ = _run(capsys, argv + ["--threads", "1"])
    c4, o4, _ = _run(capsys, argv + ["--threads", "4"])
    assert o1 == o4 and c1 == c4
    c1b, o1b, _ = _run(capsys, argv + ["--threads", "1"])
    assert o1b == o1
    header = o1.splitlines()[0]
    assert header.startswith("# {") and json.loads(header[2:])["subcommand"] == sub
    assert o1.splitlines()[-1].startswith("# summary {")


def test_torus_time_smoke_golden(capsys):
    code, out, _ = _run(capsys, ["torus-time", "--ns", "4", "--trials", "50", "--seed", "3",
                                 "--no-timestamp"])
    assert code == 0
    assert hashlib.sha256(out.encode()).hexdigest() == TORUS_SMOKE_SHA


def test_timestamp_only_without_flag(capsys):
    _, out, _ = _run(capsys, ["parity-probe", "--steps", "1"])
    head = json.loads(out.splitlines()[0][2:])
    assert set(head) == {"config", "timestamp"}


def test_config_round_trip(tmp_path, capsys):
    cfg = ExperimentConfig("weak-probe", 9, dict(cli.DEFAULTS["weak-probe"], trials=123))
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 9, "trials": 40, "L": 5}))
    _, out, _ = _run(capsys, ["weak-probe", "--config", str(p), "--mu", "0.7", "--no-timestamp"])
    echoed = json.loads(out.splitlines()[0][2:])
    assert echoed["seed"] == 9 and echoed["trials"] == 40 and echoed["mu"] == 0.7
    assert ExperimentConfig.from_json(out.splitlines()[0][2:]).params["L"] == 5


def test_config_unknown_key(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit):
        main(["weak-probe", "--config", str(p)])


def test_out_file(tmp_path, capsys):
    dest = tmp_path / "o.csv"
    code, out, _ = _run(capsys, ["parity-probe", "--steps", "1", "--out", str(dest), "--no-timestamp"])
    assert code == 0 and "PASS" in out
    assert dest.read_text().startswith("# {")


def test_selfcheck_passes(capsys):
    code, out, _ = _run(capsys, ["selfcheck", "--no-timestamp"])
    assert code == 0
    names = [line.split(",")[0] for line in out.splitlines()[2:-1]]
    assert {"instruction_hash", "abelian", "hierarchy", "strategy_replay"} <= set(names)


def test_selfcheck_fast_is_subset():
    full = ex.selfcheck(0, fast=False)
    fast = ex.selfcheck(0, fast=True)
    assert fast.ok and full.ok
    assert {r[0] for r in fast.rows} < {r[0] for r in full.rows}


def test_selfcheck_detects_corrupted_hash(monkeypatch, capsys):
    monkeypatch.setattr(ex, "GOLDEN_INSTRUCTIONS", "0000000000000000")
    code, _, _ = _run(capsys, ["selfcheck", "--fast", "--no-timestamp"])
    assert code != 0


def test_empty_mu_grid(capsys):
    code, out, _ = _run(capsys, ["fixation-scan", "--mus", "", "--no-timestamp"])
    lines = out.splitlines()
    assert lines[1].startswith("mu,L,trials")
    assert len(lines) == 3


def test_torus_time_warning_and_single_n():
    res = ex.torus_time([8], 1.2, 10, 0)
    assert res.summary["fit"] is None
    assert res.summary["warnings"]


def test_weak_probe_errors(capsys):
    code, _, err = _run(capsys, ["weak-probe", "--L", "8", "--x", "8"])
    assert code == 2 and "interior required" in err
    with pytest.raises(ValueError):
        ex.weak_probe(5, 0.8, 0, 1)


def test_weak_probe_saturation():
    res = ex.weak_probe(5, 30.0, 200, 1)
    assert res.summary["p_A"] == 1.0 and res.ok


def test_confinement_errors():
    g = cycle(5)
    with pytest.raises(ValueError, match="at least one empty site"):
        ex.confinement_probe(g, [0, 1], np.array([1, 1, 0, 0, 0]), np.zeros(5, int), 10, 0)
    g2, A, eta, h2 = ex.default_confinement_instance()
    with pytest.raises(ValueError):
        ex.confinement_probe(g2, A, eta, h2, 0, 0)
    with pytest.raises(ValueError):
        ex.confinement_probe(g2, [0, 2], eta, h2, 10, 0)  # not connected


def test_domination_insufficient_data():
    res = ex.domination(cycle(6), range(6), [0, 2, 4], np.array([2, 1, 1, 1, 0, 1]), 0, 1)
    assert not res.ok and "insufficient" in json.dumps(res.summary)


def test_domination_adjacent_b_is_an_error(capsys):
    code, _, err = _run(capsys, ["domination", "--B", "0,1", "--trials", "5"])
    assert code == 2 and "totally disconnected" in err


def test_fixation_monotone_in_mu_small():
    res = ex.fixation_scan([0.2, 0.6, 1.0, 1.4], [15], 200, 2)
    fr = [row[3] for row in res.rows]
    assert fr == sorted(fr) and res.summary["monotone_in_mu"]


def test_map_trials_preserves_order():
    assert ex.map_trials(lambda i: i * i, list(range(50)), threads=4) == [i * i for i in range(50)]


def test_fmt():
    from fractions import Fraction
    assert ex.fmt(True) == "1" and ex.fmt(Fraction(1, 3)) == "1/3"
    assert ex.fmt(float("inf")) == "inf" and ex.fmt(0.1) == "0.1"


def test_ghost_probe_cli_matches_module():
    res = ex.ghost_probe(6, 0.3, 500, 2)
    assert len(res.rows) == 1 and res.ok
