import json
import subprocess
import sys

import numpy as np
import pytest

from gbtd import cli
from gbtd.archspec import builtin, to_json
from gbtd.cru import CollectiveGroup, shared_param_count
from gbtd.fileio import canonical_json, write_gbt


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    report = json.loads(out) if out else None
    if report is not None:
        assert out.encode() == canonical_json(report)
    return code, report, err


def test_parse_ranks():
    assert cli.parse_ranks("2", (6, 6, 6)) == (2, 2, 2)
    assert cli.parse_ranks("2,-,3", (6, 6, 6)) == (2, None, 3)
    assert cli.parse_ranks("2", (3, 3, 8, 8), [3, 4]) == (None, None, 2, 2)
    assert cli.parse_ranks("2,4", (3, 3, 8, 8), [3, 4]) == (None, None, 2, 4)
    for bad, shape, modes in [("2,2", (6, 6, 6), None), ("a", (6,), None), ("7", (6, 6), None),
                              ("2", (6, 6), [3]), ("0", (6, 6), None)]:
        with pytest.raises(ValueError):
            cli.parse_ranks(bad, shape, modes)


def test_synth_is_deterministic(tmp_path, capsys):
    args = ["synth", "--shape", "6,6,6", "--terms", 2, "--rank", 2, "--seed", 7]
    code, r1, _ = run(capsys, *args, "-o", tmp_path / "a.gbt")
    assert code == 0
    first = (tmp_path / "a.gbt").read_bytes()
    code, r2, _ = run(capsys, *args, "-o", tmp_path / "a.gbt")
    assert (tmp_path / "a.gbt").read_bytes() == first
    assert r1 == r2
    assert sorted(p.name for p in (tmp_path / "a.truth").iterdir())[0] == "core_1.gbt"


def test_synth_then_decompose_recovers(tmp_path, capsys):
    run(capsys, "synth", "--shape", "6,6,6", "--terms", 2, "--rank", 2, "--seed", 7, "-o", tmp_path / "t.gbt")
    code, rep, err = run(capsys, "decompose", tmp_path / "t.gbt", "--terms", 2, "--rank", 2, "-o", tmp_path / "a.zip")
    assert code == 0 and rep["relative_error"] < 1e-6
    assert rep["error_trace"][-1] == rep["relative_error"] and rep["kind"] == "btd"
    assert rep["stored_numbers"] == 2 * (8 + 3 * 12)
    assert "relative error" in err


def test_full_rank_decompose(tmp_path, capsys, rng):
    write_gbt(tmp_path / "x.gbt", rng.standard_normal((4, 5)))
    code, rep, _ = run(capsys, "decompose", tmp_path / "x.gbt", "--rank", "4,5", "-o", tmp_path / "a")
    assert code == 0 and rep["relative_error"] < 1e-10


def test_kernel_pipeline_verifies(tmp_path, capsys):
    run(capsys, "synth", "--shape", "3,3,8,8", "--terms", 2, "--rank", 2, "--modes", "3,4", "-o", tmp_path / "k.gbt")
    code, rep, _ = run(capsys, "decompose", tmp_path / "k.gbt", "-R", 2, "--rank", 2, "--modes", "3,4", "-o", tmp_path / "u")
    assert code == 0 and rep["kind"] == "factored_conv_unit"
    code, rep, err = run(capsys, "verify", tmp_path / "u", "--trials", 4, "--seed", 3)
    assert code == 0 and rep["result"] == "PASS" and rep["max_relative_error"] < 1e-8
    assert len(rep["trial_errors"]) == 4 and "PASS" in err
    _, again, _ = run(capsys, "verify", tmp_path / "u", "--trials", 4, "--seed", 3)
    assert again == rep


def test_verify_corrupt_factor(tmp_path, capsys):
    run(capsys, "synth", "--shape", "3,3,4,4", "--rank", 2, "--modes", "3,4", "-o", tmp_path / "k.gbt")
    run(capsys, "decompose", tmp_path / "k.gbt", "--rank", 2, "--modes", "3,4", "-o", tmp_path / "u")
    (tmp_path / "u" / "factor_1_4.gbt").write_bytes(b"GBT1\x02\x00\x00\x00garbage")
    code, rep, err = run(capsys, "verify", tmp_path / "u")
    assert code == 2 and rep is None and "error" in err


def test_verify_reports_failure(tmp_path, capsys, monkeypatch):
    run(capsys, "synth", "--shape", "3,3,4,4", "--rank", 2, "--modes", "3,4", "-o", tmp_path / "k.gbt")
    run(capsys, "decompose", tmp_path / "k.gbt", "--rank", 2, "--modes", "3,4", "-o", tmp_path / "u")
    monkeypatch.setattr(cli, "factored_forward", lambda x, u: np.zeros((x.shape[0], x.shape[1], 4)))
    code, rep, _ = run(capsys, "verify", tmp_path / "u")
    assert code == 1 and rep["result"] == "FAIL"


def test_collective_decompose_and_verify(tmp_path, capsys):
    paths = []
    for seed in range(3):
        p = tmp_path / f"k{seed}.gbt"
        run(capsys, "synth", "--shape", "3,3,6,4", "--terms", 1, "--rank", 2, "--modes", "3,4", "--seed", seed, "-o", p)
        paths.append(p)
    code, rep, _ = run(capsys, "decompose", *paths, "-R", 3, "--rank", 2, "--modes", "3,4", "-o", tmp_path / "g.zip")
    assert code == 0 and rep["kind"] == "collective_group" and rep["L"] == 3
    code, rep, _ = run(capsys, "verify", tmp_path / "g.zip")
    assert code == 0 and len(rep["unit_max_relative_error"]) == 3
    assert max(rep["unit_max_relative_error"]) < 1e-8


def test_count_resnet50(capsys):
    code, rep, err = run(capsys, "count", "ResNet-50")
    assert code == 0
    assert abs(rep["params"] / 25.5e6 - 1) <= 0.02
    assert abs(rep["flops"] / 4.1e9 - 1) <= 0.10
    assert abs(rep["model_size_mb"] - 98) <= 1
    assert rep["convention"]["flops"] == "fma" and rep["depth"] == 50
    _, madd, _ = run(capsys, "count", "ResNet-50", "--convention", "madd2")
    assert madd["flops"] == 2 * rep["flops"]


def test_count_sharing_delta_matches_cru(capsys):
    _, shared, _ = run(capsys, "count", "CRU-Net-56")
    _, unshared, _ = run(capsys, "count", "CRU-Net-56", "--no-sharing")
    R, d, L = 640, 1024, 5
    g = CollectiveGroup(
        [np.zeros((d, 1))] * R, [np.zeros((3, 3, 1, 1))] * R, [[np.zeros((d, 1))] * R for _ in range(L)]
    )
    counts = shared_param_count(g)
    assert unshared["params"] - shared["params"] == counts.independent - counts.shared > 0
    assert unshared["flops"] == shared["flops"]


def test_count_json_file(tmp_path, capsys):
    path = tmp_path / "net.json"
    path.write_text(json.dumps(to_json(builtin("ResNeXt-50 (32x4d)"))))
    _, a, _ = run(capsys, "count", path)
    _, b, _ = run(capsys, "count", "ResNeXt-50 (32x4d)")
    assert a == b


@pytest.mark.parametrize(
    "argv",
    [
        ["count", "nonsense"],
        ["synth", "--shape", "6,6,6", "--rank", "9", "-o", "{tmp}/x.gbt"],
        ["decompose", "{tmp}/missing.gbt", "--rank", "2", "-o", "{tmp}/a"],
        ["verify", "{tmp}/missing"],
        ["count"],
    ],
)
def test_usage_errors_exit_2(tmp_path, capsys, argv):
    argv = [a.format(tmp=tmp_path) for a in argv]
    try:
        code = cli.main(argv)
    except SystemExit as exc:  # argparse
        code = exc.code
    assert code == 2


def test_numerical_failure_exit_3(tmp_path, capsys, rng):
    a, b, c = rng.standard_normal((3, 4))
    write_gbt(tmp_path / "r1.gbt", np.einsum("i,j,k->ijk", a, b, c))
    code = cli.main(["decompose", str(tmp_path / "r1.gbt"), "-R", "2", "--rank", "2", "--ridge", "0", "-o", str(tmp_path / "z")])
    _, err = capsys.readouterr()
    assert code == 3 and "numerical failure" in err and "term" in err


def test_timing_is_opt_in(capsys):
    _, rep, _ = run(capsys, "count", "ResNet-50")
    assert "wall_time_s" not in rep
    _, rep, _ = run(capsys, "--timing", "count", "ResNet-50")
    assert rep["wall_time_s"] >= 0


def test_console_script_entry_point():
    out = subprocess.run(
        [sys.executable, "-m", "gbtd.cli", "count", "CRU-Net-116"], capture_output=True, text=True
    )
    assert out.returncode == 0
    assert json.loads(out.stdout)["depth"] == 116
