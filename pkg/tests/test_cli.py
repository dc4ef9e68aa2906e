import subprocess
import sys

import numpy as np
import pytest

from cnn2c import zoo
from cnn2c.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from cnn2c.codegen.emit import include_directives
from cnn2c.modelio import save_model

from conftest import CC


@pytest.fixture
def ball_files(tmp_path):
    manifest, weights = tmp_path / "ball.json", tmp_path / "ball.bin"
    save_model(zoo.ball_net(4), manifest, weights)
    return str(manifest), str(weights)


def test_compile_generic_full_includes_only_math(ball_files, tmp_path, capsys):
    out = tmp_path / "ball.c"
    assert main(["compile", *ball_files, "--arch", "generic", "--unroll", "full", "-o", str(out)]) == EXIT_OK
    assert include_directives(out.read_text()) == ["math.h"]
    captured = capsys.readouterr()
    assert captured.out == "" and "include dependencies: math.h; link with -lm" in captured.err


def test_compile_to_stdout_is_deterministic(capsys):
    main(["compile", "--zoo", "robot", "--unroll", "outer:2", "-o", "-"])
    first = capsys.readouterr().out
    main(["compile", "--zoo", "robot", "--unroll", "outer:2", "-o", "-"])
    assert capsys.readouterr().out == first
    assert "#include" not in first and first.count("for (") > 0


def test_outer_unroll_flag(capsys):
    assert main(["compile", "--zoo", "ball", "--unroll", "outer:1", "-o", "-"]) == EXIT_OK
    assert "Default unroll level: outer:1." in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["compile", "--zoo", "ball", "--arch", "neon", "-o", "-"],
    ["compile", "--zoo", "ball", "--unroll", "half", "-o", "-"],
    ["bench", "--zoo", "ball", "--reps", "0"],
    ["compile", "--zoo", "ball", "-o", "-", "m.json", "m.bin"],
    ["compile", "-o", "-"],
    [],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().out == ""


def test_unknown_arch_lists_choices(capsys):
    main(["compile", "--zoo", "ball", "--arch", "arm", "-o", "-"])
    err = capsys.readouterr().err
    assert "generic" in err and "ssse3" in err


def test_run_prints_softmax(ball_files, tmp_path, capsys):
    x = np.random.default_rng(0).uniform(-1, 1, 256).astype("<f4")
    (tmp_path / "x.bin").write_bytes(x.tobytes())
    assert main(["run", *ball_files, "--input", str(tmp_path / "x.bin")]) == EXIT_OK
    values = [float(v) for v in capsys.readouterr().out.split()]
    assert len(values) == 2 and abs(sum(values) - 1) <= 1e-6


def test_run_trace_shapes(ball_files, tmp_path, capsys):
    (tmp_path / "x.bin").write_bytes(np.zeros(256, "<f4").tobytes())
    main(["run", *ball_files, "--input", str(tmp_path / "x.bin"), "--trace"])
    shapes = [line.split()[-1] for line in capsys.readouterr().out.splitlines() if line.startswith("#")]
    assert shapes == ["8x8x8", "8x8x8", "4x4x8", "2x2x12", "2x2x12", "1x1x2", "1x1x2"]


def test_truncated_input_fails(ball_files, tmp_path, capsys):
    (tmp_path / "x.bin").write_bytes(np.zeros(255, "<f4").tobytes())
    assert main(["run", *ball_files, "--input", str(tmp_path / "x.bin")]) == EXIT_FAIL
    captured = capsys.readouterr()
    assert captured.out == "" and "1020 bytes" in captured.err


def test_bad_weights_fail_with_diagnostics(ball_files, capsys):
    manifest, weights = ball_files
    with open(weights, "ab") as f:
        f.write(b"\0\0\0\0")
    assert main(["inspect", manifest, weights]) == EXIT_FAIL
    assert "trailing" in capsys.readouterr().err


def test_inspect_robot(capsys):
    assert main(["inspect", "--zoo", "robot"]) == EXIT_OK
    out = capsys.readouterr().out
    conv_rows = [l for l in out.splitlines() if "Convolution" in l]
    assert [int(l.split()[2]) for l in conv_rows] == [8, 12, 8, 16, 20]
    simd_rows = [l for l in out.splitlines() if "simd=" in l]
    assert simd_rows and all("simd=yes" in l for l in simd_rows)


@pytest.mark.needs_cc
def test_verify_ball_bit_exact(ball_files, capsys):
    assert main(["verify", *ball_files, "--arch", "generic", "--tol", "0", "-n", "10", "--cc", CC]) == EXIT_OK
    assert capsys.readouterr().out.startswith("PASS")


def test_verify_with_missing_compiler_fails(ball_files, capsys):
    assert main(["verify", *ball_files, "--cc", "/nonexistent/cc"]) == EXIT_FAIL
    assert "not found" in capsys.readouterr().err


@pytest.mark.needs_cc
def test_bench_reports_one_line(capsys):
    argv = ["bench", "--zoo", "ball", "--arch", "generic", "--unroll", "none", "--reps", "1000",
            "--samples", "2", "--cc", CC]
    assert main(argv) == EXIT_OK
    line = capsys.readouterr().out.strip()
    assert "\n" not in line and "median_ns=" in line


@pytest.mark.needs_cc
def test_cc_environment_default_is_overridden_by_flag(monkeypatch, ball_files, capsys):
    monkeypatch.setenv("CNN2C_CC", "/nonexistent/cc")
    assert main(["verify", *ball_files, "-n", "2"]) == EXIT_FAIL
    assert main(["verify", *ball_files, "-n", "2", "--cc", CC]) == EXIT_OK


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "cnn2c.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("cnn2c ")
