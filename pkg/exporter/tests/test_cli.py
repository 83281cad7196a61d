"""CLI surface: exit codes and the two input paths."""

import pytest

from smrt_export.cli import main

from latefuse import generate_benchmark, read_dump, save_benchmark, validate_dump


@pytest.fixture
def text_file(tmp_path):
    path = tmp_path / "inputs.txt"
    path.write_text("red square near panel\n\nblue circle\ngreen arrow\n")
    return str(path)


def test_input_file_export(tiny_model_dir, tmp_path, text_file, capsys):
    out = str(tmp_path / "cli.bin")
    code = main(["--model", tiny_model_dir, "--input", text_file, "--out", out])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "wrote 3 records" in stdout  # blank line skipped
    default_manifest = stdout.rsplit("manifest: ", 1)[1].strip()
    assert validate_dump(out, default_manifest).ok


def test_layer_list_and_manifest_path(tiny_model_dir, tmp_path, text_file):
    out = str(tmp_path / "layers.bin")
    manifest = str(tmp_path / "layers_manifest.json")
    code = main(["--model", tiny_model_dir, "--input", text_file,
                 "--layers", "0,3", "--out", out, "--manifest", manifest])
    assert code == 0
    assert validate_dump(out, manifest).ok
    with read_dump(out) as reader:
        assert sorted({rec.layer_id for rec in reader}) == [0, 3]


def test_benchmark_queries_export(tiny_model_dir, tmp_path, capsys):
    bench = generate_benchmark(2, 3, seed=1)
    bench_path = tmp_path / "bench.json"
    save_benchmark(bench, bench_path)
    out = str(tmp_path / "queries.bin")
    code = main(["--model", tiny_model_dir, "--benchmark", str(bench_path),
                 "--out", out])
    assert code == 0
    with read_dump(out) as reader:
        assert len(reader) == len(bench.queries)


def test_missing_input_file_is_exit_1(tiny_model_dir, tmp_path, capsys):
    code = main(["--model", tiny_model_dir,
                 "--input", str(tmp_path / "nope.txt"),
                 "--out", str(tmp_path / "x.bin")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_bad_layer_string_is_exit_1(tiny_model_dir, tmp_path, text_file, capsys):
    code = main(["--model", tiny_model_dir, "--input", text_file,
                 "--layers", "zero", "--out", str(tmp_path / "x.bin")])
    assert code == 1


def test_out_of_range_layer_is_exit_1(tiny_model_dir, tmp_path, text_file, capsys):
    code = main(["--model", tiny_model_dir, "--input", text_file,
                 "--layers", "9", "--out", str(tmp_path / "x.bin")])
    assert code == 1
    assert "layer" in capsys.readouterr().err


def test_usage_errors_are_exit_2(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["--out", str(tmp_path / "x.bin")])  # --model missing
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["--model", "m", "--input", "a", "--benchmark", "b",
              "--out", str(tmp_path / "x.bin")])  # mutually exclusive
    assert err.value.code == 2
