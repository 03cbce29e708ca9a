import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from meshheap.cli import main
from meshheap.fixtures import shipped_corpus
from meshheap.mir import load_program

CORPUS = shipped_corpus()
FIXTURES = Path(__file__).parent / "fixtures"


def report(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and not line.startswith("#"))


def test_run_use_after_free(capsys):
    assert main(["run", str(CORPUS / "use_after_free.mir")]) == 1
    out, err = capsys.readouterr()
    assert out.split() == ["42"]
    r = report(err)
    assert r["exit"] == "aborted-on-violation"
    assert r["violation.0.kind"] == "UseAfterFree"
    assert r["violation.0.message"] == "use-after-free detected"
    assert r["violation.0.site"] == "5"
    assert r["table_bytes"] == "2097152"


def test_run_bug_free_writes_structured_report(tmp_path, capsys):
    out_file = tmp_path / "report.txt"
    assert main(["run", str(CORPUS / "stack_heavy.mir"), "--oracle", "--out", str(out_file)]) == 0
    out, _ = capsys.readouterr()
    assert out.split() == ["140", "49", "7", "9", "140"]
    r = report(out_file.read_text())
    assert r["violations"] == "0"
    assert r["oracle.unexpected"] == "0"
    assert int(r["checks_elided"]) >= 1


def test_run_exhaustion_with_small_tags(capsys):
    assert main(["run", str(CORPUS / "metadata_exhaustion.mir"), "--tag-bits", "4"]) == 1
    out, err = capsys.readouterr()
    assert len(out.split()) == 15
    assert report(err)["violation.0.kind"] == "MetadataExhaustion"
    assert report(err)["table_bytes"] == "256"


def test_run_uninstrumented(capsys):
    assert main(["run", "--uninstrumented", str(CORPUS / "heap_overflow.mir")]) == 0
    assert capsys.readouterr().out.split() == ["65", "65"]


def test_unmapped_access_exits_3(tmp_path, capsys):
    p = tmp_path / "wild.mir"
    p.write_text("fn main() { entry: a = const 0x7000_0000_0000  x = load i8 a  ret }")
    assert main(["run", str(p)]) == 3
    assert "unmapped" in report(capsys.readouterr().err)["fault"]


def test_invalid_input_exits_2(capsys):
    path = FIXTURES / "invalid" / "double_assign.mir"
    assert main(["run", str(path)]) == 2
    err = capsys.readouterr().err
    assert "double_assign.mir:5:1" in err and "more than once" in err
    assert main(["instrument", str(path)]) == 2
    assert main(["run", "/nonexistent/x.mir"]) == 2
    assert main(["run", "x.mir", "--tag-bits", "18"]) == 2
    assert main(["bogus"]) == 2


def test_instrument_output_reparses(tmp_path, capsys):
    assert main(["instrument", str(CORPUS / "stack_heavy.mir")]) == 0
    text = capsys.readouterr().out
    stats = report(text.replace("# ", ""))
    assert int(stats["checks_elided"]) >= 1
    prog = load_program(text)
    assert any(i.callee == "mesh_malloc" for f in prog.functions for b in f.blocks for i in b.instrs
               if hasattr(i, "callee"))
    out_file = tmp_path / "inst.mir"
    assert main(["instrument", "--no-opt", str(CORPUS / "stack_heavy.mir"), "--out", str(out_file)]) == 0
    assert report(out_file.read_text().replace("# ", ""))["checks_elided"] == "0"
    # Already-instrumented input runs as it is.
    assert main(["run", str(out_file)]) == 0


def test_corpus_subcommand(tmp_path, capsys):
    assert main(["corpus", "--oracle"]) == 0
    out = capsys.readouterr().out
    assert "agreement" in out and "FAIL" not in out
    shutil.copy(CORPUS / "double_free.mir", tmp_path)
    (tmp_path / "double_free.expect").write_text("exit = normal\n")
    assert main(["corpus", str(tmp_path)]) == 1
    assert "FAIL" in capsys.readouterr().out
    assert main(["corpus", str(tmp_path / "missing")]) == 2


@pytest.mark.parametrize("bits, table", [(17, 2_097_152), (16, 1_048_576), (4, 256)])
def test_stats_table_bytes(bits, table, capsys):
    assert main(["stats", "--tag-bits", str(bits)]) == 0
    assert report(capsys.readouterr().out)["table_bytes"] == str(table)


def test_stats_for_program(capsys):
    assert main(["stats", str(CORPUS / "linked_list.mir")]) == 0
    r = report(capsys.readouterr().out)
    assert r["table_bytes"] == "2097152"
    assert r["total_allocations"] == "13"


def test_replay_subcommand(tmp_path, capsys):
    trace = Path(str(CORPUS)).parent / "data" / "server_like.trace"
    assert main(["replay", str(trace)]) == 0
    out, err = capsys.readouterr()
    assert "table utilization 0.115%" in out
    r = report(err)
    assert (r["total_allocations"], r["peak_live"], r["utilization_percent"]) == ("5211", "151", "0.115")
    bad = tmp_path / "bad.trace"
    bad.write_text("A a 8\nZ\n")
    assert main(["replay", str(bad)]) == 2
    buggy = tmp_path / "buggy.trace"
    buggy.write_text("A a 8\nF a\nC a 0 1\n")
    assert main(["replay", str(buggy)]) == 1
    assert report(capsys.readouterr().err)["violation.0.kind"] == "UseAfterFree"


def test_replay_threads(tmp_path, capsys):
    trace = tmp_path / "threads.trace"
    trace.write_text("".join(f"A t{i} 16\n" for i in range(800)))
    assert main(["replay", str(trace), "--threads", "8"]) == 0
    r = report(capsys.readouterr().err)
    assert (r["distinct_tags"], r["exhausted"]) == ("800", "false")


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "meshheap", "stats", "--tag-bits", "16"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "table_bytes=1048576" in proc.stdout
