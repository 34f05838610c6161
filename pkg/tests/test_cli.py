import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from peftkit.cli import main
from peftkit.linalg import load_tensor, save_tensor

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


def _schema(obj):
    """Key structure and value types of a JSON document."""
    if isinstance(obj, dict):
        return {k: _schema(v) for k, v in sorted(obj.items())}
    if isinstance(obj, list):
        return [_schema(obj[0])] if obj else []
    if isinstance(obj, bool):
        return "bool"
    if isinstance(obj, (int, float)):
        return "number"
    return "null" if obj is None else "string"


def run(capsys, *argv):
    status = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return status, json.loads(out) if out.strip().startswith("{") else out, err


@pytest.fixture
def tensor(tmp_path):
    path = tmp_path / "w.pft1"
    save_tensor(path, np.random.default_rng(0).standard_normal((48, 40)).astype(np.float32))
    return path


@pytest.fixture
def schemas():
    return json.loads((GOLDEN / "cli_schemas.json").read_text())


class TestQuantize:
    @pytest.mark.parametrize("codec", ["int8", "int4", "nf4"])
    def test_roundtrip_dims(self, capsys, tmp_path, tensor, codec, schemas):
        status, report, _ = run(capsys, "quantize", "--in", tensor, "--out", tmp_path / "w.pftq", "--codec", codec)
        assert status == 0
        assert _schema(report) == schemas["quantize"]
        status, out, _ = run(capsys, "dequantize", "--in", tmp_path / "w.pftq", "--out", tmp_path / "back.pft1")
        assert status == 0 and _schema(out) == schemas["dequantize"]
        assert load_tensor(tmp_path / "back.pft1").shape == (48, 40)

    def test_block_one_asym(self, capsys, tmp_path, tensor):
        assert run(capsys, "quantize", "--in", tensor, "--out", tmp_path / "q", "--codec", "int8", "--mode", "asym", "--block", "1")[0] == 0
        run(capsys, "dequantize", "--in", tmp_path / "q", "--out", tmp_path / "d")
        x, y = load_tensor(tensor), load_tensor(tmp_path / "d")
        # exact up to the float16 storage of the per-block scale
        # (or, for tiny blocks, the float16 subnormal spacing)
        assert np.all(np.abs(x - y) <= np.abs(x) * 2**-10 + 255 * 2**-24)

    def test_double_quant_shrinks_constants(self, capsys, tmp_path):
        big = tmp_path / "big.pft1"
        save_tensor(big, np.random.default_rng(1).standard_normal((1024, 1024)).astype(np.float32))
        _, plain, _ = run(capsys, "quantize", "--in", big, "--out", tmp_path / "a", "--codec", "nf4")
        _, dq, _ = run(capsys, "quantize", "--in", big, "--out", tmp_path / "b", "--codec", "nf4", "--double-quant")
        assert dq["constant_bytes"] < plain["constant_bytes"]
        assert 7.5 <= plain["compression_ratio"] <= 8.0

    def test_nf4_with_mode_is_usage_error(self, capsys, tmp_path, tensor):
        status, _, err = run(capsys, "quantize", "--in", tensor, "--out", tmp_path / "q", "--codec", "nf4", "--mode", "sym")
        assert status == 64 and "usage" in err

    def test_missing_input(self, capsys, tmp_path):
        status, _, err = run(capsys, "quantize", "--in", tmp_path / "nope", "--out", tmp_path / "q", "--codec", "int8")
        assert status == 66 and "cannot open" in err

    def test_bad_magic(self, capsys, tmp_path):
        bad = tmp_path / "bad.pft1"
        bad.write_bytes(b"JUNK" + bytes(20))
        status, _, err = run(capsys, "quantize", "--in", bad, "--out", tmp_path / "q", "--codec", "int8")
        assert status == 2 and "format error" in err

    def test_truncated_qtensor(self, capsys, tmp_path, tensor):
        run(capsys, "quantize", "--in", tensor, "--out", tmp_path / "q", "--codec", "int4")
        blob = (tmp_path / "q").read_bytes()
        (tmp_path / "q").write_bytes(blob[:-5])
        assert run(capsys, "dequantize", "--in", tmp_path / "q", "--out", tmp_path / "d")[0] == 2

    @pytest.mark.parametrize("argv", [
        ["quantize", "--bogus"],
        ["quantize", "--in", "a", "--out", "b", "--codec", "fp8"],
        ["quantize", "--in", "a", "--out", "b", "--codec", "int8", "--block", "0"],
        ["frobnicate"],
        [],
    ])
    def test_usage_errors(self, capsys, argv):
        assert run(capsys, *argv)[0] == 64


class TestTrain:
    def test_smoke_and_determinism(self, capsys, tmp_path, schemas):
        curves = []
        for name in ("a", "b"):
            status, out, err = run(capsys, "train", "--config", FIXTURES / "smoke_config.json",
                                   "--out", tmp_path / f"{name}.json", "--checkpoint", tmp_path / name)
            assert status == 0 and "final loss" in err
            assert _schema(out) == schemas["train"]
            report = json.loads((tmp_path / f"{name}.json").read_text())
            assert _schema({k: v for k, v in report.items() if k != "config"}) == schemas["train_report"]
            curves.append(report["loss_curve"])
        assert curves[0] == curves[1]
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_missing_config(self, capsys, tmp_path):
        status, _, err = run(capsys, "train", "--config", tmp_path / "none.json", "--out", tmp_path / "r.json")
        assert status == 66 and "cannot open" in err

    def test_invalid_config_names_field(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"eta": -1}))
        status, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "r.json")
        assert status == 64 and "eta" in err


class TestAuditAndReport:
    def test_audit(self, capsys, tmp_path, schemas):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"d_model": 4, "d_k": 4, "seq_len": 3, "r": 2, "n_examples": 8,
                                   "drift_rank": 1, "quantization": "nf4"}))
        status, out, _ = run(capsys, "audit-grads", "--config", cfg)
        assert status == 0 and out["passed"] and out["max_rel_error"] < 1e-3
        assert _schema(out) == schemas["audit-grads"]

    def test_audit_failure_status(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"d_model": 4, "d_k": 4, "seq_len": 3, "r": 2, "n_examples": 8, "drift_rank": 1}))
        # a huge step makes central differences meaningless
        status, out, _ = run(capsys, "audit-grads", "--config", cfg, "--epsilon", "10", "--tolerance", "1e-12")
        assert status == 1 and not out["passed"]

    def test_report(self, capsys, schemas):
        status, out, _ = run(capsys, "report", "--config", FIXTURES / "smoke_config.json")
        assert status == 0 and _schema(out) == schemas["report"]
        status, text, _ = run(capsys, "report", "--config", FIXTURES / "smoke_config.json", "--format", "text")
        assert status == 0 and text.startswith("precision")


class TestEval:
    EXPECTED = {
        "rouge1": [2 / 3, 1.0, 2 / 3],
        "rougeL": [2 / 3, 2 / 3, 2 / 3],
        "wer": [1 / 3, 2 / 3, 1 / 3],
    }

    @pytest.mark.parametrize("metric", sorted(EXPECTED))
    def test_fixture(self, capsys, metric, schemas):
        status, out, _ = run(capsys, "eval", "--candidates", FIXTURES / "candidates.jsonl",
                             "--references", FIXTURES / "references.jsonl", "--metric", metric)
        assert status == 0
        assert [s["id"] for s in out["scores"]] == ["s1", "s2", "s3"]
        assert [s["score"] for s in out["scores"]] == pytest.approx(self.EXPECTED[metric])
        key = "eval-wer" if metric == "wer" else "eval-rouge"
        assert _schema(out) == schemas[key]

    def test_fixture_rouge_s(self, capsys):
        status, out, _ = run(capsys, "eval-rouge", "--candidates", FIXTURES / "candidates.jsonl",
                             "--references", FIXTURES / "references.jsonl", "--metric", "rougeS")
        # s2: "a c b" vs "a b c" shares ab, ac; s3: "a x c" shares ac
        assert [s["score"] for s in out["scores"]] == pytest.approx([1 / 3, 2 / 3, 1 / 3])

    def test_self_evaluation(self, capsys):
        for metric in ("rouge1", "rouge2", "rougeL", "rougeS", "wer"):
            _, out, _ = run(capsys, "eval", "--candidates", FIXTURES / "references.jsonl",
                            "--references", FIXTURES / "references.jsonl", "--metric", metric)
            assert {s["score"] for s in out["scores"]} == {0.0 if metric == "wer" else 1.0}

    def test_text_format(self, capsys):
        status, text, _ = run(capsys, "eval-wer", "--candidates", FIXTURES / "candidates.jsonl",
                              "--references", FIXTURES / "references.jsonl", "--format", "text")
        assert status == 0 and text.splitlines()[-1].startswith("mean")

    def _write(self, path, rows):
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        return path

    def test_missing_ids(self, capsys, tmp_path):
        c = self._write(tmp_path / "c.jsonl", [{"id": "a", "text": "x"}, {"id": "b", "text": "y"}])
        r = self._write(tmp_path / "r.jsonl", [{"id": "a", "text": "x"}, {"id": "z", "text": "y"}])
        status, _, err = run(capsys, "eval", "--candidates", c, "--references", r, "--metric", "rouge1")
        assert status == 65 and "'b'" in err and "'z'" in err

    def test_empty_reference(self, capsys, tmp_path):
        c = self._write(tmp_path / "c.jsonl", [{"id": "a", "text": "x"}])
        r = self._write(tmp_path / "r.jsonl", [{"id": "a", "text": ""}])
        status, _, err = run(capsys, "eval", "--candidates", c, "--references", r, "--metric", "wer")
        assert status == 65 and "undefined metric for id" in err

    def test_multi_reference_average(self, capsys, tmp_path):
        c = self._write(tmp_path / "c.jsonl", [{"id": "a", "text": "a b"}])
        r = self._write(tmp_path / "r.jsonl", [{"id": "a", "text": "a b"}, {"id": "a", "text": "c d"}])
        _, out, _ = run(capsys, "eval", "--candidates", c, "--references", r, "--metric", "rouge1")
        assert out["scores"][0]["score"] == 0.5

    def test_malformed_jsonl(self, capsys, tmp_path):
        c = tmp_path / "c.jsonl"
        c.write_text('{"id": "a", "text": "x"}\nnot json\n')
        status, _, err = run(capsys, "eval", "--candidates", c, "--references", c, "--metric", "rouge1")
        assert status == 2 and ":2:" in err

    def test_duplicate_candidate(self, capsys, tmp_path):
        c = self._write(tmp_path / "c.jsonl", [{"id": "a", "text": "x"}, {"id": "a", "text": "y"}])
        r = self._write(tmp_path / "r.jsonl", [{"id": "a", "text": "x"}])
        assert run(capsys, "eval", "--candidates", c, "--references", r, "--metric", "rouge1")[0] == 65


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "peftkit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "audit-grads" in proc.stdout
