"""命令行端到端：generate → train → embed → match → eval"""

import json
from pathlib import Path

import pytest

import main as cli
from utils.tensor_io import read_tensor


TINY_SETTINGS = [
    "encoder.stage_channels=4,8,8",
    "encoder.global_stride=4",
    "encoder.local_stride=2",
    "encoder.embed_dim=8",
    "encoder.fpn_channels=8",
    "augment.patch_size=32",
    "data.size=64",
    "train.batch_size=2",
    "train.iterations=2",
    "train.n_pos=8",
    "train.n_neg=16",
    "train.n_rand_g=32",
    "train.n_cand_l=48",
    "train.log_every=1",
    "train.checkpoint_every=1",
    "eval.n_template_pool=4",
    "eval.n_queries=2",
]


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for key in ("ANATEMBED_THREADS", "LOG_LEVEL", "LOG_FILE"):
        monkeypatch.delenv(key, raising=False)
    return tmp_path


def run(capsys, *argv) -> tuple[int, dict | None]:
    code = cli.main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(out[-1]) if out else None


def run_logged(capsys, *argv) -> tuple[int, dict | None, str]:
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    out = captured.out.strip().splitlines()
    return code, json.loads(out[-1]) if out else None, captured.err


def _set_args(items):
    args = []
    for item in items:
        args.extend(["--set", item])
    return args


def test_generate_is_byte_reproducible(capsys, workdir):
    for out in ("a", "b"):
        code, result = run(capsys, "generate", "--seed", "5", "--count", "3", "--size", "64", "--out", out)
        assert code == 0
        assert result["count"] == 3
        assert result["size"] == [64, 64]

    files_a = sorted(p.name for p in (workdir / "a").iterdir())
    files_b = sorted(p.name for p in (workdir / "b").iterdir())
    assert files_a == files_b
    assert "phantom_0002.image.pet" in files_a
    assert "config.env" in files_a
    for name in files_a:
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["generate", "--count", "many", "--out", "x"],
        ["train", "--out", "run", "--set", "train.bogus=1"],
        ["train", "--out", "run", "--set", "train.lr"],
        ["nonsense"],
    ],
)
def test_invalid_arguments_exit_2_with_json_error(capsys, argv):
    code = cli.main(argv)
    assert code == 2
    last = capsys.readouterr().err.strip().splitlines()[-1]
    payload = json.loads(last)
    assert payload["error"] == "config"
    assert payload["message"]


def test_missing_checkpoint_reports_error(capsys):
    code = cli.main(["embed", "--checkpoint", "nowhere", "--image", "nothing", "--out", "emb"])
    assert code == 1
    payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert payload["error"] == "checkpoint"


def test_pipeline(capsys, workdir):
    code, _ = run(capsys, "generate", "--seed", "2", "--count", "6", "--size", "64", "--out", "data")
    assert code == 0

    code, trained = run(capsys, "train", "--data", "data", "--out", "run", *_set_args(TINY_SETTINGS))
    assert code == 0
    assert trained["iteration"] == 2
    assert Path(trained["checkpoint"]).is_dir()
    assert (workdir / "run" / "config.env").is_file()
    assert (workdir / "run" / "loss_log.csv").is_file()

    code, embedded = run(capsys, "embed", "--checkpoint", "run/checkpoint", "--image", "data/phantom_0005", "--out", "emb")
    assert code == 0
    assert read_tensor(workdir / "emb" / "global.pet").shape == (8, 16, 16)
    assert read_tensor(workdir / "emb" / "local.pet").shape == (8, 32, 32)
    assert (workdir / "emb" / "embedding.json").is_file()

    code, matched = run(
        capsys,
        "match",
        "--checkpoint", "run/checkpoint",
        "--template", "data/phantom_0000",
        "--landmark", "carina",
        "--query", "data/phantom_0005",
        "--threshold", "-10",
        "--out", "m/match.json",
    )
    assert code == 0
    assert matched["landmark"] == "carina"
    assert matched["query_id"] == "phantom_0005"
    assert matched["matched"] is True
    assert len(matched["point"]) == 2
    assert (workdir / "m" / "match.config.env").is_file()

    code, self_match, log_text = run_logged(
        capsys,
        "match",
        "--checkpoint", "run/checkpoint",
        "--template", "data/phantom_0000",
        "--point", "32,40",
        "--query", "data/phantom_0000",
    )
    assert code == 0
    assert "# resolved run configuration" in log_text
    assert "train.n_rand_g=32" in log_text
    assert sorted(p.name for p in workdir.glob("**/*.config.env")) == ["match.config.env"]
    assert self_match["matched"] is True
    assert self_match["score"] >= 1.99

    code, evaluated = run(
        capsys,
        "eval",
        "--checkpoint", "run/checkpoint",
        "--template-dir", "data",
        "--query-dir", "data",
        "--variant", "all",
        "--report", "reports/bench",
        "--points", "2",
    )
    assert code == 0
    assert set(evaluated["summary"]) == {"both", "global-only", "local-only"}
    for suffix in ("json", "csv", "runtime.json", "config.env", "both.dat", "points.json"):
        assert (workdir / "reports" / f"bench.{suffix}").is_file(), suffix
    report = json.loads((workdir / "reports" / "bench.json").read_text(encoding="utf-8"))
    assert {row["query_id"] for row in report["rows"]} == {"phantom_0004", "phantom_0005"}
