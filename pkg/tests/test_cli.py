import json
import subprocess
import sys

import numpy as np
import pytest

from pon import checkpoint, cli, core_math, data, experiment, gradcheck, losses, nn

METRIC_KEYS = {"acc", "macro_auc", "qwk", "macro_f1", "primary", "secondary"}
OP_KEYS = {"sen_at_spec80", "spec_at_sen80", "sen_at_spec90", "spec_at_sen90"}


@pytest.fixture(scope="module")
def small_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "small.csv"
    ds, _ = data.generate(data.SyntheticConfig(num_samples=200, seed=1))
    data.save_csv(ds, path)
    return path


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


class TestGenData:
    def test_writes_csv_and_provenance(self, tmp_path, capsys):
        code, _ = run(["gen-data", "--out", tmp_path / "d.csv"], capsys)
        assert code == 0
        header = (tmp_path / "d.csv").read_text().splitlines()[0]
        assert header.startswith("id,label,f0,")
        prov = json.loads((tmp_path / "d.json").read_text())
        assert prov["num_samples"] == 2000 and prov["seed"] == 0

    def test_seed_gives_identical_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert run(["gen-data", "--seed", 7, "--out", tmp_path / f"{name}.csv"])[0] == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_config_file_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data": {"num_samples": 30, "seed": 3}}))
        run(["gen-data", "--config", cfg, "--seed", 5, "--out", tmp_path / "d.csv"])
        prov = json.loads((tmp_path / "d.json").read_text())
        assert prov["num_samples"] == 30 and prov["seed"] == 5

    def test_unknown_key_names_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data": {"num_sample": 30}}))
        code, out = run(["gen-data", "--config", cfg, "--out", tmp_path / "d.csv"], capsys)
        assert code == 1
        assert "data.num_sample" in out.err

    def test_unwritable_path(self, tmp_path, capsys):
        code, out = run(["gen-data", "--out", tmp_path / "missing" / "dir" / "d.csv"], capsys)
        assert code != 0
        assert out.err


class TestTrain:
    def test_two_epochs(self, tmp_path, small_csv):
        out = tmp_path / "run"
        assert run(["train", "--data", small_csv, "--epochs", 2, "--out", out])[0] == 0
        lines = (out / "history.jsonl").read_text().splitlines()
        assert [json.loads(l)["epoch"] for l in lines] == [1, 2]
        record = json.loads(lines[0])
        assert {"epoch", "loss_pfl", "loss_mcl", "train_acc", "val"} <= set(record)
        trainer = checkpoint.load_checkpoint(out / "checkpoint.json")
        assert trainer.epoch == 2 and trainer.bank is not None and len(trainer.bank) > 0
        resolved = json.loads((out / "config.json").read_text())
        assert resolved["train"]["epochs"] == 2 and resolved["method"] == "pon"

    def test_ce_has_no_bank(self, tmp_path, small_csv):
        out = tmp_path / "ce"
        run(["train", "--data", small_csv, "--method", "ce", "--epochs", 1, "--out", out])
        assert json.loads((out / "checkpoint.json").read_text())["bank"] is None

    def test_deterministic_history(self, tmp_path, small_csv):
        for name in ("a", "b"):
            run(["train", "--data", small_csv, "--epochs", 2, "--seed", 3, "--out", tmp_path / name])
        assert (tmp_path / "a" / "history.jsonl").read_bytes() == (tmp_path / "b" / "history.jsonl").read_bytes()

    def test_checkpoint_round_trip_is_bit_exact(self, tmp_path, small_csv):
        run(["train", "--data", small_csv, "--epochs", 1, "--out", tmp_path])
        state = checkpoint.load_state(tmp_path / "checkpoint.json")
        trainer = checkpoint.trainer_from_state(state)
        checkpoint.save_checkpoint(tmp_path / "again.json", trainer, state["extra"])
        assert (tmp_path / "again.json").read_bytes() == (tmp_path / "checkpoint.json").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path, small_csv):
        full, part = tmp_path / "full", tmp_path / "part"
        run(["train", "--data", small_csv, "--epochs", 4, "--out", full])
        run(["train", "--data", small_csv, "--epochs", 2, "--out", part])
        assert run(["train", "--resume", part / "checkpoint.json", "--epochs", 4, "--out", part])[0] == 0
        a = [json.loads(l) for l in (full / "history.jsonl").read_text().splitlines()]
        b = [json.loads(l) for l in (part / "history.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in b] == [1, 2, 3, 4]
        for ra, rb in zip(a, b):
            for key in ("loss_total", "loss_pfl", "loss_mcl"):
                assert abs(ra[key] - rb[key]) <= 1e-10
        pa = checkpoint.load_checkpoint(full / "checkpoint.json").model.params
        pb = checkpoint.load_checkpoint(part / "checkpoint.json").model.params
        for name in pa:
            np.testing.assert_allclose(pa[name], pb[name], rtol=0, atol=1e-10)

    def test_divergence_exits_2_with_partial_history(self, tmp_path, small_csv, monkeypatch, capsys):
        real = nn.backward
        calls = {"n": 0}
        batches_per_epoch = -(-160 // 16)

        def flaky(*args, **kwargs):
            calls["n"] += 1
            res = real(*args, **kwargs)
            if calls["n"] > batches_per_epoch + 3:
                res.total = float("nan")
            return res

        monkeypatch.setattr(nn, "backward", flaky)
        code, out = run(["train", "--data", small_csv, "--epochs", 3, "--out", tmp_path], capsys)
        assert code == 2
        assert "diverged" in out.err and "batch 3" in out.err
        assert len((tmp_path / "history.jsonl").read_text().splitlines()) == 1

    def test_bad_method_flag(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["train", "--method", "svm", "--out", str(tmp_path)])


def oracle_checkpoint(path, num_classes=5, feature_dim=4, alpha=20.0):
    """Softmax-head network whose encoder outputs s = u.x and whose logits are
    alpha * (k s - k(k+1)/2), so the argmax is floor(s)."""
    cfg = data.SyntheticConfig(num_samples=1000, num_classes=num_classes, feature_dim=feature_dim,
                               severity_noise=0.0, feature_noise=0.0, seed=11)
    ds, u = data.generate(cfg)
    train_cfg = nn.TrainConfig(method="ce", epochs=0)
    model_cfg = nn.ModelConfig(input_dim=feature_dim, num_classes=num_classes, hidden=(1,), proj_dim=2, head="softmax")
    trainer = nn.Trainer.create(ds, train_cfg, model_cfg)
    k = np.arange(num_classes, dtype=float)
    p = trainer.model.params
    p["enc.W0"] = u[:, None].copy()
    p["enc.b0"] = np.zeros(1)
    p["cls.W"] = alpha * k[None, :]
    p["cls.b"] = -alpha * k * (k + 1) / 2
    checkpoint.save_checkpoint(path, trainer, {"run_config": cli.default_config()})
    return ds


class TestEval:
    def test_oracle_checkpoint_is_perfect(self, tmp_path, capsys):
        ds = oracle_checkpoint(tmp_path / "oracle.json")
        data.save_csv(ds, tmp_path / "clean.csv")
        code, out = run(["eval", "--checkpoint", tmp_path / "oracle.json", "--data", tmp_path / "clean.csv"], capsys)
        assert code == 0
        report = json.loads(out.out)
        assert report["acc"] == 1.0 and report["qwk"] == 1.0 and report["macro_auc"] == 1.0
        assert report["primary"]["sen_at_spec90"] == 1.0

    def test_schema_and_determinism(self, tmp_path, small_csv, capsys):
        run(["train", "--data", small_csv, "--epochs", 1, "--out", tmp_path], capsys)
        outputs = []
        for _ in range(2):
            code, out = run(["eval", "--checkpoint", tmp_path / "checkpoint.json", "--data", small_csv], capsys)
            assert code == 0
            outputs.append(out.out)
        assert outputs[0] == outputs[1]
        report = json.loads(outputs[0])
        assert set(report) == METRIC_KEYS | {"confusion_matrix", "roc"}
        assert set(report["primary"]) == OP_KEYS == set(report["secondary"])

    def test_class_count_mismatch(self, tmp_path, capsys):
        oracle_checkpoint(tmp_path / "oracle.json")
        six, _ = data.generate(data.SyntheticConfig(num_samples=60, num_classes=6, feature_dim=4, seed=2))
        data.save_csv(six, tmp_path / "six.csv")
        code, out = run(["eval", "--checkpoint", tmp_path / "oracle.json", "--data", tmp_path / "six.csv"], capsys)
        assert code == 1 and out.err

    def test_feature_mismatch(self, tmp_path, small_csv, capsys):
        oracle_checkpoint(tmp_path / "oracle.json")
        code, out = run(["eval", "--checkpoint", tmp_path / "oracle.json", "--data", small_csv], capsys)
        assert code == 1 and "features" in out.err

    def test_ordinal_checkpoint_has_no_auc(self, tmp_path, small_csv, capsys):
        run(["train", "--data", small_csv, "--method", "ordinal", "--epochs", 1, "--out", tmp_path], capsys)
        code, out = run(["eval", "--checkpoint", tmp_path / "checkpoint.json", "--data", small_csv], capsys)
        report = json.loads(out.out)
        assert code == 0 and report["macro_auc"] is None and report["primary"] is None


class TestGradcheck:
    def test_default_passes(self, capsys):
        code, out = run(["gradcheck"], capsys)
        assert code == 0
        report = json.loads(out.out)
        assert report["passed"]
        for name in ("poisson_focal_loss", "mcl_loss", "model"):
            assert report["components"][name]["configs"] >= 20
            assert report["components"][name]["max_rel_error"] < 1e-4

    def test_gamma_zero_is_covered(self):
        res = gradcheck.ComponentResult("poisson_focal_loss")
        gradcheck._rate_check(
            res, lambda P, Q, y, g, r: losses.poisson_focal_loss(P, Q, y, g, rate=r), np.random.default_rng(0), 20, gammas=(0.0,)
        )
        assert res.passed and res.configs == 20

    def test_sign_flip_in_rate_derivative_is_caught(self, monkeypatch, capsys):
        real = core_math.score_rate_derivative
        monkeypatch.setattr(core_math, "score_rate_derivative", lambda rate, k: -real(rate, k))
        code, out = run(["gradcheck"], capsys)
        assert code != 0
        report = json.loads(out.out)
        assert "poisson_focal_loss" in report["failed"]
        assert "FAIL poisson_focal_loss" in out.err


class TestCompare:
    def test_two_methods(self, tmp_path, capsys):
        code, out = run(["compare", "--methods", "pon,ce", "--folds", 2, "--repeats", 2, "--epochs", 2, "--out", tmp_path], capsys)
        assert code == 0
        result = json.loads((tmp_path / "results.json").read_text())
        assert [r["name"] for r in result["rows"]] == ["pon", "ce"]
        for row in result["rows"]:
            assert row["status"] == "ok"
            cell = row["metrics"]["macro_auc"]
            assert len(cell["per_repeat"]) == 2
            assert cell["sd"] == pytest.approx(np.std(cell["per_repeat"], ddof=1))
        table = (tmp_path / "table.txt").read_text()
        assert table == out.out
        body = table.splitlines()[2:]
        assert len(body) == 2 and all("±" in line for line in body)
        assert json.loads((tmp_path / "config.json").read_text())["eval"]["rows"] == ["pon", "ce"]

    def test_ordinal_row_has_absent_auc(self, tmp_path, capsys):
        code, out = run(["compare", "--methods", "ordinal", "--folds", 2, "--repeats", 1, "--epochs", 1, "--out", tmp_path], capsys)
        row = json.loads((tmp_path / "results.json").read_text())["rows"][0]
        assert code == 0 and row["metrics"]["macro_auc"] is None and row["metrics"]["acc"] is not None
        assert out.out.splitlines()[2].split()[2] == "-"

    def test_ablation_grid_rows(self):
        for name in ("PP", "PP+PE", "PP+PE+pfl", "mcl-only", "full"):
            cfg = experiment.row_config(name, nn.TrainConfig()).resolved()
            assert cfg.method == "pon"
        full = experiment.row_config("full", nn.TrainConfig()).resolved()
        assert (full.poisson_head, full.poisson_encoding, full.pfl, full.mcl) == (True, True, True, True)
        mcl_only = experiment.row_config("mcl-only", nn.TrainConfig()).resolved()
        assert (mcl_only.poisson_head, mcl_only.poisson_encoding, mcl_only.pfl, mcl_only.mcl) == (False, False, False, True)

    def test_failing_row_is_marked(self, monkeypatch):
        ds, _ = data.generate(data.SyntheticConfig(num_samples=100, seed=0))
        real = experiment.run_job

        def boom(job):
            if job.row == "focal":
                raise RuntimeError("injected")
            return real(job)

        monkeypatch.setattr(experiment, "run_job", boom)
        result = experiment.compare(ds, ["ce", "focal"], nn.TrainConfig(epochs=1), folds=2, repeats=1, workers=1)
        status = {r["name"]: r["status"] for r in result["rows"]}
        assert status == {"ce": "ok", "focal": "failed"}
        assert "failed" in experiment.format_table(result)

    def test_parallel_matches_serial(self):
        ds, _ = data.generate(data.SyntheticConfig(num_samples=120, seed=0))
        kw = dict(folds=2, repeats=1, seed=3)
        serial = experiment.compare(ds, ["ce", "pon"], nn.TrainConfig(epochs=1), workers=1, **kw)
        parallel = experiment.compare(ds, ["ce", "pon"], nn.TrainConfig(epochs=1), workers=2, **kw)
        assert serial == parallel

    def test_unknown_row(self, tmp_path, capsys):
        code, out = run(["compare", "--methods", "ce,bogus", "--out", tmp_path], capsys)
        assert code == 1 and "bogus" in out.err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pon", "gen-data", "--seed", "1", "--out", str(tmp_path / "x.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "pon", "train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1
