"""Trainer, checkpointing, evaluation, sweep, and CLI contracts."""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import fass.training as T
from fass.cli import main as cli_main
from fass.errors import ConfigError
from fass.phantom import PhantomSpec, generate_phantom, read_volume, write_volume
from fass.training import RunConfig, evaluate_volumes, load_network, predict_volume, sweep, train

from reference_baseline import train_reference

SMALL_PHANTOM = dict(dims=(32, 32, 32), organ_semiaxis_range=(9, 13),
                     tumor_radius_range=(3.0, 4.5))


@pytest.fixture(scope="module")
def volumes():
    return [generate_phantom(PhantomSpec(seed=s, **SMALL_PHANTOM)) for s in range(3)]


def tiny_cfg(tmp_path, **kw):
    base = dict(iterations=10, patch_size=16, bg_size=8, checkpoint_every=5,
                eval_window=16, eval_stride=16, seed=5, out_dir=str(tmp_path / "run"))
    base.update(kw)
    return RunConfig(**base)


def loss_lines(records):
    return [r for r in records if "L_sup" in r]


class TestDeterminism:
    def test_same_seed_same_losses(self, tmp_path, volumes):
        r1 = train(tiny_cfg(tmp_path / "a"), volumes=volumes)
        r2 = train(tiny_cfg(tmp_path / "b"), volumes=volumes)
        a = [r["L_total"] for r in loss_lines(r1.records)]
        b = [r["L_total"] for r in loss_lines(r2.records)]
        assert a == b

    def test_different_seed_differs(self, tmp_path, volumes):
        r1 = train(tiny_cfg(tmp_path / "a"), volumes=volumes)
        r2 = train(tiny_cfg(tmp_path / "b", seed=6), volumes=volumes)
        assert [r["L_total"] for r in loss_lines(r1.records)] != \
               [r["L_total"] for r in loss_lines(r2.records)]


class TestAblationContract:
    def test_all_off_matches_module_free_build(self, tmp_path, volumes):
        cfg = tiny_cfg(tmp_path, fa=False, flfe=False, ec=False, iterations=8)
        full_build = train(cfg, volumes=volumes)
        reference = train_reference(cfg, volumes)
        got = loss_lines(full_build.records)
        assert len(got) == len(reference) == 8
        for a, b in zip(got, reference):
            assert a == b  # bitwise-identical records
            assert a["L_D"] == 0.0 and a["L_EC"] == 0.0

    def test_switches_engage_modules(self, tmp_path, volumes):
        cfg = tiny_cfg(tmp_path, fa=True, flfe=False, ec=True, iterations=6, alpha=0.9)
        res = train(cfg, volumes=volumes)
        lines = loss_lines(res.records)
        assert any(r["L_D"] != 0.0 for r in lines) or any(r["fa_skipped"] for r in lines)
        assert any(r["L_EC"] != 0.0 for r in lines) or any(r["ec_skipped"] for r in lines)


class TestResume:
    def test_resume_matches_uninterrupted(self, tmp_path, volumes, monkeypatch):
        cfg = tiny_cfg(tmp_path / "full", iterations=10, checkpoint_every=5)
        captured = {}
        orig = T.save_checkpoint

        def capture(path, net, opt, iteration, c, rngs):
            orig(path, net, opt, iteration, c, rngs)
            if iteration == 5:
                captured["bytes"] = Path(path).read_bytes()

        monkeypatch.setattr(T, "save_checkpoint", capture)
        full = train(cfg, volumes=volumes)
        monkeypatch.setattr(T, "save_checkpoint", orig)

        ck = tmp_path / "mid.fck"
        ck.write_bytes(captured["bytes"])
        resumed = train(replace(cfg, out_dir=str(tmp_path / "resumed")),
                        volumes=volumes, resume=ck)
        a = [r["L_total"] for r in loss_lines(full.records)][5:]
        b = [r["L_total"] for r in loss_lines(resumed.records)]
        assert len(b) == 5
        assert all(abs(x - y) < 1e-7 for x, y in zip(a, b))

    def test_config_hash_mismatch_rejected(self, tmp_path, volumes):
        cfg = tiny_cfg(tmp_path / "a", iterations=5, checkpoint_every=5)
        res = train(cfg, volumes=volumes)
        other = tiny_cfg(tmp_path / "b", iterations=5, checkpoint_every=5, alpha=0.4)
        with pytest.raises(ConfigError):
            train(other, volumes=volumes, resume=res.checkpoint_path)


class TestSmokeTraining:
    def test_supervised_loss_decreases(self, tmp_path, volumes):
        cfg = tiny_cfg(tmp_path, fa=False, flfe=False, ec=False,
                       iterations=200, checkpoint_every=200, lr=0.02)
        res = train(cfg, volumes=volumes)
        sup = [r["L_sup"] for r in loss_lines(res.records)]
        assert np.mean(sup[180:200]) < np.mean(sup[:20])


class TestEvaluation:
    def test_ground_truth_scores_perfect(self, volumes, tmp_path):
        cfg = tiny_cfg(tmp_path)
        from fass.metrics import aggregate_reports, evaluate_metrics
        reports = [evaluate_metrics(v.labels, v.labels, v.spacing_mm, 3) for v in volumes]
        agg = aggregate_reports(reports)
        assert agg["per_class"]["1"]["dice"]["mean"] == pytest.approx(100.0)
        assert agg["per_class"]["2"]["dice"]["mean"] == pytest.approx(100.0)

    def test_single_window_fusion_equals_direct_forward(self, tmp_path, volumes):
        from fass.engine import Tensor
        cfg = tiny_cfg(tmp_path, iterations=3, eval_window=32, eval_stride=32)
        res = train(cfg, volumes=volumes)
        net = res.net
        vol = volumes[0]
        pred = predict_volume(net, vol, cfg)
        net.set_training(False)
        direct = net.forward(Tensor(vol.intensities[None]), flfe_enabled=cfg.flfe)
        want = np.argmax(direct.seg_logits.data, axis=0).astype(np.uint8)
        assert np.array_equal(pred, want)

    def test_aggregate_std_zero_for_copies(self, tmp_path, volumes):
        cfg = tiny_cfg(tmp_path, iterations=3)
        res = train(cfg, volumes=volumes)
        _, agg = evaluate_volumes(res.net, [volumes[0], volumes[0]], cfg)
        assert agg["per_class"]["1"]["dice"]["std"] == pytest.approx(0.0, abs=1e-9)

    def test_checkpoint_reload_predicts_identically(self, tmp_path, volumes):
        cfg = tiny_cfg(tmp_path, iterations=4)
        res = train(cfg, volumes=volumes)
        net2 = load_network(res.checkpoint_path, cfg)
        a = predict_volume(res.net, volumes[0], cfg)
        b = predict_volume(net2, volumes[0], cfg)
        assert np.array_equal(a, b)


class TestSweep:
    def test_alpha_sweep_rows(self, tmp_path, volumes):
        cfg = tiny_cfg(tmp_path, iterations=3, fa=True, flfe=False, ec=False)
        csv_path = tmp_path / "alpha.csv"
        rows = sweep(cfg, "alpha", [0.0, 0.1, 0.3], volumes, volumes[:1], csv_path)
        assert len(rows) == 3
        text = csv_path.read_text().strip().splitlines()
        assert text[0].startswith("value,")
        assert len(text) == 4

    def test_wavelet_sweep_covers_bases(self, tmp_path):
        # the widest basis (bior2.4, 10 taps) needs level-3 slices of at
        # least 10, hence a patch of at least 40
        vols = [generate_phantom(PhantomSpec(seed=s, dims=(48, 48, 48),
                                             organ_semiaxis_range=(12, 16),
                                             tumor_radius_range=(4.0, 5.0)))
                for s in range(2)]
        cfg = tiny_cfg(tmp_path, iterations=2, fa=False, flfe=True, ec=False,
                       patch_size=40, bg_size=16, eval_window=48, eval_stride=48)
        rows = sweep(cfg, "wavelet", ["haar", "db2", "coif1", "bior2.4"],
                     vols, vols[:1], tmp_path / "w.csv")
        assert [r["value"] for r in rows] == ["haar", "db2", "coif1", "bior2.4"]

    def test_bg_size_sweep(self, tmp_path, volumes):
        cfg = tiny_cfg(tmp_path, iterations=2, fa=True, flfe=False, ec=False)
        rows = sweep(cfg, "bg_size", [8, 16], volumes, volumes[:1], tmp_path / "b.csv")
        assert len(rows) == 2

    def test_unknown_parameter_rejected(self, tmp_path, volumes):
        with pytest.raises(ConfigError):
            sweep(tiny_cfg(tmp_path), "momentum", [0.5], volumes, volumes, tmp_path / "x.csv")


class TestCLI:
    def test_generate_train_evaluate_infer(self, tmp_path):
        data = tmp_path / "data"
        assert cli_main(["generate", "--count", "2", "--seed", "3", "--out", str(data),
                         "--dims", "32"]) == 0
        assert len(list(data.glob("*.json"))) == 2

        out = tmp_path / "run"
        rc = cli_main([
            "train", "--data-dir", str(data), "--out-dir", str(out),
            "--iterations", "3", "--patch-size", "16", "--bg-size", "8",
            "--eval-window", "16", "--eval-stride", "16",
            "--fa", "off", "--flfe", "off", "--ec", "off",
        ])
        assert rc == 0
        assert (out / "checkpoint.fck").exists()
        log = (out / "train_log.jsonl").read_text().strip().splitlines()
        recs = [json.loads(l) for l in log]
        assert {r["t"] for r in recs if "L_sup" in r} == {1, 2, 3}

        report = tmp_path / "report.json"
        rc = cli_main([
            "evaluate", "--checkpoint", str(out / "checkpoint.fck"),
            "--test-dir", str(data), "--out", str(report),
            "--iterations", "3", "--patch-size", "16", "--bg-size", "8",
            "--eval-window", "16", "--eval-stride", "16",
            "--fa", "off", "--flfe", "off", "--ec", "off",
        ])
        assert rc == 0
        agg = json.loads(report.read_text())
        assert "per_class" in agg and "1" in agg["per_class"]

        stem = next(iter(data.glob("*.json"))).with_suffix("")
        rc = cli_main([
            "infer", "--checkpoint", str(out / "checkpoint.fck"),
            "--volume", str(stem), "--out", str(tmp_path / "pred"),
            "--iterations", "3", "--patch-size", "16", "--bg-size", "8",
            "--eval-window", "16", "--eval-stride", "16",
            "--fa", "off", "--flfe", "off", "--ec", "off",
        ])
        assert rc == 0
        pred = read_volume(tmp_path / "pred")
        assert pred.labels.shape == (32, 32, 32)

    def test_dwt_subcommand_writes_pgm(self, tmp_path):
        vol = generate_phantom(PhantomSpec(seed=1, **SMALL_PHANTOM))
        write_volume(tmp_path / "v", vol)
        rc = cli_main(["dwt", "--volume", str(tmp_path / "v"), "--wavelet", "db2",
                       "--out", str(tmp_path / "bands")])
        assert rc == 0
        files = sorted(p.name for p in (tmp_path / "bands").glob("*.pgm"))
        assert len(files) == 4
        head = (tmp_path / "bands" / files[0]).read_bytes()[:2]
        assert head == b"P5"

    def test_keypoints_subcommand(self, tmp_path):
        vol = generate_phantom(PhantomSpec(seed=1, **SMALL_PHANTOM))
        write_volume(tmp_path / "v", vol)
        out = tmp_path / "kp.csv"
        rc = cli_main(["keypoints", "--volume", str(tmp_path / "v"), "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "x,y,z,p,s"
        assert len(lines) > 1

    def test_contract_violation_exits_nonzero(self, tmp_path, capsys):
        rc = cli_main(["train", "--data-dir", str(tmp_path / "missing"),
                       "--out-dir", str(tmp_path / "o")])
        assert rc != 0
        err = capsys.readouterr().err
        assert err.startswith("error:") and err.count("\n") == 1

    def test_bad_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"data_dir": "x", "bogus_knob": 1}))
        rc = cli_main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "o")])
        assert rc != 0


class TestNaNGuard:
    def test_abort_writes_diagnostic(self, tmp_path, volumes, monkeypatch):
        import fass.losses as L
        from fass.errors import TrainingAborted

        cfg = tiny_cfg(tmp_path, iterations=6, fa=False, flfe=False, ec=False)
        orig = L.ce_loss
        calls = {"n": 0}

        def poisoned(logits, label):
            calls["n"] += 1
            out = orig(logits, label)
            if calls["n"] == 3:
                out.data = np.asarray(np.nan, np.float32)
            return out

        monkeypatch.setattr(T, "ce_loss", poisoned)
        with pytest.raises(TrainingAborted):
            train(cfg, volumes=volumes)
