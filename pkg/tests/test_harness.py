import json
import math

import numpy as np
import pytest

from conftest import make_synthetic_dataset

from minitrain.cli import build_parser, main, parse_config, read_config_file
from minitrain.data import NormStats, normalize
from minitrain.harness import (
    RECIPES,
    MetricsRecord,
    RunConfig,
    manifest_path,
    read_metrics,
    recipe_matrix,
    run_training,
    write_metrics,
)
from minitrain.models import ModelSpec, build_resnet9
from minitrain.tensor import ConfigError, Tensor
from minitrain.train import BudgetClock, evaluate

TINY = dict(widths=(8, 16, 16, 16), per_class=4, max_epochs=2,
            batch_size=20, budget_seconds=120.0, augment=False)


def tiny_cfg(data_dir, out, **kw):
    base = dict(TINY)
    base.update(kw)
    return RunConfig(data_dir=str(data_dir), metrics_out=str(out), **base)


# ---------------------------------------------------------------------------
# config resolution


def test_flag_overrides_file_overrides_default(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("lr-peak = 0.2   # file value\nseed = 5\n")
    cfg, prov, _ = parse_config(
        ["--config", str(cfgfile), "--lr-peak", "0.3"], env={})
    assert cfg.lr_peak == 0.3  # flag wins
    assert cfg.seed == 5  # file beats default
    assert cfg.momentum == 0.9  # default
    assert prov["file_values"]["lr_peak"] == 0.2
    assert prov["flag_values"]["lr_peak"] == 0.3


def test_env_data_dir_fallback(tmp_path):
    cfg, _, _ = parse_config([], env={"CIFAR_DIR": "/env/path"})
    assert cfg.data_dir == "/env/path"
    cfg, _, _ = parse_config(["--data-dir", "/flag/path"], env={"CIFAR_DIR": "/env/path"})
    assert cfg.data_dir == "/flag/path"


def test_config_file_syntax(tmp_path):
    f = tmp_path / "a.cfg"
    f.write_text("# comment only\nper-class = 100\nlambda = 0.0005\nwidths = 8,16,32,64\nip = true\n")
    vals = read_config_file(f)
    assert vals == {"per_class": 100, "decay": 0.0005, "widths": (8, 16, 32, 64), "ip": True}


def test_config_file_errors(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("nonsense line\n")
    with pytest.raises(ConfigError, match="bad.cfg:1"):
        read_config_file(f)
    f.write_text("unknown_key = 3\n")
    with pytest.raises(ConfigError, match="unknown_key"):
        read_config_file(f)
    f.write_text("ip = maybe\n")
    with pytest.raises(ConfigError, match="boolean"):
        read_config_file(f)


def test_recipe_flag_mapping():
    assert RunConfig(data_dir="x").recipe == "baseline"
    assert RunConfig(data_dir="x", optimizer="sam").recipe == "sam"
    assert RunConfig(data_dir="x", optimizer="sam", ip=True).recipe == "sam+ip"
    assert RunConfig(data_dir="x", optimizer="sam", gc=True).recipe == "sam+gc"
    assert RunConfig(data_dir="x", mltp=True).recipe == "mltp"


def test_ip_implies_smoothing_decay_celu():
    on = RunConfig(data_dir="x", ip=True)
    off = RunConfig(data_dir="x", ip=False)
    assert on.ls_alpha() == 0.1 and off.ls_alpha() == 0.0
    assert on.resolved_decay() == 0.0005 and off.resolved_decay() == 0.0
    assert RunConfig(data_dir="x", ip=True, decay=0.001).resolved_decay() == 0.001


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        RunConfig(data_dir="x", budget_seconds=0.0)
    with pytest.raises(ConfigError):
        RunConfig(data_dir="x", optimizer="adam")
    with pytest.raises(ConfigError):
        RunConfig(data_dir="x", precision=16)


def test_parser_lists_all_recipes_in_matrix_const():
    parser = build_parser()
    args = parser.parse_args(["--recipe-matrix"])
    assert set(args.recipe_matrix.split(",")) == set(RECIPES)


# ---------------------------------------------------------------------------
# metrics io


def test_metrics_round_trip(tmp_path):
    recs = [MetricsRecord(1, 1.5, 2.302585, 10.0, 0.04, "baseline"),
            MetricsRecord(2, 3.0, 1.9, 22.5, 0.08, "baseline")]
    p = tmp_path / "m.csv"
    write_metrics(recs, {"k": "v"}, p)
    back = read_metrics(p)
    assert [r.epoch for r in back] == [1, 2]
    assert back[0].train_loss == pytest.approx(2.302585, abs=1e-6)
    assert back[1].test_accuracy == 22.5
    header = p.read_text().splitlines()[0]
    assert header == "epoch,wall_seconds,train_loss,test_accuracy,lr,recipe"
    assert json.loads(manifest_path(p).read_text()) == {"k": "v"}


# ---------------------------------------------------------------------------
# evaluation examples


def test_evaluate_constant_logits_score_chance():
    ds = make_synthetic_dataset(per_class=3, seed=0)
    stats = NormStats.fit(ds)
    x = normalize(ds.images, stats)

    # constant-logit model scores exactly 10% on a balanced set
    class Constant:
        def forward(self, t, mode="eval"):
            return Tensor(np.tile(np.arange(10.0), (t.shape[0], 1)))

    acc = evaluate(Constant(), x, ds.labels, batch_size=8)
    assert acc == pytest.approx(10.0)


def test_evaluate_oracle_is_100():
    ds = make_synthetic_dataset(per_class=2, seed=1)
    stats = NormStats.fit(ds)
    x = normalize(ds.images, stats)
    labels = ds.labels

    class Oracle:
        def __init__(self):
            self.cursor = 0

        def forward(self, t, mode="eval"):
            n = t.shape[0]
            out = np.eye(10)[labels[self.cursor:self.cursor + n]] * 5.0
            self.cursor += n
            return Tensor(out)

    assert evaluate(Oracle(), x, labels, batch_size=7) == 100.0


def test_evaluate_fresh_model_near_chance():
    ds = make_synthetic_dataset(per_class=5, seed=2)
    stats = NormStats.fit(ds)
    x = normalize(ds.images, stats)
    model, _ = build_resnet9(ModelSpec(widths=(4, 8, 8, 8)), seed=0)
    acc = evaluate(model, x, ds.labels, batch_size=25)
    assert 0.0 <= acc <= 60.0  # untrained: nowhere near perfect


# ---------------------------------------------------------------------------
# run_training end-to-end on synthetic data


def test_run_training_baseline_outputs(synth_data_dir, tmp_path):
    out = tmp_path / "base.csv"
    cfg = tiny_cfg(synth_data_dir, out)
    result = run_training(cfg)
    assert result.epochs_completed == 2
    recs = read_metrics(out)
    assert [r.epoch for r in recs] == [1, 2]
    assert all(r.recipe == "baseline" for r in recs)
    assert all(np.isfinite(r.train_loss) for r in recs)
    assert recs[0].wall_seconds < recs[1].wall_seconds

    man = json.loads(manifest_path(out).read_text())
    assert man["param_count"] == result.params.num_elements()
    assert man["epochs_completed"] == 2
    assert set(man["seeds"]) == {"subset", "init", "whitening", "augment"}
    assert man["subset_size"] == 40
    assert man["whitening"] is None


def test_run_training_deterministic_repeat(synth_data_dir, tmp_path):
    kw = dict(per_class=4, max_epochs=3)
    r1 = run_training(tiny_cfg(synth_data_dir, tmp_path / "a.csv", **kw))
    r2 = run_training(tiny_cfg(synth_data_dir, tmp_path / "b.csv", **kw))
    assert [r.train_loss for r in r1.records] == [r.train_loss for r in r2.records]
    assert [r.test_accuracy for r in r1.records] == [r.test_accuracy for r in r2.records]
    assert r1.manifest["subset_digest"] == r2.manifest["subset_digest"]


def test_run_training_seed_changes_subset(synth_data_dir, tmp_path):
    r1 = run_training(tiny_cfg(synth_data_dir, tmp_path / "a.csv", seed=0, max_epochs=1))
    r2 = run_training(tiny_cfg(synth_data_dir, tmp_path / "b.csv", seed=1, max_epochs=1))
    assert r1.manifest["subset_digest"] != r2.manifest["subset_digest"]


def test_run_training_sam_ip_manifest(synth_data_dir, tmp_path):
    out = tmp_path / "samip.csv"
    cfg = tiny_cfg(synth_data_dir, out, optimizer="sam", ip=True, max_epochs=1)
    result = run_training(cfg)
    man = result.manifest
    assert man["recipe"] == "sam+ip"
    assert man["whitening"] is not None and man["whitening"]["eps"] == 1e-3
    assert read_metrics(out)[0].recipe == "sam+ip"


def test_run_training_mltp_rounds(synth_data_dir, tmp_path):
    out = tmp_path / "mltp.csv"
    cfg = tiny_cfg(synth_data_dir, out, mltp=True, meta_iterations=2)
    result = run_training(cfg)
    assert result.epochs_completed == 2
    assert all(np.isfinite(r.train_loss) for r in result.records)


def test_budget_zero_epochs_emits_eval_record(synth_data_dir, tmp_path):
    # clock jumps far past the budget immediately after start
    times = iter([0.0])

    def clock():
        return next(times, 1e9)

    out = tmp_path / "tiny.csv"
    cfg = tiny_cfg(synth_data_dir, out, budget_seconds=0.5)
    result = run_training(cfg, clock=clock)
    assert result.epochs_completed == 0
    recs = read_metrics(out)
    assert len(recs) == 1 and recs[0].epoch == 0
    assert math.isnan(recs[0].train_loss)
    assert 0.0 <= recs[0].test_accuracy <= 100.0


def test_budget_never_exceeded_by_more_than_one_epoch(synth_data_dir, tmp_path):
    # simulated clock: each call advances 1s; epochs take several calls, so
    # the run must stop once remaining < longest epoch observed.
    t = [0.0]

    def clock():
        t[0] += 1.0
        return t[0]

    cfg = tiny_cfg(synth_data_dir, tmp_path / "b.csv", budget_seconds=30.0, max_epochs=50)
    result = run_training(cfg, clock=clock)
    per_epoch = max(r.wall_seconds for r in result.records) / len(result.records)
    assert result.manifest["total_wall_seconds"] <= 30.0 + 2 * per_epoch
    assert 0 < result.epochs_completed < 50


def test_missing_data_dir_fails_before_training(tmp_path):
    cfg = tiny_cfg(tmp_path / "nope", tmp_path / "m.csv")
    with pytest.raises(FileNotFoundError):
        run_training(cfg)


def test_unwritable_metrics_path_fails_early(synth_data_dir):
    cfg = tiny_cfg(synth_data_dir, "/proc/denied/m.csv")
    with pytest.raises(OSError):
        run_training(cfg)


# ---------------------------------------------------------------------------
# recipe matrix + CLI


def test_recipe_matrix_continues_after_failure(synth_data_dir, tmp_path, monkeypatch):
    import minitrain.harness as H

    real = H.run_training

    def flaky(cfg, *a, **kw):
        if cfg.recipe == "sam":
            raise RuntimeError("boom")
        return real(cfg, *a, **kw)

    monkeypatch.setattr(H, "run_training", flaky)
    base = tiny_cfg(synth_data_dir, tmp_path / "mat.csv", max_epochs=1)
    rows = H.recipe_matrix(base, ["baseline", "sam"])
    assert rows[0]["status"] == "ok"
    assert rows[1]["status"].startswith("failed")
    assert (tmp_path / "mat_baseline.csv").exists()


def test_recipe_matrix_unknown_recipe(synth_data_dir, tmp_path):
    base = tiny_cfg(synth_data_dir, tmp_path / "m.csv")
    with pytest.raises(ConfigError, match="unknown recipe"):
        recipe_matrix(base, ["nope"])


def test_cli_main_happy_path(synth_data_dir, tmp_path, capsys):
    out = tmp_path / "cli.csv"
    rc = main(["--data-dir", str(synth_data_dir), "--per-class", "4",
               "--max-epochs", "1", "--batch-size", "20", "--widths", "8,16,16,16",
               "--no-augment", "--metrics-out", str(out)])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "recipe=baseline" in printed and "accuracy=" in printed
    assert out.exists()
    # CLI provenance lands in the manifest
    man = json.loads(manifest_path(out).read_text())
    assert man["cli"]["flag_values"]["per_class"] == 4


def test_cli_main_no_data_dir_is_error(capsys):
    rc = main([])
    assert rc == 2
    assert "data directory" in capsys.readouterr().err


def test_cli_main_config_error_exit_code(tmp_path, capsys):
    f = tmp_path / "bad.cfg"
    f.write_text("optimizer = adam\n")
    rc = main(["--config", str(f), "--data-dir", "/x"])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_budget_clock_contract():
    vals = iter([10.0, 11.0, 14.0, 21.0])
    clk = lambda: next(vals)
    b = BudgetClock(10.0, clock=clk)
    assert b.elapsed() == 1.0
    assert b.should_start(5.0)  # remaining 6 >= 5
    assert not b.should_start(5.0)  # remaining -1
