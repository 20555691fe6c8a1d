import json

import numpy as np
import pytest

from sketchysgd.cli import main, records_to_csv, validate_config
from sketchysgd.data import save_libsvm
from sketchysgd.optimizers import MetricsRecord
from sketchysgd.synthetic import gaussian_dataset, planted_least_squares


@pytest.fixture
def workspace(tmp_path):
    ds, _ = planted_least_squares(300, 20, condition=1e3, seed=0)
    data_path = tmp_path / "train.svm"
    save_libsvm(ds, data_path)
    config = {
        "dataset": {"path": "train.svm"},
        "task": "ridge",
        "l2": 0.0,
        "optimizers": [{"name": "sketchysgd"}, {"name": "sgd"}],
        "seeds": [0, 1, 2],
        "max_passes": 4,
        "output_dir": str(tmp_path / "out"),
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    return tmp_path, cfg_path, config


def write_config(tmp_path, config, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return path


def test_run_produces_one_csv_per_job_plus_manifest(workspace):
    tmp_path, cfg_path, _ = workspace
    assert main(["run", str(cfg_path)]) == 0
    out = tmp_path / "out"
    csvs = sorted(f.name for f in out.glob("*.csv"))
    assert csvs == [
        "sgd_seed0.csv", "sgd_seed1.csv", "sgd_seed2.csv",
        "sketchysgd_seed0.csv", "sketchysgd_seed1.csv", "sketchysgd_seed2.csv",
    ]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["dataset_sha256"]
    assert len(manifest["jobs"]) == 6
    assert all(job["status"] == "ok" for job in manifest["jobs"])
    resolved = manifest["jobs"][0]["resolved"]
    assert resolved["rho"] > 0 and resolved["update_freq"] == "inf"


def test_run_is_deterministic_apart_from_wall_clock(workspace, tmp_path):
    _, cfg_path, config = workspace
    assert main(["run", str(cfg_path), "--output-dir", str(tmp_path / "a")]) == 0
    assert main(["run", str(cfg_path), "--output-dir", str(tmp_path / "b")]) == 0
    for name in ("sketchysgd_seed0.csv", "sgd_seed2.csv"):
        rows_a = (tmp_path / "a" / name).read_text().splitlines()
        rows_b = (tmp_path / "b" / name).read_text().splitlines()
        assert len(rows_a) == len(rows_b)
        for ra, rb in zip(rows_a[1:], rows_b[1:]):
            ca, cb = ra.split(","), rb.split(",")
            assert ca[:1] == cb[:1] and ca[2:] == cb[2:]  # all but wall_seconds


def test_csv_pass_column_strictly_increasing(workspace):
    tmp_path, cfg_path, _ = workspace
    main(["run", str(cfg_path)])
    rows = (tmp_path / "out" / "sketchysgd_seed0.csv").read_text().splitlines()
    passes = [float(r.split(",")[0]) for r in rows[1:]]
    assert all(b > a for a, b in zip(passes, passes[1:]))


def test_validate_ok_prints_resolved_config(workspace, capsys):
    _, cfg_path, _ = workspace
    assert main(["validate", str(cfg_path)]) == 0
    resolved = json.loads(capsys.readouterr().out)
    sketchy = resolved["optimizers"][0]
    assert sketchy["rho"] == pytest.approx(1e-3 * resolved["smoothness_upper_bound"])
    assert sketchy["hess_batch_size"] == 17  # floor(sqrt(300))
    assert resolved["n_train"] == 300


def test_validate_missing_dataset(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        {
            "dataset": {"path": "missing.svm"},
            "task": "ridge",
            "optimizers": [{"name": "sgd"}],
            "seeds": [0],
        },
    )
    assert main(["validate", str(cfg)]) == 2
    assert "dataset.path" in capsys.readouterr().err


def test_validate_lists_all_problems(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        {
            "dataset": {"path": "missing.svm"},
            "task": "poisson",
            "optimizers": [{"name": "adam"}],
            "seeds": [],
            "bogus": 1,
        },
    )
    assert main(["validate", str(cfg)]) == 2
    err = capsys.readouterr().err
    for fragment in ("dataset.path", "task", "optimizers[0]", "seeds", "bogus"):
        assert fragment in err


def test_validate_config_collects_optimizer_problems(tmp_path):
    problems = validate_config(
        {
            "dataset": {"path": "x"},
            "task": "ridge",
            "optimizers": [
                {"name": "sketchysgd", "rank": 0, "nonsense": 1},
                {"name": "sgd", "learning_rate": -2},
                {"name": "sgd"},
            ],
            "seeds": [0],
        },
        tmp_path,
    )
    text = "\n".join(problems)
    assert "rank" in text and "nonsense" in text and "learning_rate" in text
    assert "duplicate labels" in text


def test_invalid_json_exits_2(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["run", str(path)]) == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_seed_and_max_passes_overrides(workspace):
    tmp_path, cfg_path, _ = workspace
    out = tmp_path / "override"
    assert main(["run", str(cfg_path), "--seed", "7", "--max-passes", "2",
                 "--output-dir", str(out)]) == 0
    csvs = sorted(f.name for f in out.glob("*.csv"))
    assert csvs == ["sgd_seed7.csv", "sketchysgd_seed7.csv"]
    rows = (out / "sgd_seed7.csv").read_text().splitlines()
    assert float(rows[-1].split(",")[0]) <= 3.0  # budget cut to 2 passes


def test_divergent_job_writes_partial_and_exits_3(workspace, capsys):
    tmp_path, _, config = workspace
    config = dict(config)
    config["optimizers"] = [
        {"name": "sgd", "learning_rate": 1e200},
        {"name": "sketchysgd"},
    ]
    config["output_dir"] = str(tmp_path / "diverge")
    cfg_path = write_config(tmp_path, config, "diverge.json")
    with np.errstate(over="ignore"):
        assert main(["run", str(cfg_path)]) == 3
    out = tmp_path / "diverge"
    partials = [f.name for f in out.glob("*.partial")]
    assert partials and all(name.startswith("sgd") for name in partials)
    # the healthy optimizer still completed
    assert (out / "sketchysgd_seed0.csv").exists()
    assert "divergence detected" in capsys.readouterr().err
    manifest = json.loads((out / "manifest.json").read_text())
    statuses = {job["file"]: job["status"] for job in manifest["jobs"]}
    assert statuses["sgd_seed0.csv.partial"] == "diverged"


def test_diagnose_identity_hessian(tmp_path, capsys):
    # planted flat spectrum with a full-rank sketch: preconditioned spectrum is flat
    ds, _ = planted_least_squares(120, 15, condition=2.0, seed=1,
                                  eigenvalues=np.ones(15))
    save_libsvm(ds, tmp_path / "iso.svm")
    config = {
        "dataset": {"path": "iso.svm"},
        "task": "ridge",
        "l2": 0.0,
        "optimizers": [{"name": "sketchysgd", "rank": 15, "hess_batch_size": 120}],
        "seeds": [0],
        "output_dir": str(tmp_path / "diag"),
        "diagnose": {"top_m": 15, "betas": [0.1]},
    }
    cfg_path = write_config(tmp_path, config)
    assert main(["diagnose", str(cfg_path)]) == 0
    summary = json.loads((tmp_path / "diag" / "spectrum_initial.json").read_text())
    assert summary["lambda_max_precond"] == pytest.approx(summary["lambda_min_precond"], rel=1e-4)
    csv_lines = (tmp_path / "diag" / "spectrum_initial.csv").read_text().splitlines()
    assert csv_lines[0] == "index,eig_raw,eig_precond"
    assert len(csv_lines) == 16


def test_diagnose_caps_exit_4(tmp_path, capsys):
    lines = ["1 3000:1.0", "-1 1:0.5"]
    (tmp_path / "wide.svm").write_text("\n".join(lines) + "\n")
    config = {
        "dataset": {"path": "wide.svm"},
        "task": "ridge",
        "optimizers": [{"name": "sketchysgd"}],
        "seeds": [0],
        "output_dir": str(tmp_path / "caps"),
    }
    cfg_path = write_config(tmp_path, config)
    assert main(["diagnose", str(cfg_path)]) == 4
    assert "cap" in capsys.readouterr().err


def test_diagnose_saved_iterate(tmp_path):
    ds, _ = planted_least_squares(150, 10, condition=100.0, seed=2)
    save_libsvm(ds, tmp_path / "d.svm")
    out = tmp_path / "res"
    config = {
        "dataset": {"path": "d.svm"},
        "task": "ridge",
        "l2": 0.0,
        "optimizers": [{"name": "sketchysgd"}],
        "seeds": [0],
        "max_passes": 3,
        "output_dir": str(out),
        "save_iterates": True,
    }
    cfg_path = write_config(tmp_path, config)
    assert main(["run", str(cfg_path)]) == 0
    iterate = out / "sketchysgd_seed0_iterate.npy"
    assert iterate.exists()
    config["diagnose"] = {"iterates": [str(iterate)]}
    cfg_path = write_config(tmp_path, config, "diag.json")
    assert main(["diagnose", str(cfg_path)]) == 0
    assert (out / "spectrum_sketchysgd_seed0_iterate.json").exists()


def test_logistic_pipeline_with_split_and_features(tmp_path):
    ds = gaussian_dataset(200, 12, "logistic", seed=3)
    save_libsvm(ds, tmp_path / "clf.svm")
    config = {
        "dataset": {"path": "clf.svm", "num_features": 12},
        "task": "logistic",
        "preprocessing": [
            {"normalize_rows": {}},
            {"split": {"fraction": 0.8, "seed": 0}},
            {"standardize": {}},
        ],
        "optimizers": [{"name": "svrg"}, {"name": "sketchysgd", "label": "nys"}],
        "seeds": [0],
        "max_passes": 4,
        "output_dir": str(tmp_path / "clf_out"),
    }
    cfg_path = write_config(tmp_path, config)
    assert main(["run", str(cfg_path)]) == 0
    rows = (tmp_path / "clf_out" / "nys_seed0.csv").read_text().splitlines()
    header = rows[0].split(",")
    assert header == ["pass", "wall_seconds", "train_loss", "test_loss", "train_acc", "test_acc"]
    last = rows[-1].split(",")
    assert all(cell != "" for cell in last)  # accuracy and test columns populated
    acc = float(last[4])
    assert 0.0 <= acc <= 1.0


def test_records_to_csv_empty_cells_for_ridge():
    rows = [MetricsRecord(0.0, 0.0, 0.5, None, None, None)]
    text = records_to_csv(rows)
    assert text.splitlines()[1] == "0.0,0.0,0.5,,,"


def test_thread_pool_matches_sequential(workspace, tmp_path, monkeypatch):
    _, cfg_path, _ = workspace
    assert main(["run", str(cfg_path), "--output-dir", str(tmp_path / "seq")]) == 0
    monkeypatch.setenv("SKETCHYSGD_NUM_THREADS", "4")
    assert main(["run", str(cfg_path), "--output-dir", str(tmp_path / "par")]) == 0
    for name in ("sketchysgd_seed0.csv", "sgd_seed1.csv"):
        rows_s = (tmp_path / "seq" / name).read_text().splitlines()
        rows_p = (tmp_path / "par" / name).read_text().splitlines()
        for rs, rp in zip(rows_s[1:], rows_p[1:]):
            cs, cp = rs.split(","), rp.split(",")
            assert cs[:1] == cp[:1] and cs[2:] == cp[2:]


def test_theoretical_optimizer_and_inf_update_freq(workspace, tmp_path):
    wp, _, config = workspace
    config = dict(config)
    config["optimizers"] = [
        {"name": "sketchysgd-theoretical", "lr_scale": 0.25, "stage_length": 3},
        {"name": "sketchysgd", "update_freq": "inf", "label": "frozen"},
    ]
    config["output_dir"] = str(tmp_path / "theo")
    cfg_path = write_config(wp, config, "theo.json")
    assert main(["run", str(cfg_path)]) == 0
    out = tmp_path / "theo"
    rows = (out / "sketchysgd-theoretical_seed0.csv").read_text().splitlines()
    assert len(rows) > 2  # baseline plus stage-end records
    losses = [float(r.split(",")[2]) for r in rows[1:]]
    assert losses[-1] < losses[0]
    manifest = json.loads((out / "manifest.json").read_text())
    frozen = next(j for j in manifest["jobs"] if j["file"].startswith("frozen"))
    assert frozen["resolved"]["update_freq"] == "inf"


def test_run_head_to_head_benchmark_from_config(tmp_path):
    # the synthetic quadratic benchmark, driven entirely through the CLI:
    # the preconditioned run ends strictly below SGD on every seed
    ds, _ = planted_least_squares(2000, 100, condition=1e4, seed=0)
    save_libsvm(ds, tmp_path / "bench.svm")
    config = {
        "dataset": {"path": "bench.svm"},
        "task": "ridge",
        "l2": 0.0,
        "optimizers": [{"name": "sketchysgd"}, {"name": "sgd"}],
        "seeds": [0, 1, 2],
        "max_passes": 15,
        "output_dir": str(tmp_path / "bench_out"),
    }
    cfg_path = write_config(tmp_path, config, "bench.json")
    assert main(["run", str(cfg_path)]) == 0

    def final_loss(name, seed):
        rows = (tmp_path / "bench_out" / f"{name}_seed{seed}.csv").read_text().splitlines()
        return float(rows[-1].split(",")[2])

    for seed in (0, 1, 2):
        assert final_loss("sketchysgd", seed) < final_loss("sgd", seed)
