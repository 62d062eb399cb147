import contextlib
import io
import json
import os
import pathlib
import shutil
import tempfile

from bitleak import cli, config, experiment


TINY = """# desk-sized experiment
seed = 3
victim dims = 6, 8, 3
rows total = 256
page size = 64
chunk rows = 4
chunk cols = 2
rounds = 0, 5
epochs = 4
finetune epochs = 1
victim epochs = 5
train samples = 200
test samples = 100
subset fraction = 0.2
pgd steps = 2
"""


def tiny_config():
    return config.parse_config(TINY)


def test_run_files_and_metrics():
    out = tempfile.mkdtemp(prefix="bitleak_test_")
    report = experiment.run_experiment(tiny_config(), out_dir=out)
    outp = pathlib.Path(out)
    for name in experiment.FILES.values():
        assert (outp / name).exists(), name
    for strategy in ["msb", "allbits"]:
        assert (outp / "curve_{}.csv".format(strategy)).exists()
        assert (outp / "ledger_{}.txt".format(strategy)).exists()
        for rounds in [0, 5]:
            assert (outp / "profile_{}_{}.csv".format(strategy,
                                                      rounds)).exists()
    lines = (outp / "metrics.csv").read_text().strip().split("\n")
    assert lines[0] == experiment.METRICS_HEADER
    # baseline, 2 strategies x 2 budgets, whitebox
    assert len(lines) == 6
    assert lines[1].startswith("baseline,0,-,")
    assert lines[-1].startswith("whitebox,-,-,")
    assert report.arm("whitebox")["fidelity"] == 100
    base = report.arm("baseline")
    for strategy in ["msb", "allbits"]:
        row = report.arm("leaked", rounds=0, strategy=strategy)
        for key in ["accuracy", "fidelity", "acc_under_attack"]:
            assert row[key] == base[key]
    info = json.loads((outp / "report.json").read_text())
    assert info["provenance"]["config hash"] == tiny_config().hash()
    assert info["curves"]["msb"]["rounds"] == 5
    assert "equal time" in info["curves"]
    assert len(info["metrics"]) == 6
    shutil.rmtree(out, ignore_errors=True)


def test_deterministic():
    out1 = tempfile.mkdtemp(prefix="bitleak_test_")
    out2 = tempfile.mkdtemp(prefix="bitleak_test_")
    experiment.run_experiment(tiny_config(), out_dir=out1)
    experiment.run_experiment(tiny_config(), out_dir=out2)
    names = ["metrics.csv", "report.json", "summary.txt", "template.txt",
             "curve_msb.csv", "curve_allbits.csv", "ledger_msb.txt",
             "ledger_allbits.txt", "profile_msb_5.csv"]
    for name in names:
        text1 = (pathlib.Path(out1) / name).read_text()
        text2 = (pathlib.Path(out2) / name).read_text()
        assert text1 == text2, name
    shutil.rmtree(out1, ignore_errors=True)
    shutil.rmtree(out2, ignore_errors=True)


def test_stages_one_at_a_time():
    out = tempfile.mkdtemp(prefix="bitleak_test_")
    cfg = config.parse_config(TINY + "strategy = msb\n")
    exp = experiment.Experiment(cfg, out_dir=out)
    exp.run_template()
    exp.run_victim()
    # a fresh runner only has the files of the previous stages
    exp = experiment.Experiment(cfg, out_dir=out)
    exp.run_attack()
    exp = experiment.Experiment(cfg, out_dir=out)
    exp.run_profile()
    exp.run_train()
    report = experiment.Experiment(cfg, out_dir=out).run_eval()
    assert [row["arm"] for row in report.metrics] == [
        "baseline", "leaked", "leaked", "whitebox"]
    assert "equal time" not in report.curve_summary()
    shutil.rmtree(out, ignore_errors=True)


def test_stage_error():
    out = tempfile.mkdtemp(prefix="bitleak_test_")
    exp = experiment.Experiment(tiny_config(), out_dir=out)
    try:
        exp.run_attack()
    except experiment.StageError as e:
        assert e.stage == "attack"
        assert e.config_hash == tiny_config().hash()
        assert e.cause is not None
    else:
        assert False, "attack without template must not work"
    shutil.rmtree(out, ignore_errors=True)


def test_cli_run():
    out = tempfile.mkdtemp(prefix="bitleak_test_")
    tf = tempfile.mktemp(suffix=".cfg", prefix="bitleak_test_")
    pathlib.Path(tf).write_text(TINY)
    stdout = io.StringIO()
    with contextlib.redirect_stdout(stdout):
        ret = cli.main(["run", "--config", tf, "--out", out,
                        "--strategy", "msb", "--rounds", "4"])
    assert ret == 0
    assert "baseline" in stdout.getvalue()
    saved = config.validate_config(os.path.join(out, "config.txt"))
    assert saved["rounds"] == [4]
    assert saved["strategy"] == ["msb"]
    assert not (pathlib.Path(out) / "curve_allbits.csv").exists()
    try:
        os.remove(tf)
    except OSError:
        pass
    shutil.rmtree(out, ignore_errors=True)


def test_cli_bad_config():
    tf = tempfile.mktemp(suffix=".cfg", prefix="bitleak_test_")
    pathlib.Path(tf).write_text(TINY + "lambda = -1\n")
    stderr = io.StringIO()
    with contextlib.redirect_stderr(stderr):
        assert cli.main(["template", "--config", tf]) == 1
    assert "stage 'config' failed" in stderr.getvalue()
    assert "lambda" in stderr.getvalue()
    try:
        os.remove(tf)
    except OSError:
        pass
    # missing file
    assert cli.main(["template", "--config", tf]) == 1


def test_cli_bad_output_directory():
    tf = tempfile.mktemp(suffix=".cfg", prefix="bitleak_test_")
    pathlib.Path(tf).write_text(TINY)
    # a directory below a regular file cannot be created
    stderr = io.StringIO()
    with contextlib.redirect_stderr(stderr):
        ret = cli.main(["template", "--config", tf,
                        "--out", os.path.join(tf, "out")])
    assert ret == 1
    assert "output directory" in stderr.getvalue()
    try:
        os.remove(tf)
    except OSError:
        pass


def test_cli_eval_without_results():
    out = tempfile.mkdtemp(prefix="bitleak_test_")
    tf = tempfile.mktemp(suffix=".cfg", prefix="bitleak_test_")
    pathlib.Path(tf).write_text(TINY)
    stderr = io.StringIO()
    with contextlib.redirect_stderr(stderr):
        assert cli.main(["eval", "--config", tf, "--out", out]) == 1
    assert "Stage 'eval' failed" in stderr.getvalue()
    try:
        os.remove(tf)
    except OSError:
        pass
    shutil.rmtree(out, ignore_errors=True)


if __name__ == "__main__":
    # Run all tests
    _loc = locals()
    for _key in list(_loc.keys()):
        if _key.startswith("test_") and hasattr(_loc[_key], "__call__"):
            _loc[_key]()
