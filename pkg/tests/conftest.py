"""Shared fixtures.

The `pipeline` fixture runs the full default-config training pipeline once
per session (dataset -> teacher -> distilled student -> teacher-forcing
variant -> policy-optimized student) through the CLI, exactly as a user
would, and exposes the run directory plus parsed evaluation reports.
"""
import json
from pathlib import Path

import pytest

from flowsteer.cli import main


def _eval_into(run, checkpoint, tag):
    code = main(["eval", "--checkpoint", str(run / checkpoint), "--run-dir", str(run)])
    assert code == 0
    report = json.loads((run / "eval_report.json").read_text())
    (run / f"eval_{tag}.json").write_text(json.dumps(report))
    return report


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    run = tmp_path_factory.mktemp("pipeline")
    rd = ["--run-dir", str(run)]
    assert main(["gen-data"] + rd) == 0
    assert main(["train-teacher"] + rd) == 0
    assert main(["distill"] + rd) == 0
    assert main(["distill", "--set", "distill.mode=teacher-forcing"] + rd) == 0
    assert main(["grpo"] + rd) == 0
    reports = {
        "teacher": _eval_into(run, "teacher.ckpt", "teacher"),
        "distill": _eval_into(run, "student_distill.ckpt", "distill"),
        "tf": _eval_into(run, "student_tf.ckpt", "tf"),
        "grpo": _eval_into(run, "student_grpo.ckpt", "grpo"),
    }
    return {"run": run, "reports": reports}
