import json

import numpy as np
import pytest

import oracles
from conftest import TINY_STUDENT, TINY_TEACHER, tiny_config
from stagedistill import cascade as C
from stagedistill import models as M
from stagedistill.analysis import CorrelationReport, correlation_report, overhead_report, pearson_matrix
from stagedistill.errors import ReportingError

TABLE = [[1.0, 2.0, 0.5], [2.0, 1.0, 0.0], [3.0, 3.5, -1.0], [0.0, 1.0, 2.0], [1.5, 0.0, 1.0]]


def test_pearson_matches_scalar_oracle():
    got = pearson_matrix(TABLE)
    cols = list(zip(*TABLE))
    for i in range(3):
        for j in range(3):
            assert got[i, j] == pytest.approx(oracles.pearson(cols[i], cols[j]), abs=1e-12)


def test_pearson_symmetric_unit_diagonal():
    rng = np.random.default_rng(0)
    m = pearson_matrix(rng.normal(size=(40, 6)))
    assert np.allclose(m, m.T) and np.allclose(np.diag(m), 1.0)


def test_zero_variance_column():
    table = np.array(TABLE)
    table[:, 1] = 4.0
    m = pearson_matrix(table)
    assert m[1, 1] == 1.0 and m[1, 0] == m[0, 1] == m[1, 2] == 0.0


def test_identical_models_have_zero_diff(tiny_teacher, tiny_data):
    rep = correlation_report(tiny_teacher, tiny_teacher, tiny_data[1])
    assert rep.diff_frobenius == 0.0 and not rep.diff.any()


def test_report_diff_and_exports(tmp_path):
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(30, 4)), rng.normal(size=(30, 4))
    rep = CorrelationReport.from_scores(a, b)
    assert np.array_equal(rep.diff, rep.teacher_corr - rep.student_corr)
    assert rep.diff_frobenius == pytest.approx(np.sqrt((rep.diff ** 2).sum()))
    rows = rep.write_csv(tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "matrix,row,col,value" and len(rows) == 1 + 3 * 16
    assert rep.plot(tmp_path / "c.png").stat().st_size > 0


def test_overhead_missing_logs(tmp_path):
    with pytest.raises(ReportingError):
        overhead_report(tmp_path)
    (tmp_path / "rung-0").mkdir()
    (tmp_path / "rung-0" / "rung.json").write_text(json.dumps({"extra_params": 0}))
    with pytest.raises(ReportingError):
        overhead_report(tmp_path)


def test_overhead_kd_zero_and_rskd_adapters(tiny_teacher, tiny_data, tmp_path):
    cfg = tiny_config()
    ladder = C.make_ladder(TINY_TEACHER, TINY_STUDENT, cfg)
    C.cascade(tiny_teacher, ladder, "response", tiny_data[0], config=cfg, run_dir=tmp_path / "kd")
    C.cascade(tiny_teacher, ladder, "response", tiny_data[0], config=cfg, run_dir=tmp_path / "kd2")
    kd, kd2 = overhead_report(tmp_path / "kd"), overhead_report(tmp_path / "kd2")
    assert kd["extra_params"] == kd2["extra_params"] == 0
    assert kd["time_per_batch"] > 0

    C.rskd_train(tiny_teacher, TINY_STUDENT, tiny_data[0], cfg, run_dir=tmp_path / "rskd")
    per_branch = 0
    for recipe in cfg.rskd_branches.values():
        d = C.Distiller(tiny_teacher, TINY_STUDENT, recipe, cfg)
        per_branch += sum(m.weight.numel() + m.bias.numel() for m in d.adapters.values())
    assert overhead_report(tmp_path / "rskd")["extra_params"] == per_branch
