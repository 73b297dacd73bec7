import json

import numpy as np
import pytest

from hetloco import storage
from hetloco.hetero import RoundRecord, RunReport
from hetloco.model import init_model


def _report():
    rounds = [
        RoundRecord(round=t, replica_losses=[2.0, 4.0], eval_loss=5.0 - t, dp_bytes=10 * t, pp_bytes=100, pp_overhead_bytes=8, wallclock_s=1.5)
        for t in (1, 2)
    ]
    return RunReport(config={}, alpha=1.0, corpus="synthetic", initial_eval_loss=5.5, final_eval_loss=3.0, rounds=rounds)


def test_metrics_csv_carries_provenance(tmp_path):
    path = storage.write_metrics(tmp_path, _report(), {"seed": 3})
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header.startswith("# ")
    meta = json.loads(header[2:])
    assert meta["config"] == {"seed": 3} and "version" in meta
    rows = storage.read_csv(path)
    assert [r["round"] for r in rows] == ["1", "2"]
    assert float(rows[1]["eval_loss"]) == 3.0
    assert float(rows[0]["mean_replica_loss"]) == 3.0


def test_csv_is_byte_identical_on_rewrite(tmp_path):
    a = storage.write_metrics(tmp_path / "a", _report(), {"seed": 3}).read_bytes()
    b = storage.write_metrics(tmp_path / "b", _report(), {"seed": 3}).read_bytes()
    assert a == b


def test_atomic_write_leaves_no_temp_file(tmp_path):
    storage.atomic_write(tmp_path / "x.bin", b"abc")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["x.bin"]


def test_checkpoint_round_trip(tmp_path, tiny):
    params = init_model(tiny, 0)
    storage.save_checkpoint(tmp_path, params, {"seed": 0})
    restored = storage.load_checkpoint(tmp_path)
    assert list(restored) == list(params)
    assert all(np.array_equal(restored[k], params[k]) for k in params)


def test_run_records_are_listed_newest_first(runs_dir):
    for run_id, title in (("aaa", "first"), ("bbb", "second")):
        storage.create_run_record(storage.get_run_dir(run_id), run_id, "train", title, {}, {"final_eval_loss": 1.0})
    listed = storage.list_runs()
    assert {r["id"] for r in listed} == {"aaa", "bbb"}
    assert listed[0]["created_at"] >= listed[1]["created_at"]
    assert storage.get_run("aaa")["title"] == "first"
    assert storage.get_run("missing") is None
    assert (runs_dir / "aaa" / storage.CONFIG_FILE).is_file()


@pytest.mark.parametrize("value, cell", [(True, "true"), (None, ""), (0.1, "0.1"), (3, "3")])
def test_csv_cells(value, cell):
    assert storage._cell(value) == cell
