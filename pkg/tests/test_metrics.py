"""Tests for metrics rows and the append-only CSV streams."""

import pytest
from pydantic import ValidationError

from pimbrl_lab.errors import MetricsOrderError
from pimbrl_lab.metrics import (
    CsvStream,
    MetricsRow,
    ModelLossRow,
    read_metrics,
    read_rows,
    record_metrics,
    truncate_after,
    write_table,
)


@pytest.fixture
def stream(tmp_path):
    return CsvStream(tmp_path / "metrics.csv")


class TestMetricsStream:
    """Ordering, formatting and reopening."""

    def test_header_written_once(self, stream):
        record_metrics(stream, MetricsRow(real_steps=10, episode=0, eval_mean=1.5))
        record_metrics(stream, MetricsRow(real_steps=20, episode=1, eval_mean=2.0, gate_open=True))
        lines = stream.path.read_text().splitlines()
        assert lines[0].startswith("real_steps,episode,eval_mean")
        assert len(lines) == 3
        assert lines[1] == "10,0,1.5,,,,,0,0,"

    def test_rejects_non_increasing_steps(self, stream):
        record_metrics(stream, MetricsRow(real_steps=10, episode=0))
        with pytest.raises(MetricsOrderError):
            record_metrics(stream, MetricsRow(real_steps=10, episode=0))
        assert len(read_metrics(stream.path)) == 1

    def test_reopen_continues_ordering(self, stream):
        record_metrics(stream, MetricsRow(real_steps=10, episode=0))
        reopened = CsvStream(stream.path)
        assert reopened.last_real_steps == 10
        with pytest.raises(MetricsOrderError):
            reopened.append(MetricsRow(real_steps=5, episode=0))

    def test_round_trip(self, stream):
        row = MetricsRow(
            real_steps=500, episode=3, eval_mean=-0.1, eval_min=-0.3, eval_max=0.2,
            model_L_D=1e-3, model_L_E=None, gate_open=True, fine_tune=False,
        )
        record_metrics(stream, row)
        assert read_metrics(stream.path) == [row]

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            MetricsRow(real_steps=1, episode=0, eval_mean=float("nan"))

    def test_ensure_header_on_empty_run(self, stream):
        stream.ensure_header()
        assert stream.path.read_text().count("\n") == 1
        assert read_metrics(stream.path) == []

    def test_model_loss_stream_allows_any_order(self, tmp_path):
        losses = CsvStream(tmp_path / "model_losses.csv", ModelLossRow, strictly_increasing=False)
        losses.append(ModelLossRow(real_steps=50, data_updates=1, physics_updates=0, model_L_D=0.5))
        losses.append(ModelLossRow(real_steps=50, data_updates=2, physics_updates=0, model_L_D=0.4))
        assert [r.data_updates for r in read_rows(losses.path, ModelLossRow)] == [1, 2]


class TestTables:
    """Plain tables and truncation on resume."""

    def test_write_table(self, tmp_path):
        path = write_table(tmp_path / "t.csv", ["a", "b"], [[1, 0.5], [2, None]])
        assert path.read_text() == "a,b\n1,0.5\n2,\n"

    def test_truncate_after(self, stream):
        for steps in (10, 20, 30):
            record_metrics(stream, MetricsRow(real_steps=steps, episode=0))
        assert truncate_after(stream.path, 20) == 2
        assert [r.real_steps for r in read_metrics(stream.path)] == [10, 20]

    def test_truncate_missing_file(self, tmp_path):
        assert truncate_after(tmp_path / "absent.csv", 5) == 0

    def test_unexpected_columns(self, tmp_path):
        path = write_table(tmp_path / "other.csv", ["x"], [[1]])
        with pytest.raises(ValueError):
            read_metrics(path)
