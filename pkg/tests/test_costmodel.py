import json
from pathlib import Path

import pytest

from stlite.costmodel import (
    LatencyEntry,
    analytic_cost,
    decode_attention_flops,
    format_speedup_table,
    kv_bytes,
    load_latency_table,
    round2,
    speedup_report,
)

TABLE = Path(__file__).parent / "data" / "published_latency.json"


@pytest.fixture
def rows():
    return speedup_report(load_latency_table(TABLE))


class TestAnalyticCost:
    def test_exact_counts(self):
        cost = analytic_cost(10_000, 2_000, 100, 128, 32)
        assert cost["decode_flops_full"] == 16_465_100_800
        assert cost["decode_flops_comp"] == 3_357_900_800
        assert cost["kv_bytes_full"] == 2 * 32 * 128 * 10_000 * 4
        assert cost["kv_bytes_comp"] == 2 * 32 * 128 * 2_000 * 4

    @pytest.mark.parametrize("beta", [0.05, 0.1, 0.2, 0.5])
    def test_ratio_tends_to_inverse_budget(self, beta):
        seq = 100_000
        cost = analytic_cost(seq, int(beta * seq), 10, 64, 8)
        assert cost["flops_ratio"] == pytest.approx(1 / beta, rel=0.01)

    def test_long_decodes_dilute_the_ratio(self):
        short = analytic_cost(1_000, 200, 1, 64, 8)["flops_ratio"]
        long = analytic_cost(1_000, 200, 4_000, 64, 8)["flops_ratio"]
        assert short == pytest.approx(5.0, rel=0.01)
        assert 1 < long < short

    def test_no_compression(self):
        assert analytic_cost(500, 500, 10, 64, 8)["flops_ratio"] == 1.0

    def test_single_step(self):
        assert decode_attention_flops(7, 1, 2, 3) == 4 * 3 * 2 * 7
        assert kv_bytes(1, 1, 1) == 8

    def test_invalid(self):
        with pytest.raises(ValueError, match="seq_comp=20 exceeds seq_full=10"):
            analytic_cost(10, 20, 1, 1, 1)
        with pytest.raises(ValueError, match="decode_steps must be positive"):
            analytic_cost(10, 5, 0, 1, 1)


class TestSpeedups:
    def test_published_rows(self, rows):
        assert [r.screenshots for r in rows] == [3, 5, 10]
        computed = [
            (round2(r.prefill_speedup), round2(r.decode_speedup), round2(r.e2e_speedup))
            for r in rows
        ]
        # 4063.8 / 2402.9 rounds to 1.69; the table prints 1.68
        assert computed == [(0.98, 1.25, 1.15), (0.99, 1.69, 1.33), (0.99, 2.45, 1.40)]
        assert [r.mismatches for r in rows] == [[], ["decode"], []]

    def test_mismatch_is_logged(self, caplog):
        speedup_report(load_latency_table(TABLE))
        assert "published decode speedup 1.68, components give 1.69" in caplog.text

    def test_e2e_between_components(self, rows):
        for row in rows:
            low = min(row.prefill_speedup, row.decode_speedup)
            high = max(row.prefill_speedup, row.decode_speedup)
            assert low <= row.e2e_speedup <= high

    def test_equal_columns(self):
        entry = LatencyEntry(1, 10.0, 10.0, 20.0, 20.0)
        (row,) = speedup_report([entry])
        assert row.computed == {"prefill": 1.0, "decode": 1.0, "e2e": 1.0}
        assert row.to_json()["e2e_speedup"] == 1.0

    def test_table(self, rows):
        lines = format_speedup_table(rows).splitlines()
        assert lines[1].split() == ["3", "0.98", "1.25", "1.15"]
        assert lines[2].endswith("published decode 1.68")

    def test_round_half_up(self):
        assert round2(0.125) == 0.13
        assert round2(2.44998) == 2.45


class TestLatencyTable:
    def test_plain_list(self, tmp_path):
        path = tmp_path / "t.json"
        path.write_text(json.dumps(json.loads(TABLE.read_text())["entries"]))
        assert len(load_latency_table(path)) == 3

    def test_missing_field(self, tmp_path):
        record = json.loads(TABLE.read_text())
        del record["entries"][1]["decode_comp"]
        path = tmp_path / "t.json"
        path.write_text(json.dumps(record))
        with pytest.raises(ValueError, match="entry 1: missing field 'decode_comp'"):
            load_latency_table(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / "t.json"
        path.write_text("screenshots,prefill\n")
        with pytest.raises(ValueError, match="not valid JSON"):
            load_latency_table(path)

    def test_nonpositive_latency(self):
        with pytest.raises(ValueError, match="decode_comp must be positive"):
            LatencyEntry(3, 1.0, 1.0, 1.0, 0.0)

    def test_unknown_published_column(self):
        with pytest.raises(ValueError, match="unknown published"):
            LatencyEntry(3, 1.0, 1.0, 1.0, 1.0, {"total": 1.0})
