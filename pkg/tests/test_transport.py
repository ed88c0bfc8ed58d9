import json

import pytest

from matchcard.transport import (
    CONTACTLESS,
    LinkProfile,
    T_CARD_MS,
    default_profiles,
    dump_profiles,
    load_profiles,
    sweep,
    t_io,
    t_total,
    wire_bytes,
)


@pytest.fixture
def contact96():
    return next(p for p in default_profiles() if p.bitrate == 9600)


def bare(bitrate=9600, bits_per_byte=10.0):
    return LinkProfile("bare", "contact", bitrate, bits_per_byte, 0, payload_header_bytes=0)


class TestWireBytes:
    def test_template_plus_status_word(self):
        assert wire_bytes(64, 0, bare()) == 10

    def test_length_delta(self, contact96):
        assert wire_bytes(128, 0, contact96) - wire_bytes(64, 0, contact96) == 8

    def test_helper_delta(self, contact96):
        assert wire_bytes(64, 6, contact96) - wire_bytes(64, 0, contact96) == 6

    def test_calibrated_contact_totals(self, contact96):
        assert wire_bytes(64, 0, contact96) == 42
        assert wire_bytes(128, 0, contact96) == 50

    def test_invalid(self, contact96):
        with pytest.raises(ValueError):
            wire_bytes(48, 0, contact96)
        with pytest.raises(ValueError):
            wire_bytes(64, -1, contact96)


class TestLatency:
    def test_64b_at_9600(self, contact96):
        # 42 bytes x 10 bits / 9600 bps = 43.75 ms, plus 0.128 ms on card
        assert t_total(64, 0, contact96) == pytest.approx(43.878, abs=1e-9)

    def test_128b_at_9600(self, contact96):
        assert t_total(128, 0, contact96) == pytest.approx(500 / 9.6 + 0.128, abs=1e-9)

    def test_128b_at_38400(self):
        p = next(p for p in default_profiles() if p.bitrate == 38400)
        assert t_total(128, 0, p) == pytest.approx(13.149, abs=1e-3)

    def test_card_budget_constant(self):
        for p in default_profiles():
            for L in (16, 32, 64, 128):
                assert t_total(L, 0, p) - t_io(L, 0, p) == pytest.approx(T_CARD_MS, abs=1e-12)

    def test_linearity(self):
        p = bare()
        assert t_io(128, 0, p) / t_io(64, 0, p) == pytest.approx(18 / 10)
        fast = bare(bitrate=19200)
        assert t_io(64, 0, fast) == pytest.approx(t_io(64, 0, p) / 2)


class TestSweep:
    def test_all_points_bounded(self):
        report = sweep(default_profiles())
        assert len(report.rows) == 7 * 3
        assert all(r.t_total_ms < 100 for r in report.rows)
        assert all(r.t_total_ms < 20 for r in report.rows if r.standard == CONTACTLESS)

    def test_helper_adds_few_ms_at_9600(self):
        rows = {(r.profile, r.length_bits, r.helper_bytes): r for r in sweep(default_profiles()).rows}
        delta = rows[("7816-9.6k", 64, 6)].t_total_ms - rows[("7816-9.6k", 64, 0)].t_total_ms
        assert delta == pytest.approx(6.25, abs=1e-9)

    def test_empty(self):
        with pytest.raises(ValueError):
            sweep([])

    def test_csv_and_json(self):
        report = sweep(default_profiles()[:1])
        lines = report.to_csv().splitlines()
        assert lines[0] == "profile,standard,bitrate,length_bits,helper_bytes,n_bytes,t_io_ms,t_card_ms,t_total_ms"
        assert lines[1] == "7816-9.6k,contact,9600,64,0,42,43.7500,0.1280,43.8780"
        doc = json.loads(report.to_json())
        assert doc["rows"][0]["t_total_ms"] == 43.878


class TestProfiles:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(dump_profiles(default_profiles()))
        assert load_profiles(path) == default_profiles()

    def test_wrapped_document(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"profiles": [{"name": "x", "standard": "contactless", "bitrate": 106000}]}))
        (p,) = load_profiles(path)
        assert p.bits_per_byte == 8.0 and p.per_transaction_overhead_bytes == 0

    @pytest.mark.parametrize("text", ["[]", "{}", "not json", '[{"name": "x"}]',
                                      '[{"name": "x", "standard": "serial", "bitrate": 1}]',
                                      '[{"name": "x", "standard": "contact", "bitrate": 9600, "bits_per_byte": 7}]'])
    def test_malformed(self, tmp_path, text):
        path = tmp_path / "p.json"
        path.write_text(text)
        with pytest.raises(ValueError):
            load_profiles(path)
