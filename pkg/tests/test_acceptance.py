"""Exit criteria. Each test records one PASS/FAIL line, printed in the summary."""

import random

import numpy as np
import pytest

import conftest
import oracles
from matchcard.apdu import (
    ApduCommand,
    BinaryTemplate,
    StatusWord,
    TemplatePayload,
    enroll_command,
    rekey_command,
    verify_command,
)
from matchcard.card import Card, CardConfig, OpCounter, hamming_ct, record_footprint
from matchcard.cli import main
from matchcard.datasets import WORKING_SET, SyntheticDatasetSpec, generate_synthetic
from matchcard.evaluation import (
    ScoreSet,
    binomial_interval,
    compute_roc,
    eer_value,
    evaluate,
    find_eer,
    tpr_at_far,
)
from matchcard.pcaitq import fit_pca_itq, train_itq, train_pca
from matchcard.transport import CONTACTLESS, default_profiles, sweep, t_total

SW_SET = {int(sw) for sw in StatusWord}


def record(n, ok, detail):
    conftest.ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {detail}")
    assert ok, detail


def profile(bitrate):
    return next(p for p in default_profiles() if p.bitrate == bitrate)


def naive_hamming(a, b):
    return sum(((x >> k) & 1) != ((y >> k) & 1) for x, y in zip(a, b) for k in range(8))


def flip(data, n, rng):
    out = bytearray(data)
    for b in rng.sample(range(len(data) * 8), n):
        out[b // 8] ^= 0x80 >> (b % 8)
    return bytes(out)


def payload(template, L, rotation_id=1, **kw):
    return TemplatePayload(rotation_id, BinaryTemplate(template, L), **kw)


def test_01_latency_reproduction():
    c96, c384 = profile(9600), profile(38400)
    t64, t128 = t_total(64, 0, c96), t_total(128, 0, c96)
    fast = max(t_total(64, 0, c384), t_total(128, 0, c384))
    rows = sweep(default_profiles()).rows
    worst = max(r.t_total_ms for r in rows)
    worst_cl = max(r.t_total_ms for r in rows if r.standard == CONTACTLESS)
    ok = (abs(t64 - 43.9) <= 0.3 and abs(t128 - 52.3) <= 0.3 and fast < 14
          and worst < 100 and worst_cl < 20)
    record(1, ok, f"latency: 64b@9.6k={t64:.3f} ms, 128b@9.6k={t128:.3f} ms, "
                  f"max@38.4k={fast:.3f} ms, max={worst:.3f} ms, max contactless={worst_cl:.3f} ms")


def test_02_latency_slope_and_helper():
    c96 = profile(9600)
    slope = t_total(128, 0, c96) - t_total(64, 0, c96)
    helper = t_total(64, 6, c96) - t_total(64, 0, c96)
    ok = abs(slope - 8.33) < 0.005 and abs(slope - 8.4) <= 0.1 and abs(helper - 6.25) <= 0.01
    record(2, ok, f"slope 128b-64b @9.6k = {slope:.4f} ms (8.4 +/- 0.1); helper +6B = {helper:.4f} ms")


def test_03_memory_map():
    got = {L: record_footprint(L) for L in (16, 32, 64, 128)}
    tagged = {L: (record_footprint(L, 8), record_footprint(L, 16)) for L in got}
    expected = {16: 5, 32: 7, 64: 11, 128: 19}
    ok = got == expected and all(tagged[L] == (expected[L] + 8, expected[L] + 16) for L in got)
    record(3, ok, f"footprints {got}, with tag {tagged}")


def _protocol_deck():
    ref = bytes(range(8))
    deck = []

    card = Card(CardConfig({64: 23}, eeprom_quota_bytes=11))
    deck.append((card, enroll_command(payload(ref, 64)).to_bytes(), StatusWord.OK))
    deck.append((card, verify_command(payload(b"\xFF" * 8, 64)).to_bytes(), StatusWord.CONDITIONS_NOT_SATISFIED))
    deck.append((card, bytes([0x80, 0x20, 0, 0, 0x0C]) + bytes(11), StatusWord.WRONG_LENGTH))
    deck.append((card, b"\x80\x99\x00\x00", StatusWord.INS_NOT_SUPPORTED))
    deck.append((card, ApduCommand(0x80, 0x20, 0, 0, bytes.fromhex("01210001") + bytes(8)).to_bytes(), StatusWord.WRONG_DATA))
    deck.append((card, verify_command(payload(bytes(4), 32)).to_bytes(), StatusWord.RECORD_NOT_FOUND))
    deck.append((card, enroll_command(payload(ref, 64, salt_id=0, template_id=2)).to_bytes(), StatusWord.NOT_ENOUGH_MEMORY))
    locked = Card(CardConfig({64: 23}, require_issuer_auth_for_enroll=True))
    deck.append((locked, enroll_command(payload(ref, 64)).to_bytes(), StatusWord.SECURITY_STATUS_NOT_SATISFIED))
    return deck


def _fuzz_frames(n, rng):
    valid = [
        enroll_command(payload(bytes(8), 64)).to_bytes(),
        verify_command(payload(bytes(16), 128)).to_bytes(),
        verify_command(payload(bytes(8), 64, salt_id=1, template_id=2)).to_bytes(),
        rekey_command(3).to_bytes(),
    ]
    for k in range(n):
        mode = k % 4
        if mode == 0:
            yield rng.randbytes(rng.randrange(0, 40))
        elif mode == 1:
            yield bytes([0x80, rng.choice([0x10, 0x20, 0x30])]) + rng.randbytes(rng.randrange(0, 30))
        else:
            frame = bytearray(rng.choice(valid))
            for _ in range(rng.randrange(1, 4)):
                op = rng.random()
                if op < 0.6 and frame:
                    frame[rng.randrange(len(frame))] = rng.randrange(256)
                elif op < 0.8 and frame:
                    del frame[rng.randrange(len(frame))]
                else:
                    frame.insert(rng.randrange(len(frame) + 1), rng.randrange(256))
            yield bytes(frame)


def test_04_protocol_conformance():
    seen, mismatches = set(), []
    for card, raw, expected in _protocol_deck():
        resp = card.process(raw)
        seen.add(resp.sw)
        if resp.sw != expected or resp.data:
            mismatches.append((raw.hex(), hex(resp.sw), hex(expected)))
    rng = random.Random(2024)
    card = Card(CardConfig({16: 4, 32: 10, 64: 23, 128: 51}, eeprom_quota_bytes=40, rate_limit=5))
    card.process(enroll_command(payload(bytes(8), 64)).to_bytes())
    bad, fuzz_sws = 0, set()
    for raw in _fuzz_frames(100_000, rng):
        resp = card.process(raw)
        fuzz_sws.add(resp.sw)
        if resp.data or resp.sw not in SW_SET:
            bad += 1
    ok = not mismatches and seen == SW_SET and bad == 0
    record(4, ok, f"deck hit {len(seen)}/8 SWs exactly (mismatches={mismatches}); "
                  f"fuzz 100000 frames: {bad} violations, SWs seen {sorted(hex(s) for s in fuzz_sws)}")


def test_05_constant_time():
    details, ok = [], True
    for L in (64, 128):
        rng = random.Random(L)
        n = L // 8
        card = Card(CardConfig({L: L // 3}))
        card.process(enroll_command(payload(rng.randbytes(n), L)).to_bytes())
        schedules, counts, decisions = set(), set(), set()
        for _ in range(1000):
            card.op_counter = OpCounter()
            sw = card.process(verify_command(payload(rng.randbytes(n), L)).to_bytes()).sw
            decisions.add(sw)
            schedules.add(tuple(card.op_counter.events))
            counts.add(tuple(sorted(card.op_counter.counts().items())))
        ok &= len(schedules) == 1 and len(counts) == 1
        details.append(f"L={L}: {len(schedules)} schedule(s), counts {dict(next(iter(counts)))}")
    record(5, ok, "constant-time op counts over 1000 probes; " + "; ".join(details))


def test_06_matching_oracle_and_boundary():
    mism = 0
    for L in (16, 32, 64, 128):
        rng = random.Random(1000 + L)
        for _ in range(10_000):
            a, b = rng.randbytes(L // 8), rng.randbytes(L // 8)
            mism += hamming_ct(a, b) != naive_hamming(a, b)
    boundary_fail = 0
    rng = random.Random(16)
    ref16 = rng.randbytes(2)
    for tau in range(17):
        card = Card(CardConfig({16: tau}))
        card.process(enroll_command(payload(ref16, 16)).to_bytes())
        for d in range(17):
            sw = card.process(verify_command(payload(flip(ref16, d, rng), 16)).to_bytes()).sw
            boundary_fail += sw != (StatusWord.OK if d <= tau else StatusWord.CONDITIONS_NOT_SATISFIED)
    rng = random.Random(128)
    ref = rng.randbytes(16)
    for _ in range(100):
        tau = rng.randrange(0, 128)
        card = Card(CardConfig({128: tau}))
        card.process(enroll_command(payload(ref, 128)).to_bytes())
        at = card.process(verify_command(payload(flip(ref, tau, rng), 128)).to_bytes()).sw
        over = card.process(verify_command(payload(flip(ref, tau + 1, rng), 128)).to_bytes()).sw
        boundary_fail += (at != StatusWord.OK) + (over != StatusWord.CONDITIONS_NOT_SATISFIED)
    record(6, mism == 0 and boundary_fail == 0,
           f"hamming vs per-bit oracle on 4x10000 pairs: {mism} mismatches; boundary failures: {boundary_fail}")


def test_07_itq_training():
    import time

    start = time.perf_counter()
    worst_rise, worst_ortho = 0.0, 0.0
    for seed in range(5):
        ds = generate_synthetic(SyntheticDatasetSpec(n_identities=50, images_per_identity=10, embedding_dim=128, seed=seed))
        for L in (64, 128):
            mu, W = train_pca(ds.embeddings, L)
            V = (ds.embeddings - mu) @ W
            losses = []

            def cb(k, R, loss):
                nonlocal worst_ortho
                losses.append(loss)
                worst_ortho = max(worst_ortho, float(np.max(np.abs(R.T @ R - np.eye(L)))))

            train_itq(V, iterations=50, seed=seed, callback=cb)
            rises = [(b - a) / a for a, b in zip(losses, losses[1:])]
            worst_rise = max(worst_rise, max(rises))
    elapsed = time.perf_counter() - start
    # a relative rise of 1e-12 is float rounding, not a loss increase
    ok = worst_rise <= 1e-12 and worst_ortho <= 1e-6 and elapsed < 60
    record(7, ok, f"ITQ 5 datasets x L{{64,128}} x 50 it (N=500, d=128): max relative loss rise {worst_rise:.2e}, "
                  f"max |R^T R - I| {worst_ortho:.2e}, {elapsed:.1f} s")


def test_08_roc_oracles():
    rng = random.Random(8)
    fails = 0
    for _ in range(100):
        L = rng.choice([16, 32, 64])
        g = [rng.randint(0, L) for _ in range(rng.randint(1, 40))]
        i = [rng.randint(0, L) for _ in range(rng.randint(1, 40))]
        curve = compute_roc(ScoreSet(g, i, L))
        for tau, tpr, far in oracles.roc_table(g, i, L):
            fails += curve.tpr[tau] != float(tpr) or curve.far[tau] != float(far)
        point = find_eer(curve)
        otau, oeer = oracles.eer(g, i, L)
        fails += point.tau != otau or abs(eer_value(point) - oeer) > 1e-15
        for target in (1e-3, 1e-2, 0.1):
            p = tpr_at_far(curve, target)
            fails += (p.tau, p.tpr, p.far) != oracles.tpr_at_far(g, i, L, target)
    record(8, fails == 0, f"ROC/EER/TPR@FAR vs brute force on 100 random score sets: {fails} mismatches")


@pytest.mark.parametrize("L", [64, 128])
def test_09_offline_streamed_coherence(L):
    ds = generate_synthetic(SyntheticDatasetSpec(**{**WORKING_SET.__dict__, "seed": 9}))
    model = fit_pca_itq(ds.embeddings, L, seed=9)
    ev = evaluate(ds, model, seed=9, far_target=1e-2)
    replay = ev.replay
    identical = bool(np.array_equal(replay.streamed_accepts, replay.offline_accepts))
    n_imp = replay.confusion.fp + replay.confusion.tn
    offline_far = float(ev.offline.far[ev.tau])
    lo, hi = binomial_interval(offline_far, n_imp, 0.99)
    c = replay.confusion
    ok = identical and lo <= c.far <= hi
    record(9, ok, f"L={L} tau={ev.tau}: streamed==offline decisions: {identical} over {len(replay.transactions)} trials; "
                  f"streamed FAR {c.far:.4f} in 99% CI [{lo:.4f}, {hi:.4f}] of offline FAR {offline_far:.4f}; "
                  f"TPR offline/streamed {ev.offline.tpr[ev.tau]:.3f}/{c.tpr:.3f}; EER {eer_value(ev.eer_point):.4f}")


def _pipeline(root, capsys):
    root.mkdir()
    assert main(["synth", "--seed", "10", "--output", str(root / "emb.emb")]) == 0
    assert main(["--out-dir", str(root), "train", "--embeddings", str(root / "emb.emb"),
                 "--bits", "64", "--seed", "10", "--output", str(root / "model.pitq")]) == 0
    card = ["--model", str(root / "model.pitq"), "--card", str(root / "card.bin"),
            "--embeddings", str(root / "emb.emb"), "--trace", str(root / "trace.txt")]
    assert main(["enroll", *card, "--images", "0", "1", "--tau", "23"]) == 0
    main(["verify", *card, "--image", "2"])
    assert main(["replay", "--embeddings", str(root / "emb.emb"), "--model", str(root / "model.pitq"),
                 "--seed", "10", "--output", str(root / "report.json")]) == 0
    assert main(["latency", "--output", str(root / "latency.csv")]) == 0
    capsys.readouterr()
    names = ["emb.emb", "model.pitq", "card.bin", "trace.txt", "report.json", "latency.csv"]
    return {n: (root / n).read_bytes() for n in names}


def test_10_end_to_end_determinism(tmp_path, capsys):
    a = _pipeline(tmp_path / "run1", capsys)
    b = _pipeline(tmp_path / "run2", capsys)
    differing = [n for n in a if a[n] != b[n]]
    record(10, not differing, f"train->enroll->replay->latency twice: {len(a)} artifacts, differing: {differing or 'none'}")
