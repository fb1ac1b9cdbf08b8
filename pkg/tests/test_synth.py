import struct
from collections import Counter

import pytest

from capmlm.capture import ipv4_checksum, pcap_bytes, read_pcap
from capmlm.errors import EmptyGrammar, InsufficientCaptures
from capmlm.synth import (
    FAILURE_MODES,
    FlowGrammar,
    corpus_digest,
    generate,
    labels_tsv,
    parse_labels,
    parse_split,
    split,
    split_tsv,
    write_corpus,
)


def test_counts_labels_and_determinism(small_corpus):
    c = Counter(lc.label for lc in small_corpus)
    assert c == {"success": 12, "failure": 6}
    again = generate(FlowGrammar.default(), 12, 6, seed=3)
    assert corpus_digest(again) == corpus_digest(small_corpus)
    other = generate(FlowGrammar.default(), 12, 6, seed=4)
    assert corpus_digest(other) != corpus_digest(small_corpus)
    assert [lc.capture_id for lc in small_corpus] == [f"cap_{i:05d}" for i in range(18)]


def test_planted_frames_exist(small_corpus):
    for lc in small_corpus:
        n = len(lc.capture.packets)
        if lc.label == "failure":
            assert lc.failure_mode in FAILURE_MODES
            assert all(1 <= f <= n for f in lc.planted_frames)
        else:
            assert lc.planted_frames == () and lc.failure_mode == ""


def test_checksums_are_valid(small_corpus):
    for lc in small_corpus[:5]:
        for p in lc.capture.packets:
            ip = p.raw[14:34]
            assert ipv4_checksum(ip[:10] + b"\0\0" + ip[12:]) == struct.unpack("!H", ip[10:12])[0]


def _fields(packet):
    return {f.name: f.value for f in packet.fields}


@pytest.mark.parametrize("mode", FAILURE_MODES)
def test_each_failure_mode(mode):
    caps = generate(FlowGrammar.default(), 0, 6, seed=11, modes=[mode])
    for lc in caps:
        assert lc.failure_mode == mode
        planted = lc.capture.packets[lc.planted_frames[0] - 1]
        text = " ".join(f"{k}={v}" for k, v in _fields(planted).items())
        if mode == "error_status":
            assert any(code in text for code in ("500", "503", "504", "580"))
        elif mode == "timeout_gap":
            assert "INVITE" in text
            first = lc.capture.packets[lc.planted_frames[0] - 2]
            assert planted.raw[42:] == first.raw[42:]  # same SIP payload: a retransmission
        else:
            assert "200" in text


def test_success_flows_complete(small_corpus):
    for lc in small_corpus:
        if lc.label != "success":
            continue
        payloads = b"".join(p.raw for p in lc.capture.packets)
        assert b"ACK sip:" in payloads and b"BYE sip:" in payloads


def test_split_rule(small_corpus):
    s = split(small_corpus, seed=1)
    label = {lc.capture_id: lc.label for lc in small_corpus}
    assert all(label[c] == "success" for c in s.train)
    for part in (s.val, s.test):
        c = Counter(label[x] for x in part)
        assert c["success"] == c["failure"]
    assert sorted(s.train + s.val + s.test) == sorted(label)
    assert (len(s.val), len(s.test), len(s.train)) == (6, 6, 6)
    assert split(small_corpus, seed=1) == s
    assert parse_split(split_tsv(s)) == s


def test_split_needs_enough_successes():
    caps = generate(FlowGrammar.default(), 3, 4, seed=0)
    with pytest.raises(InsufficientCaptures):
        split(caps)


def test_bad_modes():
    with pytest.raises(EmptyGrammar):
        generate(FlowGrammar.default(), 1, 1, modes=["meteor_strike"])


def test_corpus_files(tmp_path, small_corpus):
    s = split(small_corpus, seed=0)
    d = write_corpus(small_corpus, tmp_path / "corpus", s)
    rows = parse_labels((d / "labels.tsv").read_text())
    assert [r.capture_id for r in rows] == [lc.capture_id for lc in small_corpus]
    assert rows == parse_labels(labels_tsv(small_corpus))
    first = small_corpus[0]
    assert pcap_bytes(read_pcap(d / f"{first.capture_id}.pcap")) == pcap_bytes(first.capture)
    assert parse_split((d / "split.tsv").read_text()) == s
    with pytest.raises(ValueError):
        parse_labels("a.pcap\tmaybe\n")
