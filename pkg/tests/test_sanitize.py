import re

import pytest
from hypothesis import given
from hypothesis import strategies as st

from capmlm.capture import CaptureFile, FieldEntry, PacketRecord
from capmlm.sanitize import REDACTED, RedactionRuleSet, leaks, redact, redact_capture, redact_value

# independent leak patterns, deliberately simpler than the package's
V4 = re.compile(r"\b\d{1,3}(?:\.\d{1,3}){3}\b")
MACX = re.compile(r"\b[0-9a-fA-F]{2}(?::[0-9a-fA-F]{2}){5}\b")
V6 = re.compile(r"\b[0-9a-fA-F]{1,4}(?::[0-9a-fA-F]{0,4}){2,7}\b")


@pytest.mark.parametrize(
    "text,expected",
    [
        ("from 10.0.0.1 to 192.168.1.254", f"from {REDACTED} to {REDACTED}"),
        ("mac 00:1a:2b:3c:4d:5e end", f"mac {REDACTED} end"),
        ("v6 2001:db8::1 and fe80::1%eth0", f"v6 {REDACTED} and {REDACTED}"),
        ("call-id: 12345", f"call-id: {REDACTED}"),
        ("version 2.0 and 1.2.3", "version 2.0 and 1.2.3"),
        ("SIP/2.0 200 OK", "SIP/2.0 200 OK"),
    ],
)
def test_redact_examples(text, expected):
    assert redact(text) == expected


def test_redaction_is_a_fixpoint():
    s = "10.0.0.10.0.0.1"
    once = redact(s)
    assert redact(once) == once


@given(st.text(alphabet="0123456789abcdef.:-[]REDACT =x ", max_size=60))
def test_idempotent_property(s):
    once = redact(s)
    assert redact(once) == once
    assert leaks(once) == []


def test_id_field_values_redacted():
    rules = RedactionRuleSet.default()
    assert redact_value("sip.Call-ID", "a84b4c76e66710@host", rules) == f"{REDACTED}@host"
    assert redact_value("sip.Method", "INVITE", rules) == "INVITE"


def test_optional_rules():
    s = "+14155550123 and 310150123456789"
    assert redact(s) == s
    rules = RedactionRuleSet.from_config({"enable": ["msisdn_like", "imsi_like"]})
    assert redact(s, rules) == f"{REDACTED} and {REDACTED}"
    with pytest.raises(ValueError):
        RedactionRuleSet.from_config({"enable": ["nope"]})


def test_extra_rule():
    rules = RedactionRuleSet.from_config({"extra": [{"name": "user", "pattern": r"alice"}]})
    assert redact("sip:alice@x", rules) == f"sip:{REDACTED}@x"


def test_redact_capture_keeps_names_and_frames():
    p = PacketRecord(7, 1, 2, (FieldEntry("ip.src", "10.1.2.3"), FieldEntry("ip.src_host", "10.1.2.3")), ("ip",))
    cap = redact_capture(CaptureFile("c.pcap", packets=(p,)))
    q = cap.packets[0]
    assert q.frame_no == 7 and (q.ts_sec, q.ts_frac) == (1, 2)
    assert [f.name for f in q.fields] == ["ip.src", "ip.src_host"]
    assert all(f.value == REDACTED for f in q.fields)


def test_synthetic_corpus_has_no_leaks(small_corpus):
    for lc in small_corpus:
        for p in redact_capture(lc.capture).packets:
            for f in p.fields:
                assert not V4.search(f.value), f
                assert not MACX.search(f.value), f
                assert not V6.search(f.value), f
