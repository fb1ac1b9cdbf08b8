import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from capmlm.capture import (
    MAGIC_MICRO,
    MAGIC_NANO,
    CaptureFile,
    PacketRecord,
    dissect,
    ipv4_checksum,
    load_capture,
    parse_pcap,
    parse_pdml,
    pcap_bytes,
    read_pcap,
    write_pcap,
)
from capmlm.errors import BadMagic, CorruptHeader, EmptyDocument, MalformedXml


def _raw_capture(byte_order="little", resolution="micro", payloads=(b"\x00" * 20, b"\x01" * 7)):
    frac = 999_999 if resolution == "micro" else 999_999_999
    pkts = tuple(
        PacketRecord(i + 1, 1_700_000_000 + i, frac - i, (), (), p, len(p)) for i, p in enumerate(payloads)
    )
    return CaptureFile("x.pcap", byte_order, resolution, 1, pkts)


@pytest.mark.parametrize("order", ["little", "big"])
@pytest.mark.parametrize("res", ["micro", "nano"])
def test_magic_variants_round_trip(order, res):
    data = pcap_bytes(_raw_capture(order, res))
    cap = parse_pcap(data)
    assert (cap.byte_order, cap.ts_resolution) == (order, res)
    assert pcap_bytes(cap) == data


def test_magic_constants():
    assert struct.pack("<I", MAGIC_MICRO) == bytes.fromhex("d4c3b2a1")
    assert struct.pack("<I", MAGIC_NANO) == bytes.fromhex("4d3cb2a1")


@pytest.mark.parametrize(
    "blob",
    [b"", b"abc", b"GIF89a" + b"\0" * 40, b"<?xml version='1.0'?><pdml/>", bytes.fromhex("0a0d0d0a") + b"\0" * 40],
)
def test_non_pcap_rejected(blob):
    with pytest.raises(BadMagic):
        parse_pcap(blob)


def test_truncated_global_header():
    with pytest.raises(CorruptHeader):
        parse_pcap(struct.pack("<I", MAGIC_MICRO) + b"\0" * 8)


def test_incl_len_beyond_orig_len_is_corrupt():
    data = bytearray(pcap_bytes(_raw_capture()))
    struct.pack_into("<I", data, 24 + 12, 1)  # orig_len of first record
    with pytest.raises(CorruptHeader):
        parse_pcap(bytes(data))


def test_truncated_trailing_record_dropped():
    data = pcap_bytes(_raw_capture())
    cap = parse_pcap(data[:-3])
    assert len(cap.packets) == 1
    assert cap.dropped_records == 1


def test_file_round_trip(tmp_path, small_corpus):
    for lc in small_corpus[:4]:
        p = tmp_path / "a.pcap"
        write_pcap(lc.capture, p)
        again = read_pcap(p)
        assert pcap_bytes(again) == pcap_bytes(lc.capture)
        assert [q.fields for q in again.packets] == [q.fields for q in lc.capture.packets]


@given(
    st.lists(st.binary(min_size=0, max_size=200), min_size=0, max_size=6),
    st.sampled_from(["little", "big"]),
    st.sampled_from(["micro", "nano"]),
)
def test_round_trip_property(payloads, order, res):
    cap = _raw_capture(order, res, tuple(payloads))
    data = pcap_bytes(cap)
    assert pcap_bytes(parse_pcap(data)) == data


@given(st.binary(max_size=120))
def test_dissect_never_raises(raw):
    rec = dissect(raw, 1)
    assert rec.raw == raw
    assert rec.fields[0].name == "frame.time_delta"


def test_ipv4_checksum_known_header():
    # classic worked example; checksum field zeroed
    hdr = bytes.fromhex("450000730000400040110000c0a80001c0a800c7")
    assert ipv4_checksum(hdr) == 0xB861


def test_sip_fields_dissected(small_corpus):
    names = {f.name for p in small_corpus[0].capture.packets for f in p.fields}
    assert "sip.cseq.method" in names or any(n.startswith("sip.") for n in names)
    assert "ip.src" in names and "udp.srcport" in names


def test_time_delta_one_decimal(small_corpus):
    for p in small_corpus[0].capture.packets:
        v = dict(p.fields)["frame.time_delta"]
        assert len(v.split(".")[1]) == 1


PDML = """<?xml version="1.0"?>
<pdml>
 <packet>
  <proto name="geninfo"><field name="timestamp" show="Jan 1" value="1700000000.250000"/></proto>
  <proto name="sip"><field name="sip.Method" show="INVITE"/><field show="loose text"/></proto>
 </packet>
 <packet><proto name="sip"><field name="sip.Status-Code" showname="Status-Code: 200"/></proto></packet>
</pdml>"""


def test_pdml_flattening():
    cap = parse_pdml(PDML)
    assert len(cap.packets) == 2
    f0 = cap.packets[0].fields
    assert ("sip.Method", "INVITE") in f0
    assert ("sip.text", "loose text") in f0
    assert cap.packets[1].fields[0].value == "Status-Code: 200"
    assert cap.packets[0].protocols == ("geninfo", "sip")


@pytest.mark.parametrize("text,exc", [("", EmptyDocument), ("<pdml></pdml>", EmptyDocument), ("<pdml><packet>", MalformedXml)])
def test_pdml_errors(text, exc):
    with pytest.raises(exc):
        parse_pdml(text)


def test_load_capture_dispatch(tmp_path):
    (tmp_path / "a.pdml").write_text(PDML)
    assert load_capture(tmp_path / "a.pdml").capture_id == "a"
    write_pcap(_raw_capture(), tmp_path / "b.pcap")
    assert len(load_capture(tmp_path / "b.pcap").packets) == 2
