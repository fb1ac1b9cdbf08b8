"""Classic pcap reading/writing, a small native dissector and PDML ingestion.

The native dissector understands Ethernet, IPv4, IPv6, TCP, UDP and textual
SIP (with SDP bodies). Everything else is expected to arrive as PDML produced
by an external dissector (``tshark -T pdml``).
"""

from __future__ import annotations

import ipaddress
import logging
import re
import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

from .errors import BadMagic, CorruptHeader, EmptyDocument, MalformedXml

log = logging.getLogger(__name__)

MAGIC_MICRO = 0xA1B2C3D4
MAGIC_NANO = 0xA1B23C4D
MAGIC_PCAPNG = 0x0A0D0D0A

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
# incl_len above this is treated as a corrupt header rather than a large packet
MAX_RECORD_LEN = 1 << 18

TIME_DELTA_DECIMALS = 1


class FieldEntry(NamedTuple):
    name: str
    value: str


@dataclass(frozen=True)
class PacketRecord:
    frame_no: int
    ts_sec: int
    ts_frac: int
    fields: tuple[FieldEntry, ...]
    protocols: tuple[str, ...]
    raw: bytes = b""
    orig_len: int = 0

    @property
    def cap_len(self) -> int:
        return len(self.raw)


@dataclass(frozen=True)
class CaptureFile:
    path: str
    byte_order: str = "little"
    ts_resolution: str = "micro"
    link_type: int = LINKTYPE_ETHERNET
    packets: tuple[PacketRecord, ...] = ()
    version: tuple[int, int] = (2, 4)
    thiszone: int = 0
    sigfigs: int = 0
    snaplen: int = 65535
    dropped_records: int = 0

    @property
    def capture_id(self) -> str:
        return Path(self.path).stem

    def with_packets(self, packets) -> "CaptureFile":
        return replace(self, packets=tuple(packets))


def _endian(byte_order: str) -> str:
    return "<" if byte_order == "little" else ">"


def _magic_info(head: bytes) -> tuple[str, str]:
    if len(head) < 4:
        raise BadMagic("file too short to hold a pcap magic number")
    (le,) = struct.unpack("<I", head[:4])
    (be,) = struct.unpack(">I", head[:4])
    if le == MAGIC_MICRO:
        return "little", "micro"
    if le == MAGIC_NANO:
        return "little", "nano"
    if be == MAGIC_MICRO:
        return "big", "micro"
    if be == MAGIC_NANO:
        return "big", "nano"
    if le == MAGIC_PCAPNG:
        raise BadMagic("pcapng files are not supported; convert to classic pcap first")
    raise BadMagic(f"unrecognized pcap magic 0x{le:08x}")


def parse_pcap(data: bytes, path: str = "<bytes>", dissect_packets: bool = True) -> CaptureFile:
    byte_order, resolution = _magic_info(data)
    if len(data) < GLOBAL_HEADER_LEN:
        raise CorruptHeader(f"{path}: global header truncated ({len(data)} bytes)")
    e = _endian(byte_order)
    _, vmaj, vmin, thiszone, sigfigs, snaplen, link_type = struct.unpack(
        e + "IHHiIII", data[:GLOBAL_HEADER_LEN]
    )
    frac_scale = 1_000_000 if resolution == "micro" else 1_000_000_000
    packets = []
    off = GLOBAL_HEADER_LEN
    dropped = 0
    prev_ts = None
    while off < len(data):
        if len(data) - off < RECORD_HEADER_LEN:
            dropped += 1
            break
        ts_sec, ts_frac, incl_len, orig_len = struct.unpack(
            e + "IIII", data[off : off + RECORD_HEADER_LEN]
        )
        if incl_len > orig_len or incl_len > max(snaplen, MAX_RECORD_LEN) or ts_frac >= frac_scale:
            raise CorruptHeader(
                f"{path}: record {len(packets) + 1} at offset {off} has incl_len={incl_len}, "
                f"orig_len={orig_len}, ts_frac={ts_frac}"
            )
        body = off + RECORD_HEADER_LEN
        if body + incl_len > len(data):
            dropped += 1
            break
        raw = data[body : body + incl_len]
        ts = ts_sec + ts_frac / frac_scale
        delta = 0.0 if prev_ts is None else ts - prev_ts
        prev_ts = ts
        frame_no = len(packets) + 1
        if dissect_packets:
            rec = dissect(raw, link_type, frame_no=frame_no, ts_sec=ts_sec, ts_frac=ts_frac,
                          orig_len=orig_len, time_delta=delta)
        else:
            rec = PacketRecord(frame_no, ts_sec, ts_frac, (), (), raw, orig_len)
        packets.append(rec)
        off = body + incl_len
    if dropped:
        log.warning("%s: dropped %d truncated trailing record(s)", path, dropped)
    return CaptureFile(
        path=str(path),
        byte_order=byte_order,
        ts_resolution=resolution,
        link_type=link_type,
        packets=tuple(packets),
        version=(vmaj, vmin),
        thiszone=thiszone,
        sigfigs=sigfigs,
        snaplen=snaplen,
        dropped_records=dropped,
    )


def read_pcap(path) -> CaptureFile:
    """Read a classic pcap file and dissect every record.

    Both microsecond and nanosecond magics are accepted in either byte order.
    A truncated trailing record is dropped (counted in ``dropped_records``).
    """
    data = Path(path).read_bytes()
    return parse_pcap(data, str(path))


def pcap_bytes(capture: CaptureFile) -> bytes:
    e = _endian(capture.byte_order)
    magic = MAGIC_MICRO if capture.ts_resolution == "micro" else MAGIC_NANO
    out = [
        struct.pack(
            e + "IHHiIII",
            magic,
            capture.version[0],
            capture.version[1],
            capture.thiszone,
            capture.sigfigs,
            capture.snaplen,
            capture.link_type,
        )
    ]
    for p in capture.packets:
        out.append(struct.pack(e + "IIII", p.ts_sec, p.ts_frac, len(p.raw), max(p.orig_len, len(p.raw))))
        out.append(p.raw)
    return b"".join(out)


def write_pcap(capture: CaptureFile, path) -> None:
    Path(path).write_bytes(pcap_bytes(capture))


# ---------------------------------------------------------------- dissection


def ipv4_checksum(header: bytes) -> int:
    """Internet checksum of an IPv4 header whose checksum field is zeroed."""
    if len(header) % 2:
        header += b"\x00"
    total = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _mac(b: bytes) -> str:
    return ":".join(f"{x:02x}" for x in b)


_SIP_STATUS = re.compile(r"^SIP/2\.0 (\d{3})(?: (.*))?$")
_SIP_REQUEST = re.compile(r"^([A-Z][A-Z0-9_-]*) (\S+) SIP/2\.0$")


class _Builder:
    def __init__(self):
        self.fields: list[FieldEntry] = []
        self.protocols: list[str] = []

    def add(self, name, value):
        self.fields.append(FieldEntry(name, str(value)))


def _dissect_sip(payload: bytes, b: _Builder) -> bool:
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError:
        return False
    head, sep, body = text.partition("\r\n\r\n")
    if not sep:
        head, sep, body = text.partition("\n\n")
    lines = head.replace("\r\n", "\n").split("\n")
    first = lines[0].rstrip()
    status = _SIP_STATUS.match(first)
    request = None if status else _SIP_REQUEST.match(first)
    if not status and not request:
        return False
    b.protocols.append("sip")
    if status:
        b.add("sip.status-line.printable_value", first)
        b.add("sip.status-code.printable_value", status.group(1))
    else:
        b.add("sip.request-line.printable_value", first)
        b.add("sip.method.printable_value", request.group(1))
    headers: list[list[str]] = []
    for line in lines[1:]:
        if not line:
            continue
        if line[0] in " \t" and headers:
            headers[-1][1] += " " + line.strip()
            continue
        name, colon, value = line.partition(":")
        if not colon:
            continue
        headers.append([name.strip().lower(), value.strip()])
    content_type = ""
    for name, value in headers:
        b.add(f"sip.{name}.printable_value", value)
        if name in ("content-type", "c"):
            content_type = value.lower()
    if body:
        if content_type.startswith("application/sdp"):
            b.protocols.append("sdp")
            for line in body.replace("\r\n", "\n").split("\n"):
                key, eq, value = line.partition("=")
                if eq and key.strip():
                    b.add(f"sdp.{key.strip().lower()}.printable_value", value.strip())
        else:
            b.add("sip.msg_body.len", len(body.encode("utf-8")))
    return True


def _dissect_payload(payload: bytes, b: _Builder) -> None:
    if payload and _dissect_sip(payload, b):
        return
    if payload:
        b.protocols.append("data")
    b.add("data.len", len(payload))


def _dissect_l4(proto: int, data: bytes, b: _Builder) -> None:
    if proto == 17:
        if len(data) < 8:
            b.add("dissect.truncated", "udp")
            return
        sport, dport, length, csum = struct.unpack("!HHHH", data[:8])
        b.protocols.append("udp")
        b.add("udp.srcport", sport)
        b.add("udp.dstport", dport)
        b.add("udp.length", length)
        b.add("udp.checksum", f"0x{csum:04x}")
        if length < 8 or length > len(data):
            b.add("dissect.truncated", "udp")
            return
        _dissect_payload(data[8:length], b)
    elif proto == 6:
        if len(data) < 20:
            b.add("dissect.truncated", "tcp")
            return
        sport, dport, seq, ack, off_flags, win, csum, urg = struct.unpack("!HHIIHHHH", data[:20])
        hlen = (off_flags >> 12) * 4
        b.protocols.append("tcp")
        b.add("tcp.srcport", sport)
        b.add("tcp.dstport", dport)
        b.add("tcp.seq", seq)
        b.add("tcp.ack", ack)
        b.add("tcp.hdr_len", hlen)
        b.add("tcp.flags", f"0x{off_flags & 0x0FFF:03x}")
        b.add("tcp.window_size", win)
        b.add("tcp.checksum", f"0x{csum:04x}")
        b.add("tcp.urgent_pointer", urg)
        if hlen < 20 or hlen > len(data):
            b.add("dissect.truncated", "tcp")
            return
        b.add("tcp.len", len(data) - hlen)
        _dissect_payload(data[hlen:], b)
    else:
        _dissect_payload(data, b)


def _dissect_ipv4(data: bytes, b: _Builder) -> None:
    if len(data) < 20 or data[0] >> 4 != 4:
        b.add("dissect.truncated", "ipv4")
        return
    ihl = (data[0] & 0x0F) * 4
    if ihl < 20 or ihl > len(data):
        b.add("dissect.truncated", "ipv4")
        return
    (_, tos, total, ident, flags_frag, ttl, proto, csum, src, dst) = struct.unpack(
        "!BBHHHBBH4s4s", data[:20]
    )
    b.protocols.append("ipv4")
    b.add("ip.version", 4)
    b.add("ip.hdr_len", ihl)
    b.add("ip.dsfield", f"0x{tos:02x}")
    b.add("ip.len", total)
    b.add("ip.id", f"0x{ident:04x}")
    b.add("ip.flags", f"0x{flags_frag >> 13:x}")
    b.add("ip.frag_offset", flags_frag & 0x1FFF)
    b.add("ip.ttl", ttl)
    b.add("ip.proto", proto)
    b.add("ip.checksum", f"0x{csum:04x}")
    zeroed = data[:10] + b"\x00\x00" + data[12:ihl]
    if ipv4_checksum(zeroed) != csum:
        b.add("ip.checksum.bad", 1)
    b.add("ip.src", str(ipaddress.IPv4Address(src)))
    b.add("ip.dst", str(ipaddress.IPv4Address(dst)))
    if total < ihl or total > len(data):
        b.add("dissect.truncated", "ipv4")
        return
    if flags_frag & 0x1FFF:
        # non-first fragment: no transport header to decode
        _dissect_payload(data[ihl:total], b)
        return
    _dissect_l4(proto, data[ihl:total], b)


def _dissect_ipv6(data: bytes, b: _Builder) -> None:
    if len(data) < 40 or data[0] >> 4 != 6:
        b.add("dissect.truncated", "ipv6")
        return
    (vtf, plen, nxt, hlim) = struct.unpack("!IHBB", data[:8])
    b.protocols.append("ipv6")
    b.add("ipv6.version", 6)
    b.add("ipv6.tclass", f"0x{(vtf >> 20) & 0xFF:02x}")
    b.add("ipv6.flow", f"0x{vtf & 0xFFFFF:05x}")
    b.add("ipv6.plen", plen)
    b.add("ipv6.nxt", nxt)
    b.add("ipv6.hlim", hlim)
    b.add("ipv6.src", str(ipaddress.IPv6Address(data[8:24])))
    b.add("ipv6.dst", str(ipaddress.IPv6Address(data[24:40])))
    if 40 + plen > len(data):
        b.add("dissect.truncated", "ipv6")
        return
    _dissect_l4(nxt, data[40 : 40 + plen], b)


def _dissect_ip(data: bytes, b: _Builder) -> None:
    if data and data[0] >> 4 == 6:
        _dissect_ipv6(data, b)
    else:
        _dissect_ipv4(data, b)


def dissect(
    raw: bytes,
    link_type: int,
    frame_no: int = 1,
    ts_sec: int = 0,
    ts_frac: int = 0,
    orig_len: int | None = None,
    time_delta: float = 0.0,
) -> PacketRecord:
    """Decode one captured frame into an ordered list of field entries.

    Never raises: a malformed layer stops decoding there and a
    ``dissect.truncated`` entry naming that layer is appended.
    """
    b = _Builder()
    frame_fields = [
        FieldEntry("frame.time_delta", f"{time_delta:.{TIME_DELTA_DECIMALS}f}"),
        FieldEntry("frame.len", str(len(raw) if orig_len is None else orig_len)),
        FieldEntry("frame.cap_len", str(len(raw))),
    ]
    if link_type == LINKTYPE_ETHERNET:
        if len(raw) < 14:
            b.add("dissect.truncated", "eth")
        else:
            b.protocols.append("eth")
            b.add("eth.dst", _mac(raw[0:6]))
            b.add("eth.src", _mac(raw[6:12]))
            (etype,) = struct.unpack("!H", raw[12:14])
            off = 14
            if etype == 0x8100 and len(raw) >= 18:
                b.add("vlan.id", struct.unpack("!H", raw[14:16])[0] & 0x0FFF)
                (etype,) = struct.unpack("!H", raw[16:18])
                off = 18
            b.add("eth.type", f"0x{etype:04x}")
            if etype == 0x0800:
                _dissect_ipv4(raw[off:], b)
            elif etype == 0x86DD:
                _dissect_ipv6(raw[off:], b)
            else:
                _dissect_payload(raw[off:], b)
    elif link_type == LINKTYPE_RAW:
        _dissect_ip(raw, b)
    elif link_type == LINKTYPE_IPV4:
        _dissect_ipv4(raw, b)
    elif link_type == LINKTYPE_IPV6:
        _dissect_ipv6(raw, b)
    else:
        _dissect_payload(raw, b)
    protocols = tuple(b.protocols)
    frame_fields.append(FieldEntry("frame.protocols", ":".join(protocols)))
    return PacketRecord(
        frame_no=frame_no,
        ts_sec=ts_sec,
        ts_frac=ts_frac,
        fields=tuple(frame_fields + b.fields),
        protocols=protocols,
        raw=bytes(raw),
        orig_len=len(raw) if orig_len is None else orig_len,
    )


# ---------------------------------------------------------------- PDML


def _pdml_value(el: ET.Element) -> str:
    for attr in ("showname", "show", "value"):
        v = el.get(attr)
        if v is not None:
            return v
    return ""


def _walk_pdml(el: ET.Element, parent: str, out: list[FieldEntry]) -> None:
    for child in el:
        if child.tag not in ("field", "proto"):
            continue
        name = child.get("name") or f"{parent}.text"
        if child.tag == "field":
            out.append(FieldEntry(name, _pdml_value(child)))
        _walk_pdml(child, name, out)


def _pdml_timestamp(fields: list[FieldEntry]) -> tuple[int, int]:
    for f in fields:
        if f.name == "timestamp" or f.name == "frame.time_epoch":
            m = re.search(r"(\d+)(?:\.(\d+))?", f.value)
            if m:
                frac = (m.group(2) or "0")[:6].ljust(6, "0")
                return int(m.group(1)), int(frac)
    return 0, 0


def parse_pdml(text: str | bytes, path: str = "<pdml>") -> CaptureFile:
    if not (text.strip() if isinstance(text, str) else text.strip()):
        raise EmptyDocument(f"{path}: empty PDML document")
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise MalformedXml(f"{path}: {exc}") from None
    packet_els = [root] if root.tag == "packet" else root.findall("packet")
    if not packet_els:
        raise EmptyDocument(f"{path}: no <packet> elements")
    packets = []
    for i, pkt in enumerate(packet_els, start=1):
        fields: list[FieldEntry] = []
        _walk_pdml(pkt, "packet", fields)
        protocols = tuple(p.get("name", "") for p in pkt.findall("proto"))
        ts_sec, ts_frac = _pdml_timestamp(fields)
        packets.append(PacketRecord(i, ts_sec, ts_frac, tuple(fields), protocols))
    return CaptureFile(path=str(path), packets=tuple(packets))


def ingest_pdml(path) -> CaptureFile:
    """Load an externally produced PDML dissection.

    Each ``<field>`` becomes a :class:`FieldEntry` named by its ``name``
    attribute, valued by ``showname``, ``show`` or ``value`` (first present),
    flattened depth-first in document order. Unnamed fields inherit
    ``<parent>.text``.
    """
    return parse_pdml(Path(path).read_bytes(), str(path))


def load_capture(path) -> CaptureFile:
    """Dispatch on file suffix: ``.pdml``/``.xml`` go to PDML, everything else to pcap."""
    p = Path(path)
    if p.suffix.lower() in (".pdml", ".xml"):
        return ingest_pdml(p)
    return read_pcap(p)
