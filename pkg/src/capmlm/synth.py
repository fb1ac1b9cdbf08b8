"""Labeled synthetic SIP call-flow captures (SIP over UDP/IPv4/Ethernet).

A success capture holds one completed call (optionally preceded by an IMS
registration exchange). A failure capture deviates in one of three ways:

``error_status``    the INVITE is answered by a 5xx with reason/warning text;
``timeout_gap``     the INVITE is retransmitted with doubling gaps and never answered;
``missing_message`` the ACK never arrives, so the 200 OK is retransmitted and
                    the callee tears the call down.

``planted_frames`` records the frame where the deviation first shows.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .capture import CaptureFile, PacketRecord, ipv4_checksum, parse_pcap, pcap_bytes
from .errors import EmptyGrammar, InsufficientCaptures

SUCCESS = "success"
FAILURE = "failure"
FAILURE_MODES = ("error_status", "timeout_gap", "missing_message")
LABELS_HEADER = "path\tlabel\tplanted_frames\tfailure_mode"

SIP_PORT = 5060
DOMAIN = "ims.mnc001.mcc001.3gppnetwork.org"
T1 = 0.5


@dataclass(frozen=True)
class MessageTemplate:
    name: str
    sender: str  # "caller" or "callee"
    first_line: str  # request method or "<code> <reason>" for responses
    cseq_method: str
    sdp: bool = False
    delay: tuple[float, float] = (0.01, 0.2)  # seconds after the previous message

    @property
    def is_request(self) -> bool:
        return not self.first_line[:1].isdigit()


@dataclass(frozen=True)
class FlowGrammar:
    states: tuple[MessageTemplate, ...]
    # (state name, inclusion probability); the path must end in a completed call
    success_path: tuple[tuple[str, float], ...]
    failure_modes: tuple[str, ...] = FAILURE_MODES
    error_statuses: tuple[tuple[int, str, str], ...] = (
        (500, "Server Internal Error", "no available pool as for triggered service found"),
        (503, "Service Unavailable", "media gateway overloaded"),
        (504, "Server Time-out", "no response from terminating network"),
        (580, "Precondition Failure", "qos resources not available"),
    )
    register_probability: float = 0.3

    def state(self, name: str) -> MessageTemplate:
        for s in self.states:
            if s.name == name:
                return s
        raise KeyError(name)

    def validate(self) -> None:
        if not self.states or not self.success_path:
            raise EmptyGrammar("grammar has no states or no success path")
        names = {s.name for s in self.states}
        for name, _ in self.success_path:
            if name not in names:
                raise EmptyGrammar(f"success path references unknown state {name!r}")
        if self.success_path[-1][1] < 1.0:
            raise EmptyGrammar("the final state of the success path must be mandatory")
        unknown = set(self.failure_modes) - set(FAILURE_MODES)
        if unknown or not self.failure_modes:
            raise EmptyGrammar(f"failure modes must be drawn from {FAILURE_MODES}")

    @classmethod
    def default(cls) -> "FlowGrammar":
        states = (
            MessageTemplate("invite", "caller", "INVITE", "INVITE", sdp=True, delay=(0.0, 0.0)),
            MessageTemplate("trying", "callee", "100 Trying", "INVITE", delay=(0.01, 0.1)),
            MessageTemplate("progress", "callee", "183 Session Progress", "INVITE", sdp=True, delay=(0.1, 0.6)),
            MessageTemplate("ringing", "callee", "180 Ringing", "INVITE", delay=(0.1, 1.0)),
            MessageTemplate("ok_invite", "callee", "200 OK", "INVITE", sdp=True, delay=(1.0, 6.0)),
            MessageTemplate("ack", "caller", "ACK", "ACK", delay=(0.01, 0.1)),
            MessageTemplate("bye", "caller", "BYE", "BYE", delay=(5.0, 90.0)),
            MessageTemplate("ok_bye", "callee", "200 OK", "BYE", delay=(0.01, 0.1)),
        )
        path = (
            ("invite", 1.0),
            ("trying", 1.0),
            ("progress", 0.5),
            ("ringing", 1.0),
            ("ok_invite", 1.0),
            ("ack", 1.0),
            ("bye", 1.0),
            ("ok_bye", 1.0),
        )
        return cls(states, path)


@dataclass(frozen=True)
class LabeledCapture:
    capture: CaptureFile
    label: str
    planted_frames: tuple[int, ...] = ()
    failure_mode: str = ""

    def __post_init__(self):
        if (self.label == FAILURE) != bool(self.planted_frames):
            raise ValueError("a capture is a failure exactly when it has planted frames")

    @property
    def capture_id(self) -> str:
        return self.capture.capture_id


# ---------------------------------------------------------------- packet building


def _udp_checksum(src: bytes, dst: bytes, segment: bytes) -> int:
    pseudo = src + dst + struct.pack("!BBH", 0, 17, len(segment))
    data = pseudo + segment
    if len(data) % 2:
        data += b"\x00"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    c = ~s & 0xFFFF
    return c or 0xFFFF


def udp_frame(src_mac: bytes, dst_mac: bytes, src_ip: bytes, dst_ip: bytes, sport: int, dport: int,
              payload: bytes, ident: int) -> bytes:
    seg = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload
    seg = seg[:6] + struct.pack("!H", _udp_checksum(src_ip, dst_ip, seg)) + seg[8:]
    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(seg), ident & 0xFFFF, 0x4000, 64, 17, 0, src_ip, dst_ip)
    hdr = hdr[:10] + struct.pack("!H", ipv4_checksum(hdr)) + hdr[12:]
    return dst_mac + src_mac + b"\x08\x00" + hdr + seg


@dataclass
class _Party:
    user: str
    ip: bytes
    mac: bytes
    port: int
    tag: str

    @property
    def ip_text(self) -> str:
        return ".".join(str(b) for b in self.ip)


@dataclass
class _Call:
    caller: _Party
    callee: _Party
    call_id: str
    branch: str
    cseq: int
    session: int
    media_port: int
    messages: list[tuple[float, _Party, _Party, bytes]] = field(default_factory=list)


def _hex(rng: np.random.Generator, n: int) -> str:
    return "".join(f"{int(x):02x}" for x in rng.integers(0, 256, size=n))


def _party(rng: np.random.Generator, net: int) -> _Party:
    user = "+1" + "".join(str(int(d)) for d in rng.integers(0, 10, size=10))
    ip = bytes([10, net, int(rng.integers(0, 256)), int(rng.integers(1, 255))])
    mac = bytes([0x02]) + bytes(int(x) for x in rng.integers(0, 256, size=5))
    return _Party(user, ip, mac, int(rng.integers(20000, 60000)), _hex(rng, 4))


def _sdp(p: _Party, call: _Call) -> str:
    return (
        "v=0\r\n"
        f"o=- {call.session} {call.session} IN IP4 {p.ip_text}\r\n"
        "s=-\r\n"
        f"c=IN IP4 {p.ip_text}\r\n"
        "t=0 0\r\n"
        f"m=audio {call.media_port} RTP/AVP 96 97\r\n"
        "a=rtpmap:96 AMR-WB/16000\r\n"
        "a=rtpmap:97 telephone-event/16000\r\n"
        "a=sendrecv\r\n"
    )


def sip_message(t: MessageTemplate, call: _Call, extra_headers: Sequence[str] = (), to_tag: bool = True,
                cseq: int | None = None) -> bytes:
    caller, callee = call.caller, call.callee
    cseq = call.cseq if cseq is None else cseq
    if t.is_request:
        line = f"{t.first_line} sip:{callee.user}@{DOMAIN} SIP/2.0"
    else:
        line = f"SIP/2.0 {t.first_line}"
    sender = caller if t.sender == "caller" else callee
    via_host = caller if (t.is_request and t.sender == "caller") or not t.is_request else callee
    to = f"<sip:{callee.user}@{DOMAIN}>" + (f";tag={callee.tag}" if to_tag else "")
    headers = [
        f"Via: SIP/2.0/UDP {via_host.ip_text}:{SIP_PORT};branch=z9hG4bK{call.branch}",
        f"From: <sip:{caller.user}@{DOMAIN}>;tag={caller.tag}",
        f"To: {to}",
        f"Call-ID: {call.call_id}",
        f"CSeq: {cseq} {t.cseq_method}",
    ]
    if t.is_request:
        headers.insert(1, "Max-Forwards: 70")
    if t.first_line in ("INVITE",) or (not t.is_request and t.first_line.startswith(("180", "183", "200"))):
        headers.append(f"Contact: <sip:{sender.user}@{sender.ip_text}:{SIP_PORT}>")
    headers.extend(extra_headers)
    body = _sdp(sender, call) if t.sdp else ""
    if body:
        headers.append("Content-Type: application/sdp")
    headers.append(f"Content-Length: {len(body.encode())}")
    return ("\r\n".join([line] + headers) + "\r\n\r\n" + body).encode()


def _register_exchange(rng: np.random.Generator, call: _Call, t0: float) -> tuple[list, float]:
    ue, pcscf = call.caller, call.callee
    out = []
    t = t0
    cid = _hex(rng, 8) + "@" + ue.ip_text
    for i, (line, delay) in enumerate(
        [("REGISTER", 0.0), ("401 Unauthorized", 0.05), ("REGISTER", 0.1), ("200 OK", 0.05)]
    ):
        t += delay + float(rng.uniform(0.0, 0.05))
        cseq = 1 if i < 2 else 2
        if line == "REGISTER":
            first = f"REGISTER sip:{DOMAIN} SIP/2.0"
            sender, receiver = ue, pcscf
        else:
            first = f"SIP/2.0 {line}"
            sender, receiver = pcscf, ue
        headers = [
            first,
            f"Via: SIP/2.0/UDP {ue.ip_text}:{SIP_PORT};branch=z9hG4bK{_hex(rng, 6)}",
            f"From: <sip:{ue.user}@{DOMAIN}>;tag={ue.tag}",
            f"To: <sip:{ue.user}@{DOMAIN}>",
            f"Call-ID: {cid}",
            f"CSeq: {cseq} REGISTER",
            "Expires: 600000",
        ]
        if line.startswith("401"):
            headers.append(f'WWW-Authenticate: Digest realm="{DOMAIN}", nonce="{_hex(rng, 12)}", algorithm=AKAv1-MD5')
        headers.append("Content-Length: 0")
        out.append((t, sender, receiver, ("\r\n".join(headers) + "\r\n\r\n").encode()))
    return out, t + float(rng.uniform(0.5, 3.0))


def _delay(rng: np.random.Generator, t: MessageTemplate) -> float:
    lo, hi = t.delay
    return float(rng.uniform(lo, hi)) if hi > lo else lo


def _build_flow(grammar: FlowGrammar, rng: np.random.Generator, mode: str | None):
    """Return (messages, index of the first deviating message or None)."""
    call = _Call(
        caller=_party(rng, 1),
        callee=_party(rng, 2),
        call_id=_hex(rng, 10) + "@" + DOMAIN,
        branch=_hex(rng, 6),
        cseq=int(rng.integers(1, 100)),
        session=int(rng.integers(10**9, 10**10)),
        media_port=int(rng.integers(10000, 20000)) * 2,
    )
    msgs: list[tuple[float, _Party, _Party, bytes]] = []
    t = 0.0
    if rng.random() < grammar.register_probability:
        reg, t = _register_exchange(rng, call, t)
        msgs.extend(reg)
    path = [grammar.state(n) for n, p in grammar.success_path if p >= 1.0 or rng.random() < p]
    planted = None

    def emit(tmpl: MessageTemplate, when: float, body: bytes):
        a, b = (call.caller, call.callee) if tmpl.sender == "caller" else (call.callee, call.caller)
        msgs.append((when, a, b, body))

    if mode == "error_status":
        code, reason, warning = grammar.error_statuses[int(rng.integers(len(grammar.error_statuses)))]
        # the error replaces a final response; a provisional response may precede it
        cut = next(i for i, s in enumerate(path) if s.first_line.startswith("200"))
        keep = path[: int(rng.integers(2, cut + 1))]
        for s in keep:
            t += _delay(rng, s)
            emit(s, t, sip_message(s, call, to_tag=s.first_line != "INVITE"))
        err = MessageTemplate("error", "callee", f"{code} {reason}", "INVITE", delay=(0.05, 2.0))
        t += _delay(rng, err)
        extra = [f'Reason: SIP;cause={code};text="{reason}"', f'Warning: 399 pcscf "{warning}"']
        planted = len(msgs)
        emit(err, t, sip_message(err, call, extra))
        ack = grammar.state("ack")
        t += _delay(rng, ack)
        emit(ack, t, sip_message(ack, call))
        return msgs, planted

    if mode == "timeout_gap":
        inv = path[0]
        t += _delay(rng, inv)
        emit(inv, t, sip_message(inv, call, to_tag=False))
        gap = T1
        for r in range(6):
            t += gap
            if r == 0:
                planted = len(msgs)
            emit(inv, t, sip_message(inv, call, to_tag=False))
            gap *= 2
        return msgs, planted

    for s in path:
        if mode == "missing_message" and s.name == "ack":
            ok = grammar.state("ok_invite")
            gap = T1
            for r in range(int(rng.integers(3, 7))):
                t += gap
                if r == 0:
                    planted = len(msgs)
                emit(ok, t, sip_message(ok, call))
                gap = min(gap * 2, 4.0)
            bye = MessageTemplate("bye_callee", "callee", "BYE", "BYE")
            t += float(rng.uniform(0.5, 2.0))
            emit(bye, t, sip_message(bye, call, cseq=call.cseq + 1))
            okb = MessageTemplate("ok_bye_caller", "caller", "200 OK", "BYE")
            t += _delay(rng, okb)
            emit(okb, t, sip_message(okb, call, cseq=call.cseq + 1))
            return msgs, planted
        t += _delay(rng, s)
        cseq = call.cseq + 1 if s.cseq_method == "BYE" else call.cseq
        emit(s, t, sip_message(s, call, to_tag=s.first_line != "INVITE", cseq=cseq))
    return msgs, planted


def _to_capture(msgs, capture_id: str, rng: np.random.Generator) -> CaptureFile:
    base = 1_700_000_000 + int(rng.integers(0, 10**7))
    ident = int(rng.integers(0, 1 << 16))
    packets = []
    for i, (t, a, b, payload) in enumerate(msgs):
        micros = int(round(t * 1e6))
        raw = udp_frame(a.mac, b.mac, a.ip, b.ip, SIP_PORT, SIP_PORT, payload, ident + i)
        packets.append(PacketRecord(i + 1, base + micros // 1_000_000, micros % 1_000_000, (), (), raw, len(raw)))
    shell = CaptureFile(path=f"{capture_id}.pcap", packets=tuple(packets))
    return parse_pcap(pcap_bytes(shell), shell.path)


def _capture_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), index, 0x5EED]))


def generate(
    grammar: FlowGrammar,
    n_success: int,
    n_failure: int,
    seed: int = 0,
    modes: Sequence[str] | None = None,
    prefix: str = "cap",
) -> list[LabeledCapture]:
    """Deterministic labeled corpus; labels are shuffled over the capture ids."""
    if n_success < 0 or n_failure < 0:
        raise ValueError("counts must be non-negative")
    grammar.validate()
    modes = tuple(modes) if modes is not None else grammar.failure_modes
    if not modes or set(modes) - set(FAILURE_MODES):
        raise EmptyGrammar(f"failure modes must be drawn from {FAILURE_MODES}")
    total = n_success + n_failure
    labels = np.array([SUCCESS] * n_success + [FAILURE] * n_failure, dtype=object)
    np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), 0x1AB])).shuffle(labels)
    width = max(5, len(str(total)))
    out = []
    for i, label in enumerate(labels):
        rng = _capture_rng(seed, i)
        mode = modes[int(rng.integers(len(modes)))] if label == FAILURE else None
        msgs, planted = _build_flow(grammar, rng, mode)
        cap = _to_capture(msgs, f"{prefix}_{i:0{width}d}", rng)
        frames = (planted + 1,) if planted is not None else ()
        out.append(LabeledCapture(cap, label, frames, mode or ""))
    return out


# ---------------------------------------------------------------- split and files


@dataclass(frozen=True)
class Split:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def partition_of(self, capture_id: str) -> str:
        for name in ("train", "val", "test"):
            if capture_id in getattr(self, name):
                return name
        raise KeyError(capture_id)


def split(captures: Sequence[LabeledCapture], ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> Split:
    """Success-only training partition; class-balanced validation and test partitions.

    Failures are divided between validation and test in proportion to their
    ratios. Each of those partitions receives as many successes as failures;
    every remaining success goes to training.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), 0x5B1]))
    succ = sorted(c.capture_id for c in captures if c.label == SUCCESS)
    fail = sorted(c.capture_id for c in captures if c.label == FAILURE)
    succ = [succ[i] for i in rng.permutation(len(succ))]
    fail = [fail[i] for i in rng.permutation(len(fail))]
    held = ratios[1] + ratios[2]
    n_val_f = int(round(len(fail) * ratios[1] / held)) if held > 0 else 0
    n_test_f = len(fail) - n_val_f
    if len(succ) < n_val_f + n_test_f + 1:
        raise InsufficientCaptures(
            f"{len(succ)} successes cannot balance {len(fail)} failures and leave a training set"
        )
    val = fail[:n_val_f] + succ[:n_val_f]
    test = fail[n_val_f:] + succ[n_val_f : n_val_f + n_test_f]
    train = succ[n_val_f + n_test_f :]
    return Split(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)))


def labels_tsv(captures: Sequence[LabeledCapture], directory: str | Path = "") -> str:
    lines = [LABELS_HEADER]
    for c in captures:
        path = Path(directory) / f"{c.capture_id}.pcap" if directory else f"{c.capture_id}.pcap"
        frames = ",".join(str(f) for f in c.planted_frames) or "-"
        lines.append(f"{path}\t{c.label}\t{frames}\t{c.failure_mode or '-'}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class LabelRow:
    path: str
    label: str
    planted_frames: tuple[int, ...]
    failure_mode: str

    @property
    def capture_id(self) -> str:
        return Path(self.path).stem


def parse_labels(text: str) -> list[LabelRow]:
    rows = []
    for i, line in enumerate(text.splitlines()):
        if not line.strip() or (i == 0 and line.startswith("path\t")):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise ValueError(f"labels line {i + 1}: expected tab-separated path and label")
        frames = tuple(int(f) for f in parts[2].split(",")) if len(parts) > 2 and parts[2] not in ("", "-") else ()
        mode = parts[3] if len(parts) > 3 and parts[3] != "-" else ""
        if parts[1] not in (SUCCESS, FAILURE):
            raise ValueError(f"labels line {i + 1}: unknown label {parts[1]!r}")
        rows.append(LabelRow(parts[0], parts[1], frames, mode))
    return rows


def split_tsv(s: Split) -> str:
    lines = ["capture_id\tpartition"]
    for name in ("train", "val", "test"):
        lines.extend(f"{cid}\t{name}" for cid in getattr(s, name))
    return "\n".join(lines) + "\n"


def parse_split(text: str) -> Split:
    parts: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for i, line in enumerate(text.splitlines()):
        if not line.strip() or (i == 0 and line.startswith("capture_id\t")):
            continue
        cid, name = line.split("\t")
        parts[name].append(cid)
    return Split(*(tuple(sorted(parts[n])) for n in ("train", "val", "test")))


def write_corpus(captures: Sequence[LabeledCapture], directory, s: Split | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for c in captures:
        (d / f"{c.capture_id}.pcap").write_bytes(pcap_bytes(c.capture))
    (d / "labels.tsv").write_text(labels_tsv(captures), encoding="utf-8")
    if s is not None:
        (d / "split.tsv").write_text(split_tsv(s), encoding="utf-8")
    return d


def corpus_digest(captures: Sequence[LabeledCapture]) -> str:
    h = hashlib.sha256()
    for c in captures:
        h.update(c.capture_id.encode() + b"\0" + pcap_bytes(c.capture))
    return h.hexdigest()
