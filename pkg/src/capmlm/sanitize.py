"""Regex-based redaction of user-identifying values.

Every maximal match of an enabled rule is replaced by the literal
``[REDACTED]``. A rule whose pattern defines a named group ``value`` only has
that group replaced, which lets a rule anchor on context (``...-ID: 123``)
without destroying it.
"""

from __future__ import annotations

import fnmatch
import re
from dataclasses import dataclass, replace

from .capture import CaptureFile, FieldEntry

REDACTED = "[REDACTED]"

_H = r"[0-9A-Fa-f]{1,4}"
_IPV6_FORMS = [
    rf"(?:{_H}:){{7}}{_H}",
    rf"(?:{_H}:){{1,7}}:",
    rf"(?:{_H}:){{1,6}}:{_H}",
    rf"(?:{_H}:){{1,5}}(?::{_H}){{1,2}}",
    rf"(?:{_H}:){{1,4}}(?::{_H}){{1,3}}",
    rf"(?:{_H}:){{1,3}}(?::{_H}){{1,4}}",
    rf"(?:{_H}:){{1,2}}(?::{_H}){{1,5}}",
    rf"{_H}:(?::{_H}){{1,6}}",
    rf":(?:(?::{_H}){{1,7}}|:)",
]
_OCTET = r"(?:25[0-5]|2[0-4]\d|1\d\d|[1-9]?\d)"

IPV4 = rf"(?<!\d)(?<!\d\.){_OCTET}(?:\.{_OCTET}){{3}}(?!\.?\d)"
IPV6 = rf"(?<![\w:.])(?:{'|'.join(_IPV6_FORMS)})(?:%[0-9A-Za-z]+)?(?![\w:.])"
MAC = r"(?<![0-9A-Fa-f:-])[0-9A-Fa-f]{2}([:-])(?:[0-9A-Fa-f]{2}\1){4}[0-9A-Fa-f]{2}(?![0-9A-Fa-f:-])"
NUMERIC_ID = r"(?i)\b(?:[a-z0-9_]+(?:-[a-z0-9_]+)*[-_]id|imsi|msisdn|imei)\s*[:=]\s*(?P<value>\d+)"
IMSI_LIKE = r"(?<!\d)\d{14,16}(?!\d)"
MSISDN_LIKE = r"(?<![\d+])\+?\d{10,15}(?!\d)"

DEFAULT_ID_FIELDS = ("*-id", "*_id", "imsi", "msisdn", "imei")


@dataclass(frozen=True)
class Rule:
    name: str
    pattern: str
    enabled: bool = True

    @property
    def regex(self) -> re.Pattern:
        return _compile(self.pattern)


_CACHE: dict[str, re.Pattern] = {}


def _compile(pattern: str) -> re.Pattern:
    rx = _CACHE.get(pattern)
    if rx is None:
        rx = _CACHE[pattern] = re.compile(pattern)
    return rx


@dataclass(frozen=True)
class RedactionRuleSet:
    rules: tuple[Rule, ...]
    # field-name globs whose values have every digit-bearing word redacted
    id_fields: tuple[str, ...] = DEFAULT_ID_FIELDS

    @classmethod
    def default(cls) -> "RedactionRuleSet":
        return cls(
            rules=(
                Rule("ipv4", IPV4),
                Rule("ipv6", IPV6),
                Rule("mac", MAC),
                Rule("numeric_id", NUMERIC_ID),
                Rule("imsi_like", IMSI_LIKE, enabled=False),
                Rule("msisdn_like", MSISDN_LIKE, enabled=False),
            )
        )

    @classmethod
    def from_config(cls, cfg: dict | None) -> "RedactionRuleSet":
        """Build from a config mapping.

        Recognized keys: ``enable``/``disable`` (lists of built-in rule names),
        ``extra`` (list of ``{name, pattern}`` tables appended in order) and
        ``id_fields``.
        """
        base = cls.default()
        if not cfg:
            return base
        enable = set(cfg.get("enable", ()))
        disable = set(cfg.get("disable", ()))
        unknown = (enable | disable) - {r.name for r in base.rules}
        if unknown:
            raise ValueError(f"unknown redaction rules: {sorted(unknown)}")
        rules = [
            replace(r, enabled=(r.enabled or r.name in enable) and r.name not in disable)
            for r in base.rules
        ]
        for extra in cfg.get("extra", ()):
            _compile(extra["pattern"])
            rules.append(Rule(extra["name"], extra["pattern"], extra.get("enabled", True)))
        id_fields = tuple(cfg.get("id_fields", base.id_fields))
        return cls(tuple(rules), id_fields)

    @property
    def enabled(self) -> list[Rule]:
        return [r for r in self.rules if r.enabled]

    def is_id_field(self, name: str) -> bool:
        parts = name.lower().split(".")
        return any(fnmatch.fnmatchcase(p, g.lower()) for p in parts for g in self.id_fields)


def _apply(rx: re.Pattern, text: str) -> str:
    if "value" not in rx.groupindex:
        return rx.sub(REDACTED, text)

    def sub(m: re.Match) -> str:
        s, e = m.span("value")
        whole = m.group(0)
        off = m.start()
        return whole[: s - off] + REDACTED + whole[e - off :]

    return rx.sub(sub, text)


# Each built-in match consumes digits or separators that REDACTED lacks, so a
# handful of passes reaches the fixpoint; the cap only guards custom rules.
MAX_PASSES = 16


def _one_pass(text: str, rules: RedactionRuleSet) -> str:
    for rule in rules.enabled:
        text = _apply(rule.regex, text)
    return text


def redact(text: str, rules: RedactionRuleSet | None = None) -> str:
    """Replace every enabled-rule match with ``[REDACTED]``, repeated to a fixpoint."""
    rules = rules or RedactionRuleSet.default()
    for _ in range(MAX_PASSES):
        out = _one_pass(text, rules)
        if out == text:
            break
        text = out
    return text


_ID_WORD = re.compile(r"[0-9A-Za-z]*\d[0-9A-Za-z]*")


def redact_value(name: str, value: str, rules: RedactionRuleSet) -> str:
    id_field = rules.is_id_field(name)
    for _ in range(MAX_PASSES):
        out = _one_pass(value, rules)
        if id_field:
            out = _ID_WORD.sub(REDACTED, out)
        if out == value:
            break
        value = out
    return value


def redact_capture(capture: CaptureFile, rules: RedactionRuleSet | None = None) -> CaptureFile:
    """Redact every field value; names, frame numbers and timestamps are untouched."""
    rules = rules or RedactionRuleSet.default()
    packets = []
    for p in capture.packets:
        fields = tuple(FieldEntry(f.name, redact_value(f.name, f.value, rules)) for f in p.fields)
        packets.append(replace(p, fields=fields))
    return capture.with_packets(packets)


def leaks(text: str, rules: RedactionRuleSet | None = None) -> list[tuple[str, str]]:
    """Return ``(rule, match)`` for every enabled-pattern match left in ``text``."""
    rules = rules or RedactionRuleSet.default()
    found = []
    for rule in rules.enabled:
        rx = rule.regex
        for m in rx.finditer(text):
            found.append((rule.name, m.group("value") if "value" in rx.groupindex else m.group(0)))
    return found
