"""Minimal DICOM Part-10 reader/writer for acquisition and demographic tags.

Only Explicit VR Little Endian is accepted. The reader walks every data
element, bounds-checks each declared length against the buffer and keeps the
values of tags named in the metadata schema; everything else (including
pixel data and sequences) is skipped.
"""

from __future__ import annotations

import logging
import math
import re
import struct
from pathlib import Path

from .errors import DicomParseError, NotDicomError, UnsupportedTransferSyntaxError
from .metadata import MetadataRecord, MetadataSchema, default_schema, make_record, parse_json_meta

log = logging.getLogger(__name__)

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
MR_IMAGE_STORAGE = "1.2.840.10008.5.1.4.1.1.4"
PREAMBLE_LEN = 128
UNDEFINED = 0xFFFFFFFF

ITEM = (0xFFFE, 0xE000)
ITEM_END = (0xFFFE, 0xE00D)
SEQUENCE_END = (0xFFFE, 0xE0DD)

# VRs encoded with 2 reserved bytes and a 32-bit length.
LONG_VRS = frozenset({"OB", "OD", "OF", "OL", "OV", "OW", "SQ", "SV", "UC", "UN", "UR", "UT", "UV"})
SHORT_VRS = frozenset({
    "AE", "AS", "AT", "CS", "DA", "DS", "DT", "FD", "FL", "IS", "LO", "LT", "PN",
    "SH", "SL", "SS", "ST", "TM", "UI", "UL", "US",
})
STRING_VRS = frozenset({"AE", "AS", "CS", "DA", "DS", "DT", "IS", "LO", "LT", "PN", "SH", "ST", "TM", "UC", "UI", "UT"})

_AGE = re.compile(r"^(\d{3})([DWMY])$")
_AGE_DIVISOR = {"Y": 1.0, "M": 12.0, "W": 52.18, "D": 365.25}
_DS = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def need(self, n: int, what: str):
        if self.pos + n > len(self.buf):
            raise DicomParseError(
                f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} remain", offset=self.pos
            )

    def tag(self) -> tuple:
        self.need(4, "element tag")
        group, element = struct.unpack_from("<HH", self.buf, self.pos)
        self.pos += 4
        return group, element

    def peek_tag(self) -> tuple:
        self.need(4, "element tag")
        return struct.unpack_from("<HH", self.buf, self.pos)

    def u32(self, what: str) -> int:
        self.need(4, what)
        (value,) = struct.unpack_from("<I", self.buf, self.pos)
        self.pos += 4
        return value

    def header(self) -> tuple:
        """Read tag, VR and length of one explicit-VR element."""
        start = self.pos
        tag = self.tag()
        if tag[0] == 0xFFFE:
            raise DicomParseError(f"unexpected delimiter tag ({tag[0]:04X},{tag[1]:04X})", offset=start)
        self.need(2, "value representation")
        raw_vr = self.buf[self.pos:self.pos + 2]
        vr = raw_vr.decode("ascii", "replace")
        if vr in SHORT_VRS:
            self.need(4, "element length")
            (length,) = struct.unpack_from("<H", self.buf, self.pos + 2)
            self.pos += 4
        elif vr in LONG_VRS:
            self.need(8, "element length")
            if self.buf[self.pos + 2:self.pos + 4] != b"\x00\x00":
                raise DicomParseError("non-zero reserved bytes", offset=self.pos + 2)
            (length,) = struct.unpack_from("<I", self.buf, self.pos + 4)
            self.pos += 8
        else:
            raise DicomParseError(f"invalid value representation {raw_vr!r}", offset=self.pos)
        return tag, vr, length, start

    def value(self, length: int, tag) -> bytes:
        self.need(length, f"value of ({tag[0]:04X},{tag[1]:04X})")
        out = self.buf[self.pos:self.pos + length]
        self.pos += length
        return out


def _skip_undefined(reader: _Reader, vr: str, start: int):
    """Skip an undefined-length value by scanning items up to the sequence delimiter."""
    if vr not in ("SQ", "UN", "OB"):
        raise DicomParseError(f"undefined length is not allowed for VR {vr}", offset=start)
    while True:
        at = reader.pos
        tag = reader.tag()
        length = reader.u32("item length")
        if tag == SEQUENCE_END:
            if length != 0:
                raise DicomParseError("sequence delimiter with non-zero length", offset=at)
            return
        if tag != ITEM:
            raise DicomParseError(f"expected item tag, found ({tag[0]:04X},{tag[1]:04X})", offset=at)
        if length != UNDEFINED:
            reader.value(length, tag)
            continue
        if vr != "SQ":
            raise DicomParseError("undefined-length item outside a sequence", offset=at)
        _walk(reader, nested=True)


def _walk(reader: _Reader, nested: bool = False, wanted=None, found=None, min_group=0):
    """Walk data elements; with ``nested`` stop at an item delimiter."""
    previous = None
    while reader.pos < len(reader.buf):
        if nested:
            tag = reader.peek_tag()
            if tag == ITEM_END:
                at = reader.pos
                reader.pos += 4
                if reader.u32("item delimiter length") != 0:
                    raise DicomParseError("item delimiter with non-zero length", offset=at)
                return
        tag, vr, length, start = reader.header()
        if tag[0] < min_group:
            raise DicomParseError(f"group {tag[0]:04X} inside the data set", offset=start)
        if previous is not None and tag <= previous:
            raise DicomParseError(
                f"tag ({tag[0]:04X},{tag[1]:04X}) out of ascending order", offset=start
            )
        previous = tag
        if length == UNDEFINED:
            _skip_undefined(reader, vr, start)
            continue
        raw = reader.value(length, tag)
        if wanted is not None and tag in wanted:
            found[tag] = (vr, raw, start)
    if nested:
        raise DicomParseError("data ended inside an undefined-length item", offset=reader.pos)


def _text(raw: bytes) -> str:
    return raw.decode("latin-1").strip(" \x00")


def _decode(attr, vr: str, raw: bytes):
    """Return (value or None, warning or None) for one schema attribute."""
    if attr.kind == "categorical":
        if vr not in STRING_VRS:
            return None, f"{attr.name}: VR {vr} is not a string type"
        value = _text(raw).split("\\")[0].strip()
        return (value or None), None
    if vr in ("FD", "FL"):
        fmt = "<d" if vr == "FD" else "<f"
        if len(raw) < struct.calcsize(fmt):
            return None, f"{attr.name}: binary value too short"
        value = float(struct.unpack_from(fmt, raw)[0])
    else:
        text = _text(raw).split("\\")[0].strip()
        if not text:
            return None, None
        if vr == "AS":
            match = _AGE.match(text)
            if not match:
                return None, f"{attr.name}: malformed age string {text!r}"
            value = int(match.group(1)) / _AGE_DIVISOR[match.group(2)]
        elif vr in ("DS", "IS"):
            if not _DS.match(text) or (vr == "IS" and not text.lstrip("+-").isdigit()):
                return None, f"{attr.name}: malformed {vr} value {text!r}"
            value = float(text)
        else:
            return None, f"{attr.name}: VR {vr} is not numeric"
    if not math.isfinite(value):
        return None, f"{attr.name}: non-finite value"
    return value, None


def parse_dicom(data: bytes, schema: MetadataSchema | None = None) -> MetadataRecord:
    schema = schema or default_schema()
    if len(data) < PREAMBLE_LEN + 4:
        raise NotDicomError(f"only {len(data)} bytes; a Part-10 file needs at least 132")
    if data[PREAMBLE_LEN:PREAMBLE_LEN + 4] != b"DICM":
        raise NotDicomError("missing 'DICM' magic after the preamble", offset=PREAMBLE_LEN)

    reader = _Reader(data, PREAMBLE_LEN + 4)
    syntax, previous = None, None
    while reader.pos < len(data) and reader.peek_tag()[0] == 0x0002:
        tag, vr, length, start = reader.header()
        if previous is not None and tag <= previous:
            raise DicomParseError("file meta tags out of ascending order", offset=start)
        previous = tag
        if length == UNDEFINED:
            raise DicomParseError("undefined length in file meta group", offset=start)
        raw = reader.value(length, tag)
        if tag == (0x0002, 0x0010):
            syntax = _text(raw)
    if syntax is None:
        raise DicomParseError("file meta group lacks TransferSyntaxUID (0002,0010)", offset=reader.pos)
    if syntax != EXPLICIT_VR_LE:
        raise UnsupportedTransferSyntaxError(syntax)

    wanted = {attr.tag: attr for attr in schema}
    found: dict = {}
    _walk(reader, wanted=wanted, found=found, min_group=0x0003)

    values, warnings = {}, []
    for tag, (vr, raw, start) in found.items():
        attr = wanted[tag]
        value, problem = _decode(attr, vr, raw)
        if problem:
            log.warning("%s (element at byte %d); treating as missing", problem, start)
            warnings.append(problem)
        values[attr.name] = value
    return make_record(schema, values, source="dicom", warnings=warnings)


def load_metadata(path, schema: MetadataSchema | None = None) -> MetadataRecord:
    """Read a DICOM file or a JSON sidecar, chosen by content."""
    raw = Path(path).read_bytes()
    if raw.lstrip()[:1] == b"{":
        return parse_json_meta(raw.decode("utf-8"), schema)
    return parse_dicom(raw, schema)


# ---------------------------------------------------------------------------
# writer


def _pad(raw: bytes, vr: str) -> bytes:
    if len(raw) % 2:
        raw += b"\x00" if vr in ("UI", "OB", "UN") else b" "
    return raw


def encode_element(tag: tuple, vr: str, value: bytes) -> bytes:
    value = _pad(value, vr)
    head = struct.pack("<HH", *tag) + vr.encode("ascii")
    if vr in LONG_VRS:
        return head + b"\x00\x00" + struct.pack("<I", len(value)) + value
    return head + struct.pack("<H", len(value)) + value


def format_ds(value: float) -> str:
    """Shortest decimal string that parses back to the same float (<= 16 chars)."""
    text = repr(float(value))
    if len(text) > 16:
        text = f"{value:.10g}"
    return text


def format_age(years: float) -> str:
    return f"{int(round(years)):03d}Y"


def _undefined_sequence(tag: tuple) -> bytes:
    item_body = encode_element((0x0008, 0x0100), "SH", b"CODE01") + encode_element((0x0008, 0x0104), "LO", b"demo")
    return (
        struct.pack("<HH", *tag) + b"SQ\x00\x00" + struct.pack("<I", UNDEFINED)
        + struct.pack("<HHI", *ITEM, UNDEFINED) + item_body
        + struct.pack("<HHI", *ITEM_END, 0)
        + struct.pack("<HHI", *SEQUENCE_END, 0)
    )


def write_dicom(
    values: dict,
    schema: MetadataSchema | None = None,
    transfer_syntax: str = EXPLICIT_VR_LE,
    instance_uid: str = "1.2.826.0.1.3680043.9.7433.1",
    extra_elements: bool = True,
) -> bytes:
    """Serialize schema attributes into a small Part-10 byte string.

    Numeric values go out as DS strings (``age`` as AS), categorical values as
    CS/LO. With ``extra_elements`` the file also carries tags the reader must
    skip, including an undefined-length sequence.
    """
    schema = schema or default_schema()
    meta_body = b"".join([
        encode_element((0x0002, 0x0001), "OB", b"\x00\x01"),
        encode_element((0x0002, 0x0002), "UI", MR_IMAGE_STORAGE.encode()),
        encode_element((0x0002, 0x0003), "UI", instance_uid.encode()),
        encode_element((0x0002, 0x0010), "UI", transfer_syntax.encode()),
    ])
    meta = encode_element((0x0002, 0x0000), "UL", struct.pack("<I", len(meta_body))) + meta_body

    elements = {}
    if extra_elements:
        elements[(0x0008, 0x0060)] = encode_element((0x0008, 0x0060), "CS", b"MR")
        elements[(0x0008, 0x1111)] = _undefined_sequence((0x0008, 0x1111))
        elements[(0x0020, 0x0011)] = encode_element((0x0020, 0x0011), "IS", b"1")
        elements[(0x7FE0, 0x0010)] = encode_element((0x7FE0, 0x0010), "OW", b"\x00" * 8)
    for attr in schema:
        value = values.get(attr.name)
        if value is None:
            continue
        if attr.kind == "categorical":
            vr = "CS" if attr.tag == (0x0010, 0x0040) else "LO"
            raw = str(value).encode("latin-1")
        elif attr.tag == (0x0010, 0x1010):
            vr, raw = "AS", format_age(value).encode()
        else:
            vr, raw = "DS", format_ds(value).encode()
        elements[attr.tag] = encode_element(attr.tag, vr, raw)
    body = b"".join(elements[tag] for tag in sorted(elements))
    return bytes(PREAMBLE_LEN) + b"DICM" + meta + body
